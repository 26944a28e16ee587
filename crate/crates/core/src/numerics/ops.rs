//! Forward kernels on plain arrays. The tape calls these for its forward
//! values; model code that does not need gradients may call them directly.

use super::array::{Array, Scalar};
use crate::{Error, Result};

/// Below this many multiply-adds a matmul always runs on the calling thread.
#[cfg(feature = "parallel")]
const PAR_MATMUL_MIN_WORK: usize = 1 << 16;

fn expect_2d<T: Scalar>(op: &'static str, a: &Array<T>) -> Result<()> {
    if a.shape().len() != 2 {
        return Err(Error::dim(op, a.shape(), &[0, 0]));
    }
    Ok(())
}

fn matmul_row<T: Scalar>(a_row: &[T], b: &[T], n: usize, out: &mut [T]) {
    for (p, &av) in a_row.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o = *o + av * bv;
        }
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    expect_2d("matmul", a)?;
    expect_2d("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());

    #[cfg(feature = "parallel")]
    if crate::parallel::enabled() && m > 1 && m * n * k >= PAR_MATMUL_MIN_WORK {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| matmul_row(&ad[i * k..(i + 1) * k], bd, n, row));
        return Array::new(vec![m, n], out);
    }

    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(&ad[i * k..(i + 1) * k], bd, n, row);
    }
    Array::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_bt<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    expect_2d("matmul_bt", a)?;
    expect_2d("matmul_bt", b)?;
    if a.cols() != b.cols() {
        return Err(Error::dim("matmul_bt", a.shape(), b.shape()));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            let br = b.row(j);
            out.push(ar.iter().zip(br).map(|(&x, &y)| x * y).sum());
        }
    }
    Array::new(vec![m, n], out)
}

/// Row-wise softmax, stabilised by subtracting the row maximum.
pub fn softmax_rows<T: Scalar>(a: &Array<T>) -> Array<T> {
    let n = a.cols();
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total = total + *x;
        }
        for x in row.iter_mut() {
            *x = *x / total;
        }
    }
    out
}

/// Layer normalisation of a single vector with population variance.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>> {
    if x.is_empty() || gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::dim(
            "layer_norm",
            &[x.len()],
            &[gamma.len(), beta.len()],
        ));
    }
    let (xhat, _) = normalize_row(x, eps);
    Ok(xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&h, (&g, &b))| h * g + b)
        .collect())
}

/// Returns `(x - mean) / sqrt(var + eps)` and `1 / sqrt(var + eps)`.
pub(crate) fn normalize_row<T: Scalar>(x: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    (x.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std)
}

/// Layer normalisation applied to every row of a 2-D array.
pub fn layer_norm_rows<T: Scalar>(
    x: &Array<T>,
    gamma: &Array<T>,
    beta: &Array<T>,
    eps: T,
) -> Result<Array<T>> {
    let n = x.cols();
    if gamma.len() != n || beta.len() != n {
        return Err(Error::dim("layer_norm_rows", x.shape(), gamma.shape()));
    }
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        out.extend(layer_norm(x.row(r), gamma.data(), beta.data(), eps)?);
    }
    Array::new(x.shape().to_vec(), out)
}

/// Cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// One-dimensional bicubic resampling weights as an `out × input` matrix.
///
/// Pixel centres follow the align-corners-false convention and taps that
/// fall outside the source are clamped to the border.
pub fn bicubic_weights<T: Scalar>(input: usize, out: usize) -> Array<T> {
    let mut w = Array::<T>::zeros(&[out, input]);
    if input == out {
        for i in 0..out {
            w.set(i, i, T::one());
        }
        return w;
    }
    let scale = input as f64 / out as f64;
    let last = input as isize - 1;
    for o in 0..out {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        for tap in -1..=2isize {
            let weight = cubic_kernel(t - tap as f64);
            let idx = (base as isize + tap).clamp(0, last) as usize;
            let cur = w.get(o, idx);
            w.set(o, idx, cur + T::of(weight));
        }
    }
    w
}

/// Bicubic resize of a 2-D field. Separable: `R_h · src · R_wᵀ`.
pub fn bicubic_resize<T: Scalar>(src: &Array<T>, out_h: usize, out_w: usize) -> Result<Array<T>> {
    expect_2d("bicubic_resize", src)?;
    let (h, w) = (src.rows(), src.cols());
    if h < 2 || w < 2 || out_h == 0 || out_w == 0 {
        return Err(Error::dim("bicubic_resize", src.shape(), &[out_h, out_w]));
    }
    let rh = bicubic_weights::<T>(h, out_h);
    let rw = bicubic_weights::<T>(w, out_w);
    matmul_bt(&matmul(&rh, src)?, &rw)
}

/// `x · σ(1.702 x)`, the sigmoid approximation of GELU used by CLIP.
pub fn quick_gelu<T: Scalar>(x: T) -> T {
    x * sigmoid(T::of(1.702) * x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
