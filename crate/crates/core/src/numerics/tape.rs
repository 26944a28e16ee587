//! Array-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes are addressed by [`Var`] handles. Leaves created with
//! [`Tape::param`] require gradients; leaves created with
//! [`Tape::constant`] do not, and backward skips any sub-graph that does not
//! depend on a parameter.

use std::collections::BTreeMap;

use super::array::{Array, Scalar};
use super::ops;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter name to gradient array; shapes match the parameters one-to-one.
pub type Gradient<T> = BTreeMap<String, Array<T>>;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalarVar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    QuickGelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Sqrt(Var),
    NormalizeRows(Var, Vec<T>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn derived(&mut self, value: Array<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, op, rg)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        if rv.len() != n {
            return Err(Error::dim("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &r) in chunk.iter_mut().zip(rv.data()) {
                *o = *o + r;
            }
        }
        Ok(self.derived(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Adds a `1 × 1` node to every element of `a`.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("add_scalar_var", self.shape(a), self.shape(s)));
        }
        let sv = self.scalar(s);
        let out = self.value(a).map(|x| x + sv);
        Ok(self.derived(out, Op::AddScalarVar(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.derived(out, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.derived(out, Op::AddConst(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = ops::softmax_rows(self.value(a));
        self.derived(out, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise layer norm; `gamma` and `beta` are `1 × n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != n || b.len() != n {
            return Err(Error::dim("layer_norm", xv.shape(), g.shape()));
        }
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let (h, s) = ops::normalize_row(xv.row(r), eps);
            xhat.extend(h);
            inv_std.push(s);
        }
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks(n) {
            for ((&h, &gv), &bv) in row.iter().zip(g.data()).zip(b.data()) {
                out.push(h * gv + bv);
            }
        }
        let out = Array::new(xv.shape().to_vec(), out)?;
        Ok(self.derived(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::quick_gelu);
        self.derived(out, Op::QuickGelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::sigmoid);
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    /// `max(x, 0)`. NaN passes through.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x });
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        self.derived(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Elementwise square root. The derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x.sqrt() });
        self.derived(out, Op::Sqrt(a), &[a])
    }

    /// Scales every row to unit L2 norm. Rows with norm below `eps` are
    /// divided by `eps` instead.
    pub fn normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for row in out.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            let norm = if norm < eps { eps } else { norm };
            for x in row.iter_mut() {
                *x = *x / norm;
            }
            norms.push(norm);
        }
        self.derived(out, Op::NormalizeRows(a, norms), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if len == 0 || start + len > av.rows() {
            return Err(Error::dim("slice_rows", av.shape(), &[start, len]));
        }
        let n = av.cols();
        let data = av.data()[start * n..(start + len) * n].to_vec();
        let out = Array::new(vec![len, n], data)?;
        Ok(self.derived(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let n = av.cols();
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", av.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Array::new(vec![av.rows(), len], data)?;
        Ok(self.derived(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Array::new(vec![rows, n], data)?;
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != m) {
            return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(bad)));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Array::new(vec![m, total], data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// `out.data[i] = a.data[index[i]]`, reshaped to `shape`. Covers
    /// reshapes, transposes, row broadcasts and patch permutations.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if index.iter().any(|&i| i >= av.len()) || shape.iter().product::<usize>() != index.len()
        {
            return Err(Error::dim("gather", av.shape(), shape));
        }
        let data = index.iter().map(|&i| av.data()[i]).collect();
        let out = Array::new(shape.to_vec(), data)?;
        Ok(self.derived(out, Op::Gather(a, index), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        self.gather(a, (0..n).collect(), shape)
    }

    /// Repeats a `1 × n` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let n = self.value(a).len();
        let index = (0..m).flat_map(|_| 0..n).collect();
        self.gather(a, index, &[m, n])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array::scalar(self.value(a).sum());
        self.derived(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Euclidean distance between two same-shaped nodes, as a `1 × 1` node.
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        Ok(self.sqrt(s))
    }

    /// Backward from a scalar loss with seed 1.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        Ok(self.backward_seeded(&[(loss, Array::scalar(T::one()))]))
    }

    /// Backward from several outputs at once, each with its own upstream
    /// gradient. Seeds must match the shapes of their nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Array<T>)]) -> Grads<T> {
        let mut grads: Vec<Option<Array<T>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed shape");
            accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    /// Gradient of `loss` with respect to each named parameter.
    pub fn gradient(&self, loss: Var, params: &[(String, Var)]) -> Result<Gradient<T>> {
        let mut g = self.backward(loss)?;
        Ok(collect_named(self, &mut g, params))
    }

    fn propagate(&self, node: &Node<T>, dy: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    let g = ops::matmul_bt(dy, val(*b)).expect("matmul grad");
                    accumulate(grads, *a, g);
                }
                if want(*b) {
                    let g = ops::matmul(&val(*a).transpose(), dy).expect("matmul grad");
                    accumulate(grads, *b, g);
                }
            }
            Op::MatMulBt(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, ops::matmul(dy, val(*b)).expect("grad"));
                }
                if want(*b) {
                    let g = ops::matmul(&dy.transpose(), val(*a)).expect("grad");
                    accumulate(grads, *b, g);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, dy.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, dy.zip_map(val(*b), |g, y| g * y).unwrap());
                }
                if want(*b) {
                    accumulate(grads, *b, dy.zip_map(val(*a), |g, x| g * x).unwrap());
                }
            }
            Op::AddRow(a, row) => {
                if want(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if want(*row) {
                    accumulate(grads, *row, column_sums(dy, val(*row).shape()));
                }
            }
            Op::AddScalarVar(a, s) => {
                if want(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if want(*s) {
                    let shape = val(*s).shape().to_vec();
                    accumulate(grads, *s, Array::full(&shape, dy.sum()));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, dy.map(|g| g * *c)),
            Op::AddConst(a) => accumulate(grads, *a, dy.clone()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = dy.clone();
                for (r, row) in dx.data_mut().chunks_mut(n).enumerate() {
                    let yr = y.row(r);
                    let dot: T = row.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                    for (g, &p) in row.iter_mut().zip(yr) {
                        *g = p * (*g - dot);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = dy.cols();
                let nf = T::of(n as f64);
                if want(*x) {
                    let gv = val(*gamma).data();
                    let mut dx = Vec::with_capacity(dy.len());
                    for r in 0..dy.rows() {
                        let dyr = dy.row(r);
                        let hr = &xhat[r * n..(r + 1) * n];
                        let g: Vec<T> = dyr.iter().zip(gv).map(|(&d, &w)| d * w).collect();
                        let sum_g: T = g.iter().copied().sum();
                        let sum_gh: T = g.iter().zip(hr).map(|(&a, &h)| a * h).sum();
                        let k = inv_std[r] / nf;
                        dx.extend(
                            g.iter()
                                .zip(hr)
                                .map(|(&gi, &hi)| k * (nf * gi - sum_g - hi * sum_gh)),
                        );
                    }
                    accumulate(grads, *x, Array::new(dy.shape().to_vec(), dx).unwrap());
                }
                if want(*gamma) {
                    let mut dg = vec![T::zero(); n];
                    for r in 0..dy.rows() {
                        for (c, d) in dg.iter_mut().enumerate() {
                            *d = *d + dy.get(r, c) * xhat[r * n + c];
                        }
                    }
                    let shape = val(*gamma).shape().to_vec();
                    accumulate(grads, *gamma, Array::new(shape, dg).unwrap());
                }
                if want(*beta) {
                    accumulate(grads, *beta, column_sums(dy, val(*beta).shape()));
                }
            }
            Op::QuickGelu(a) => {
                let k = T::of(1.702);
                let dx = dy
                    .zip_map(val(*a), |g, x| {
                        let s = ops::sigmoid(k * x);
                        g * (s + x * k * s * (T::one() - s))
                    })
                    .unwrap();
                accumulate(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let dx = dy
                    .zip_map(&node.value, |g, s| g * s * (T::one() - s))
                    .unwrap();
                accumulate(grads, *a, dx);
            }
            Op::Relu(a) => {
                let dx = dy
                    .zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() })
                    .unwrap();
                accumulate(grads, *a, dx);
            }
            Op::Clamp(a, lo, hi) => {
                let dx = dy
                    .zip_map(val(*a), |g, x| {
                        if x > *lo && x < *hi {
                            g
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                accumulate(grads, *a, dx);
            }
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                let dx = dy
                    .zip_map(&node.value, |g, y| {
                        if y > T::zero() {
                            g * half / y
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                accumulate(grads, *a, dx);
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = dy.clone();
                for (r, row) in dx.data_mut().chunks_mut(n).enumerate() {
                    let yr = y.row(r);
                    let dot: T = row.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                    for (g, &p) in row.iter_mut().zip(yr) {
                        *g = (*g - p * dot) / norms[r];
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let mut g = Array::zeros(src.shape());
                let n = src.cols();
                g.data_mut()[start * n..start * n + dy.len()].copy_from_slice(dy.data());
                accumulate(grads, *a, g);
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let mut g = Array::zeros(src.shape());
                let len = dy.cols();
                for r in 0..dy.rows() {
                    for c in 0..len {
                        g.set(r, start + c, dy.get(r, c));
                    }
                }
                accumulate(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let n = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let len = pv.len();
                    if want(p) {
                        let data = dy.data()[offset..offset + len].to_vec();
                        accumulate(grads, p, Array::new(pv.shape().to_vec(), data).unwrap());
                    }
                    offset += len;
                    debug_assert_eq!(pv.cols(), n);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if want(p) {
                        let mut data = Vec::with_capacity(pv.len());
                        for r in 0..dy.rows() {
                            data.extend_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        accumulate(grads, p, Array::new(pv.shape().to_vec(), data).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Gather(a, index) => {
                let mut g = Array::zeros(val(*a).shape());
                let gd = g.data_mut();
                for (&i, &d) in index.iter().zip(dy.data()) {
                    gd[i] = gd[i] + d;
                }
                accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let d = dy.data()[0];
                accumulate(grads, *a, Array::full(val(*a).shape(), d));
            }
        }
    }
}

/// Pulls the gradients of named leaves out of a finished backward pass.
/// Parameters that do not influence the outputs get zero gradients.
pub fn collect_named<T: Scalar>(
    tape: &Tape<T>,
    grads: &mut Grads<T>,
    params: &[(String, Var)],
) -> Gradient<T> {
    params
        .iter()
        .map(|(name, v)| {
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Array::zeros(tape.shape(*v)));
            (name.clone(), g)
        })
        .collect()
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(dy: &Array<T>, shape: &[usize]) -> Array<T> {
    let n = dy.cols();
    let mut out = vec![T::zero(); n];
    for r in 0..dy.rows() {
        for (o, &d) in out.iter_mut().zip(dy.row(r)) {
            *o = *o + d;
        }
    }
    Array::new(shape.to_vec(), out).expect("column sums")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Array::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Array::scalar(3.0));
        let c = t.constant(Array::scalar(5.0));
        let y = t.scale(c, 2.0);
        let g = t.gradient(y, &[("x".into(), x)]).unwrap();
        assert_eq!(g["x"].data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Array::row_vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = (x + x) * x = 2x², dy/dx = 4x
        let mut t = Tape::<f64>::new();
        let x = t.param(Array::scalar(1.5));
        let s = t.add(x, x).unwrap();
        let y = t.mul(s, x).unwrap();
        assert_eq!(t.backward(y).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sqrt_at_zero_is_finite() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Array::row_vector(vec![0.5, -0.25]));
        let d = t.distance(a, a).unwrap();
        assert_eq!(t.scalar(d), 0.0);
        let g = t.backward(d).unwrap();
        assert!(g.get(a).unwrap().all_finite());
    }
}
