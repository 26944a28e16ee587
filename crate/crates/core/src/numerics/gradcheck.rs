//! Central finite differences for verifying tape gradients.

use std::collections::BTreeMap;

use super::array::Array;
use super::tape::Gradient;
use crate::{parallel, Error, Result};

/// Named 64-bit parameter arrays.
pub type ParamMap = BTreeMap<String, Array<f64>>;

/// Denominator floor for relative errors, so that gradients that are zero
/// analytically are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(p + h) - f(p - h)) / 2h` for every scalar of every parameter.
pub fn central_differences<F>(f: F, params: &ParamMap, step: f64) -> Gradient<f64>
where
    F: Fn(&ParamMap) -> f64 + Sync + Send,
{
    let slots: Vec<(&String, usize)> = params
        .iter()
        .flat_map(|(name, a)| (0..a.len()).map(move |i| (name, i)))
        .collect();
    let diffs = parallel::map(&slots, |&(name, i)| {
        let mut p = params.clone();
        let base = p[name].data()[i];
        p.get_mut(name).unwrap().data_mut()[i] = base + step;
        let plus = f(&p);
        p.get_mut(name).unwrap().data_mut()[i] = base - step;
        let minus = f(&p);
        (plus - minus) / (2.0 * step)
    });
    let mut out: Gradient<f64> = params
        .iter()
        .map(|(k, a)| (k.clone(), Array::zeros(a.shape())))
        .collect();
    for (&(name, i), d) in slots.iter().zip(diffs) {
        out.get_mut(name).unwrap().data_mut()[i] = d;
    }
    out
}

/// Max relative error per parameter between `analytic` and central
/// differences of `f`.
pub fn finite_diff_check<F>(
    f: F,
    analytic: &Gradient<f64>,
    params: &ParamMap,
    step: f64,
) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&ParamMap) -> f64 + Sync + Send,
{
    if analytic.keys().ne(params.keys()) {
        return Err(Error::Contract(
            "gradient key set differs from parameter set".into(),
        ));
    }
    let numeric = central_differences(f, params, step);
    let mut out = BTreeMap::new();
    for (name, a) in analytic {
        let n = &numeric[name];
        if a.shape() != n.shape() {
            return Err(Error::dim("finite_diff_check", a.shape(), n.shape()));
        }
        let worst = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(&x, &y)| relative_error(x, y))
            .fold(0.0, f64::max);
        out.insert(name.clone(), worst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn single(name: &str, a: Array<f64>) -> ParamMap {
        [(name.to_string(), a)].into_iter().collect()
    }

    #[test]
    fn square_at_three() {
        let p = single("x", Array::scalar(3.0));
        let g = central_differences(|p| p["x"].data()[0].powi(2), &p, 1e-5);
        assert!((g["x"].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_function_is_exact() {
        let p = single("x", Array::row_vector(vec![0.3, -1.2, 4.0]));
        let w = [2.0, -0.5, 0.25];
        let f = |p: &ParamMap| p["x"].data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let analytic = single("x", Array::row_vector(w.to_vec()));
        let err = finite_diff_check(f, &analytic, &p, 1e-5).unwrap();
        assert!(err["x"] < 1e-9, "{err:?}");
    }

    fn softmax_matmul_loss(tape: &mut Tape<f64>, p: &ParamMap) -> (crate::numerics::Var, Vec<(String, crate::numerics::Var)>) {
        let a = tape.param(p["a"].clone());
        let b = tape.param(p["b"].clone());
        let w = tape.constant(Array::from_fn(2, 3, |r, c| (r as f64 + 1.0) * (c as f64 - 1.0)));
        let m = tape.matmul(a, b).unwrap();
        let s = tape.softmax_rows(m);
        let prod = tape.mul(s, w).unwrap();
        let loss = tape.sum(prod);
        (loss, vec![("a".into(), a), ("b".into(), b)])
    }

    #[test]
    fn softmax_of_matmul() {
        let mut p = ParamMap::new();
        p.insert("a".into(), Array::from_fn(2, 4, |r, c| ((r * 4 + c) as f64 * 0.7).sin()));
        p.insert("b".into(), Array::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 1.3).cos()));
        let mut tape = Tape::new();
        let (loss, named) = softmax_matmul_loss(&mut tape, &p);
        let analytic = tape.gradient(loss, &named).unwrap();
        let f = |p: &ParamMap| {
            let mut t = Tape::new();
            let (l, _) = softmax_matmul_loss(&mut t, p);
            t.scalar(l)
        };
        let err = finite_diff_check(f, &analytic, &p, 1e-5).unwrap();
        assert!(err.values().all(|&e| e < 1e-4), "{err:?}");
    }

    #[test]
    fn mismatched_keys_rejected() {
        let p = single("x", Array::scalar(1.0));
        let g = single("y", Array::scalar(1.0));
        assert!(finite_diff_check(|_| 0.0, &g, &p, 1e-5).is_err());
    }
}
