use std::collections::BTreeMap;

use crate::encoder::{ParamStore, TAU};
use crate::numerics::{Array, Gradient, Scalar};
use crate::{Error, Result};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 0.99;

/// Adam with decoupled weight decay. The threshold is not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub t: u64,
    pub m: BTreeMap<String, Array<T>>,
    pub v: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to the trainable parameters named in `grads`,
    /// then clamps the threshold into `(TAU_MIN, TAU_MAX)`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradient<T>, lr: f64) -> Result<()> {
        let expected = params.trainable_names();
        if grads.keys().ne(expected.iter()) {
            return Err(Error::Contract(
                "gradient key set differs from the trainable set".into(),
            ));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("AdamW", p.shape(), g.shape()));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            let decay = if name == TAU { 0.0 } else { self.weight_decay };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gi.as_f64();
                let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
                *mi = T::of(mf);
                *vi = T::of(vf);
                if lr == 0.0 {
                    continue;
                }
                let x = pi.as_f64();
                let update = (mf / c1) / ((vf / c2).sqrt() + self.eps) + decay * x;
                *pi = T::of(x - lr * update);
            }
        }
        let tau = params.get_mut(TAU)?;
        let clamped = tau.data()[0].as_f64().clamp(TAU_MIN, TAU_MAX);
        if clamped != tau.data()[0].as_f64() {
            tau.data_mut()[0] = T::of(clamped);
        }
        Ok(())
    }
}
