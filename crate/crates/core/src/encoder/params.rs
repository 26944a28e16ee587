use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::EncoderConfig;
use crate::numerics::{Array, Scalar, Tape, Var};
use crate::{Error, Result};

/// Name of the learnable disentanglement threshold inside a [`ParamStore`].
pub const TAU: &str = "threshold.tau";

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub value: Array<T>,
    pub trainable: bool,
}

/// Every named array of the model, each flagged trainable or frozen.
///
/// Trainable: all layer-norm gains and biases, the visual prompts, the
/// cross-attention query projections and the threshold. Everything else
/// stays at its initial value.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Param<T>>,
}

pub fn layer_name(layer: usize, part: &str) -> String {
    format!("layer{layer:02}.{part}")
}

impl<T: Scalar> ParamStore<T> {
    pub fn empty() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn n_trainable_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn tau(&self) -> T {
        self.params[TAU].value.data()[0]
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Trainable arrays only.
    pub fn trainable_map(&self) -> BTreeMap<String, Array<T>> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites trainable arrays from `values` (shapes must match).
    pub fn set_trainable(&mut self, values: &BTreeMap<String, Array<T>>) -> Result<()> {
        for (k, v) in values {
            let p = self
                .params
                .get_mut(k)
                .ok_or_else(|| Error::Contract(format!("missing parameter '{k}'")))?;
            if !p.trainable {
                return Err(Error::Contract(format!("'{k}' is frozen")));
            }
            if p.value.shape() != v.shape() {
                return Err(Error::dim("set_trainable", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Puts every parameter on `tape`: trainable ones as differentiable
    /// leaves, frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Checks names and shapes against a freshly initialised store for `cfg`.
    pub fn check_layout(&self, cfg: &EncoderConfig) -> Result<()> {
        let reference = init_params::<T>(cfg, 0.5);
        for (k, p) in &reference.params {
            let mine = self.params.get(k).ok_or_else(|| {
                Error::Checkpoint(format!("parameter '{k}' missing for this configuration"))
            })?;
            if mine.value.shape() != p.value.shape() || mine.trainable != p.trainable {
                return Err(Error::Checkpoint(format!(
                    "parameter '{k}' has shape {:?} (trainable {}), expected {:?} (trainable {})",
                    mine.value.shape(),
                    mine.trainable,
                    p.value.shape(),
                    p.trainable
                )));
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter '{extra}'")));
        }
        Ok(())
    }
}

/// Parameter name to tape handle.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn layer(&self, layer: usize, part: &str) -> Var {
        self.var(&layer_name(layer, part))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// `(name, var)` pairs for the given names, in order.
    pub fn named(&self, names: &[String]) -> Vec<(String, Var)> {
        names.iter().map(|n| (n.clone(), self.var(n))).collect()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Array::from_fn(rows, cols, |_, _| T::of(dist.sample(&mut self.rng)))
    }
}

/// Seeded random initialisation with CLIP-style scales. Layer norms start
/// at identity, biases at zero.
pub fn init_params<T: Scalar>(cfg: &EncoderConfig, tau_init: f64) -> ParamStore<T> {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
    };
    let d = cfg.d_model;
    let k = cfg.n_patches();
    let p2 = cfg.patch_size * cfg.patch_size;
    let width_std = (d as f64).powf(-0.5);
    let mut s = ParamStore::empty();

    let ln = |s: &mut ParamStore<T>, name: String| {
        s.insert(format!("{name}.gamma"), Array::full(&[1, d], T::one()), true);
        s.insert(format!("{name}.beta"), Array::zeros(&[1, d]), true);
    };

    s.insert("embed.patch_proj", init.normal(p2, d, (p2 as f64).powf(-0.5)), false);
    s.insert("embed.vst", init.normal(1, d, width_std), false);
    s.insert("embed.pos", init.normal(1 + k, d, width_std), false);
    if cfg.n_prompts > 0 {
        s.insert("embed.prompts", init.normal(cfg.n_prompts, d, width_std), true);
    }
    ln(&mut s, "ln_pre".into());

    for l in 1..=cfg.n_layers {
        ln(&mut s, layer_name(l, "ln1"));
        ln(&mut s, layer_name(l, "vv_ln1"));
        ln(&mut s, layer_name(l, "ln2"));
        for w in ["wq", "wk", "wv", "wo"] {
            s.insert(layer_name(l, &format!("attn.{w}")), init.normal(d, d, width_std), false);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            s.insert(layer_name(l, &format!("attn.{b}")), Array::zeros(&[1, d]), false);
        }
        let f = cfg.d_ffn();
        s.insert(layer_name(l, "ffn.w1"), init.normal(d, f, width_std), false);
        s.insert(layer_name(l, "ffn.b1"), Array::zeros(&[1, f]), false);
        s.insert(layer_name(l, "ffn.w2"), init.normal(f, d, (f as f64).powf(-0.5)), false);
        s.insert(layer_name(l, "ffn.b2"), Array::zeros(&[1, d]), false);
        if cfg.cross_attn_layers.contains(&l) {
            s.insert(layer_name(l, "cross.wq"), init.normal(cfg.d_joint, d, 1.0), true);
            s.insert(layer_name(l, "cross.bq"), Array::zeros(&[1, d]), true);
        }
    }

    ln(&mut s, "ln_post".into());
    s.insert("head.proj", init.normal(d, cfg.d_joint, width_std), false);
    s.insert(TAU, Array::scalar(T::of(tau_init)), true);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::tiny();
        assert_eq!(init_params::<f32>(&cfg, 0.3), init_params::<f32>(&cfg, 0.3));
        let mut other = cfg.clone();
        other.init_seed = 1;
        assert_ne!(init_params::<f32>(&cfg, 0.3), init_params::<f32>(&other, 0.3));
    }

    #[test]
    fn layout_check_catches_shape_changes() {
        let cfg = EncoderConfig::tiny();
        let mut s = init_params::<f32>(&cfg, 0.3);
        s.check_layout(&cfg).unwrap();
        s.insert("head.proj", Array::zeros(&[2, 2]), false);
        assert!(s.check_layout(&cfg).is_err());
    }

    #[test]
    fn set_trainable_rejects_frozen() {
        let cfg = EncoderConfig::tiny();
        let mut s = init_params::<f32>(&cfg, 0.3);
        let mut m = BTreeMap::new();
        m.insert("head.proj".to_string(), Array::zeros(&[32, 16]));
        assert!(s.set_trainable(&m).is_err());
    }
}
