use std::collections::HashMap;

use super::config::TrainingConfig;
use super::losses::{disentangle_tape, triplet_loss_category_tape, triplet_loss_global_tape, upscale_map};
use crate::encoder::{
    assemble_tokens, forward_category, forward_dual_path, patches_from_field, BoundParams,
    EncoderConfig, ParamStore, TAU,
};
use crate::numerics::{collect_named, Array, Gradient, Scalar, Tape, Var};
use crate::sketch_data::DatasetItem;
use crate::text_embedding::TextEncoder;
use crate::{parallel, Error, Result};

/// A training sketch with its frozen text tokens resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedItem {
    pub id: String,
    /// `h × w` ink intensity.
    pub intensity: Array<f32>,
    pub caption: String,
    /// `1 × d_joint`.
    pub cst: Array<f32>,
    /// `N_c × d_joint`, one row per caption category.
    pub ccts: Array<f32>,
}

impl PreparedItem {
    pub fn new(item: &DatasetItem, text: &TextEncoder) -> Result<Self> {
        let cst = text.scene_token(&item.caption)?.vector;
        let rows: Vec<Vec<f32>> = text
            .category_tokens(&item.caption)?
            .into_iter()
            .map(|t| t.vector)
            .collect();
        Ok(Self {
            id: item.id().to_string(),
            intensity: item.sketch.intensity().clone(),
            caption: item.caption.caption.clone(),
            cst: Array::row_vector(cst),
            ccts: Array::from_rows(&rows)?,
        })
    }

    pub fn n_categories(&self) -> usize {
        self.ccts.rows()
    }
}

pub fn prepare_items(items: &[DatasetItem], text: &TextEncoder, enc: &EncoderConfig) -> Result<Vec<PreparedItem>> {
    if text.dim() != enc.d_joint {
        return Err(Error::Config(format!(
            "text encoder dimension {} differs from d_joint {}",
            text.dim(),
            enc.d_joint
        )));
    }
    items
        .iter()
        .map(|it| {
            let (h, w) = (it.sketch.height(), it.sketch.width());
            if h != enc.image_size || w != enc.image_size {
                return Err(Error::dim(
                    "training sketch",
                    &[h, w],
                    &[enc.image_size, enc.image_size],
                ));
            }
            PreparedItem::new(it, text)
        })
        .collect()
}

/// Both objective terms; `total = global + category`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub global: f64,
    pub category: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.global + self.category
    }
}

/// One batch item's graph: the holistic pass and, for sketches with at
/// least two categories, disentanglement, the category passes and the
/// category loss.
pub struct ItemGraph<T: Scalar> {
    pub tape: Tape<T>,
    pub params: BoundParams,
    /// `1 × d_joint`.
    pub vst: Var,
    /// `K × N_c` patch-level similarity maps.
    pub maps: Var,
    /// Masked sketch per category.
    pub masked: Vec<Var>,
    /// `vct[l][c]`.
    pub vct: Vec<Vec<Var>>,
    pub category_loss: Option<Var>,
}

pub fn build_item_graph<T: Scalar>(
    params: &ParamStore<T>,
    enc: &EncoderConfig,
    cfg: &TrainingConfig,
    item: &PreparedItem,
) -> Result<ItemGraph<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (h, w) = (item.intensity.rows(), item.intensity.cols());
    let sketch = tape.constant(item.intensity.cast());
    let patches = patches_from_field(&mut tape, sketch, enc)?;
    let tokens = assemble_tokens(&mut tape, &bound, enc, patches)?;
    let dual = forward_dual_path(&mut tape, &bound, enc, &tokens)?;

    let ccts = tape.constant(item.ccts.cast());
    let maps = tape.matmul_bt(dual.patches, ccts)?;
    let nc = item.n_categories();
    let mut out = ItemGraph {
        vst: dual.vst,
        maps,
        masked: Vec::new(),
        vct: vec![Vec::with_capacity(nc); enc.cross_attn_layers.len()],
        category_loss: None,
        tape,
        params: bound,
    };
    if nc < 2 || enc.cross_attn_layers.is_empty() {
        return Ok(out);
    }

    let tape = &mut out.tape;
    let tau = out.params.var(TAU);
    let steep = T::of(cfg.threshold_gate_steepness);
    let mut cct_rows = Vec::with_capacity(nc);
    for c in 0..nc {
        let up = upscale_map(tape, maps, c, enc.grid(), h, w)?;
        let masked = disentangle_tape(tape, up, sketch, tau, steep)?;
        out.masked.push(masked);
        let p = patches_from_field(tape, masked, enc)?;
        let toks = assemble_tokens(tape, &out.params, enc, p)?;
        let cct = tape.slice_rows(ccts, c, 1)?;
        cct_rows.push(cct);
        let cat = forward_category(tape, &out.params, enc, &toks, cct)?;
        for (l, v) in cat.vct.into_iter().enumerate() {
            out.vct[l].push(v);
        }
    }
    out.category_loss =
        triplet_loss_category_tape(tape, &out.vct, &cct_rows, T::of(cfg.margin), cfg.negative_mining)?;
    Ok(out)
}

/// Items with identical caption text share a group and are never each
/// other's negatives.
pub fn caption_groups(batch: &[&PreparedItem]) -> Vec<usize> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    batch
        .iter()
        .map(|it| {
            let next = seen.len();
            *seen.entry(it.caption.as_str()).or_insert(next)
        })
        .collect()
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} loss is {v}")))
    }
}

/// Global loss and its gradient with respect to each item's VST.
fn global_term<T: Scalar>(
    vst: &[Array<T>],
    batch: &[&PreparedItem],
    cfg: &TrainingConfig,
) -> Result<(T, Vec<Array<T>>)> {
    let mut tape = Tape::new();
    let v: Vec<Var> = vst.iter().map(|a| tape.param(a.clone())).collect();
    let c: Vec<Var> = batch.iter().map(|it| tape.constant(it.cst.cast())).collect();
    let groups = caption_groups(batch);
    let loss = triplet_loss_global_tape(&mut tape, &v, &c, &groups, T::of(cfg.margin), cfg.negative_mining)?;
    let mut g = tape.backward(loss)?;
    let grads = v
        .iter()
        .map(|&x| g.take(x).unwrap_or_else(|| Array::zeros(tape.shape(x))))
        .collect();
    Ok((tape.scalar(loss), grads))
}

/// `L = L_global + (1/N_T) Σ_i L_category,i`.
pub fn objective<T: Scalar>(
    params: &ParamStore<T>,
    enc: &EncoderConfig,
    cfg: &TrainingConfig,
    batch: &[&PreparedItem],
) -> Result<LossBreakdown> {
    let graphs = parallel::map(batch, |it| build_item_graph(params, enc, cfg, it))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let vst: Vec<Array<T>> = graphs.iter().map(|g| g.tape.value(g.vst).clone()).collect();
    let (global, _) = global_term(&vst, batch, cfg)?;
    let category = graphs
        .iter()
        .filter_map(|g| g.category_loss.map(|l| g.tape.scalar(l).as_f64()))
        .sum::<f64>()
        / batch.len() as f64;
    Ok(LossBreakdown {
        global: check_finite("global triplet", global.as_f64())?,
        category: check_finite("category triplet", category)?,
    })
}

/// Objective and its gradient over the trainable set. Items are encoded
/// in parallel; their gradients are summed in batch order.
pub fn objective_and_gradient<T: Scalar>(
    params: &ParamStore<T>,
    enc: &EncoderConfig,
    cfg: &TrainingConfig,
    batch: &[&PreparedItem],
) -> Result<(LossBreakdown, Gradient<T>)> {
    let graphs = parallel::map(batch, |it| build_item_graph(params, enc, cfg, it))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let vst: Vec<Array<T>> = graphs.iter().map(|g| g.tape.value(g.vst).clone()).collect();
    let (global, vst_grads) = global_term(&vst, batch, cfg)?;
    let n = batch.len() as f64;
    let category = graphs
        .iter()
        .filter_map(|g| g.category_loss.map(|l| g.tape.scalar(l).as_f64()))
        .sum::<f64>()
        / n;
    let losses = LossBreakdown {
        global: check_finite("global triplet", global.as_f64())?,
        category: check_finite("category triplet", category)?,
    };

    let names = params.trainable_names();
    let jobs: Vec<(&ItemGraph<T>, &Array<T>)> = graphs.iter().zip(&vst_grads).collect();
    let per_item = parallel::map(&jobs, |(g, seed)| {
        let mut seeds = vec![(g.vst, (*seed).clone())];
        if let Some(l) = g.category_loss {
            seeds.push((l, Array::scalar(T::of(1.0 / n))));
        }
        let mut grads = g.tape.backward_seeded(&seeds);
        collect_named(&g.tape, &mut grads, &g.params.named(&names))
    });
    let mut total: Gradient<T> = params
        .trainable_map()
        .into_iter()
        .map(|(k, v)| (k, Array::zeros(v.shape())))
        .collect();
    for g in per_item {
        for (k, v) in g {
            total.get_mut(&k).expect("trainable").add_assign(&v);
        }
    }
    Ok((losses, total))
}
