use super::config::NegativeMining;
use crate::numerics::{ops, Array, Scalar, Tape, Var};
use crate::sketch_data::SketchBitmap;
use crate::{Error, Result};

fn pick_negative<T: Scalar>(
    dists: impl Iterator<Item = (usize, T)>,
    mining: NegativeMining,
) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (j, d) in dists {
        let better = match (best, mining) {
            (None, _) => true,
            (Some((_, b)), NegativeMining::HardestClosest) => d < b,
            (Some((_, b)), NegativeMining::MostDissimilar) => d > b,
        };
        if better {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}

fn value_distance<T: Scalar>(a: &Array<T>, b: &Array<T>) -> T {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

/// `max(‖a − p‖ − ‖a − n‖ + m, 0)` on the tape.
pub fn hinge<T: Scalar>(tape: &mut Tape<T>, anchor: Var, pos: Var, neg: Var, margin: T) -> Result<Var> {
    let dp = tape.distance(anchor, pos)?;
    let dn = tape.distance(anchor, neg)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_const(diff, margin);
    Ok(tape.relu(shifted))
}

/// Scene-level triplet loss over a batch. Item `i` pairs anchor `vst[i]`
/// with positive `cst[i]`; the negative is another item's caption token,
/// excluding items in the same `group` (identical captions). When every
/// other item shares the group, all `j ≠ i` are candidates.
pub fn triplet_loss_global_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vst: &[Var],
    cst: &[Var],
    groups: &[usize],
    margin: T,
    mining: NegativeMining,
) -> Result<Var> {
    let n = vst.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "triplet loss needs a batch of at least 2, got {n}"
        )));
    }
    if cst.len() != n || groups.len() != n {
        return Err(Error::dim("triplet_loss_global", &[n], &[cst.len(), groups.len()]));
    }
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let a = tape.value(vst[i]).clone();
        let any_other_group = (0..n).any(|j| groups[j] != groups[i]);
        let cands = (0..n)
            .filter(|&j| j != i && (!any_other_group || groups[j] != groups[i]))
            .map(|j| (j, value_distance(&a, tape.value(cst[j]))))
            .collect::<Vec<_>>();
        let j = pick_negative(cands.into_iter(), mining).expect("n >= 2");
        terms.push(hinge(tape, vst[i], cst[i], cst[j], margin)?);
    }
    let all = tape.concat_rows(&terms)?;
    Ok(tape.mean(all))
}

/// Array-level scene triplet loss with every caption distinct.
pub fn triplet_loss_global<T: Scalar>(
    vst: &[Array<T>],
    cst: &[Array<T>],
    margin: f64,
    mining: NegativeMining,
) -> Result<T> {
    let mut tape = Tape::new();
    let v: Vec<Var> = vst.iter().map(|a| tape.constant(a.clone())).collect();
    let c: Vec<Var> = cst.iter().map(|a| tape.constant(a.clone())).collect();
    let groups: Vec<usize> = (0..vst.len()).collect();
    let loss = triplet_loss_global_tape(&mut tape, &v, &c, &groups, T::of(margin), mining)?;
    Ok(tape.scalar(loss))
}

/// Category-level triplet loss of one sketch. `vct[l][c]` is the anchor of
/// category `c` at readout layer `l`; `cct[c]` its positive; the negative is
/// another category's token. Uniform mean over layers and categories.
/// Returns `None` for sketches with fewer than two categories.
pub fn triplet_loss_category_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vct: &[Vec<Var>],
    cct: &[Var],
    margin: T,
    mining: NegativeMining,
) -> Result<Option<Var>> {
    let nc = cct.len();
    if nc < 2 || vct.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for layer in vct {
        if layer.len() != nc {
            return Err(Error::dim("triplet_loss_category", &[layer.len()], &[nc]));
        }
        for c in 0..nc {
            let a = tape.value(layer[c]).clone();
            let cands = (0..nc)
                .filter(|&j| j != c)
                .map(|j| (j, value_distance(&a, tape.value(cct[j]))))
                .collect::<Vec<_>>();
            let j = pick_negative(cands.into_iter(), mining).expect("nc >= 2");
            terms.push(hinge(tape, layer[c], cct[c], cct[j], margin)?);
        }
    }
    let all = tape.concat_rows(&terms)?;
    Ok(Some(tape.mean(all)))
}

/// Array-level category triplet loss; 0 for fewer than two categories.
pub fn triplet_loss_category<T: Scalar>(
    vct: &[Vec<Array<T>>],
    cct: &[Array<T>],
    margin: f64,
    mining: NegativeMining,
) -> Result<T> {
    let mut tape = Tape::new();
    let v: Vec<Vec<Var>> = vct
        .iter()
        .map(|l| l.iter().map(|a| tape.constant(a.clone())).collect())
        .collect();
    let c: Vec<Var> = cct.iter().map(|a| tape.constant(a.clone())).collect();
    Ok(triplet_loss_category_tape(&mut tape, &v, &c, T::of(margin), mining)?
        .map_or(T::zero(), |l| tape.scalar(l)))
}

/// `M = H · Cᵀ`: cosine similarity of every patch embedding with every
/// category token, both sides unit norm.
pub fn category_similarity_maps<T: Scalar>(patches: &Array<T>, ccts: &Array<T>) -> Result<Array<T>> {
    if patches.cols() != ccts.cols() {
        return Err(Error::dim("category_similarity_maps", patches.shape(), ccts.shape()));
    }
    ops::matmul_bt(patches, ccts)
}

/// Upscales column `c` of the `K × N_c` map to `h × w` on the tape.
pub fn upscale_map<T: Scalar>(
    tape: &mut Tape<T>,
    maps: Var,
    c: usize,
    grid: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let col = tape.slice_cols(maps, c, 1)?;
    let field = tape.reshape(col, &[grid, grid])?;
    let rh = tape.constant(ops::bicubic_weights(grid, h));
    let rw = tape.constant(ops::bicubic_weights(grid, w));
    let rows = tape.matmul(rh, field)?;
    tape.matmul_bt(rows, rw)
}

/// `sketch ⊙ M' ⊙ σ(k (M' − τ))` with `M' = clamp(map, 0, 1)`, on the tape.
pub fn disentangle_tape<T: Scalar>(
    tape: &mut Tape<T>,
    map: Var,
    sketch: Var,
    tau: Var,
    steepness: T,
) -> Result<Var> {
    if tape.shape(map) != tape.shape(sketch) {
        return Err(Error::dim("disentangle", tape.shape(map), tape.shape(sketch)));
    }
    let m = tape.clamp(map, T::zero(), T::one());
    let neg_tau = tape.scale(tau, -T::one());
    let centred = tape.add_scalar_var(m, neg_tau)?;
    let logits = tape.scale(centred, steepness);
    let gate = tape.sigmoid(logits);
    let weighted = tape.mul(sketch, m)?;
    tape.mul(weighted, gate)
}

/// Soft-thresholded masked sketch for one pixel-level map.
pub fn disentangle(map: &Array<f32>, sketch: &SketchBitmap, tau: f32, steepness: f32) -> Result<SketchBitmap> {
    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let s = tape.constant(sketch.intensity().clone());
    let t = tape.constant(Array::scalar(tau));
    let out = disentangle_tape(&mut tape, m, s, t, steepness)?;
    SketchBitmap::new(tape.value(out).clone())
}
