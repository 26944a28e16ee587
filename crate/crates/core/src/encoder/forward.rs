use super::config::EncoderConfig;
use super::params::BoundParams;
use crate::numerics::{ops, Array, Scalar, Tape, Var};
use crate::sketch_data::patch_index;
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Encoder input `X = [VST, P_1..P_K, V_1..V_S]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenBatch {
    pub x: Var,
    pub n_patches: usize,
    pub n_prompts: usize,
}

impl TokenBatch {
    pub fn n_tokens(&self) -> usize {
        1 + self.n_patches + self.n_prompts
    }

    pub const VST_SLOT: usize = 0;

    pub fn patch_slots(&self) -> std::ops::Range<usize> {
        1..1 + self.n_patches
    }

    pub fn prompt_slots(&self) -> std::ops::Range<usize> {
        1 + self.n_patches..self.n_tokens()
    }
}

/// Flattened patches (`K × patch²`) of an `image_size²` field on the tape.
pub fn patches_from_field<T: Scalar>(tape: &mut Tape<T>, field: Var, cfg: &EncoderConfig) -> Result<Var> {
    let shape = tape.shape(field).to_vec();
    if shape != [cfg.image_size, cfg.image_size] {
        return Err(Error::dim("patches_from_field", &shape, &[cfg.image_size, cfg.image_size]));
    }
    let idx = patch_index(cfg.image_size, cfg.image_size, cfg.patch_size)?;
    let p2 = cfg.patch_size * cfg.patch_size;
    tape.gather(field, idx, &[cfg.n_patches(), p2])
}

/// Projects patches, adds positional encodings to the VST and patch slots
/// and appends the visual prompts.
pub fn assemble_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &EncoderConfig,
    patches: Var,
) -> Result<TokenBatch> {
    let k = tape.shape(patches)[0];
    if k != cfg.n_patches() {
        return Err(Error::dim("assemble_tokens", tape.shape(patches), &[cfg.n_patches()]));
    }
    let projected = tape.matmul(patches, p.var("embed.patch_proj"))?;
    let head = tape.concat_rows(&[p.var("embed.vst"), projected])?;
    let mut x = tape.add(head, p.var("embed.pos"))?;
    if cfg.n_prompts > 0 {
        x = tape.concat_rows(&[x, p.var("embed.prompts")])?;
    }
    Ok(TokenBatch {
        x,
        n_patches: k,
        n_prompts: cfg.n_prompts,
    })
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, x: Var, name: &str) -> Result<Var> {
    tape.layer_norm(
        x,
        p.var(&format!("{name}.gamma")),
        p.var(&format!("{name}.beta")),
        T::of(LN_EPS),
    )
}

/// Multi-head attention given projected queries, keys and values. Returns
/// the concatenated heads and each head's attention matrix.
fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(q)[1];
    let dh = d / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = if k == q { qh } else { tape.slice_cols(k, h * dh, dh)? };
        let vh = if v == q { qh } else if v == k { kh } else { tape.slice_cols(v, h * dh, dh)? };
        let logits = tape.matmul_bt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let a = tape.softmax_rows(logits);
        weights.push(a);
        heads.push(tape.matmul(a, vh)?);
    }
    Ok((tape.concat_cols(&heads)?, weights))
}

/// `softmax(V Vᵀ / √d_head) V` per head; heads concatenated, no output
/// projection.
pub fn vv_attention<T: Scalar>(tape: &mut Tape<T>, v: Var, n_heads: usize) -> Result<Var> {
    Ok(multi_head(tape, v, v, v, n_heads)?.0)
}

/// The v-v attention matrix of a single head.
pub fn vv_attention_weights<T: Scalar>(v: &Array<T>) -> Result<Array<T>> {
    let scale = T::one() / T::of(v.cols() as f64).sqrt();
    let logits = ops::matmul_bt(v, v)?.map(|x| x * scale);
    Ok(ops::softmax_rows(&logits))
}

/// Per-layer features of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Main-path input to layer 1 followed by the output of every layer
    /// (`L + 1` entries).
    pub main: Vec<Var>,
    /// Second-path stream after every layer (`L` entries).
    pub vv: Vec<Var>,
    /// Attention matrices of the main path, `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
    /// Unit-norm projected VST-slot features at the requested layers.
    pub readouts: Vec<Var>,
}

/// Output of the holistic pass.
#[derive(Clone, Debug)]
pub struct DualPathOutput {
    pub layers: EncoderOutput,
    /// `1 × d_joint`, unit norm.
    pub vst: Var,
    /// `K × d_joint`, unit-norm rows.
    pub patches: Var,
}

/// Output of a category pass: one VCT per requested layer.
#[derive(Clone, Debug)]
pub struct CategoryOutput {
    pub layers: Vec<usize>,
    /// Each `1 × d_joint`, unit norm.
    pub vct: Vec<Var>,
}

/// `normalize(LN_post(rows) · proj)`.
pub fn project_joint<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, rows: Var) -> Result<Var> {
    let h = layer_norm(tape, p, rows, "ln_post")?;
    let z = tape.matmul(h, p.var("head.proj"))?;
    Ok(tape.normalize_rows(z, T::of(NORM_EPS)))
}

/// Runs both paths. When `cct` is given, the main-path queries of every
/// layer in `cfg.cross_attn_layers` are the category token mapped through
/// that layer's query projection, broadcast to all positions.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &EncoderConfig,
    tokens: &TokenBatch,
    cct: Option<Var>,
    readout_layers: &[usize],
) -> Result<EncoderOutput> {
    if let Some(&bad) = readout_layers.iter().find(|&&l| l == 0 || l > cfg.n_layers) {
        return Err(Error::Config(format!("readout layer {bad} outside 1..={}", cfg.n_layers)));
    }
    if let Some(c) = cct {
        if tape.shape(c) != [1, cfg.d_joint] {
            return Err(Error::dim("category token", tape.shape(c), &[1, cfg.d_joint]));
        }
    }
    let n = tokens.n_tokens();
    let mut x = layer_norm(tape, p, tokens.x, "ln_pre")?;
    let mut stream = x;
    let mut out = EncoderOutput {
        main: vec![x],
        vv: Vec::with_capacity(cfg.n_layers),
        attention: Vec::with_capacity(cfg.n_layers),
        readouts: Vec::new(),
    };

    for l in 1..=cfg.n_layers {
        // second path: the layer input of the main path through LN and v-v attention
        let hv = layer_norm(tape, p, x, &format!("layer{l:02}.vv_ln1"))?;
        let v_only = linear(tape, hv, p.layer(l, "attn.wv"), p.layer(l, "attn.bv"))?;
        let vv = vv_attention(tape, v_only, cfg.n_heads)?;
        let vv = linear(tape, vv, p.layer(l, "attn.wo"), p.layer(l, "attn.bo"))?;
        stream = tape.add(stream, vv)?;
        out.vv.push(stream);

        // main path: LN -> MHSA -> residual, LN -> FFN -> residual
        let h = layer_norm(tape, p, x, &format!("layer{l:02}.ln1"))?;
        let q = match cct {
            Some(c) if cfg.cross_attn_layers.contains(&l) => {
                let qc = linear(tape, c, p.layer(l, "cross.wq"), p.layer(l, "cross.bq"))?;
                tape.broadcast_rows(qc, n)?
            }
            _ => linear(tape, h, p.layer(l, "attn.wq"), p.layer(l, "attn.bq"))?,
        };
        let k = linear(tape, h, p.layer(l, "attn.wk"), p.layer(l, "attn.bk"))?;
        let v = linear(tape, h, p.layer(l, "attn.wv"), p.layer(l, "attn.bv"))?;
        let (heads, weights) = multi_head(tape, q, k, v, cfg.n_heads)?;
        out.attention.push(weights);
        let attn = linear(tape, heads, p.layer(l, "attn.wo"), p.layer(l, "attn.bo"))?;
        let x1 = tape.add(x, attn)?;
        let h2 = layer_norm(tape, p, x1, &format!("layer{l:02}.ln2"))?;
        let f = linear(tape, h2, p.layer(l, "ffn.w1"), p.layer(l, "ffn.b1"))?;
        let f = tape.quick_gelu(f);
        let f = linear(tape, f, p.layer(l, "ffn.w2"), p.layer(l, "ffn.b2"))?;
        x = tape.add(x1, f)?;
        out.main.push(x);
    }

    for &l in readout_layers {
        let vst = tape.slice_rows(out.vv[l - 1], TokenBatch::VST_SLOT, 1)?;
        out.readouts.push(project_joint(tape, p, vst)?);
    }
    Ok(out)
}

/// Holistic pass: VST and patch embeddings from the last second-path layer.
pub fn forward_dual_path<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &EncoderConfig,
    tokens: &TokenBatch,
) -> Result<DualPathOutput> {
    let layers = encode(tape, p, cfg, tokens, None, &[])?;
    let last = *layers.vv.last().expect("at least one layer");
    let head = tape.slice_rows(last, 0, 1 + tokens.n_patches)?;
    let z = project_joint(tape, p, head)?;
    let vst = tape.slice_rows(z, TokenBatch::VST_SLOT, 1)?;
    let patches = tape.slice_rows(z, 1, tokens.n_patches)?;
    Ok(DualPathOutput {
        layers,
        vst,
        patches,
    })
}

/// Category pass with cross-attention; VCT at each cross-attention layer.
pub fn forward_category<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &EncoderConfig,
    tokens: &TokenBatch,
    cct: Var,
) -> Result<CategoryOutput> {
    forward_category_at(tape, p, cfg, tokens, cct, &cfg.cross_attn_layers)
}

/// Category pass with explicit readout layers.
pub fn forward_category_at<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &EncoderConfig,
    tokens: &TokenBatch,
    cct: Var,
    layers: &[usize],
) -> Result<CategoryOutput> {
    let out = encode(tape, p, cfg, tokens, Some(cct), layers)?;
    Ok(CategoryOutput {
        layers: layers.to_vec(),
        vct: out.readouts,
    })
}
