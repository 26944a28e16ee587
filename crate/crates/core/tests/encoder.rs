use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sketchseg::encoder::{
    assemble_tokens, encode, forward_category, forward_dual_path, init_params, patches_from_field, vv_attention,
    EncoderConfig, ParamStore, TokenBatch, LN_EPS,
};
use sketchseg::numerics::{Array, Tape};

fn rand_array(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array<f64> {
    Array::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        image_size: 4,
        patch_size: 2,
        d_model: 4,
        d_joint: 3,
        n_layers: 1,
        n_heads: 2,
        n_prompts: 0,
        cross_attn_layers: vec![1],
        init_seed: 9,
    }
}

/// Random values for every parameter, including layer norms and biases.
fn randomised(cfg: &EncoderConfig, seed: u64) -> ParamStore<f64> {
    let mut p: ParamStore<f64> = init_params(cfg, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        let a = p.get_mut(&n).unwrap();
        for x in a.data_mut() {
            *x = rng.random_range(-0.8..0.8);
        }
    }
    p
}

type M = Vec<Vec<f64>>;

fn to_m(a: &Array<f64>) -> M {
    (0..a.rows()).map(|r| (0..a.cols()).map(|c| a.get(r, c)).collect()).collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn linear(x: &M, p: &ParamStore<f64>, w: &str, b: &str) -> M {
    let bias = to_m(p.get(b).unwrap());
    mm(x, &to_m(p.get(w).unwrap()))
        .into_iter()
        .map(|r| r.iter().zip(&bias[0]).map(|(x, y)| x + y).collect())
        .collect()
}

fn ln(x: &M, p: &ParamStore<f64>, name: &str) -> M {
    let g = p.get(&format!("{name}.gamma")).unwrap().data().to_vec();
    let b = p.get(&format!("{name}.beta")).unwrap().data().to_vec();
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + LN_EPS).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

/// Per-head scaled dot-product attention, written out with loops.
fn attention(q: &M, k: &M, v: &M, heads: usize) -> M {
    let n = q.len();
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

fn quick_gelu(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

fn max_diff(a: &M, b: &Array<f64>) -> f64 {
    let mut w = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            w = w.max((v - b.get(r, c)).abs());
        }
    }
    w
}

#[test]
fn one_layer_matches_hand_computation() {
    let cfg = small_config();
    let p = randomised(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = rand_array(&mut rng, 3, 4, 1.0);
    let cct_val = rand_array(&mut rng, 1, 3, 1.0);

    for with_cct in [false, true] {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let tokens = TokenBatch {
            x: tape.constant(x0.clone()),
            n_patches: 2,
            n_prompts: 0,
        };
        let cct = with_cct.then(|| tape.constant(cct_val.clone()));
        let out = encode(&mut tape, &bound, &cfg, &tokens, cct, &[1]).unwrap();

        let x = ln(&to_m(&x0), &p, "ln_pre");
        let hv = ln(&x, &p, "layer01.vv_ln1");
        let vonly = linear(&hv, &p, "layer01.attn.wv", "layer01.attn.bv");
        let vv = attention(&vonly, &vonly, &vonly, 2);
        let stream = add(&x, &linear(&vv, &p, "layer01.attn.wo", "layer01.attn.bo"));

        let h = ln(&x, &p, "layer01.ln1");
        let q = if with_cct {
            let qc = linear(&to_m(&cct_val), &p, "layer01.cross.wq", "layer01.cross.bq");
            vec![qc[0].clone(); 3]
        } else {
            linear(&h, &p, "layer01.attn.wq", "layer01.attn.bq")
        };
        let k = linear(&h, &p, "layer01.attn.wk", "layer01.attn.bk");
        let v = linear(&h, &p, "layer01.attn.wv", "layer01.attn.bv");
        let a = attention(&q, &k, &v, 2);
        let x1 = add(&x, &linear(&a, &p, "layer01.attn.wo", "layer01.attn.bo"));
        let h2 = ln(&x1, &p, "layer01.ln2");
        let f: M = linear(&h2, &p, "layer01.ffn.w1", "layer01.ffn.b1")
            .into_iter()
            .map(|r| r.into_iter().map(quick_gelu).collect())
            .collect();
        let main = add(&x1, &linear(&f, &p, "layer01.ffn.w2", "layer01.ffn.b2"));

        assert!(max_diff(&x, tape.value(out.main[0])) < 1e-12);
        assert!(max_diff(&main, tape.value(out.main[1])) < 1e-12);
        assert!(max_diff(&stream, tape.value(out.vv[0])) < 1e-12);

        let post = ln(&stream[..1].to_vec(), &p, "ln_post");
        let z = mm(&post, &to_m(p.get("head.proj").unwrap()));
        let norm = z[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        let want: M = vec![z[0].iter().map(|v| v / norm).collect()];
        assert!(max_diff(&want, tape.value(out.readouts[0])) < 1e-12);
    }
}

#[test]
fn zero_category_token_gives_uniform_cross_attention() {
    let cfg = EncoderConfig::tiny();
    let p: ParamStore<f64> = init_params(&cfg, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let field = rand_array(&mut rng, 32, 32, 1.0).map(f64::abs);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let f = tape.constant(field);
    let patches = patches_from_field(&mut tape, f, &cfg).unwrap();
    let tokens = assemble_tokens(&mut tape, &bound, &cfg, patches).unwrap();
    let zero = tape.constant(Array::zeros(&[1, cfg.d_joint]));
    let out = encode(&mut tape, &bound, &cfg, &tokens, Some(zero), &[]).unwrap();
    let n = tokens.n_tokens();
    for l in 1..=cfg.n_layers {
        for head in &out.attention[l - 1] {
            let a = tape.value(*head);
            let uniform = a.data().iter().all(|&w| (w - 1.0 / n as f64).abs() < 1e-12);
            assert_eq!(uniform, cfg.cross_attn_layers.contains(&l), "layer {l}");
        }
    }
}

#[test]
fn outputs_are_unit_norm() {
    let cfg = EncoderConfig::tiny();
    let p: ParamStore<f64> = init_params(&cfg, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let f = tape.constant(rand_array(&mut rng, 32, 32, 1.0).map(f64::abs));
    let patches = patches_from_field(&mut tape, f, &cfg).unwrap();
    let tokens = assemble_tokens(&mut tape, &bound, &cfg, patches).unwrap();
    let dual = forward_dual_path(&mut tape, &bound, &cfg, &tokens).unwrap();
    let cct = tape.constant(rand_array(&mut rng, 1, cfg.d_joint, 1.0));
    let cat = forward_category(&mut tape, &bound, &cfg, &tokens, cct).unwrap();
    assert_eq!(tape.shape(dual.vst), [1, cfg.d_joint]);
    assert_eq!(tape.shape(dual.patches), [cfg.n_patches(), cfg.d_joint]);
    assert_eq!(cat.vct.len(), cfg.cross_attn_layers.len());
    let mut rows = vec![tape.value(dual.vst).clone(), tape.value(dual.patches).clone()];
    rows.extend(cat.vct.iter().map(|v| tape.value(*v).clone()));
    for a in rows {
        for r in 0..a.rows() {
            let n: f64 = (0..a.cols()).map(|c| a.get(r, c).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_cross_layers_give_no_category_tokens() {
    let cfg = EncoderConfig {
        cross_attn_layers: vec![],
        ..EncoderConfig::tiny()
    };
    let p: ParamStore<f64> = init_params(&cfg, 0.3);
    assert!(p.names().all(|n| !n.contains("cross")));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let f = tape.constant(Array::zeros(&[32, 32]));
    let patches = patches_from_field(&mut tape, f, &cfg).unwrap();
    let tokens = assemble_tokens(&mut tape, &bound, &cfg, patches).unwrap();
    let cct = tape.constant(Array::zeros(&[1, cfg.d_joint]));
    assert!(forward_category(&mut tape, &bound, &cfg, &tokens, cct).unwrap().vct.is_empty());
}

#[test]
fn identical_tokens_attend_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let row = rand_array(&mut rng, 1, 6, 1.0);
    let v = Array::from_rows(&vec![row.data().to_vec(); 5]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(v.clone());
    let out = vv_attention(&mut tape, x, 3).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(v.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn readout_layer_zero_rejected() {
    let cfg = EncoderConfig::tiny();
    let p: ParamStore<f64> = init_params(&cfg, 0.3);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let f = tape.constant(Array::zeros(&[32, 32]));
    let patches = patches_from_field(&mut tape, f, &cfg).unwrap();
    let tokens = assemble_tokens(&mut tape, &bound, &cfg, patches).unwrap();
    assert!(encode(&mut tape, &bound, &cfg, &tokens, None, &[0]).is_err());
    assert!(encode(&mut tape, &bound, &cfg, &tokens, None, &[4]).is_err());
    let bad = tape.constant(Array::zeros(&[1, cfg.d_joint + 1]));
    assert!(encode(&mut tape, &bound, &cfg, &tokens, Some(bad), &[]).is_err());
}

proptest! {
    #[test]
    fn vv_attention_is_permutation_equivariant(seed in any::<u64>(), n in 1..8usize, heads in 1..3usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rand_array(&mut rng, n, 4 * heads, 1.5);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&r| (0..v.cols()).map(|c| v.get(r, c)).collect()).collect();
        let pv = Array::from_rows(&rows).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(v.clone());
        let b = tape.constant(pv);
        let ya = vv_attention(&mut tape, a, heads).unwrap();
        let yb = vv_attention(&mut tape, b, heads).unwrap();
        let (ya, yb) = (tape.value(ya), tape.value(yb));
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..v.cols() {
                prop_assert!((yb.get(i, c) - ya.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_is_returned(seed in any::<u64>(), heads in 1..4usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rand_array(&mut rng, 1, 2 * heads, 3.0);
        let mut tape = Tape::new();
        let x = tape.constant(v.clone());
        let y = vv_attention(&mut tape, x, heads).unwrap();
        prop_assert_eq!(tape.value(y), &v);
    }
}
