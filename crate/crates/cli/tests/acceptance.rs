//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sketchseg::checkpoint::Checkpoint;
use sketchseg::encoder::{init_params, vv_attention, vv_attention_weights, EncoderConfig, ParamStore, TAU};
use sketchseg::metrics::{acc_stroke, pearson_corr, Confusion};
use sketchseg::numerics::{bicubic_resize, finite_diff_check, Array, ParamMap, Tape};
use sketchseg::segmentation::{label_from_maps, Model};
use sketchseg::sketch_data::{
    generate_dataset, generate_synthetic, png_io, save_dataset, Role, SegmentationMask, SketchBitmap, SynthConfig,
};
use sketchseg::text_embedding::TextEncoder;
use sketchseg::training::{
    objective, objective_and_gradient, prepare_items, triplet_loss_category, triplet_loss_global, NegativeMining,
    PreparedItem, TrainState, TrainingConfig,
};
use sketchseg_cli::{cmd_eval, cmd_segment, cmd_train, EvalArgs, SegmentArgs, TrainArgs};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn items(size: usize, n: usize, seed: u64, text: &TextEncoder, enc: &EncoderConfig) -> Vec<PreparedItem> {
    let split = generate_synthetic(&SynthConfig::for_canvas(size, n), seed, Role::Train).unwrap();
    prepare_items(&split.items, text, enc).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let enc = EncoderConfig::tiny();
    let cfg = TrainingConfig::default();
    let text = TextEncoder::new(enc.d_joint, 0);
    let data = items(enc.image_size, 3, 11, &text, &enc);
    let batch: Vec<&PreparedItem> = data.iter().collect();
    let params: ParamStore<f64> = init_params(&enc, cfg.threshold_init);
    let (_, analytic) = objective_and_gradient(&params, &enc, &cfg, &batch).map_err(|e| e.to_string())?;
    let point: ParamMap = params.trainable_map();
    let f = |m: &ParamMap| {
        let mut p = params.clone();
        p.set_trainable(m).unwrap();
        objective(&p, &enc, &cfg, &batch).unwrap().total()
    };
    let errs = finite_diff_check(f, &analytic, &point, 1e-5).map_err(|e| e.to_string())?;
    let (worst_name, worst) = errs
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k.clone(), *v))
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let scalars: usize = point.values().map(Array::len).sum();
    check(
        worst < 1e-4 && secs < 60.0,
        format!("{scalars} scalars, max rel err {worst:.2e} ({worst_name}), {secs:.1}s"),
    )
}

fn expected_trainable(name: &str) -> bool {
    name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name == "embed.prompts"
        || name.ends_with("cross.wq")
        || name.ends_with("cross.bq")
        || name == TAU
}

fn frozen_weight_policy() -> Outcome {
    let enc = EncoderConfig::tiny();
    let tc = TrainingConfig {
        batch_size: 4,
        ..TrainingConfig::default()
    };
    let text = TextEncoder::new(enc.d_joint, 0);
    let data = items(enc.image_size, 8, 3, &text, &enc);
    let init: ParamStore<f32> = init_params(&enc, tc.threshold_init);
    let mut st = TrainState::new(enc, tc).unwrap();
    while st.step < 50 {
        st.run_epoch(&data, Some(50), |_| Ok(())).map_err(|e| e.to_string())?;
    }
    let mut frozen = 0;
    let mut moved = 0;
    for (name, p) in st.params.iter() {
        if p.trainable != expected_trainable(name) {
            return Err(format!("'{name}' has trainable={}", p.trainable));
        }
        let before = init.get(name).unwrap();
        if p.trainable {
            moved += usize::from(p.value != *before);
        } else {
            let same = p.value.data().iter().zip(before.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(format!("frozen '{name}' changed after {} steps", st.step));
            }
            frozen += 1;
        }
    }
    check(
        moved > 0,
        format!("{} steps, {frozen} frozen arrays bit-identical, {moved} trainable arrays moved", st.step),
    )
}

fn random_array(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Array::new(vec![rows, cols], data).unwrap()
}

fn vv_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_single = 0.0f64;
    let mut worst_row = 0.0f64;
    let mut worst_sym = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=8usize) * 2;
        let heads = if rng.random_bool(0.5) { 1 } else { 2 };

        let single = random_array(&mut rng, 1, d, 2.0);
        let mut tape = Tape::new();
        let v = tape.constant(single.clone());
        let out = vv_attention(&mut tape, v, heads).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(single.data()) {
            worst_single = worst_single.max((a - b).abs());
        }

        let n = rng.random_range(2..=12usize);
        let vals = random_array(&mut rng, n, d, 2.0);
        let a = vv_attention_weights(&vals).unwrap();
        for i in 0..n {
            let s: f64 = (0..n).map(|j| a.get(i, j)).sum();
            worst_row = worst_row.max((s - 1.0).abs());
        }
        // Recover logits from the weights: L_ij = ln A_ij + (L_ii - ln A_ii).
        let scale = 1.0 / (d as f64).sqrt();
        let diag: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|k| vals.get(i, k).powi(2)).sum::<f64>() * scale)
            .collect();
        let logit = |i: usize, j: usize| a.get(i, j).ln() + diag[i] - a.get(i, i).ln();
        for i in 0..n {
            for j in 0..i {
                worst_sym = worst_sym.max((logit(i, j) - logit(j, i)).abs());
            }
        }
    }
    check(
        worst_single <= 1e-6 && worst_row <= 1e-6 && worst_sym <= 1e-6,
        format!("1000 cases: single-token {worst_single:.1e}, row sum {worst_row:.1e}, symmetry {worst_sym:.1e}"),
    )
}

/// Dense brute-force confusion matrix over gt-ink pixels.
struct Oracle {
    m: Vec<Vec<u64>>,
}

impl Oracle {
    fn new(pred: &[u16], gt: &[u16], k: usize) -> Self {
        let mut m = vec![vec![0u64; k + 1]; k + 1];
        for (&p, &g) in pred.iter().zip(gt) {
            if g != 0 {
                m[g as usize][p as usize] += 1;
            }
        }
        Self { m }
    }

    fn total(&self) -> u64 {
        self.m.iter().flatten().sum()
    }

    fn row(&self, c: usize) -> u64 {
        self.m[c].iter().sum()
    }

    fn col(&self, c: usize) -> u64 {
        self.m.iter().map(|r| r[c]).sum()
    }

    fn iou(&self, c: usize) -> f64 {
        let union = self.row(c) + self.col(c) - self.m[c][c];
        if union == 0 {
            0.0
        } else {
            self.m[c][c] as f64 / union as f64
        }
    }

    fn metrics(&self) -> [f64; 4] {
        let k = self.m.len() - 1;
        let total = self.total();
        let correct: u64 = (1..=k).map(|c| self.m[c][c]).sum();
        let in_gt: Vec<usize> = (1..=k).filter(|&c| self.row(c) > 0).collect();
        let in_any: Vec<usize> = (1..=k).filter(|&c| self.row(c) > 0 || self.col(c) > 0).collect();
        let miou = in_any.iter().map(|&c| self.iou(c)).sum::<f64>() / in_any.len() as f64;
        let mean_acc = in_gt
            .iter()
            .map(|&c| self.m[c][c] as f64 / self.row(c) as f64)
            .sum::<f64>()
            / in_gt.len() as f64;
        let fwiou = in_gt
            .iter()
            .map(|&c| self.row(c) as f64 / total as f64 * self.iou(c))
            .sum();
        [correct as f64 / total as f64, miou, mean_acc, fwiou]
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..500 {
        let k = rng.random_range(1..=5u16);
        let mut gt: Vec<u16> = (0..256).map(|_| rng.random_range(0..=k)).collect();
        gt[rng.random_range(0..256)] = rng.random_range(1..=k);
        let pred: Vec<u16> = (0..256).map(|_| rng.random_range(0..=k)).collect();
        let pm = SegmentationMask::new(16, 16, pred.clone()).unwrap();
        let gm = SegmentationMask::new(16, 16, gt.clone()).unwrap();
        let conf = Confusion::from_masks(&pm, &gm).unwrap();
        let got = [
            conf.acc_pixel().unwrap(),
            conf.miou().unwrap().0,
            conf.mean_acc().unwrap(),
            conf.fwiou().unwrap(),
        ];
        let want = Oracle::new(&pred, &gt, k as usize).metrics();
        if got != want {
            return Err(format!("case {case}: got {got:?}, oracle {want:?}"));
        }

        let n_strokes = rng.random_range(1..=20u32);
        let gs: BTreeMap<u32, u16> = (0..n_strokes).map(|s| (s, rng.random_range(0..=k))).collect();
        let ps: BTreeMap<u32, u16> = (0..n_strokes).map(|s| (s, rng.random_range(0..=k))).collect();
        let hits = (0..n_strokes).filter(|s| gs[s] == ps[s]).count();
        let want = hits as f64 / n_strokes as f64;
        let got = acc_stroke(&ps, &gs).unwrap();
        if got != want {
            return Err(format!("case {case}: Acc@S {got}, oracle {want}"));
        }
    }
    let pm = SegmentationMask::new(1, 4, vec![1, 2, 2, 2]).unwrap();
    let gm = SegmentationMask::new(1, 4, vec![1, 1, 2, 2]).unwrap();
    let conf = Confusion::from_masks(&pm, &gm).unwrap();
    let (acc, miou) = (conf.acc_pixel().unwrap(), conf.miou().unwrap().0);
    check(
        acc == 0.75 && (miou - 7.0 / 12.0).abs() < 1e-15,
        format!("500 random pairs exact; worked example Acc@P {acc}, mIoU {miou:.6}"),
    )
}

fn pearson_two_pass(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn pearson() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut worst_self = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-10.0..10.0)).collect();
        worst = worst.max((pearson_corr(&x, &y).unwrap() - pearson_two_pass(&x, &y)).abs());
        worst_self = worst_self.max((pearson_corr(&x, &x).unwrap() - 1.0).abs());
    }
    check(
        worst <= 1e-9 && worst_self <= 1e-12,
        format!("max deviation {worst:.1e}, y=x deviation {worst_self:.1e}"),
    )
}

fn desk_overfit() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = generate_dataset(&SynthConfig::for_canvas(32, 8), 2024).unwrap();
    save_dataset(&data, &ds).unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "preset = tiny\nbatch_size = 8\nepochs = 200\n").unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let summary = cmd_train(&TrainArgs {
        data: data.clone(),
        config: Some(cfg),
        out: ckpt.clone(),
        resume: None,
        log: None,
        max_steps: Some(200),
        embeddings: None,
    })
    .map_err(|e| format!("{e:#}"))?;
    let total: Vec<f64> = summary.records.iter().map(|r| r.loss_global + r.loss_category).collect();
    let n = total.len();
    if n < 10 {
        return Err(format!("only {n} steps ran"));
    }
    let head = total[..5].iter().sum::<f64>() / 5.0;
    let tail = total[n - 5..].iter().sum::<f64>() / 5.0;
    let ratio = tail / head;
    let report = cmd_eval(&EvalArgs {
        ckpt: ckpt.with_extension("ckpt.last"),
        data,
        split: "train".into(),
        report: dir.path().join("report.json"),
        per_item: None,
        embeddings: None,
    })
    .map_err(|e| format!("{e:#}"))?;
    let secs = start.elapsed().as_secs_f64();
    check(
        ratio <= 0.5 && report.acc_pixel >= 0.90 && secs < 300.0,
        format!(
            "{n} steps, loss {head:.4} -> {tail:.4} (ratio {ratio:.3}), train Acc@P {:.3}, {secs:.1}s",
            report.acc_pixel
        ),
    )
}

fn argmax_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let (h, w) = (rng.random_range(2..20usize), rng.random_range(2..20usize));
        let nc = rng.random_range(1..=6usize);
        let ink: Vec<f32> = (0..h * w).map(|_| if rng.random_bool(0.6) { 1.0 } else { 0.0 }).collect();
        let sketch = SketchBitmap::new(Array::new(vec![h, w], ink).unwrap()).unwrap();
        let maps: Vec<Array<f32>> = (0..nc)
            .map(|_| Array::new(vec![h, w], (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let base = label_from_maps(&maps, &sketch).unwrap();
        let c: f32 = rng.random_range(0.1..10.0);
        let scaled: Vec<Array<f32>> = maps.iter().map(|m| m.map(|x| x * c)).collect();
        if label_from_maps(&scaled, &sketch).unwrap() != base {
            return Err(format!("case {case}: scaling by {c} changed labels"));
        }
        let mut perm: Vec<usize> = (0..nc).collect();
        for i in (1..nc).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Array<f32>> = perm.iter().map(|&p| maps[p].clone()).collect();
        let got = label_from_maps(&permuted, &sketch).unwrap();
        // label l of the permuted run is original category perm[l-1]
        let mapped = got.relabel(|l| if l == 0 { 0 } else { perm[l as usize - 1] as u16 + 1 });
        if mapped != base {
            return Err(format!("case {case}: permutation {perm:?} not consistent"));
        }
    }

    let enc = EncoderConfig::tiny();
    let model = Model::new(enc.clone(), init_params(&enc, 0.3), TextEncoder::new(enc.d_joint, 0)).unwrap();
    let split = generate_synthetic(&SynthConfig::for_canvas(32, 5), 8, Role::Test).unwrap();
    for item in &split.items {
        let cats = item.caption.categories.clone();
        let mut rev = cats.clone();
        rev.reverse();
        let n = cats.len() as u16;
        let a = model.segment(&item.sketch, &cats).unwrap();
        let b = model.segment(&item.sketch, &rev).unwrap();
        if b.relabel(|l| if l == 0 { 0 } else { n + 1 - l }) != a {
            return Err(format!("{}: category reordering not consistent", item.id()));
        }
    }
    check(true, "200 random map sets and 5 model runs exact".into())
}

fn bicubic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_const = 0.0f64;
    let mut worst_id = 0.0f64;
    let mut worst_ramp = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(2..12usize), rng.random_range(2..12usize));
        let (oh, ow) = (rng.random_range(1..40usize), rng.random_range(1..40usize));
        let c: f64 = rng.random_range(-3.0..3.0);
        let out = bicubic_resize(&Array::full(&[h, w], c), oh, ow).unwrap();
        worst_const = out.data().iter().fold(worst_const, |m, &x| m.max((x - c).abs()));

        let src = random_array(&mut rng, h, w, 1.0);
        let same = bicubic_resize(&src, h, w).unwrap();
        worst_id = same.data().iter().zip(src.data()).fold(worst_id, |m, (a, b)| m.max((a - b).abs()));

        let (a, b, k) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
        let ramp = Array::new(
            vec![h, w],
            (0..h * w).map(|i| a * (i / w) as f64 + b * (i % w) as f64 + k).collect(),
        )
        .unwrap();
        let out = bicubic_resize(&ramp, oh, ow).unwrap();
        let interior = |o: usize, n_in: usize, n_out: usize| {
            let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let base = s.floor();
            (base >= 1.0 && base + 2.0 <= (n_in - 1) as f64).then_some(s)
        };
        for r in 0..oh {
            for q in 0..ow {
                if let (Some(y), Some(x)) = (interior(r, h, oh), interior(q, w, ow)) {
                    worst_ramp = worst_ramp.max((out.get(r, q) - (a * y + b * x + k)).abs());
                }
            }
        }
    }
    check(
        worst_const <= 1e-6 && worst_id <= 1e-6 && worst_ramp <= 1e-5,
        format!("constant {worst_const:.1e}, identity {worst_id:.1e}, ramp {worst_ramp:.1e}"),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let enc = EncoderConfig::tiny();
    let tc = TrainingConfig {
        batch_size: 4,
        ..TrainingConfig::default()
    };
    let text = TextEncoder::new(enc.d_joint, 5);
    let train = items(enc.image_size, 8, 9, &text, &enc);
    let mut st = TrainState::new(enc.clone(), tc).unwrap();
    st.run_epoch(&train, None, |_| Ok(())).map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("m.ckpt");
    Checkpoint::from_state(&st, 5).save(&ckpt).map_err(|e| e.to_string())?;
    let model = Model::new(enc, st.params.clone(), text).unwrap();

    let fixtures = generate_synthetic(&SynthConfig::for_canvas(32, 10), 77, Role::Test).unwrap();
    for item in &fixtures.items {
        let sketch = dir.path().join(format!("{}.png", item.id()));
        png_io::write_sketch(&sketch, &item.sketch).unwrap();
        let cats = item.caption.categories.join(",");
        let out = cmd_segment(&SegmentArgs {
            ckpt: ckpt.clone(),
            sketch,
            categories: cats,
            isolate: None,
            tau: 0.71,
            out: Some(dir.path().join(item.id())),
            embeddings: None,
        })
        .map_err(|e| format!("{e:#}"))?;
        let loaded = fs::read(&out.mask).unwrap();
        let direct = png_io::encode_indexed_mask(&model.segment(&item.sketch, &item.caption.categories).unwrap()).unwrap();
        if loaded != direct {
            return Err(format!("{}: mask PNG differs after checkpoint reload", item.id()));
        }
    }
    check(true, format!("{} fixtures byte-identical", fixtures.len()))
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Array<f64> {
    let a = random_array(rng, 1, d, 1.0);
    let n = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    a.map(|x| x / n)
}

fn dist(a: &Array<f64>, b: &Array<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Every anchor's positive is at least `margin` closer than every negative.
fn separated(anchors: &[Array<f64>], pos: &[Array<f64>], margin: f64) -> bool {
    (0..anchors.len()).all(|i| {
        let dp = dist(&anchors[i], &pos[i]);
        (0..pos.len()).all(|j| j == i || dist(&anchors[i], &pos[j]) >= dp + margin)
    })
}

fn triplet_hinge() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let margin = 0.3;
    let mut batches = 0;
    while batches < 200 {
        let n = rng.random_range(2..=6usize);
        let d = rng.random_range(4..=16usize);
        let cst: Vec<Array<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let noise = rng.random_range(0.0..0.2);
        let vst: Vec<Array<f64>> = cst
            .iter()
            .map(|c| {
                let e = random_array(&mut rng, 1, d, noise);
                Array::new(vec![1, d], c.data().iter().zip(e.data()).map(|(a, b)| a + b).collect()).unwrap()
            })
            .collect();
        if !separated(&vst, &cst, margin) {
            continue;
        }
        batches += 1;
        for mining in [NegativeMining::HardestClosest, NegativeMining::MostDissimilar] {
            let g: f64 = triplet_loss_global(&vst, &cst, margin, mining).unwrap();
            let layers = vec![vst.clone(), vst.clone()];
            let c: f64 = triplet_loss_category(&layers, &cst, margin, mining).unwrap();
            if g != 0.0 || c != 0.0 {
                return Err(format!("separated batch gave global {g}, category {c}"));
            }
        }
    }
    check(true, format!("{batches} separated batches, global and category loss exactly 0"))
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("frozen-weight policy", frozen_weight_policy),
        ("v-v attention identities", vv_identities),
        ("metric oracle equivalence", metric_oracle),
        ("pearson correlation", pearson),
        ("desk-scale overfit", desk_overfit),
        ("argmax invariances", argmax_invariances),
        ("bicubic properties", bicubic),
        ("checkpoint round-trip", checkpoint_round_trip),
        ("triplet hinge", triplet_hinge),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = Duration::as_secs_f64(&t.elapsed());
        match outcome {
            Ok(d) => println!("acceptance {:>2} {name}: PASS ({d}) [{took:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("acceptance {:>2} {name}: FAIL ({d}) [{took:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

