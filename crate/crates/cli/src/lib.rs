//! `sketchseg` command-line tool: synthetic data, training, segmentation
//! and evaluation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric
//! failure during training, 1 anything else (I/O).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sketchseg::checkpoint::Checkpoint;
use sketchseg::config_file::RunConfig;
use sketchseg::metrics::{pearson_corr, Confusion, MetricsReport};
use sketchseg::segmentation::{isolate_category, label_from_maps, stroke_labels, Model, ISOLATION_TAU};
use sketchseg::sketch_data::{
    generate_dataset, load_dataset, png_io, save_dataset, DatasetSplit, Role, SegmentationMask,
    SynthConfig, Vocabulary, BACKGROUND,
};
use sketchseg::text_embedding::TextEncoder;
use sketchseg::training::{prepare_items, StepRecord, TrainState};
use sketchseg::{parallel, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// A command-line misuse detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return EXIT_USAGE;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFinite(_)) => EXIT_NUMERIC,
        Some(Error::Io(_)) => EXIT_IO,
        Some(_) => EXIT_USAGE,
        None => EXIT_IO,
    }
}

#[derive(Parser, Debug)]
#[command(name = "sketchseg", version, about = "Hierarchical scene-sketch segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run every stage on the calling thread only.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with exact ground truth.
    Synth(SynthArgs),
    /// Fine-tune a model on a dataset.
    Train(TrainArgs),
    /// Segment one sketch.
    Segment(SegmentArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Items per split.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Patch size the canvas must be divisible by.
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` configuration; optional when resuming.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// JSONL step log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Precomputed text embeddings (JSONL).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SegmentArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub sketch: PathBuf,
    /// Comma-separated category names.
    #[arg(long)]
    pub categories: String,
    /// Keep only the ink of this category.
    #[arg(long)]
    pub isolate: Option<String>,
    /// Isolation threshold.
    #[arg(long, default_value_t = ISOLATION_TAU)]
    pub tau: f32,
    /// Output prefix; defaults to the sketch path without extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write one JSON line of metrics per item.
    #[arg(long)]
    pub per_item: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if cli.sequential {
        parallel::set_enabled(false);
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a).map(|s| {
            println!("{}", serde_json::to_string(&s).expect("serializable"));
        }),
        Command::Segment(a) => cmd_segment(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|r| {
            println!("{}", serde_json::to_string(&r).expect("serializable"));
        }),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    if a.patch == 0 || !a.size.is_multiple_of(a.patch) {
        return Err(usage(format!(
            "--size {} is not divisible by patch size {}",
            a.size, a.patch
        )));
    }
    let cfg = SynthConfig::for_canvas(a.size, a.n);
    let ds = generate_dataset(&cfg, a.seed)?;
    save_dataset(&a.out, &ds).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn text_encoder(dim: usize, seed: u64, embeddings: Option<&Path>) -> anyhow::Result<TextEncoder> {
    let mut t = TextEncoder::new(dim, seed);
    if let Some(p) = embeddings {
        t.load_precomputed_embeddings(p)?;
    }
    Ok(t)
}

fn load_model(ckpt: &Path, embeddings: Option<&Path>) -> anyhow::Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let text = text_encoder(ck.encoder.d_joint, ck.text_seed, embeddings)?;
    let model = Model::new(ck.encoder.clone(), ck.params.clone(), text)?;
    Ok((model, ck))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: u64,
    /// Epoch (1-based) of the checkpoint left at `--out`.
    pub selected_epoch: u64,
    /// Validation mIoU of the selected epoch, when validation masks exist.
    pub val_miou: Option<f64>,
    pub records: Vec<StepRecord>,
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<TrainSummary> {
    let (mut state, text_seed) = match (&a.resume, &a.config) {
        (Some(r), cfg) => {
            let ck = Checkpoint::load(r).with_context(|| format!("loading {}", r.display()))?;
            let seed = ck.text_seed;
            let mut st = ck.into_state();
            if let Some(c) = cfg {
                let rc = RunConfig::load(c)?;
                if rc.encoder != st.encoder {
                    return Err(usage("--config encoder settings differ from the resumed checkpoint"));
                }
                st.training = rc.training;
            }
            (st, seed)
        }
        (None, Some(c)) => {
            let rc = RunConfig::load(c)?;
            (TrainState::new(rc.encoder, rc.training)?, rc.text_seed)
        }
        (None, None) => return Err(usage("train needs --config or --resume")),
    };

    let ds = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let train = ds
        .split(Role::Train)
        .filter(|s| s.len() >= 2)
        .ok_or_else(|| usage("the train split needs at least 2 items"))?;
    let text = text_encoder(state.encoder.d_joint, text_seed, a.embeddings.as_deref())?;
    let items = prepare_items(&train.items, &text, &state.encoder)?;
    let val = ds
        .split(Role::Val)
        .filter(|s| !s.is_empty() && s.has_ground_truth());

    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);

    let mut records = Vec::new();
    let mut best: Option<(f64, u64)> = None;
    let mut selected = state.epoch;
    let limit = a.max_steps.unwrap_or(u64::MAX);
    while (state.epoch as usize) < state.training.epochs && state.step < limit {
        let recs = state.run_epoch(&items, Some(limit), |r| {
            serde_json::to_writer(&mut log, r).map_err(Error::from)?;
            log.write_all(b"\n")?;
            Ok(())
        })?;
        records.extend(recs);
        log.flush()?;
        let ck = Checkpoint::from_state(&state, text_seed);
        ck.save(&with_suffix(&a.out, ".last"))?;
        match val {
            Some(v) => {
                let model = Model::new(state.encoder.clone(), state.params.clone(), text.clone())?;
                let miou = evaluate(&model, v, &ds.vocabulary)?.0.miou;
                if best.is_none_or(|(b, _)| miou > b) {
                    best = Some((miou, state.epoch));
                    selected = state.epoch;
                    ck.save(&a.out)?;
                }
            }
            None => {
                selected = state.epoch;
                ck.save(&a.out)?;
            }
        }
    }
    if records.is_empty() && !a.out.exists() {
        Checkpoint::from_state(&state, text_seed).save(&a.out)?;
    }
    Ok(TrainSummary {
        steps: state.step,
        epochs: state.epoch,
        selected_epoch: selected,
        val_miou: best.map(|(m, _)| m),
        records,
    })
}

fn parse_categories(s: &str) -> anyhow::Result<Vec<String>> {
    let cats: Vec<String> = s
        .split(',')
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect();
    if cats.is_empty() {
        return Err(usage("--categories must name at least one category"));
    }
    for (i, c) in cats.iter().enumerate() {
        if cats[..i].contains(c) {
            return Err(usage(format!("category '{c}' listed twice")));
        }
    }
    Ok(cats)
}

#[derive(Clone, Debug, Serialize)]
pub struct SegmentSidecar {
    pub sketch: String,
    pub categories: Vec<String>,
    /// Mask index to category name.
    pub labels: BTreeMap<u16, String>,
    pub isolate: Option<String>,
    pub tau: Option<f32>,
}

/// Paths written by `segment`.
#[derive(Clone, Debug)]
pub struct SegmentOutputs {
    pub mask: PathBuf,
    pub overlay: PathBuf,
    pub sidecar: PathBuf,
    pub isolated: Option<PathBuf>,
}

pub fn cmd_segment(a: &SegmentArgs) -> anyhow::Result<SegmentOutputs> {
    let cats = parse_categories(&a.categories)?;
    if let Some(c) = &a.isolate {
        if !cats.contains(c) {
            return Err(usage(format!("--isolate '{c}' is not among --categories")));
        }
        if !(0.0..=1.0).contains(&a.tau) {
            return Err(usage(format!("--tau {} outside [0, 1]", a.tau)));
        }
    }
    let (model, _) = load_model(&a.ckpt, a.embeddings.as_deref())?;
    let sketch = png_io::read_sketch(&a.sketch)?;
    let n = model.encoder.image_size;
    if sketch.height() != n || sketch.width() != n {
        return Err(usage(format!(
            "sketch is {}x{}, checkpoint expects {n}x{n}",
            sketch.height(),
            sketch.width()
        )));
    }
    let maps = model.similarity_maps(&sketch, &cats)?;
    let mask = label_from_maps(&maps.pixel_maps, &sketch)?;
    let prefix = a.out.clone().unwrap_or_else(|| a.sketch.with_extension(""));
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let out = SegmentOutputs {
        mask: with_suffix(&prefix, ".mask.png"),
        overlay: with_suffix(&prefix, ".overlay.png"),
        sidecar: with_suffix(&prefix, ".json"),
        isolated: a.isolate.as_ref().map(|_| with_suffix(&prefix, ".isolated.png")),
    };
    png_io::write_png_bytes(&out.mask, &png_io::encode_indexed_mask(&mask)?)?;
    let overlay_mask = match &a.isolate {
        Some(c) => {
            let isolated = isolate_category(&maps, &sketch, c, a.tau)?;
            png_io::write_sketch(out.isolated.as_ref().expect("isolate set"), &isolated)?;
            let label = maps.index_of(c).expect("checked above") as u16 + 1;
            let keep = isolated.ink_mask();
            let labels = keep.iter().map(|&k| if k { label } else { BACKGROUND }).collect();
            SegmentationMask::new(sketch.height(), sketch.width(), labels)?
        }
        None => mask.clone(),
    };
    png_io::write_png_bytes(&out.overlay, &png_io::encode_overlay(&sketch, &overlay_mask)?)?;
    let sidecar = SegmentSidecar {
        sketch: a.sketch.display().to_string(),
        labels: cats
            .iter()
            .enumerate()
            .map(|(i, c)| (i as u16 + 1, c.clone()))
            .collect(),
        categories: cats,
        isolate: a.isolate.clone(),
        tau: a.isolate.as_ref().map(|_| a.tau),
    };
    fs::write(&out.sidecar, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct ItemReport {
    pub id: String,
    pub acc_pixel: f64,
    pub miou: f64,
    pub acc_stroke: Option<f64>,
}

struct ItemEval {
    confusion: Confusion,
    strokes: Option<(usize, usize)>,
    report: ItemReport,
}

/// Maps segmentation labels (positions in `cats`, 1-based) to vocabulary ids.
pub fn to_vocabulary_ids(mask: &SegmentationMask, cats: &[String], vocab: &Vocabulary) -> anyhow::Result<SegmentationMask> {
    let ids = cats
        .iter()
        .map(|c| vocab.id(c).ok_or_else(|| usage(format!("category '{c}' missing from labels.json"))))
        .collect::<anyhow::Result<Vec<u16>>>()?;
    Ok(mask.relabel(|l| if l == BACKGROUND { BACKGROUND } else { ids[l as usize - 1] }))
}

/// Segments every item of `split` with its caption categories and scores
/// against the ground truth.
pub fn evaluate(model: &Model, split: &DatasetSplit, vocab: &Vocabulary) -> anyhow::Result<(MetricsReport, Vec<ItemReport>)> {
    if split.is_empty() {
        return Err(usage(format!("split '{}' is empty", split.role)));
    }
    if !split.has_ground_truth() {
        return Err(usage(format!("split '{}' has no ground-truth masks", split.role)));
    }
    let evals = parallel::map(&split.items, |item| -> anyhow::Result<ItemEval> {
        let cats = &item.caption.categories;
        let gt = item.ground_truth.as_ref().expect("checked");
        let pred = to_vocabulary_ids(&model.segment(&item.sketch, cats)?, cats, vocab)?;
        let confusion = Confusion::from_masks(&pred, gt)?;
        let strokes = item.strokes.as_ref().filter(|s| !s.is_empty()).map(|s| {
            let p = stroke_labels(&pred, s).labels;
            let g = stroke_labels(gt, s).labels;
            let correct = g.iter().filter(|(k, v)| p.get(k) == Some(v)).count();
            (correct, g.len())
        });
        let report = ItemReport {
            id: item.id().to_string(),
            acc_pixel: confusion.acc_pixel()?,
            miou: confusion.miou()?.0,
            acc_stroke: strokes.map(|(c, n)| c as f64 / n as f64),
        };
        Ok(ItemEval {
            confusion,
            strokes,
            report,
        })
    })
    .into_iter()
    .collect::<anyhow::Result<Vec<_>>>()?;

    let mut conf = Confusion::new();
    let mut stroke_counts: Option<(usize, usize)> = None;
    let mut items = Vec::with_capacity(evals.len());
    for e in evals {
        conf.merge(&e.confusion);
        if let Some((c, n)) = e.strokes {
            let s = stroke_counts.get_or_insert((0, 0));
            s.0 += c;
            s.1 += n;
        }
        items.push(e.report);
    }
    let acc_stroke = stroke_counts.filter(|&(_, n)| n > 0).map(|(c, n)| c as f64 / n as f64);
    let name = |id: u16| vocab.name(id).map_or_else(|| format!("label{id}"), str::to_string);
    let mut report = MetricsReport::from_confusion(&conf, acc_stroke, split.len(), name)?;

    let (acc, freq): (Vec<f64>, Vec<f64>) = report
        .per_category
        .iter()
        .map(|(c, r)| {
            let n = split.items.iter().filter(|i| i.caption.categories.contains(c)).count();
            (r.acc, n as f64)
        })
        .unzip();
    report.acc_frequency_corr = pearson_corr(&acc, &freq).ok();
    Ok((report, items))
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<MetricsReport> {
    let role: Role = a.split.parse().map_err(|e: Error| usage(e.to_string()))?;
    let (model, _) = load_model(&a.ckpt, a.embeddings.as_deref())?;
    let ds = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let split = ds
        .split(role)
        .ok_or_else(|| usage(format!("dataset has no '{role}' split")))?;
    let (report, items) = evaluate(&model, split, &ds.vocabulary)?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.report, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", a.report.display()))?;
    if let Some(p) = &a.per_item {
        let mut f = BufWriter::new(File::create(p)?);
        for it in &items {
            serde_json::to_writer(&mut f, it)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    Ok(report)
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> anyhow::Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| anyhow!("{}: {e}", path.display())))
        .collect()
}

/// Fails unless `path` exists; used by tests and scripts.
pub fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{} was not written", path.display());
    }
    Ok(())
}
