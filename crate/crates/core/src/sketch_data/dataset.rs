//! On-disk dataset layout:
//!
//! ```text
//! root/labels.json                    {"1": "cat", "2": "tree", ...}  (optional)
//! root/<split>/sketches/<id>.png      8-bit, 0 = paper, 255 = ink
//! root/<split>/captions.jsonl         {"id", "caption", "categories": [...]}
//! root/<split>/masks/<id>.png         8-bit label indices, 0 = background (optional)
//! root/<split>/strokes/<id>.jsonl     {"id", "points": [[x, y], ...]} per line (optional)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bitmap::{SketchBitmap, Stroke};
use super::mask::SegmentationMask;
use super::png_io;
use crate::{parallel, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Train, Role::Val, Role::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Scene caption plus its ordered, unique, lowercase category list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    #[serde(rename = "id")]
    pub sketch_id: String,
    pub caption: String,
    #[serde(default)]
    pub categories: Vec<String>,
}

impl CaptionRecord {
    pub fn new(sketch_id: impl Into<String>, caption: impl Into<String>, categories: Vec<String>) -> Result<Self> {
        let rec = Self {
            sketch_id: sketch_id.into(),
            caption: caption.into(),
            categories,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Contract(format!("{}: no categories", self.sketch_id)));
        }
        let mut seen = BTreeSet::new();
        for c in &self.categories {
            if c.is_empty() || c.to_lowercase() != *c {
                return Err(Error::Contract(format!(
                    "{}: category '{c}' must be non-empty lowercase",
                    self.sketch_id
                )));
            }
            if !seen.insert(c) {
                return Err(Error::Contract(format!("{}: duplicate category '{c}'", self.sketch_id)));
            }
        }
        Ok(())
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }
}

/// Shared label vocabulary. Ids start at 1; 0 is background.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<_> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Contract("duplicate vocabulary entry".into()));
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<u16> {
        self.names.iter().position(|n| n == name).map(|i| i as u16 + 1)
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        if id == 0 {
            return None;
        }
        self.names.get(id as usize - 1).map(String::as_str)
    }

    fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| ((i + 1).to_string(), serde_json::Value::String(n.clone())))
            .collect();
        serde_json::Value::Object(map)
    }

    fn from_json(path: &Path, v: serde_json::Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::load(path, "expected an object of index -> name"))?;
        let mut by_id = BTreeMap::new();
        for (k, name) in obj {
            let id: u16 = k
                .parse()
                .map_err(|_| Error::load(path, format!("bad label index '{k}'")))?;
            let name = name
                .as_str()
                .ok_or_else(|| Error::load(path, format!("label {k} is not a string")))?;
            if id != 0 {
                by_id.insert(id, name.to_string());
            }
        }
        if by_id.keys().copied().ne(1..=by_id.len() as u16) {
            return Err(Error::load(path, "label indices must be contiguous from 1"));
        }
        Self::new(by_id.into_values().collect()).map_err(|e| Error::load(path, e.to_string()))
    }

    /// Whitespace-tokenised, longest-first lexicon match of vocabulary names
    /// (multi-word names allowed) against a raw caption. Order of first
    /// occurrence, without duplicates.
    pub fn extract_categories(&self, caption: &str) -> Vec<String> {
        let tokens: Vec<String> = caption
            .split_whitespace()
            .map(|t| {
                t.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|t| !t.is_empty())
            .collect();
        let mut entries: Vec<Vec<&str>> = self
            .names
            .iter()
            .map(|n| n.split_whitespace().collect())
            .collect();
        entries.sort_by_key(|e| std::cmp::Reverse(e.len()));
        let mut found = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = entries.iter().find(|e| {
                !e.is_empty()
                    && i + e.len() <= tokens.len()
                    && e.iter().zip(&tokens[i..]).all(|(a, b)| {
                        *a == b || (b.strip_suffix('s') == Some(*a))
                    })
            });
            match hit {
                Some(e) => {
                    let name = e.join(" ");
                    if !found.contains(&name) {
                        found.push(name);
                    }
                    i += e.len();
                }
                None => i += 1,
            }
        }
        found
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub sketch: SketchBitmap,
    pub caption: CaptionRecord,
    /// Labels are vocabulary ids.
    pub ground_truth: Option<SegmentationMask>,
    pub strokes: Option<Vec<Stroke>>,
}

impl DatasetItem {
    pub fn id(&self) -> &str {
        &self.caption.sketch_id
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub role: Role,
    pub items: Vec<DatasetItem>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.items.iter().all(|i| i.ground_truth.is_some())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub splits: BTreeMap<Role, DatasetSplit>,
}

impl Dataset {
    pub fn split(&self, role: Role) -> Option<&DatasetSplit> {
        self.splits.get(&role)
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| Error::load(path, format!("line {}: {e}", n + 1)))?;
        out.push(v);
    }
    Ok(out)
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(ids);
    }
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let labels_path = root.join("labels.json");
    let fixed_vocab = if labels_path.exists() {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&labels_path)?)
            .map_err(|e| Error::load(&labels_path, e.to_string()))?;
        Some(Vocabulary::from_json(&labels_path, v)?)
    } else {
        None
    };

    let mut raw = BTreeMap::new();
    for role in Role::ALL {
        let dir = root.join(role.dir_name());
        if dir.is_dir() {
            raw.insert(role, load_split_records(&dir, fixed_vocab.as_ref())?);
        }
    }
    if raw.is_empty() {
        return Err(Error::load(root, "no train/val/test subdirectory"));
    }

    let vocabulary = match fixed_vocab {
        Some(v) => v,
        None => {
            let names: BTreeSet<String> = raw
                .values()
                .flat_map(|recs| recs.iter().flat_map(|r| r.categories.clone()))
                .collect();
            Vocabulary::new(names.into_iter().collect())?
        }
    };

    let mut splits = BTreeMap::new();
    for (role, records) in raw {
        let dir = root.join(role.dir_name());
        let has_masks = dir.join("masks").is_dir();
        if has_masks && !labels_path.exists() {
            return Err(Error::load(&dir, "masks present but labels.json missing"));
        }
        let loaded = parallel::map(&records, |rec| load_item(&dir, rec.clone(), &vocabulary));
        let items = loaded.into_iter().collect::<Result<Vec<_>>>()?;
        splits.insert(role, DatasetSplit { role, items });
    }
    Ok(Dataset { vocabulary, splits })
}

fn load_split_records(dir: &Path, vocab: Option<&Vocabulary>) -> Result<Vec<CaptionRecord>> {
    let captions_path = dir.join("captions.jsonl");
    let mut records: Vec<CaptionRecord> = if captions_path.exists() {
        read_jsonl(&captions_path)?
    } else {
        Vec::new()
    };
    for rec in &mut records {
        if rec.categories.is_empty() {
            if let Some(v) = vocab {
                rec.categories = v.extract_categories(&rec.caption);
            }
        }
        rec.validate()
            .map_err(|e| Error::load(&captions_path, e.to_string()))?;
        if let Some(v) = vocab {
            if let Some(c) = rec.categories.iter().find(|c| v.id(c).is_none()) {
                return Err(Error::load(
                    &captions_path,
                    format!("{}: category '{c}' not in labels.json", rec.sketch_id),
                ));
            }
        }
    }
    records.sort_by(|a, b| a.sketch_id.cmp(&b.sketch_id));
    if let Some(w) = records.windows(2).find(|w| w[0].sketch_id == w[1].sketch_id) {
        return Err(Error::load(&captions_path, format!("duplicate caption id {}", w[0].sketch_id)));
    }

    let sketch_ids = png_ids(&dir.join("sketches"))?;
    let caption_ids: BTreeSet<String> = records.iter().map(|r| r.sketch_id.clone()).collect();
    if let Some(orphan) = sketch_ids.difference(&caption_ids).next() {
        return Err(Error::load(dir, format!("sketch '{orphan}' has no caption record")));
    }
    if let Some(missing) = caption_ids.difference(&sketch_ids).next() {
        return Err(Error::load(dir, format!("caption '{missing}' has no sketch")));
    }
    for sub in ["masks", "strokes"] {
        let extra: Vec<String> = if sub == "masks" {
            png_ids(&dir.join(sub))?.into_iter().collect()
        } else {
            jsonl_ids(&dir.join(sub))?
        };
        if let Some(orphan) = extra.iter().find(|id| !sketch_ids.contains(*id)) {
            return Err(Error::load(dir, format!("{sub} entry '{orphan}' has no sketch")));
        }
    }
    Ok(records)
}

fn jsonl_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "jsonl") {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
    }
    Ok(ids)
}

fn load_item(dir: &Path, caption: CaptionRecord, vocab: &Vocabulary) -> Result<DatasetItem> {
    let id = caption.sketch_id.clone();
    let sketch = png_io::read_sketch(&dir.join("sketches").join(format!("{id}.png")))?;
    let mask_path = dir.join("masks").join(format!("{id}.png"));
    let ground_truth = if mask_path.exists() {
        let m = png_io::read_mask(&mask_path)?;
        if m.dims() != (sketch.height(), sketch.width()) {
            return Err(Error::Dimension {
                op: "mask vs sketch",
                lhs: vec![m.height(), m.width()],
                rhs: vec![sketch.height(), sketch.width()],
            });
        }
        if let Some(&bad) = m.labels().iter().find(|&&l| l as usize > vocab.len()) {
            return Err(Error::load(&mask_path, format!("label {bad} outside vocabulary")));
        }
        Some(m)
    } else {
        None
    };
    let strokes_path = dir.join("strokes").join(format!("{id}.jsonl"));
    let strokes = if strokes_path.exists() {
        let strokes: Vec<Stroke> = read_jsonl(&strokes_path)?;
        for s in &strokes {
            s.validate().map_err(|e| Error::load(&strokes_path, e.to_string()))?;
        }
        Some(strokes)
    } else {
        None
    };
    Ok(DatasetItem {
        sketch,
        caption,
        ground_truth,
        strokes,
    })
}

/// Writes a dataset in the layout [`load_dataset`] reads.
pub fn save_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(root)?;
    fs::write(
        root.join("labels.json"),
        serde_json::to_string_pretty(&dataset.vocabulary.to_json())?,
    )?;
    for (role, split) in &dataset.splits {
        let dir: PathBuf = root.join(role.dir_name());
        fs::create_dir_all(dir.join("sketches"))?;
        let mut captions = fs::File::create(dir.join("captions.jsonl"))?;
        for item in &split.items {
            let id = item.id();
            writeln!(captions, "{}", serde_json::to_string(&item.caption)?)?;
            png_io::write_sketch(&dir.join("sketches").join(format!("{id}.png")), &item.sketch)?;
            if let Some(m) = &item.ground_truth {
                fs::create_dir_all(dir.join("masks"))?;
                png_io::write_mask(&dir.join("masks").join(format!("{id}.png")), m)?;
            }
            if let Some(strokes) = &item.strokes {
                fs::create_dir_all(dir.join("strokes"))?;
                let mut f = fs::File::create(dir.join("strokes").join(format!("{id}.jsonl")))?;
                for s in strokes {
                    writeln!(f, "{}", serde_json::to_string(s)?)?;
                }
            }
        }
    }
    Ok(())
}
