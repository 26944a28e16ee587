//! Seeded synthetic sketch-caption generator with exact ground truth.

use std::collections::BTreeMap;
use std::f32::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bitmap::{rasterize_strokes, Stroke};
use super::dataset::{CaptionRecord, Dataset, DatasetItem, DatasetSplit, Role, Vocabulary};
use super::mask::SegmentationMask;
use crate::{Error, Result};

/// Drawable glyph shapes; each one is a category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Circle,
    Zigzag,
    Box,
    Cross,
}

impl Glyph {
    pub const ALL: [Glyph; 4] = [Glyph::Circle, Glyph::Zigzag, Glyph::Box, Glyph::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Glyph::Circle => "circle",
            Glyph::Zigzag => "zigzag",
            Glyph::Box => "box",
            Glyph::Cross => "cross",
        }
    }

    /// Polylines inside the square `[x0, x0 + s] × [y0, y0 + s]`.
    fn polylines(self, x0: f32, y0: f32, s: f32, rng: &mut ChaCha8Rng) -> Vec<Vec<[f32; 2]>> {
        let (cx, cy) = (x0 + s / 2.0, y0 + s / 2.0);
        match self {
            Glyph::Circle => {
                let r = s / 2.0;
                let phase = rng.random_range(0.0..TAU);
                let n = 20;
                vec![(0..=n)
                    .map(|i| {
                        let a = phase + TAU * i as f32 / n as f32;
                        [cx + r * a.cos(), cy + r * a.sin()]
                    })
                    .collect()]
            }
            Glyph::Zigzag => {
                let teeth = rng.random_range(3..=4);
                vec![(0..=teeth * 2)
                    .map(|i| {
                        let x = x0 + s * i as f32 / (teeth * 2) as f32;
                        let y = if i % 2 == 0 { y0 } else { y0 + s };
                        [x, y]
                    })
                    .collect()]
            }
            Glyph::Box => vec![vec![
                [x0, y0],
                [x0 + s, y0],
                [x0 + s, y0 + s],
                [x0, y0 + s],
                [x0, y0],
            ]],
            Glyph::Cross => vec![
                vec![[cx, y0], [cx, y0 + s]],
                vec![[x0, cy], [x0 + s, cy]],
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Square canvas side in pixels.
    pub size: usize,
    /// Items per split.
    pub n_items: usize,
    pub min_glyphs: usize,
    pub max_glyphs: usize,
    /// Largest glyph side; each glyph is drawn at 75-100 % of it.
    pub glyph_size: usize,
    /// Minimum blank distance between glyph bounding boxes.
    pub gap: usize,
    pub stroke_width: u32,
    pub lexicon: Vec<Glyph>,
}

impl SynthConfig {
    pub fn for_canvas(size: usize, n_items: usize) -> Self {
        Self {
            size,
            n_items,
            min_glyphs: 2,
            max_glyphs: 3,
            glyph_size: (size * 5 / 16).max(4),
            gap: (size / 16).max(2),
            stroke_width: 2,
            lexicon: Glyph::ALL.to_vec(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.lexicon.iter().map(|g| g.name().to_string()).collect())
            .expect("glyph names unique")
    }

    fn validate(&self) -> Result<()> {
        if self.lexicon.is_empty() {
            return Err(Error::Generation("empty glyph lexicon".into()));
        }
        if self.min_glyphs == 0 || self.min_glyphs > self.max_glyphs {
            return Err(Error::Generation(format!(
                "invalid glyph count range {}..={}",
                self.min_glyphs, self.max_glyphs
            )));
        }
        if self.max_glyphs > self.lexicon.len() {
            return Err(Error::Generation(format!(
                "{} glyphs requested from a lexicon of {}",
                self.max_glyphs,
                self.lexicon.len()
            )));
        }
        Ok(())
    }
}

/// Cells per side of the placement grid.
fn grid_cells(cfg: &SynthConfig) -> usize {
    (1..).find(|c| c * c >= cfg.max_glyphs).expect("finite")
}

/// Assigns each glyph its own grid cell and jitters it inside, so glyph
/// boxes (plus brush margin) stay at least `gap` apart.
fn place(sides: &[usize], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let margin = cfg.stroke_width as usize;
    let cells = grid_cells(cfg);
    let cell = cfg.size / cells;
    let half_gap = cfg.gap.div_ceil(2);
    let mut order: Vec<usize> = (0..cells * cells).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(sides.len());
    for (&s, &c) in sides.iter().zip(&order) {
        let need = s + 2 * margin + 2 * half_gap;
        if need > cell {
            return Err(Error::Generation(format!(
                "canvas {}x{} too small to place {} glyphs of side {s}",
                cfg.size, cfg.size, cfg.max_glyphs
            )));
        }
        let slack = cell - need;
        let (cx, cy) = ((c % cells) * cell, (c / cells) * cell);
        let x = cx + half_gap + margin + rng.random_range(0..=slack);
        let y = cy + half_gap + margin + rng.random_range(0..=slack);
        out.push((x, y));
    }
    Ok(out)
}

fn caption_text(categories: &[String]) -> String {
    categories
        .iter()
        .map(|c| format!("a {c}"))
        .collect::<Vec<_>>()
        .join(" and ")
}

fn generate_item(cfg: &SynthConfig, vocab: &Vocabulary, id: String, rng: &mut ChaCha8Rng) -> Result<DatasetItem> {
    let n = rng.random_range(cfg.min_glyphs..=cfg.max_glyphs);
    let mut glyphs = cfg.lexicon.clone();
    glyphs.shuffle(rng);
    glyphs.truncate(n);
    let lo = (cfg.glyph_size * 3 / 4).max(2);
    let sides: Vec<usize> = glyphs
        .iter()
        .map(|_| rng.random_range(lo..=cfg.glyph_size.max(lo)))
        .collect();
    let origins = place(&sides, cfg, rng)?;

    let (h, w) = (cfg.size, cfg.size);
    let mut strokes = Vec::new();
    let mut labels = vec![0u16; h * w];
    for ((g, &side), &(x, y)) in glyphs.iter().zip(&sides).zip(&origins) {
        let label = vocab.id(g.name()).expect("glyph in vocabulary");
        let mut own = Vec::new();
        for pts in g.polylines(x as f32, y as f32, side as f32, rng) {
            let s = Stroke::new(strokes.len() as u32 + own.len() as u32, pts).with_width(cfg.stroke_width);
            own.push(s);
        }
        let ink = rasterize_strokes(&own, h, w).ink_mask();
        for (l, is_ink) in labels.iter_mut().zip(ink) {
            if is_ink {
                debug_assert_eq!(*l, 0, "glyphs overlap");
                *l = label;
            }
        }
        strokes.extend(own);
    }
    let sketch = rasterize_strokes(&strokes, h, w);
    let categories: Vec<String> = glyphs.iter().map(|g| g.name().to_string()).collect();
    let caption = CaptionRecord::new(id, caption_text(&categories), categories)?;
    Ok(DatasetItem {
        sketch,
        caption,
        ground_truth: Some(SegmentationMask::new(h, w, labels)?),
        strokes: Some(strokes),
    })
}

/// One split of `cfg.n_items` sketches. Deterministic in `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64, role: Role) -> Result<DatasetSplit> {
    cfg.validate()?;
    let vocab = cfg.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..cfg.n_items)
        .map(|i| generate_item(cfg, &vocab, format!("{}_{i:05}", role.dir_name()), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit { role, items })
}

/// Train, val and test splits with seeds derived from `seed`.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    let mut splits = BTreeMap::new();
    for (k, role) in Role::ALL.into_iter().enumerate() {
        let split_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
        splits.insert(role, generate_synthetic(cfg, split_seed, role)?);
    }
    Ok(Dataset {
        vocabulary: cfg.vocabulary(),
        splits,
    })
}
