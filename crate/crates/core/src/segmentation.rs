//! Inference: similarity maps, argmax labelling, single-category isolation
//! and stroke labels.

use std::collections::BTreeMap;

use crate::encoder::{assemble_tokens, forward_dual_path, patches_from_field, EncoderConfig, ParamStore};
use crate::numerics::{ops, Array, Tape};
use crate::sketch_data::{SegmentationMask, SketchBitmap, Stroke, BACKGROUND};
use crate::text_embedding::{category_prompt, TextEncoder};
use crate::{parallel, Error, Result};

/// Isolation threshold used at inference.
pub const ISOLATION_TAU: f32 = 0.71;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMaps {
    /// `K × N_c`.
    pub patch_maps: Array<f32>,
    /// One `h × w` field per category.
    pub pixel_maps: Vec<Array<f32>>,
    pub categories: Vec<String>,
}

impl SimilarityMaps {
    /// Upscales each column of `patch_maps` from the `grid × grid` layout.
    pub fn from_patch_maps(
        patch_maps: Array<f32>,
        categories: Vec<String>,
        grid: usize,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        if patch_maps.shape() != [grid * grid, categories.len()] {
            return Err(Error::dim(
                "similarity maps",
                patch_maps.shape(),
                &[grid * grid, categories.len()],
            ));
        }
        let pixel_maps = (0..categories.len())
            .map(|c| {
                let col: Vec<f32> = (0..grid * grid).map(|k| patch_maps.get(k, c)).collect();
                ops::bicubic_resize(&Array::new(vec![grid, grid], col)?, h, w)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_maps,
            pixel_maps,
            categories,
        })
    }

    pub fn index_of(&self, category: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == category)
    }
}

/// Encoder parameters plus the text encoder: everything inference needs.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub params: ParamStore<f32>,
    pub text: TextEncoder,
}

impl Model {
    pub fn new(encoder: EncoderConfig, params: ParamStore<f32>, text: TextEncoder) -> Result<Self> {
        encoder.validate()?;
        params.check_layout(&encoder)?;
        if text.dim() != encoder.d_joint {
            return Err(Error::Config(format!(
                "text encoder dimension {} differs from d_joint {}",
                text.dim(),
                encoder.d_joint
            )));
        }
        Ok(Self {
            encoder,
            params,
            text,
        })
    }

    /// Unit-norm `K × d_joint` patch embeddings of the holistic pass.
    pub fn patch_embeddings(&self, sketch: &SketchBitmap) -> Result<Array<f32>> {
        let n = self.encoder.image_size;
        if sketch.height() != n || sketch.width() != n {
            return Err(Error::dim(
                "sketch",
                &[sketch.height(), sketch.width()],
                &[n, n],
            ));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let field = tape.constant(sketch.intensity().clone());
        let patches = patches_from_field(&mut tape, field, &self.encoder)?;
        let tokens = assemble_tokens(&mut tape, &p, &self.encoder, patches)?;
        let out = forward_dual_path(&mut tape, &p, &self.encoder, &tokens)?;
        Ok(tape.value(out.patches).clone())
    }

    pub fn similarity_maps(&self, sketch: &SketchBitmap, categories: &[String]) -> Result<SimilarityMaps> {
        if categories.is_empty() {
            return Err(Error::Contract("segmentation needs at least one category".into()));
        }
        let rows = categories
            .iter()
            .map(|c| self.text.embed(&category_prompt(c)))
            .collect::<Result<Vec<_>>>()?;
        let ccts = Array::from_rows(&rows)?;
        let h = self.patch_embeddings(sketch)?;
        let m = ops::matmul_bt(&h, &ccts)?;
        SimilarityMaps::from_patch_maps(
            m,
            categories.to_vec(),
            self.encoder.grid(),
            sketch.height(),
            sketch.width(),
        )
    }

    /// Labels `1..=N_c` by category position; background elsewhere.
    pub fn segment(&self, sketch: &SketchBitmap, categories: &[String]) -> Result<SegmentationMask> {
        let maps = self.similarity_maps(sketch, categories)?;
        label_from_maps(&maps.pixel_maps, sketch)
    }

    /// Segments many sketches in parallel, preserving order.
    pub fn segment_all(&self, jobs: &[(&SketchBitmap, &[String])]) -> Result<Vec<SegmentationMask>> {
        parallel::map(jobs, |(s, c)| self.segment(s, c))
            .into_iter()
            .collect()
    }

    pub fn isolate_category(
        &self,
        sketch: &SketchBitmap,
        categories: &[String],
        category: &str,
        tau: f32,
    ) -> Result<SketchBitmap> {
        let maps = self.similarity_maps(sketch, categories)?;
        isolate_category(&maps, sketch, category, tau)
    }
}

/// Per-pixel argmax over `pixel_maps` on ink pixels; the lowest index wins
/// ties.
pub fn label_from_maps(pixel_maps: &[Array<f32>], sketch: &SketchBitmap) -> Result<SegmentationMask> {
    if pixel_maps.is_empty() {
        return Err(Error::Contract("segmentation needs at least one category".into()));
    }
    if pixel_maps.len() > u16::MAX as usize {
        return Err(Error::Contract("too many categories".into()));
    }
    let (h, w) = (sketch.height(), sketch.width());
    for m in pixel_maps {
        if m.shape() != [h, w] {
            return Err(Error::dim("label_from_maps", m.shape(), &[h, w]));
        }
    }
    let labels = sketch
        .ink_mask()
        .into_iter()
        .enumerate()
        .map(|(i, ink)| {
            if !ink {
                return BACKGROUND;
            }
            let mut best = 0;
            for c in 1..pixel_maps.len() {
                if pixel_maps[c].data()[i] > pixel_maps[best].data()[i] {
                    best = c;
                }
            }
            best as u16 + 1
        })
        .collect();
    SegmentationMask::new(h, w, labels)
}

/// Ink pixels whose map value, clamped to `[0, 1]`, is at least `tau`;
/// hard threshold.
pub fn isolate_category(
    maps: &SimilarityMaps,
    sketch: &SketchBitmap,
    category: &str,
    tau: f32,
) -> Result<SketchBitmap> {
    let c = maps
        .index_of(category)
        .ok_or_else(|| Error::Contract(format!("unknown category '{category}'")))?;
    let map = &maps.pixel_maps[c];
    if map.shape() != sketch.intensity().shape() {
        return Err(Error::dim("isolate_category", map.shape(), sketch.intensity().shape()));
    }
    let keep: Vec<bool> = sketch
        .ink_mask()
        .into_iter()
        .zip(map.data())
        .map(|(ink, &m)| ink && m.clamp(0.0, 1.0) >= tau)
        .collect();
    Ok(sketch.masked(&keep))
}

/// Modal non-background label of every stroke.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StrokeLabels {
    pub labels: BTreeMap<u32, u16>,
    /// Strokes with no labelled pixel; they map to background.
    pub unlabeled: Vec<u32>,
}

pub fn stroke_labels(mask: &SegmentationMask, strokes: &[Stroke]) -> StrokeLabels {
    let (h, w) = mask.dims();
    let mut out = StrokeLabels::default();
    for s in strokes {
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for (r, c) in s.pixels(h, w) {
            let l = mask.get(r, c);
            if l != BACKGROUND {
                *counts.entry(l).or_default() += 1;
            }
        }
        // BTreeMap iterates ascending, so strict > keeps the lowest id on ties
        let mut best: Option<(u16, usize)> = None;
        for (&l, &n) in &counts {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((l, n));
            }
        }
        match best {
            Some((l, _)) => {
                out.labels.insert(s.id, l);
            }
            None => {
                out.labels.insert(s.id, BACKGROUND);
                out.unlabeled.push(s.id);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sketch(h: usize, w: usize) -> SketchBitmap {
        SketchBitmap::new(Array::full(&[h, w], 1.0)).unwrap()
    }

    #[test]
    fn dominant_map_wins() {
        let s = sketch(2, 2);
        let a = Array::full(&[2, 2], 0.8);
        let b = Array::full(&[2, 2], 0.2);
        let m = label_from_maps(&[a, b], &s).unwrap();
        assert!(m.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = sketch(1, 2);
        let a = Array::new(vec![1, 2], vec![0.5, 0.1]).unwrap();
        let b = Array::new(vec![1, 2], vec![0.5, 0.9]).unwrap();
        assert_eq!(label_from_maps(&[a, b], &s).unwrap().labels(), &[1, 2]);
    }

    #[test]
    fn background_stays_background() {
        let s = SketchBitmap::new(Array::new(vec![1, 3], vec![1.0, 0.2, 0.6]).unwrap()).unwrap();
        let a = Array::full(&[1, 3], 0.3);
        assert_eq!(label_from_maps(&[a], &s).unwrap().labels(), &[1, 0, 1]);
        assert!(label_from_maps(&[], &s).is_err());
    }

    #[test]
    fn isolation_thresholds() {
        let s = sketch(2, 2);
        let half = SimilarityMaps {
            patch_maps: Array::full(&[1, 1], 0.5),
            pixel_maps: vec![Array::full(&[2, 2], 0.5)],
            categories: vec!["cat".into()],
        };
        assert_eq!(isolate_category(&half, &s, "cat", ISOLATION_TAU).unwrap().ink_count(), 0);
        let high = SimilarityMaps {
            pixel_maps: vec![Array::full(&[2, 2], 0.9)],
            ..half.clone()
        };
        assert_eq!(isolate_category(&high, &s, "cat", ISOLATION_TAU).unwrap(), s);
        assert!(isolate_category(&half, &s, "dog", 0.5).is_err());
        let negative = SimilarityMaps {
            pixel_maps: vec![Array::full(&[2, 2], -0.4)],
            ..half.clone()
        };
        assert_eq!(isolate_category(&negative, &s, "cat", 0.0).unwrap(), s);
    }

    #[test]
    fn stroke_modal_labels() {
        let mask = SegmentationMask::new(1, 4, vec![3, 3, 5, 5]).unwrap();
        let tie = Stroke::new(0, vec![[0.0, 0.0], [3.0, 0.0]]);
        let major = Stroke::new(1, vec![[0.0, 0.0], [2.0, 0.0]]);
        let uniform = Stroke::new(2, vec![[2.0, 0.0], [3.0, 0.0]]);
        let out = stroke_labels(&mask, &[tie, major, uniform]);
        assert_eq!(out.labels[&0], 3);
        assert_eq!(out.labels[&1], 3);
        assert_eq!(out.labels[&2], 5);
        assert!(out.unlabeled.is_empty());

        let blank = SegmentationMask::background(1, 4);
        let out = stroke_labels(&blank, &[Stroke::new(7, vec![[0.0, 0.0], [1.0, 0.0]])]);
        assert_eq!(out.labels[&7], BACKGROUND);
        assert_eq!(out.unlabeled, vec![7]);
    }
}
