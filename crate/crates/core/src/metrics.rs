//! Segmentation metrics over ground-truth ink pixels.
//!
//! A pixel is evaluated when its ground-truth label is not background.
//! Categories count towards averages when they occur in the ground truth or
//! the prediction on evaluated pixels. Predicted background on an evaluated
//! pixel is simply wrong.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sketch_data::{SegmentationMask, BACKGROUND};
use crate::{Error, Result};

/// `counts[(gt, pred)]` over evaluated pixels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    counts: BTreeMap<(u16, u16), u64>,
}

impl Confusion {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_masks(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<Self> {
        let mut c = Self::new();
        c.add(pred, gt)?;
        Ok(c)
    }

    pub fn add(&mut self, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<()> {
        if pred.dims() != gt.dims() {
            let (a, b) = (pred.dims(), gt.dims());
            return Err(Error::dim("metrics", &[a.0, a.1], &[b.0, b.1]));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g != BACKGROUND {
                *self.counts.entry((g, p)).or_default() += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (&k, &n) in &other.counts {
            *self.counts.entry(k).or_default() += n;
        }
    }

    pub fn count(&self, gt: u16, pred: u16) -> u64 {
        self.counts.get(&(gt, pred)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts
            .iter()
            .filter(|((g, p), _)| g == p)
            .map(|(_, n)| n)
            .sum()
    }

    /// Ground-truth pixels of `c`.
    pub fn support(&self, c: u16) -> u64 {
        self.counts.iter().filter(|((g, _), _)| *g == c).map(|(_, n)| n).sum()
    }

    /// Pixels predicted as `c`.
    pub fn predicted(&self, c: u16) -> u64 {
        self.counts.iter().filter(|((_, p), _)| *p == c).map(|(_, n)| n).sum()
    }

    /// Non-background categories present in the ground truth or prediction.
    pub fn categories(&self) -> BTreeSet<u16> {
        self.counts
            .keys()
            .flat_map(|&(g, p)| [g, p])
            .filter(|&c| c != BACKGROUND)
            .collect()
    }

    pub fn gt_categories(&self) -> BTreeSet<u16> {
        self.counts.keys().map(|&(g, _)| g).collect()
    }

    pub fn iou(&self, c: u16) -> f64 {
        let tp = self.count(c, c);
        let union = self.support(c) + self.predicted(c) - tp;
        if union == 0 {
            0.0
        } else {
            tp as f64 / union as f64
        }
    }

    pub fn recall(&self, c: u16) -> f64 {
        let s = self.support(c);
        if s == 0 {
            0.0
        } else {
            self.count(c, c) as f64 / s as f64
        }
    }

    fn require_pixels(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::Contract("no ground-truth ink pixels to evaluate".into()))
        } else {
            Ok(())
        }
    }

    pub fn acc_pixel(&self) -> Result<f64> {
        self.require_pixels()?;
        Ok(self.correct() as f64 / self.total() as f64)
    }

    /// Mean IoU and the per-category IoU it averages.
    pub fn miou(&self) -> Result<(f64, BTreeMap<u16, f64>)> {
        self.require_pixels()?;
        let per: BTreeMap<u16, f64> = self.categories().into_iter().map(|c| (c, self.iou(c))).collect();
        let mean = per.values().sum::<f64>() / per.len() as f64;
        Ok((mean, per))
    }

    /// Mean per-category recall over ground-truth categories.
    pub fn mean_acc(&self) -> Result<f64> {
        self.require_pixels()?;
        let cats = self.gt_categories();
        Ok(cats.iter().map(|&c| self.recall(c)).sum::<f64>() / cats.len() as f64)
    }

    /// IoU weighted by ground-truth frequency.
    pub fn fwiou(&self) -> Result<f64> {
        self.require_pixels()?;
        let total = self.total() as f64;
        Ok(self
            .gt_categories()
            .into_iter()
            .map(|c| self.support(c) as f64 / total * self.iou(c))
            .sum())
    }
}

pub fn acc_pixel(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    Confusion::from_masks(pred, gt)?.acc_pixel()
}

pub fn miou(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<(f64, BTreeMap<u16, f64>)> {
    Confusion::from_masks(pred, gt)?.miou()
}

pub fn mean_acc(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    Confusion::from_masks(pred, gt)?.mean_acc()
}

pub fn fwiou(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    Confusion::from_masks(pred, gt)?.fwiou()
}

/// Fraction of strokes whose predicted label equals the ground truth.
/// Stroke ids must match exactly.
pub fn acc_stroke(pred: &BTreeMap<u32, u16>, gt: &BTreeMap<u32, u16>) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Contract("no strokes to evaluate".into()));
    }
    if pred.keys().ne(gt.keys()) {
        return Err(Error::Contract("predicted and ground-truth stroke ids differ".into()));
    }
    let correct = pred.iter().filter(|(k, v)| gt[*k] == **v).count();
    Ok(correct as f64 / gt.len() as f64)
}

/// Pearson correlation in its single-pass sum form.
pub fn pearson_corr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::dim("pearson_corr", &[x.len()], &[y.len()]));
    }
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if !(vx > 0.0 && vy > 0.0) {
        return Err(Error::Contract("pearson_corr needs nonzero variance in both inputs".into()));
    }
    Ok(((n * sxy - sx * sy) / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-pixel modal label across annotators; ties drawn uniformly with a
/// seeded generator, pixel by pixel in row-major order.
pub fn majority_vote(masks: &[SegmentationMask], seed: u64) -> Result<SegmentationMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Contract("majority vote needs at least one mask".into()))?;
    let (h, w) = first.dims();
    if let Some(m) = masks.iter().find(|m| m.dims() != (h, w)) {
        return Err(Error::dim("majority_vote", &[h, w], &[m.height(), m.width()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(h * w);
    let mut votes: BTreeMap<u16, usize> = BTreeMap::new();
    for i in 0..h * w {
        votes.clear();
        for m in masks {
            *votes.entry(m.labels()[i]).or_default() += 1;
        }
        let top = *votes.values().max().expect("at least one vote");
        let tied: Vec<u16> = votes.iter().filter(|(_, &n)| n == top).map(|(&l, _)| l).collect();
        let pick = if tied.len() == 1 {
            tied[0]
        } else {
            tied[rng.random_range(0..tied.len())]
        };
        labels.push(pick);
    }
    SegmentationMask::new(h, w, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub iou: f64,
    /// Per-category pixel accuracy (recall).
    pub acc: f64,
    /// Ground-truth ink pixels.
    pub support: u64,
}

/// Aggregate evaluation report; pixel metrics come from the confusion
/// counts summed over all items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_pixel: f64,
    /// `None` when no stroke data is available.
    pub acc_stroke: Option<f64>,
    pub miou: f64,
    pub mean_acc: f64,
    pub fwiou: f64,
    pub per_category: BTreeMap<String, CategoryReport>,
    /// Correlation between per-category accuracy and the number of items
    /// containing the category; `None` when undefined.
    pub acc_frequency_corr: Option<f64>,
    pub n_items: usize,
}

impl MetricsReport {
    /// `names` resolves label ids to category names.
    pub fn from_confusion(
        conf: &Confusion,
        acc_stroke: Option<f64>,
        n_items: usize,
        names: impl Fn(u16) -> String,
    ) -> Result<Self> {
        let (miou, per) = conf.miou()?;
        let per_category = per
            .into_iter()
            .map(|(c, iou)| {
                (
                    names(c),
                    CategoryReport {
                        iou,
                        acc: conf.recall(c),
                        support: conf.support(c),
                    },
                )
            })
            .collect();
        Ok(Self {
            acc_pixel: conf.acc_pixel()?,
            acc_stroke,
            miou,
            mean_acc: conf.mean_acc()?,
            fwiou: conf.fwiou()?,
            per_category,
            acc_frequency_corr: None,
            n_items,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(labels: &[u16]) -> SegmentationMask {
        SegmentationMask::new(1, labels.len(), labels.to_vec()).unwrap()
    }

    #[test]
    fn worked_example() {
        let gt = row(&[1, 1, 2, 2]);
        let pred = row(&[1, 2, 2, 2]);
        assert_eq!(acc_pixel(&pred, &gt).unwrap(), 0.75);
        let (m, per) = miou(&pred, &gt).unwrap();
        assert!((per[&1] - 0.5).abs() < 1e-15);
        assert!((per[&2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn mean_acc_and_fwiou_example() {
        let gt = row(&[1, 1, 1, 2]);
        let pred = row(&[1, 1, 2, 2]);
        assert!((mean_acc(&pred, &gt).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        // IoU_1 = 2/3, IoU_2 = 1/2, weights 3/4 and 1/4
        let expect = 0.75 * (2.0 / 3.0) + 0.25 * 0.5;
        assert!((fwiou(&pred, &gt).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_wrong() {
        let gt = row(&[0, 1, 2, 3]);
        assert_eq!(acc_pixel(&gt, &gt).unwrap(), 1.0);
        assert_eq!(miou(&gt, &gt).unwrap().0, 1.0);
        assert_eq!(fwiou(&gt, &gt).unwrap(), 1.0);
        let wrong = row(&[0, 2, 3, 1]);
        assert_eq!(acc_pixel(&wrong, &gt).unwrap(), 0.0);
    }

    #[test]
    fn unpredicted_category_counts_as_zero() {
        let gt = row(&[1, 2]);
        let pred = row(&[1, 1]);
        let (_, per) = miou(&pred, &gt).unwrap();
        assert_eq!(per[&2], 0.0);
        assert_eq!(per[&1], 0.5);
    }

    #[test]
    fn degenerate_inputs() {
        let gt = row(&[0, 0]);
        assert!(miou(&gt, &gt).is_err());
        assert!(acc_pixel(&row(&[1]), &row(&[1, 1])).is_err());
        assert!(acc_stroke(&BTreeMap::new(), &BTreeMap::new()).is_err());
        assert!(pearson_corr(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(majority_vote(&[], 0).is_err());
    }

    #[test]
    fn stroke_accuracy() {
        let gt: BTreeMap<u32, u16> = [(0, 1), (1, 2)].into();
        let half: BTreeMap<u32, u16> = [(0, 1), (1, 1)].into();
        assert_eq!(acc_stroke(&gt, &gt).unwrap(), 1.0);
        assert_eq!(acc_stroke(&half, &gt).unwrap(), 0.5);
        let other: BTreeMap<u32, u16> = [(0, 1), (5, 2)].into();
        assert!(acc_stroke(&other, &gt).is_err());
    }

    #[test]
    fn pearson_extremes() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_corr(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_corr(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn voting() {
        let a = row(&[1, 1]);
        let b = row(&[1, 2]);
        let c = row(&[2, 2]);
        assert_eq!(majority_vote(&[a.clone(), b.clone(), a.clone()], 0).unwrap().labels(), &[1, 1]);
        assert_eq!(majority_vote(std::slice::from_ref(&b), 3).unwrap(), b);
        let tie1 = majority_vote(&[a.clone(), c.clone()], 9).unwrap();
        let tie2 = majority_vote(&[a, c], 9).unwrap();
        assert_eq!(tie1, tie2);
        assert!(tie1.labels().iter().all(|&l| l == 1 || l == 2));
    }
}
