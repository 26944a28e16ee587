use crate::{Error, Result};

/// Label reserved for blank paper. Never counted by any metric.
pub const BACKGROUND: u16 = 0;

/// Per-pixel integer labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim("SegmentationMask", &[height, width], &[labels.len()]));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![BACKGROUND; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.labels[r * self.width + c]
    }

    /// Distinct non-background labels in ascending order.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut v: Vec<u16> = self
            .labels
            .iter()
            .copied()
            .filter(|&l| l != BACKGROUND)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Applies `f` to every non-background label.
    pub fn relabel(&self, f: impl Fn(u16) -> u16) -> Self {
        Self {
            height: self.height,
            width: self.width,
            labels: self
                .labels
                .iter()
                .map(|&l| if l == BACKGROUND { l } else { f(l) })
                .collect(),
        }
    }
}
