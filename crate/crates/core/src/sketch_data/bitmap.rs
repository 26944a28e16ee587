use serde::{Deserialize, Serialize};

use crate::numerics::{Array, Scalar};
use crate::{Error, Result};

/// Intensities at or above this value are ink.
pub const INK_THRESHOLD: f32 = 0.5;

/// Grayscale ink raster, `1.0` = ink and `0.0` = blank paper.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchBitmap {
    intensity: Array<f32>,
}

impl SketchBitmap {
    pub fn new(intensity: Array<f32>) -> Result<Self> {
        if intensity.shape().len() != 2 {
            return Err(Error::dim("SketchBitmap", intensity.shape(), &[0, 0]));
        }
        if let Some(bad) = intensity.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { intensity })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            intensity: Array::zeros(&[height, width]),
        }
    }

    pub fn height(&self) -> usize {
        self.intensity.rows()
    }

    pub fn width(&self) -> usize {
        self.intensity.cols()
    }

    pub fn intensity(&self) -> &Array<f32> {
        &self.intensity
    }

    pub fn ink_mask(&self) -> Vec<bool> {
        self.intensity
            .data()
            .iter()
            .map(|&v| v >= INK_THRESHOLD)
            .collect()
    }

    pub fn ink_count(&self) -> usize {
        self.ink_mask().into_iter().filter(|&b| b).count()
    }

    /// Copy with `keep[i] == false` pixels blanked.
    pub fn masked(&self, keep: &[bool]) -> Self {
        let mut out = self.intensity.clone();
        for (v, &k) in out.data_mut().iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
        Self { intensity: out }
    }

    fn set_ink(&mut self, x: i64, y: i64) {
        let (h, w) = (self.height() as i64, self.width() as i64);
        if (0..w).contains(&x) && (0..h).contains(&y) {
            self.intensity.set(y as usize, x as usize, 1.0);
        }
    }
}

/// A polyline stroke in pixel coordinates, `x` = column and `y` = row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub id: u32,
    pub points: Vec<[f32; 2]>,
    #[serde(default = "default_width")]
    pub width: u32,
}

fn default_width() -> u32 {
    1
}

impl Stroke {
    pub fn new(id: u32, points: Vec<[f32; 2]>) -> Self {
        Self {
            id,
            points,
            width: 1,
        }
    }

    pub fn with_width(mut self, width: u32) -> Self {
        self.width = width.max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Contract(format!(
                "stroke {} has {} point(s), need at least 2",
                self.id,
                self.points.len()
            )));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("stroke {} has non-finite points", self.id)));
        }
        Ok(())
    }

    /// Pixels covered by this stroke, in traversal order, possibly with
    /// repeats. Points are rounded and clamped into the `h × w` frame.
    pub fn pixels(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let clamp = |p: [f32; 2]| {
            (
                (p[0].round() as i64).clamp(0, w as i64 - 1),
                (p[1].round() as i64).clamp(0, h as i64 - 1),
            )
        };
        let mut centre_line = Vec::new();
        match self.points.as_slice() {
            [] => {}
            [p] => centre_line.push(clamp(*p)),
            pts => {
                for seg in pts.windows(2) {
                    line_walk(clamp(seg[0]), clamp(seg[1]), &mut centre_line);
                }
            }
        }
        let width = self.width.max(1) as i64;
        let lo = -(width - 1) / 2;
        let mut out = Vec::with_capacity(centre_line.len() * (width * width) as usize);
        for (x, y) in centre_line {
            for dy in lo..lo + width {
                for dx in lo..lo + width {
                    let (px, py) = (x + dx, y + dy);
                    if (0..w as i64).contains(&px) && (0..h as i64).contains(&py) {
                        out.push((py as usize, px as usize));
                    }
                }
            }
        }
        out
    }
}

/// Integer line traversal (Bresenham) from `a` to `b`, both endpoints included.
fn line_walk(a: (i64, i64), b: (i64, i64), out: &mut Vec<(i64, i64)>) {
    let (mut x, mut y) = a;
    let dx = (b.0 - x).abs();
    let dy = -(b.1 - y).abs();
    let sx = if x < b.0 { 1 } else { -1 };
    let sy = if y < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        out.push((x, y));
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn rasterize_strokes(strokes: &[Stroke], h: usize, w: usize) -> SketchBitmap {
    let mut bmp = SketchBitmap::blank(h, w);
    for s in strokes {
        for (r, c) in s.pixels(h, w) {
            bmp.set_ink(c as i64, r as i64);
        }
    }
    bmp
}

/// Index map taking a row-major `h × w` field to `K × patch²` rows, patches
/// in row-major order and each patch flattened row-major.
pub fn patch_index(h: usize, w: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::dim("patchify", &[h, w], &[patch, patch]));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut idx = Vec::with_capacity(h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                for c in 0..patch {
                    idx.push((pr * patch + r) * w + pc * patch + c);
                }
            }
        }
    }
    Ok(idx)
}

/// Splits a field into `K = (h/p)·(w/p)` flattened patches (one per row).
pub fn patchify<T: Scalar>(field: &Array<T>, patch: usize) -> Result<Array<T>> {
    let (h, w) = (field.rows(), field.cols());
    let idx = patch_index(h, w, patch)?;
    let data = idx.iter().map(|&i| field.data()[i]).collect();
    Array::new(vec![(h / patch) * (w / patch), patch * patch], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Array<T>, h: usize, w: usize, patch: usize) -> Result<Array<T>> {
    let idx = patch_index(h, w, patch)?;
    if patches.len() != idx.len() {
        return Err(Error::dim("unpatchify", patches.shape(), &[h, w]));
    }
    let mut out = vec![T::zero(); h * w];
    for (&dst, &v) in idx.iter().zip(patches.data()) {
        out[dst] = v;
    }
    Array::new(vec![h, w], out)
}
