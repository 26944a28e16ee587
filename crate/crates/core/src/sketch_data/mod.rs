//! Sketch bitmaps, strokes, captions, dataset IO and synthetic data.

mod bitmap;
mod dataset;
mod mask;
pub mod png_io;
pub mod synthetic;

pub use bitmap::{
    patch_index, patchify, rasterize_strokes, unpatchify, SketchBitmap, Stroke, INK_THRESHOLD,
};
pub use dataset::{
    load_dataset, save_dataset, CaptionRecord, Dataset, DatasetItem, DatasetSplit, Role,
    Vocabulary,
};
pub use mask::{SegmentationMask, BACKGROUND};
pub use synthetic::{generate_dataset, generate_synthetic, Glyph, SynthConfig};
