//! 8-bit PNG reading and writing for sketches, label masks and overlays.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use super::bitmap::SketchBitmap;
use super::mask::SegmentationMask;
use crate::numerics::Array;
use crate::{Error, Result};

/// Fixed overlay palette keyed by category index (label 1 uses entry 0).
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
];

pub fn label_color(label: u16) -> [u8; 3] {
    if label == 0 {
        [255, 255, 255]
    } else {
        PALETTE[(label as usize - 1) % PALETTE.len()]
    }
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn decode(path: &Path, expand: bool) -> Result<(Decoded, ColorType)> {
    let file = File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(if expand {
        Transformations::EXPAND | Transformations::STRIP_16
    } else {
        Transformations::IDENTITY
    });
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::load(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::load(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::load(path, e.to_string()))?;
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::load(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((
        Decoded {
            width: info.width as usize,
            height: info.height as usize,
            channels,
            data: buf,
        },
        info.color_type,
    ))
}

/// Reads a sketch: 0 = white paper, 255 = ink. Colour images are averaged
/// over their colour channels; alpha scales the ink.
pub fn read_sketch(path: &Path) -> Result<SketchBitmap> {
    let (img, color) = decode(path, true)?;
    let px = img.data.chunks(img.channels).map(|p| {
        let v = match color {
            ColorType::Grayscale => p[0] as f32,
            ColorType::GrayscaleAlpha => p[0] as f32 * p[1] as f32 / 255.0,
            ColorType::Rgb => (p[0] as f32 + p[1] as f32 + p[2] as f32) / 3.0,
            ColorType::Rgba => {
                (p[0] as f32 + p[1] as f32 + p[2] as f32) / 3.0 * p[3] as f32 / 255.0
            }
            ColorType::Indexed => unreachable!("expanded"),
        };
        v / 255.0
    });
    let intensity = Array::new(vec![img.height, img.width], px.collect())?;
    SketchBitmap::new(intensity)
}

/// Reads a label mask stored as 8-bit grayscale or palette indices.
pub fn read_mask(path: &Path) -> Result<SegmentationMask> {
    let (img, color) = decode(path, false)?;
    if !matches!(color, ColorType::Grayscale | ColorType::Indexed) {
        return Err(Error::load(path, format!("mask must be single-channel, got {color:?}")));
    }
    let labels = img.data.iter().map(|&v| v as u16).collect();
    SegmentationMask::new(img.height, img.width, labels)
}

fn encode(
    width: usize,
    height: usize,
    color: ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn encode_sketch(bmp: &SketchBitmap) -> Result<Vec<u8>> {
    let data: Vec<u8> = bmp
        .intensity()
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    encode(bmp.width(), bmp.height(), ColorType::Grayscale, None, &data)
}

pub fn write_sketch(path: &Path, bmp: &SketchBitmap) -> Result<()> {
    write_bytes(path, &encode_sketch(bmp)?)
}

fn mask_bytes(mask: &SegmentationMask) -> Result<Vec<u8>> {
    mask.labels()
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| Error::Contract(format!("label {l} does not fit in 8 bits")))
        })
        .collect()
}

/// Plain 8-bit grayscale label mask (dataset ground truth format).
pub fn write_mask(path: &Path, mask: &SegmentationMask) -> Result<()> {
    let data = mask_bytes(mask)?;
    write_bytes(
        path,
        &encode(mask.width(), mask.height(), ColorType::Grayscale, None, &data)?,
    )
}

/// Palette-indexed label mask: index = label, colours from [`PALETTE`].
pub fn encode_indexed_mask(mask: &SegmentationMask) -> Result<Vec<u8>> {
    let data = mask_bytes(mask)?;
    let max = data.iter().copied().max().unwrap_or(0) as u16;
    let palette: Vec<u8> = (0..=max).flat_map(label_color).collect();
    encode(mask.width(), mask.height(), ColorType::Indexed, Some(palette), &data)
}

/// RGB overlay: ink pixels coloured by label, everything else white.
pub fn encode_overlay(bmp: &SketchBitmap, mask: &SegmentationMask) -> Result<Vec<u8>> {
    let ink = bmp.ink_mask();
    let mut data = Vec::with_capacity(ink.len() * 3);
    for (&is_ink, &l) in ink.iter().zip(mask.labels()) {
        let c = match (is_ink, l) {
            (false, _) => [255, 255, 255],
            (true, 0) => [0, 0, 0],
            (true, l) => label_color(l),
        };
        data.extend_from_slice(&c);
    }
    encode(bmp.width(), bmp.height(), ColorType::Rgb, None, &data)
}

pub fn write_png_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_bytes(path, bytes)
}
