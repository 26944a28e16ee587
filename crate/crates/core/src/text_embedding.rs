//! Frozen text encoder stand-in.
//!
//! Each whitespace token hashes (seeded 64-bit FNV-1a) to a fixed Gaussian
//! vector; a text is the mean of its token vectors, L2-normalised, passed
//! through one fixed random linear layer and normalised again. Vectors from
//! a precomputed table (for example real CLIP text embeddings exported
//! offline) take precedence over the stand-in.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::sketch_data::CaptionRecord;
use crate::{Error, Result};

pub const PROMPT_TEMPLATE: &str = "A sketch of ";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    /// Embedding of a whole scene caption.
    Scene,
    /// Embedding of a category prompt.
    Category,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextToken {
    pub kind: TokenKind,
    pub vector: Vec<f32>,
    pub source_text: String,
}

/// "A sketch of {category}" for each category, in order.
pub fn build_category_prompts(record: &CaptionRecord) -> Vec<String> {
    record
        .categories
        .iter()
        .map(|c| category_prompt(c))
        .collect()
}

pub fn category_prompt(category: &str) -> String {
    format!("{PROMPT_TEMPLATE}{category}")
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[derive(Deserialize)]
struct TableRow {
    text: String,
    vector: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    dim: usize,
    seed: u64,
    /// `dim × dim`, row-major.
    projection: Vec<f32>,
    table: HashMap<String, Vec<f32>>,
}

impl TextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, b"projection"));
        let scale = 1.0 / (dim as f32).sqrt();
        let projection = (0..dim * dim)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            dim,
            seed,
            projection,
            table: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Loads `{"text", "vector"}` JSONL rows into the lookup table.
    pub fn load_precomputed_embeddings(&mut self, path: &Path) -> Result<usize> {
        let f = fs::File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
        let mut n = 0;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: TableRow = serde_json::from_str(&line)
                .map_err(|e| Error::load(path, format!("line {}: {e}", i + 1)))?;
            if row.vector.len() != self.dim {
                return Err(Error::load(
                    path,
                    format!(
                        "line {}: vector has dimension {}, encoder uses {}",
                        i + 1,
                        row.vector.len(),
                        self.dim
                    ),
                ));
            }
            self.table.insert(row.text, row.vector);
            n += 1;
        }
        Ok(n)
    }

    fn token_vector(&self, token: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, token.as_bytes()));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Unit-norm embedding of `text`.
    pub fn embed(&self, text: &str) -> Result<Vec<f32>> {
        if let Some(v) = self.table.get(text) {
            let mut v = v.clone();
            normalize(&mut v);
            return Ok(v);
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Contract(format!("cannot embed empty text {text:?}")));
        }
        let mut bag = vec![0.0f32; self.dim];
        for t in &tokens {
            for (b, x) in bag.iter_mut().zip(self.token_vector(t)) {
                *b += x;
            }
        }
        normalize(&mut bag);
        let mut out: Vec<f32> = self
            .projection
            .chunks(self.dim)
            .map(|row| row.iter().zip(&bag).map(|(w, x)| w * x).sum())
            .collect();
        normalize(&mut out);
        Ok(out)
    }

    pub fn embed_text(&self, text: &str, kind: TokenKind) -> Result<TextToken> {
        Ok(TextToken {
            kind,
            vector: self.embed(text)?,
            source_text: text.to_string(),
        })
    }

    pub fn scene_token(&self, record: &CaptionRecord) -> Result<TextToken> {
        self.embed_text(&record.caption, TokenKind::Scene)
    }

    /// One category token per caption category, in caption order.
    pub fn category_tokens(&self, record: &CaptionRecord) -> Result<Vec<TextToken>> {
        build_category_prompts(record)
            .iter()
            .map(|p| self.embed_text(p, TokenKind::Category))
            .collect()
    }
}
