use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Geometry and widths of the dual-path encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Internal token width.
    pub d_model: usize,
    /// Width of the shared text-vision space.
    pub d_joint: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Number of learnable visual prompt tokens.
    pub n_prompts: usize,
    /// 1-based layers whose queries come from the category token in the
    /// category pass.
    pub cross_attn_layers: Vec<usize>,
    /// Seed for the frozen random initialisation.
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Default desk-scale configuration.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            d_model: 64,
            d_joint: 32,
            n_layers: 6,
            n_heads: 4,
            n_prompts: 3,
            cross_attn_layers: vec![3, 5, 6],
            init_seed: 0,
        }
    }

    /// The small configuration used for gradient verification.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_model: 32,
            d_joint: 16,
            n_layers: 3,
            n_heads: 4,
            n_prompts: 3,
            cross_attn_layers: vec![2, 3],
            init_seed: 0,
        }
    }

    /// ViT-B/16 geometry at 224 px. Expressible, far too slow for this
    /// CPU implementation to train.
    pub fn full_scale() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            d_model: 768,
            d_joint: 512,
            n_layers: 12,
            n_heads: 12,
            n_prompts: 3,
            cross_attn_layers: vec![7, 10, 12],
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.image_size / self.patch_size < 2 {
            return fail("need at least a 2x2 patch grid".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_joint == 0 || self.n_layers == 0 {
            return fail("d_joint and n_layers must be positive".into());
        }
        if let Some(&l) = self
            .cross_attn_layers
            .iter()
            .find(|&&l| l == 0 || l > self.n_layers)
        {
            return fail(format!("cross-attention layer {l} outside 1..={}", self.n_layers));
        }
        let mut sorted = self.cross_attn_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.cross_attn_layers {
            return fail("cross_attn_layers must be strictly increasing".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `K`.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `N_X = 1 + K + S`.
    pub fn n_tokens(&self) -> usize {
        1 + self.n_patches() + self.n_prompts
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ffn(&self) -> usize {
        4 * self.d_model
    }
}
