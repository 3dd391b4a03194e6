use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::dataset::MAX_TEXT_LEN;
use crate::mask::DEFAULT_MASK_THRESHOLD;
use crate::nn::layers::{DecoderLayer, EncoderBlock, LayerNorm, Linear};

pub const DEFAULT_LOW_GROUP_TOKENS: usize = 64;
pub const DEFAULT_HIGH_GROUP_TOKENS: usize = 8;
pub const IMAGE_CHANNELS: usize = 3;

/// Architecture hyperparameters.
///
/// Setting `n_low_group` or `n_high_group` to zero disables that token bank
/// together with its region filter. With both banks disabled the second
/// decoder stage has nothing to integrate and is dropped as well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub visual_layers: usize,
    pub text_layers: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub n_low_group: usize,
    pub n_high_group: usize,
    pub decoder_layers_stage1: usize,
    pub decoder_layers_stage2: usize,
    pub mask_threshold: f32,
}

impl Default for ModelConfig {
    /// ViT-B/16-sized configuration.
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 512,
            num_heads: 512 / 32,
            visual_layers: 12,
            text_layers: 12,
            vocab_size: 49_408,
            max_text_len: MAX_TEXT_LEN,
            n_low_group: DEFAULT_LOW_GROUP_TOKENS,
            n_high_group: DEFAULT_HIGH_GROUP_TOKENS,
            decoder_layers_stage1: 2,
            decoder_layers_stage2: 1,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks and CPU experiments.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            num_heads: 2,
            visual_layers: 4,
            text_layers: 2,
            vocab_size: 32,
            max_text_len: MAX_TEXT_LEN,
            n_low_group: 4,
            n_high_group: 2,
            decoder_layers_stage1: 1,
            decoder_layers_stage2: 1,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
        }
    }

    /// Fine-grid configuration for fitting small synthetic sets: 2-pixel
    /// patches keep upsampled mask boundaries within a pixel of the truth.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            patch_size: 2,
            ..Self::tiny()
        }
    }

    /// [`ModelConfig::tiny`] carrying the full-size 64 + 8 token banks.
    pub fn default_groups_tiny() -> Self {
        Self {
            n_low_group: DEFAULT_LOW_GROUP_TOKENS,
            n_high_group: DEFAULT_HIGH_GROUP_TOKENS,
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "num_heads {} must divide embed_dim {}",
                self.num_heads, self.embed_dim
            ));
        }
        if self.visual_layers < 2 || self.visual_layers % 2 != 0 {
            return bad(format!("visual_layers must be even and >= 2, got {}", self.visual_layers));
        }
        if self.text_layers == 0 {
            return bad("text_layers must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.max_text_len < 3 {
            return bad(format!("max_text_len must be >= 3, got {}", self.max_text_len));
        }
        if self.decoder_layers_stage1 == 0 {
            return bad("decoder_layers_stage1 must be positive".into());
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad(format!("mask_threshold {} outside (0, 1)", self.mask_threshold));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * IMAGE_CHANNELS
    }

    pub fn has_groups(&self) -> bool {
        self.n_low_group + self.n_high_group > 0
    }

    /// Stage-2 depth actually instantiated.
    pub fn effective_stage2_layers(&self) -> usize {
        if self.has_groups() {
            self.decoder_layers_stage2
        } else {
            0
        }
    }

    /// Sequence length through the first half of the visual encoder.
    pub fn first_half_len(&self) -> usize {
        self.num_patches() + self.n_low_group
    }

    /// Sequence length through the second half of the visual encoder.
    pub fn second_half_len(&self) -> usize {
        self.first_half_len() + self.n_high_group
    }

    pub fn num_region_tokens(&self) -> usize {
        self.n_low_group + self.n_high_group
    }

    /// Scalars owned by one region filter (query, key and value maps).
    pub fn region_filter_scalars(&self) -> usize {
        3 * Linear::scalar_count(self.embed_dim, self.embed_dim)
    }

    /// Exact trainable-scalar count of the model this config builds.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let banks = [self.n_low_group, self.n_high_group];
        let visual = Linear::scalar_count(self.patch_dim(), d)
            + self.num_patches() * d
            + banks.iter().map(|n| n * d).sum::<usize>()
            + self.visual_layers * EncoderBlock::scalar_count(d)
            + LayerNorm::scalar_count(d);
        let text = self.vocab_size * d
            + self.max_text_len * d
            + self.text_layers * EncoderBlock::scalar_count(d)
            + LayerNorm::scalar_count(d);
        let filters = banks.iter().filter(|&&n| n > 0).count() * self.region_filter_scalars();
        let decoder = (self.decoder_layers_stage1 + self.effective_stage2_layers())
            * DecoderLayer::scalar_count(d)
            + LayerNorm::scalar_count(d)
            + Linear::scalar_count(d, 1);
        visual + text + filters + decoder
    }
}

