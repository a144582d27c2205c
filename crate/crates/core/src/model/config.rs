use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vision;

/// Architecture hyperparameters. `Default` is the full-size configuration
/// (12 encoder / 4 decoder layers, width 768, 12 heads, 384×384 input,
/// 16×16 patches).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    /// Length of the decoder position table (input tokens including BOS).
    pub max_caption_len: usize,
    pub dropout_p: f64,
    /// Apply `dropout_p` to attention weights as well as inside the FFN.
    pub attention_dropout: bool,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_enc_layers: 12,
            n_dec_layers: 4,
            d_model: 768,
            n_heads: 12,
            d_ffn: 4 * 768,
            vocab_size: 10_000,
            max_caption_len: 32,
            dropout_p: 0.1,
            attention_dropout: true,
            patch_size: 16,
            image_height: 384,
            image_width: 384,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 2+2 layers, width 64, 4 heads, 64×64 images with 8×8 patches.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size,
            max_caption_len: 24,
            dropout_p: 0.0,
            attention_dropout: true,
            patch_size: 8,
            image_height: 64,
            image_width: 64,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_caption_len", self.max_caption_len),
            ("patch_size", self.patch_size),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let limits = [
            ("n_enc_layers", self.n_enc_layers, 256),
            ("n_dec_layers", self.n_dec_layers, 256),
            ("d_model", self.d_model, 1 << 16),
            ("d_ffn", self.d_ffn, 1 << 18),
            ("vocab_size", self.vocab_size, 1 << 22),
            ("max_caption_len", self.max_caption_len, 4096),
            ("image_height", self.image_height, 1 << 14),
            ("image_width", self.image_width, 1 << 14),
        ];
        for (name, v, max) in limits {
            if v > max {
                return Err(Error::Config(format!("{name} {v} exceeds the supported maximum {max}")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model {} must be even for sinusoid positions", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        vision::patch_count(self.image_height, self.image_width, self.patch_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn n_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * vision::CHANNELS
    }
}
