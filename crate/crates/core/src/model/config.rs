use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which reconstruction targets a run trains against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Pixel and latent decoders, with the `[CLS]` latent term.
    Pilamim,
    /// Pixel decoder only (MAE-style baseline).
    PixelOnly,
    /// Latent decoder only.
    LatentOnly,
    /// Both decoders without the `[CLS]` latent term (ablation).
    PilamimNoCls,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Pilamim, Mode::PixelOnly, Mode::LatentOnly, Mode::PilamimNoCls];

    pub fn has_pixel_decoder(self) -> bool {
        !matches!(self, Mode::LatentOnly)
    }

    pub fn has_latent_decoder(self) -> bool {
        !matches!(self, Mode::PixelOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pilamim => "pilamim",
            Mode::PixelOnly => "pixel_only",
            Mode::LatentOnly => "latent_only",
            Mode::PilamimNoCls => "pilamim_no_cls",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}`")))
    }
}

/// Architecture and masking hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_depth: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub mask_ratio: f64,
    pub mode: Mode,
    /// Keep the `[CLS]` latent term in `latent_only` mode.
    pub latent_only_cls: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 32x32 images, 4x4 patches.
    pub fn desk() -> Self {
        Self {
            enc_depth: 4,
            enc_dim: 128,
            enc_heads: 4,
            dec_depth: 2,
            dec_dim: 64,
            dec_heads: 4,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            mask_ratio: 0.75,
            mode: Mode::Pilamim,
            latent_only_cls: true,
        }
    }

    /// ViT-Base encoder with the 6-block, 384-wide decoders, 224px / 16px patches.
    pub fn paper() -> Self {
        Self {
            enc_depth: 12,
            enc_dim: 768,
            enc_heads: 12,
            dec_depth: 6,
            dec_dim: 384,
            dec_heads: 12,
            patch_size: 16,
            image_size: 224,
            channels: 3,
            mask_ratio: 0.75,
            mode: Mode::Pilamim,
            latent_only_cls: true,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn n_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Flattened patch width `D_x`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Latent target width `D_t`, the encoder width.
    pub fn latent_dim(&self) -> usize {
        self.enc_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_depth", self.enc_depth),
            ("enc_dim", self.enc_dim),
            ("enc_heads", self.enc_heads),
            ("dec_dim", self.dec_dim),
            ("dec_heads", self.dec_heads),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if !self.enc_dim.is_multiple_of(self.enc_heads) {
            return Err(Error::config(
                "model.enc_heads",
                format!("enc_dim {} not divisible by {} heads", self.enc_dim, self.enc_heads),
            ));
        }
        if !self.dec_dim.is_multiple_of(self.dec_heads) {
            return Err(Error::config(
                "model.dec_heads",
                format!("dec_dim {} not divisible by {} heads", self.dec_dim, self.dec_heads),
            ));
        }
        if !self.enc_dim.is_multiple_of(2) || !self.dec_dim.is_multiple_of(2) {
            return Err(Error::config("model.enc_dim", "encoder and decoder widths must be even"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "model.image_size",
                format!("{} not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(
                "model.mask_ratio",
                format!("must lie in (0, 1), got {}", self.mask_ratio),
            ));
        }
        let n = self.n_patches();
        let m = crate::patching::masked_count(n, self.mask_ratio);
        if n < 2 || m == 0 || m >= n {
            return Err(Error::config(
                "model.mask_ratio",
                format!("{} over {n} patches masks {m}", self.mask_ratio),
            ));
        }
        Ok(())
    }
}
