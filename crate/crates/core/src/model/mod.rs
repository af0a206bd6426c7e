//! Masked video autoencoder with a CLS-token classification head.
//!
//! The encoder sees visible tubelet tokens with fixed sinusoidal positions.
//! The decoder fills masked grid positions with a learned mask token and
//! reconstructs their pixels. For forecasting, a CLS embedding is prepended
//! to the full token sequence and `sigmoid(W . z_cls + b)` is the seizure
//! probability.

mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tubelet::TubeletGrid;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance, Stage, CKPT_MAGIC, CKPT_VERSION};
pub use forward::{classify_forward, decode_reconstruct, encode, pretrain_forward, ParamGrads, Session};
pub use params::{init_params, sinusoidal_table, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Sampled input shape `[C, T, H, W]`.
    pub frame_shape: [usize; 4],
    pub tubelet: [usize; 3],
    pub encoder: StackConfig,
    pub decoder: StackConfig,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_shape: [1, 16, 32, 32],
            tubelet: [2, 8, 8],
            encoder: StackConfig {
                dim: 64,
                depth: 4,
                heads: 4,
            },
            decoder: StackConfig {
                dim: 32,
                depth: 2,
                heads: 2,
            },
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Result<TubeletGrid> {
        TubeletGrid::new(self.frame_shape, self.tubelet)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        for (name, s) in [("encoder", self.encoder), ("decoder", self.decoder)] {
            if s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0 {
                return Err(Error::config(
                    format!("model.{name}"),
                    format!("dim {} must be a positive multiple of heads {}", s.dim, s.heads),
                ));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("model.mlp_ratio", "must be positive"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("model.ln_eps", "must be positive"));
        }
        Ok(())
    }

    /// Names of fields that differ in ways that break encoder transfer.
    pub fn encoder_mismatches(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        if self.frame_shape != other.frame_shape {
            out.push(format!("frame_shape ({:?} vs {:?})", self.frame_shape, other.frame_shape));
        }
        if self.tubelet != other.tubelet {
            out.push(format!("tubelet ({:?} vs {:?})", self.tubelet, other.tubelet));
        }
        if self.encoder != other.encoder {
            out.push(format!("encoder ({:?} vs {:?})", self.encoder, other.encoder));
        }
        if self.mlp_ratio != other.mlp_ratio {
            out.push(format!("mlp_ratio ({} vs {})", self.mlp_ratio, other.mlp_ratio));
        }
        if self.ln_eps.to_bits() != other.ln_eps.to_bits() {
            out.push(format!("ln_eps ({} vs {})", self.ln_eps, other.ln_eps));
        }
        out
    }
}

#[cfg(test)]
mod tests;
