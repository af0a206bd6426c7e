use serde::{Deserialize, Serialize};

use super::ClipBundle;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Strided frame selection followed by per-channel normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameSampling {
    pub frames: usize,
    pub rate: usize,
    /// Per-channel mean; a single value applies to every channel.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for FrameSampling {
    fn default() -> Self {
        Self {
            frames: 16,
            rate: 2,
            mean: vec![0.5],
            std: vec![0.5],
        }
    }
}

impl FrameSampling {
    pub fn required_frames(&self) -> usize {
        (self.frames.saturating_sub(1)) * self.rate + 1
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.frames).map(|i| i * self.rate).collect()
    }

    fn channel_constant(values: &[f32], c: usize, what: &str) -> Result<f32> {
        match values {
            [v] => Ok(*v),
            vs if c < vs.len() => Ok(vs[c]),
            vs => Err(Error::config(
                format!("sampling.{what}"),
                format!("{} values for channel {c}", vs.len()),
            )),
        }
    }
}

/// Picks frames `0, rate, ..., (frames - 1) * rate` and maps each pixel to
/// `(x - mean[c]) / std[c]`, returning `[C, frames, H, W]`.
pub fn sample_frames<T: Scalar>(clip: &ClipBundle, sampling: &FrameSampling) -> Result<Tensor<T>> {
    if sampling.frames == 0 || sampling.rate == 0 {
        return Err(Error::contract("frame count and rate must be positive"));
    }
    let g = clip.geometry();
    let required = sampling.required_frames();
    if required > g.frames {
        return Err(Error::Length {
            required,
            available: g.frames,
        });
    }
    let plane = g.height * g.width;
    let mut out = Vec::with_capacity(g.channels * sampling.frames * plane);
    for c in 0..g.channels {
        let mean = FrameSampling::channel_constant(&sampling.mean, c, "mean")?;
        let std = FrameSampling::channel_constant(&sampling.std, c, "std")?;
        if std <= 0.0 {
            return Err(Error::config("sampling.std", "must be positive"));
        }
        for t in sampling.indices() {
            let start = (c * g.frames + t) * plane;
            out.extend(
                clip.frames()[start..start + plane]
                    .iter()
                    .map(|&v| T::lit(f64::from((v - mean) / std))),
            );
        }
    }
    Tensor::new(vec![g.channels, sampling.frames, g.height, g.width], out)
}
