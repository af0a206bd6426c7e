//! Video clips: metadata, the `CLPB` container, the synthetic generator,
//! frame sampling and pretraining-set assembly.

pub(crate) mod container;
mod dataset;
mod generator;
mod sampling;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{load_clip, save_clip, CLIP_MAGIC, CLIP_VERSION};
pub use dataset::{
    build_fewshot_pool, build_pretrain_dataset, read_manifest, write_dataset, Configuration,
    DatasetSpec, ManifestEntry,
};
pub use generator::generate_synthetic_clip;
pub use sampling::{sample_frames, FrameSampling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Rodent,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Seizure,
    Normal,
    Preictal,
    Interictal,
}

impl Condition {
    /// Whether the clip carries the oscillatory seizure signature.
    pub fn is_ictal_like(self) -> bool {
        matches!(self, Condition::Seizure | Condition::Preictal)
    }

    /// Forecasting label: 1 for pre-ictal, 0 for interictal, none for
    /// pretraining conditions.
    pub fn label(self) -> Option<u8> {
        match self {
            Condition::Preictal => Some(1),
            Condition::Interictal => Some(0),
            Condition::Seizure | Condition::Normal => None,
        }
    }
}

macro_rules! string_enum {
    ($ty:ty, $($variant:path => $name:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::format(
                        stringify!($ty),
                        format!("unknown value `{other}`"),
                    )),
                }
            }
        }
    };
}

string_enum!(Species, Species::Rodent => "rodent", Species::Human => "human");
string_enum!(
    Condition,
    Condition::Seizure => "seizure",
    Condition::Normal => "normal",
    Condition::Preictal => "preictal",
    Condition::Interictal => "interictal",
);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: String,
    pub species: Species,
    pub condition: Condition,
    pub seed: u64,
    pub fps: u32,
}

impl ClipMeta {
    pub fn new(id: impl Into<String>, species: Species, condition: Condition, seed: u64) -> Self {
        Self {
            id: id.into(),
            species,
            condition,
            seed,
            fps: 4,
        }
    }

    pub fn label(&self) -> Option<u8> {
        self.condition.label()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['\n', '\r']) {
            return Err(Error::contract(format!("invalid clip id {:?}", self.id)));
        }
        if self.fps == 0 {
            return Err(Error::contract("fps must be positive"));
        }
        Ok(())
    }
}

/// Clip extent as channels x frames x height x width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipGeometry {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ClipGeometry {
    fn default() -> Self {
        Self {
            channels: 1,
            frames: 40,
            height: 32,
            width: 32,
        }
    }
}

impl ClipGeometry {
    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::contract(format!(
                "clip dimensions must be positive, got {:?}",
                self.dims()
            )));
        }
        Ok(())
    }
}

/// One clip: metadata plus `[C, T, H, W]` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBundle {
    pub meta: ClipMeta,
    geometry: ClipGeometry,
    frames: Vec<f32>,
}

impl ClipBundle {
    pub fn new(meta: ClipMeta, geometry: ClipGeometry, frames: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        meta.validate()?;
        if frames.len() != geometry.numel() {
            return Err(Error::dim(format!(
                "clip {:?} holds {} values, expected {}",
                geometry.dims(),
                frames.len(),
                geometry.numel()
            )));
        }
        if let Some(bad) = frames.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract(format!(
                "pixel {bad} = {} outside [0, 1]",
                frames[bad]
            )));
        }
        Ok(Self {
            meta,
            geometry,
            frames,
        })
    }

    pub fn geometry(&self) -> ClipGeometry {
        self.geometry
    }

    /// Raw pixels in `[C, T, H, W]` row-major order.
    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn pixel(&self, c: usize, t: usize, y: usize, x: usize) -> f32 {
        let g = self.geometry;
        self.frames[((c * g.frames + t) * g.height + y) * g.width + x]
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_identical(&self, other: &ClipBundle) -> bool {
        self.meta == other.meta
            && self.geometry == other.geometry
            && self.frames.len() == other.frames.len()
            && self
                .frames
                .iter()
                .zip(&other.frames)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
