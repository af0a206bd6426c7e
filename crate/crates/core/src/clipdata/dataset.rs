use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::container::save_clip;
use super::generator::generate_synthetic_clip;
use super::{ClipBundle, ClipGeometry, ClipMeta, Condition, Species};
use crate::error::{Error, Result};
use crate::seeds;

/// Pretraining data composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Configuration {
    /// No continual pretraining.
    Base,
    Human,
    RodentSeizure,
    RodentNormal,
    RodentBoth,
    RodentBothHuman,
}

impl Configuration {
    pub const ALL: [Configuration; 6] = [
        Configuration::Base,
        Configuration::Human,
        Configuration::RodentSeizure,
        Configuration::RodentNormal,
        Configuration::RodentBoth,
        Configuration::RodentBothHuman,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Configuration::Base => "Base",
            Configuration::Human => "+H",
            Configuration::RodentSeizure => "+R(Y)",
            Configuration::RodentNormal => "+R(N)",
            Configuration::RodentBoth => "+R(Y/N)",
            Configuration::RodentBothHuman => "+R(Y/N)+H",
        }
    }

    /// Filesystem-safe short name.
    pub fn slug(self) -> &'static str {
        match self {
            Configuration::Base => "base",
            Configuration::Human => "h",
            Configuration::RodentSeizure => "ry",
            Configuration::RodentNormal => "rn",
            Configuration::RodentBoth => "ryn",
            Configuration::RodentBothHuman => "ryn_h",
        }
    }

    pub fn includes_rodent_seizure(self) -> bool {
        matches!(
            self,
            Configuration::RodentSeizure | Configuration::RodentBoth | Configuration::RodentBothHuman
        )
    }

    pub fn includes_rodent_normal(self) -> bool {
        matches!(
            self,
            Configuration::RodentNormal | Configuration::RodentBoth | Configuration::RodentBothHuman
        )
    }

    pub fn includes_human(self) -> bool {
        matches!(self, Configuration::Human | Configuration::RodentBothHuman)
    }

    pub fn pretrains(self) -> bool {
        self != Configuration::Base
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Configuration::ALL
            .into_iter()
            .find(|c| c.label() == s || c.slug().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(
                    "configuration",
                    format!(
                        "unknown configuration `{s}`; expected one of {}",
                        Configuration::ALL.map(|c| c.label()).join(", ")
                    ),
                )
            })
    }
}

impl Serialize for Configuration {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Configuration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Source counts for the synthetic pretraining universe. Every configuration
/// draws from the same clips, so configurations are nested subsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub configuration: Configuration,
    pub rodent_seizure: usize,
    /// Rodent-normal clips available before balancing.
    pub rodent_normal_pool: usize,
    /// Rodent-normal clips kept after seeded subsampling.
    pub rodent_normal: usize,
    pub human_normal: usize,
    pub seed: u64,
    #[serde(default)]
    pub geometry: ClipGeometry,
}

impl DatasetSpec {
    pub fn new(configuration: Configuration, seed: u64) -> Self {
        Self {
            configuration,
            rodent_seizure: 24,
            rodent_normal_pool: 96,
            rodent_normal: 24,
            human_normal: 24,
            seed,
            geometry: ClipGeometry::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.rodent_normal > self.rodent_normal_pool {
            return Err(Error::config(
                "data.rodent_normal",
                format!(
                    "cannot keep {} of {} rodent-normal clips",
                    self.rodent_normal, self.rodent_normal_pool
                ),
            ));
        }
        Ok(())
    }

    fn clip(&self, species: Species, condition: Condition, i: usize) -> Result<ClipBundle> {
        let tag = format!("{species}-{condition}");
        let seed = seeds::derive_indexed(self.seed, &tag, i as u64);
        let meta = ClipMeta::new(format!("{tag}-{i:05}"), species, condition, seed);
        generate_synthetic_clip(&meta, &self.geometry)
    }

    /// Indices of the rodent-normal clips kept for balance, ascending.
    pub fn rodent_normal_indices(&self) -> Vec<usize> {
        let mut rng = seeds::rng(seeds::derive(self.seed, "rodent-normal-subsample"));
        let mut picked = index::sample(&mut rng, self.rodent_normal_pool, self.rodent_normal).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// Rodent clips (seizure, then balanced normal) followed by human clips, as
/// selected by the configuration. `Base` yields an empty set.
pub fn build_pretrain_dataset(spec: &DatasetSpec) -> Result<Vec<ClipBundle>> {
    spec.validate()?;
    let c = spec.configuration;
    let mut out = Vec::new();
    if c.includes_rodent_seizure() {
        for i in 0..spec.rodent_seizure {
            out.push(spec.clip(Species::Rodent, Condition::Seizure, i)?);
        }
    }
    if c.includes_rodent_normal() {
        for i in spec.rodent_normal_indices() {
            out.push(spec.clip(Species::Rodent, Condition::Normal, i)?);
        }
    }
    if c.includes_human() {
        for i in 0..spec.human_normal {
            out.push(spec.clip(Species::Human, Condition::Normal, i)?);
        }
    }
    Ok(out)
}

/// Human forecasting pool of `per_class` pre-ictal and `per_class`
/// interictal clips, each with an independent seed. Ids `pool-NNN` come from
/// a seeded permutation so that id order carries no label information; the
/// result is sorted by id.
pub fn build_fewshot_pool(per_class: usize, seed: u64, geometry: &ClipGeometry) -> Result<Vec<ClipBundle>> {
    let mut slots: Vec<usize> = (0..2 * per_class).collect();
    slots.shuffle(&mut seeds::rng(seeds::derive(seed, "pool-ids")));
    let mut out = Vec::with_capacity(2 * per_class);
    for (c, (condition, tag)) in [(Condition::Preictal, "pool-pre"), (Condition::Interictal, "pool-int")]
        .into_iter()
        .enumerate()
    {
        for i in 0..per_class {
            let s = seeds::derive_indexed(seed, tag, i as u64);
            let id = format!("pool-{:03}", slots[c * per_class + i]);
            let meta = ClipMeta::new(id, Species::Human, condition, s);
            out.push(generate_synthetic_clip(&meta, geometry)?);
        }
    }
    out.sort_by(|a, b| a.meta.id.cmp(&b.meta.id));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub species: Species,
    pub condition: Condition,
}

/// Writes each clip as `<dir>/<id>.clpb` plus `<dir>/manifest.json` with
/// paths relative to `dir`.
pub fn write_dataset(clips: &[ClipBundle], dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(clips.len());
    for clip in clips {
        let file = format!("{}.clpb", clip.meta.id);
        save_clip(clip, dir.join(&file))?;
        manifest.push(ManifestEntry {
            id: clip.meta.id.clone(),
            path: file,
            species: clip.meta.species,
            condition: clip.meta.condition,
        });
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every clip listed in `<dir>/manifest.json`, in manifest order.
pub fn read_manifest(dir: &Path) -> Result<Vec<(ManifestEntry, PathBuf)>> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    Ok(entries
        .into_iter()
        .map(|e| {
            let p = dir.join(&e.path);
            (e, p)
        })
        .collect())
}
