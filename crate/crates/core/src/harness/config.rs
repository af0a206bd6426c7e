use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clipdata::{ClipGeometry, Configuration, DatasetSpec, FrameSampling};
use crate::error::{Error, Result};
use crate::fewshot_eval::{Method, ProtocolConfig, SHOTS};
use crate::model::ModelConfig;
use crate::seeds;
use crate::training::TrainConfig;
use crate::tubelet::masked_cell_count;

/// Overrides `output_dir` when set.
pub const OUTPUT_ENV: &str = "PREICTAL_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub rodent_seizure: usize,
    pub rodent_normal_pool: usize,
    pub rodent_normal: usize,
    pub human_normal: usize,
    pub geometry: ClipGeometry,
    pub sampling: FrameSampling,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetSpec::new(Configuration::Base, 0);
        Self {
            rodent_seizure: d.rodent_seizure,
            rodent_normal_pool: d.rodent_normal_pool,
            rodent_normal: d.rodent_normal,
            human_normal: d.human_normal,
            geometry: d.geometry,
            sampling: FrameSampling::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    /// Configurations trained by the `pretrain` command.
    pub configurations: Vec<Configuration>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let t = TrainConfig::pretrain(0);
        Self {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            mask_ratio: t.mask_ratio,
            configurations: pretraining_configurations(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub lr: f64,
    pub epochs: usize,
    /// Episode used by the `finetune` command.
    pub configuration: Configuration,
    pub method: Method,
    pub shot: usize,
    pub split: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let t = TrainConfig::finetune(0);
        Self {
            lr: t.lr,
            epochs: t.epochs,
            configuration: Configuration::RodentBothHuman,
            method: Method::Finetune,
            shot: 2,
            split: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub configuration: Configuration,
    pub method: Method,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub shots: Vec<usize>,
    pub n_splits: usize,
    /// Arms run by the `evaluate` command.
    pub arms: Vec<ArmSpec>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let arm = |configuration, method| ArmSpec { configuration, method };
        Self {
            shots: SHOTS.to_vec(),
            n_splits: 10,
            arms: vec![
                arm(Configuration::RodentBothHuman, Method::Finetune),
                arm(Configuration::RodentBothHuman, Method::LinearProbe),
                arm(Configuration::Human, Method::Finetune),
                arm(Configuration::Base, Method::Finetune),
                arm(Configuration::RodentBothHuman, Method::ZeroShot),
                arm(Configuration::Base, Method::ZeroShot),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub configurations: Vec<Configuration>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            configurations: Configuration::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub ratios: Vec<f64>,
    pub configurations: Vec<Configuration>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ratios: (1..=9).map(|i| f64::from(i) / 10.0).collect(),
            configurations: pretraining_configurations(),
        }
    }
}

fn pretraining_configurations() -> Vec<Configuration> {
    Configuration::ALL.into_iter().filter(|c| c.pretrains()).collect()
}

/// Every command's parameters. All sections are optional in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Checkpoint cache; defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            cache_dir: None,
            model: ModelConfig::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn require(ok: bool, path: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, message))
    }
}

impl ExperimentConfig {
    /// Parses JSON, reporting the failing field path on error.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Applies the output-directory environment override.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.geometry.validate().map_err(|e| Error::config("data.geometry", e.to_string()))?;
        let s = &self.data.sampling;
        require(s.frames > 0 && s.rate > 0, "data.sampling", "frames and rate must be positive")?;
        require(
            s.required_frames() <= self.data.geometry.frames,
            "data.sampling",
            format!("needs {} frames, clips have {}", s.required_frames(), self.data.geometry.frames),
        )?;
        let g = self.data.geometry;
        let sampled = [g.channels, s.frames, g.height, g.width];
        require(
            sampled == self.model.frame_shape,
            "model.frame_shape",
            format!("{:?} differs from sampled clips {sampled:?}", self.model.frame_shape),
        )?;
        self.dataset_spec(Configuration::Base).validate()?;
        self.pretrain_config(self.pretrain.mask_ratio)
            .validate()
            .map_err(|e| match e {
                Error::Config { path, message } => Error::config(path.replace("train.", "pretrain."), message),
                e => e,
            })?;
        let cells = self.model.grid()?.spatial_cells();
        let masks_some = |r: f64| (1..cells).contains(&masked_cell_count(r, cells));
        require(
            masks_some(self.pretrain.mask_ratio),
            "pretrain.mask_ratio",
            format!("masks no cell or every cell of {cells}"),
        )?;
        for (i, &r) in self.sweep.ratios.iter().enumerate() {
            let path = format!("sweep.ratios[{i}]");
            require((0.1..=0.9).contains(&r), &path, format!("{r} outside [0.1, 0.9]"))?;
            require(masks_some(r), &path, format!("{r} masks no cell or every cell of {cells}"))?;
        }
        require(!self.sweep.ratios.is_empty(), "sweep.ratios", "at least one ratio is required")?;
        require(
            self.sweep.configurations.iter().all(|c| c.pretrains()),
            "sweep.configurations",
            "Base has no mask ratio",
        )?;
        require(!self.ablate.configurations.is_empty(), "ablate.configurations", "at least one configuration")?;
        require(!self.eval.arms.is_empty(), "eval.arms", "at least one arm is required")?;
        require(
            self.pretrain.configurations.iter().all(|c| c.pretrains()),
            "pretrain.configurations",
            "Base is not pretrained",
        )?;
        let f = &self.finetune;
        require(f.method != Method::ZeroShot, "finetune.method", "zero_shot has nothing to train")?;
        require(SHOTS.contains(&f.shot), "finetune.shot", format!("shot {} not in {SHOTS:?}", f.shot))?;
        self.protocol(self.seed)
            .validate()
            .map_err(|e| match e {
                Error::Config { path, message } => Error::config(path.replace("train.", "finetune."), message),
                e => e,
            })
    }

    pub fn dataset_spec(&self, configuration: Configuration) -> DatasetSpec {
        DatasetSpec {
            configuration,
            rodent_seizure: self.data.rodent_seizure,
            rodent_normal_pool: self.data.rodent_normal_pool,
            rodent_normal: self.data.rodent_normal,
            human_normal: self.data.human_normal,
            seed: seeds::derive(self.seed, "data"),
            geometry: self.data.geometry,
        }
    }

    pub fn pool_seed(&self) -> u64 {
        seeds::derive(self.seed, "pool")
    }

    /// Initialization seed shared by every configuration.
    pub fn init_seed(&self) -> u64 {
        seeds::derive(self.seed, "init")
    }

    pub fn pretrain_config(&self, mask_ratio: f64) -> TrainConfig {
        TrainConfig {
            lr: self.pretrain.lr,
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            mask_ratio,
            ..TrainConfig::pretrain(seeds::derive(self.seed, "pretrain"))
        }
    }

    pub fn protocol(&self, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            shots: self.eval.shots.clone(),
            n_splits: self.eval.n_splits,
            seed,
            lr: self.finetune.lr,
            epochs: self.finetune.epochs,
            model: self.model.clone(),
        }
    }
}
