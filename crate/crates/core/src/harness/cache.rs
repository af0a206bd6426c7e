use std::fs;
use std::path::{Path, PathBuf};

use crate::clipdata::{build_pretrain_dataset, sample_frames, Configuration};
use crate::error::{Error, Result};
use crate::model::{init_params, load_checkpoint, save_checkpoint, Checkpoint, ModelParams, Stage};
use crate::training::{init_checkpoint, pretrain, write_loss_trace};

use super::ExperimentConfig;

/// Pretrained checkpoints on disk, one file per (configuration, ratio, seed).
pub struct CheckpointCache {
    dir: PathBuf,
}

/// Where a checkpoint came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheOutcome {
    /// No pretraining for this configuration.
    Init,
    Hit,
    /// Trained now; holds the optimizer step count.
    Trained(u64),
}

impl CheckpointCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// File name for a cache key. The ratio is written in permille so the
    /// name is exact.
    pub fn path(&self, configuration: Configuration, mask_ratio: f64, seed: u64) -> PathBuf {
        let permille = (mask_ratio * 1000.0).round() as u64;
        self.dir
            .join(format!("{}_r{permille:03}_s{seed}.ckpt", configuration.slug()))
    }

    /// Cached checkpoint for `configuration` at `mask_ratio`, training and
    /// storing it on a miss. `Base` returns the shared initialization without
    /// touching the cache.
    pub fn get_or_train(
        &self,
        exp: &ExperimentConfig,
        configuration: Configuration,
        mask_ratio: f64,
        mut log: impl FnMut(&str),
    ) -> Result<(Checkpoint, CacheOutcome)> {
        if !configuration.pretrains() {
            return Ok((init_checkpoint(&exp.model, exp.init_seed())?, CacheOutcome::Init));
        }
        let train = exp.pretrain_config(mask_ratio);
        let spec = exp.dataset_spec(configuration);
        let path = self.path(configuration, mask_ratio, train.seed);
        if path.exists() {
            let ckpt = load_checkpoint(&path)?;
            let n = build_pretrain_dataset(&spec)?.len();
            let steps = (train.epochs * n.div_ceil(train.batch_size)) as u64;
            let p = &ckpt.provenance;
            let mut stale = Vec::new();
            if p.stage != Stage::Pretrain {
                stale.push(format!("stage {}", p.stage));
            }
            if p.dataset != configuration.label() {
                stale.push(format!("dataset {}", p.dataset));
            }
            if p.mask_ratio != mask_ratio {
                stale.push(format!("mask_ratio {}", p.mask_ratio));
            }
            if p.seed != train.seed {
                stale.push(format!("seed {}", p.seed));
            }
            if p.steps != steps {
                stale.push(format!("steps {} (expected {steps})", p.steps));
            }
            if ckpt.config() != &exp.model {
                stale.push("model config".into());
            }
            if !stale.is_empty() {
                return Err(Error::StaleCache {
                    path,
                    message: format!("provenance differs: {}", stale.join(", ")),
                });
            }
            log(&format!("cache hit {}", path.display()));
            return Ok((ckpt, CacheOutcome::Hit));
        }
        log(&format!("pretraining {configuration} at mask ratio {mask_ratio}"));
        let clips = build_pretrain_dataset(&spec)?
            .iter()
            .map(|c| sample_frames::<f32>(c, &exp.data.sampling))
            .collect::<Result<Vec<_>>>()?;
        let init: ModelParams<f32> = init_params(&exp.model, exp.init_seed())?;
        let out = pretrain(&clips, &train, init, configuration.label())?;
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        write_loss_trace(&out.trace, path.with_extension("loss.csv"))?;
        let tmp = path.with_extension("ckpt.tmp");
        save_checkpoint(&out.checkpoint, &tmp)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        let steps = out.checkpoint.provenance.steps;
        Ok((out.checkpoint, CacheOutcome::Trained(steps)))
    }
}
