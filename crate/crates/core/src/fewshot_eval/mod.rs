//! Few-shot episodes over the forecasting pool, the three metrics, and the
//! evaluation protocol.
//!
//! Results CSV schema (`config,shot,split,bacc,roc_auc,pr_auc`):
//!
//! - one row per `(config, shot, split)` with `split` the split index;
//! - one row per `(config, shot)` with `split = mean`;
//! - one row per config with `shot = avg, split = mean`, the mean of the
//!   per-shot means.
//!
//! `config` is the arm label: a configuration name for fine-tuning, suffixed
//! with `:linear_probe` or `:zero_shot` for the other methods.

mod episode;
mod metrics;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::seeds;
use crate::training::{finetune, linear_probe, predict_all, Labeled, TrainConfig, TrainStage};

pub use episode::{episode_seed, sample_episode, validate_pool, Episode, PoolEntry, POOL_PER_CLASS, SHOTS};
pub use metrics::{balanced_accuracy, decide, pr_auc, roc_auc};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    LinearProbe,
    /// Untrained zero classifier: every query scores exactly 0.5.
    ZeroShot,
}

impl Method {
    pub fn suffix(self) -> &'static str {
        match self {
            Method::Finetune => "",
            Method::LinearProbe => ":linear_probe",
            Method::ZeroShot => ":zero_shot",
        }
    }
}

/// One evaluated row group: a checkpoint plus how it is adapted.
#[derive(Clone, Debug)]
pub struct Arm {
    pub label: String,
    pub checkpoint: Checkpoint,
    pub method: Method,
}

impl Arm {
    /// Labels the arm `<name><method suffix>`.
    pub fn new(name: &str, checkpoint: Checkpoint, method: Method) -> Self {
        Self {
            label: format!("{name}{}", method.suffix()),
            checkpoint,
            method,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PoolClip<T> {
    pub entry: PoolEntry,
    pub frames: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub shots: Vec<usize>,
    pub n_splits: usize,
    pub seed: u64,
    /// Learning rate and epochs for both fine-tuning and linear probing.
    pub lr: f64,
    pub epochs: usize,
    pub model: ModelConfig,
}

impl ProtocolConfig {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        let ft = TrainConfig::finetune(seed);
        Self {
            shots: SHOTS.to_vec(),
            n_splits: 10,
            seed,
            lr: ft.lr,
            epochs: ft.epochs,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() {
            return Err(Error::config("eval.shots", "at least one shot is required"));
        }
        if let Some(s) = self.shots.iter().find(|s| !SHOTS.contains(s)) {
            return Err(Error::config("eval.shots", format!("shot {s} not in {SHOTS:?}")));
        }
        if self.n_splits == 0 {
            return Err(Error::config("eval.n_splits", "must be at least 1"));
        }
        self.train(Method::Finetune, 0).validate()
    }

    /// Training config for an adapting method.
    pub fn train(&self, method: Method, seed: u64) -> TrainConfig {
        let base = match method {
            Method::LinearProbe => TrainConfig::linear_probe(seed),
            _ => TrainConfig::finetune(seed),
        };
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            ..base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bacc: f64,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

impl Metrics {
    /// All three metrics for query `labels` and probability `scores`.
    pub fn compute(labels: &[u8], scores: &[f64]) -> Result<Self> {
        let decisions: Vec<u8> = scores.iter().map(|&s| decide(s)).collect();
        Ok(Self {
            bacc: balanced_accuracy(labels, &decisions)?,
            roc_auc: roc_auc(labels, scores)?,
            pr_auc: pr_auc(labels, scores)?,
        })
    }

    /// Arithmetic mean of each metric.
    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len() as f64;
        Metrics {
            bacc: items.iter().map(|m| m.bacc).sum::<f64>() / n,
            roc_auc: items.iter().map(|m| m.roc_auc).sum::<f64>() / n,
            pr_auc: items.iter().map(|m| m.pr_auc).sum::<f64>() / n,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "bacc" => Some(self.bacc),
            "roc_auc" => Some(self.roc_auc),
            "pr_auc" => Some(self.pr_auc),
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 3] = ["bacc", "roc_auc", "pr_auc"];

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub config: String,
    pub shot: usize,
    pub split: usize,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Shot column of an aggregated row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShotKey {
    Shot(usize),
    Avg,
}

impl std::fmt::Display for ShotKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShotKey::Shot(n) => write!(f, "{n}"),
            ShotKey::Avg => f.write_str("avg"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub config: String,
    pub shot: ShotKey,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ResultsTable {
    pub splits: Vec<SplitResult>,
    pub summary: Vec<SummaryRow>,
}

impl ResultsTable {
    /// Builds per-shot means and the cross-shot `avg` row for each config,
    /// in first-seen config order and ascending shot order.
    pub fn from_splits(splits: Vec<SplitResult>) -> Self {
        let mut configs: Vec<&str> = Vec::new();
        for s in &splits {
            if !configs.contains(&s.config.as_str()) {
                configs.push(&s.config);
            }
        }
        let mut summary = Vec::new();
        for config in configs {
            let mut shots: Vec<usize> = splits.iter().filter(|s| s.config == config).map(|s| s.shot).collect();
            shots.sort_unstable();
            shots.dedup();
            let mut per_shot = Vec::with_capacity(shots.len());
            for shot in shots {
                let ms: Vec<Metrics> = splits
                    .iter()
                    .filter(|s| s.config == config && s.shot == shot)
                    .map(|s| s.metrics)
                    .collect();
                let m = Metrics::mean(&ms);
                per_shot.push(m);
                summary.push(SummaryRow {
                    config: config.to_string(),
                    shot: ShotKey::Shot(shot),
                    metrics: m,
                });
            }
            summary.push(SummaryRow {
                config: config.to_string(),
                shot: ShotKey::Avg,
                metrics: Metrics::mean(&per_shot),
            });
        }
        Self { splits, summary }
    }

    pub fn summary_for(&self, config: &str, shot: ShotKey) -> Option<&Metrics> {
        self.summary
            .iter()
            .find(|r| r.config == config && r.shot == shot)
            .map(|r| &r.metrics)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(&mut w);
        out.write_record(["config", "shot", "split", "bacc", "roc_auc", "pr_auc"])?;
        for s in &self.splits {
            out.write_record([
                s.config.clone(),
                s.shot.to_string(),
                s.split.to_string(),
                s.metrics.bacc.to_string(),
                s.metrics.roc_auc.to_string(),
                s.metrics.pr_auc.to_string(),
            ])?;
        }
        for r in &self.summary {
            out.write_record([
                r.config.clone(),
                r.shot.to_string(),
                "mean".into(),
                r.metrics.bacc.to_string(),
                r.metrics.roc_auc.to_string(),
                r.metrics.pr_auc.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<results>", e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Outcome of adapting one arm on one episode.
pub struct EpisodeRun<T> {
    /// Adapted parameters; `None` for zero-shot arms.
    pub params: Option<ModelParams<T>>,
    pub losses: Vec<f64>,
    /// Query clips sorted by id, with their scores.
    pub query: Vec<PoolEntry>,
    pub scores: Vec<f64>,
}

impl<T> EpisodeRun<T> {
    pub fn metrics(&self) -> Result<Metrics> {
        let labels: Vec<u8> = self.query.iter().map(|e| e.label).collect();
        Metrics::compute(&labels, &self.scores)
    }
}

/// Adapts the arm's checkpoint on the episode support set and scores the
/// query set. Zero-shot arms score every query clip 0.5.
pub fn run_episode<T: Scalar>(
    arm: &Arm,
    episode: &Episode,
    clips: &HashMap<&str, &Tensor<T>>,
    config: &ProtocolConfig,
) -> Result<EpisodeRun<T>> {
    let frames = |e: &PoolEntry| {
        clips
            .get(e.id.as_str())
            .copied()
            .ok_or_else(|| Error::Protocol(format!("clip {} missing from the pool", e.id)))
    };
    let mut query = episode.query.clone();
    query.sort_by(|a, b| a.id.cmp(&b.id));
    if arm.method == Method::ZeroShot {
        let scores = vec![0.5; query.len()];
        return Ok(EpisodeRun {
            params: None,
            losses: Vec::new(),
            query,
            scores,
        });
    }
    let support = episode
        .support
        .iter()
        .map(|e| {
            Ok(Labeled {
                frames: frames(e)?.clone(),
                label: e.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let train = config.train(arm.method, seeds::derive(episode.seed, "adapt"));
    let out = match train.stage {
        TrainStage::LinearProbe => linear_probe(&support, &arm.checkpoint, &config.model, &train)?,
        _ => finetune(&support, &arm.checkpoint, &config.model, &train)?,
    };
    let query_frames = query.iter().map(frames).collect::<Result<Vec<_>>>()?;
    let scores = predict_all(&query_frames, &out.params)?;
    Ok(EpisodeRun {
        params: Some(out.params),
        losses: out.losses,
        query,
        scores,
    })
}

/// Id-to-frames lookup over a pool.
pub fn pool_index<T>(pool: &[PoolClip<T>]) -> HashMap<&str, &Tensor<T>> {
    pool.iter().map(|c| (c.entry.id.as_str(), &c.frames)).collect()
}

/// Runs every arm on the same episodes: for each shot and split, adapts the
/// arm's checkpoint on the support set and scores the query set. Results are
/// ordered by (arm, shot, split). `progress` sees each split as it finishes.
pub fn run_protocol<T: Scalar>(
    pool: &[PoolClip<T>],
    arms: &[Arm],
    config: &ProtocolConfig,
    mut progress: impl FnMut(&SplitResult),
) -> Result<ResultsTable> {
    config.validate()?;
    let entries: Vec<PoolEntry> = pool.iter().map(|c| c.entry.clone()).collect();
    validate_pool(&entries)?;
    let clips = pool_index(pool);
    let mut splits = Vec::new();
    for arm in arms {
        for &shot in &config.shots {
            for split in 0..config.n_splits {
                let seed = episode_seed(config.seed, shot, split);
                let wrap = |e: Error| Error::Episode {
                    config: arm.label.clone(),
                    shot,
                    seed,
                    source: Box::new(e),
                };
                let episode = sample_episode(&entries, shot, seed).map_err(wrap)?;
                let metrics = run_episode(arm, &episode, &clips, config)
                    .and_then(|r| r.metrics())
                    .map_err(wrap)?;
                let r = SplitResult {
                    config: arm.label.clone(),
                    shot,
                    split,
                    seed,
                    metrics,
                };
                progress(&r);
                splits.push(r);
            }
        }
    }
    Ok(ResultsTable::from_splits(splits))
}
