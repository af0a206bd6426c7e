//! Experiment configuration, the checkpoint cache and the command runners
//! behind the CLI.
//!
//! Every command writes into `<output_dir>/<command>/`, alongside
//! `resolved_config.json` (re-runnable as is) and `tool_version.txt`.

mod cache;
mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::clipdata::{build_fewshot_pool, build_pretrain_dataset, sample_frames, write_dataset, Configuration};
use crate::error::{Error, Result};
use crate::fewshot_eval::{
    episode_seed, pool_index, run_episode, run_protocol, sample_episode, Arm, Metrics, PoolClip, PoolEntry,
    ResultsTable, ShotKey, METRIC_NAMES, POOL_PER_CLASS,
};
use crate::model::{save_checkpoint, Checkpoint, Provenance, Stage};
use crate::seeds;
use crate::training::{write_loss_trace, LossRecord};

pub use cache::{CacheOutcome, CheckpointCache};
pub use config::{
    AblateSection, ArmSpec, DataSection, EvalSection, ExperimentConfig, FinetuneSection, PretrainSection,
    SweepSection, OUTPUT_ENV,
};

pub const TOOL_VERSION: &str = concat!("preictal ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    Finetune,
    Evaluate,
    Ablate,
    SweepMask,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::GenData,
        Command::Pretrain,
        Command::Finetune,
        Command::Evaluate,
        Command::Ablate,
        Command::SweepMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::SweepMask => "sweep-mask",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config("command", format!("unknown command `{s}`")))
    }
}

/// What a command produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// Optimizer steps spent on pretraining (zero on a warm cache).
    pub pretrain_steps: u64,
}

struct Runner<'a> {
    exp: &'a ExperimentConfig,
    dir: PathBuf,
    cache: CheckpointCache,
    files: Vec<PathBuf>,
    pretrain_steps: u64,
    log: &'a mut dyn FnMut(&str),
}

impl Runner<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(path.clone());
        Ok(path)
    }

    fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(self.dir.join(name), e.into_error()))?;
        self.write(name, &bytes)
    }

    fn checkpoint(&mut self, configuration: Configuration, mask_ratio: f64) -> Result<Checkpoint> {
        let log = &mut *self.log;
        let (ckpt, outcome) = self.cache.get_or_train(self.exp, configuration, mask_ratio, |m| log(m))?;
        if let CacheOutcome::Trained(steps) = outcome {
            self.pretrain_steps += steps;
        }
        Ok(ckpt)
    }

    fn pool(&self) -> Result<Vec<PoolClip<f32>>> {
        build_fewshot_pool(POOL_PER_CLASS, self.exp.pool_seed(), &self.exp.data.geometry)?
            .iter()
            .map(|c| {
                let label = c.meta.label().ok_or_else(|| Error::contract("pool clip without label"))?;
                Ok(PoolClip {
                    entry: PoolEntry::new(c.meta.id.clone(), label),
                    frames: sample_frames(c, &self.exp.data.sampling)?,
                })
            })
            .collect()
    }

    fn eval_seed(&self) -> u64 {
        seeds::derive(self.exp.seed, "eval")
    }

    fn protocol(&mut self, arms: &[Arm]) -> Result<ResultsTable> {
        let pool = self.pool()?;
        let config = self.exp.protocol(self.eval_seed());
        let log = &mut *self.log;
        run_protocol(&pool, arms, &config, |r| {
            log(&format!(
                "{} shot {} split {}: bacc {:.4} roc_auc {:.4} pr_auc {:.4}",
                r.config, r.shot, r.split, r.metrics.bacc, r.metrics.roc_auc, r.metrics.pr_auc
            ))
        })
    }

    fn gen_data(&mut self) -> Result<()> {
        let all = build_pretrain_dataset(&self.exp.dataset_spec(Configuration::RodentBothHuman))?;
        write_dataset(&all, &self.dir.join("pretrain"))?;
        self.files.push(self.dir.join("pretrain/manifest.json"));
        let pool = build_fewshot_pool(POOL_PER_CLASS, self.exp.pool_seed(), &self.exp.data.geometry)?;
        write_dataset(&pool, &self.dir.join("pool"))?;
        self.files.push(self.dir.join("pool/manifest.json"));
        (self.log)(&format!("wrote {} pretraining clips and {} pool clips", all.len(), pool.len()));
        Ok(())
    }

    fn pretrain(&mut self) -> Result<()> {
        let ratio = self.exp.pretrain.mask_ratio;
        let mut rows = Vec::new();
        for &c in &self.exp.pretrain.configurations {
            let ckpt = self.checkpoint(c, ratio)?;
            let path = self.cache.path(c, ratio, ckpt.provenance.seed);
            rows.push(vec![
                c.label().to_string(),
                ratio.to_string(),
                ckpt.provenance.seed.to_string(),
                ckpt.provenance.steps.to_string(),
                path.display().to_string(),
            ]);
        }
        self.write_csv("checkpoints.csv", &["config", "mask_ratio", "seed", "steps", "path"], &rows)?;
        Ok(())
    }

    fn finetune(&mut self) -> Result<()> {
        let f = self.exp.finetune.clone();
        let ckpt = self.checkpoint(f.configuration, self.exp.pretrain.mask_ratio)?;
        let arm = Arm::new(f.configuration.label(), ckpt, f.method);
        let pool = self.pool()?;
        let entries: Vec<PoolEntry> = pool.iter().map(|c| c.entry.clone()).collect();
        let config = self.exp.protocol(self.eval_seed());
        let seed = episode_seed(config.seed, f.shot, f.split);
        let wrap = |e: Error| Error::Episode {
            config: arm.label.clone(),
            shot: f.shot,
            seed,
            source: Box::new(e),
        };
        let episode = sample_episode(&entries, f.shot, seed).map_err(wrap)?;
        let run = run_episode(&arm, &episode, &pool_index(&pool), &config).map_err(wrap)?;
        let metrics = run.metrics().map_err(wrap)?;

        let support: Vec<Vec<String>> = episode
            .support
            .iter()
            .map(|e| vec![e.id.clone(), e.label.to_string()])
            .collect();
        self.write_csv("support.csv", &["id", "label"], &support)?;
        let preds: Vec<Vec<String>> = run
            .query
            .iter()
            .zip(&run.scores)
            .map(|(e, s)| vec![e.id.clone(), e.label.to_string(), s.to_string()])
            .collect();
        self.write_csv("predictions.csv", &["id", "label", "score"], &preds)?;
        let trace: Vec<LossRecord> = run
            .losses
            .iter()
            .enumerate()
            .map(|(step, &loss)| LossRecord { step, loss })
            .collect();
        let path = self.dir.join("loss.csv");
        write_loss_trace(&trace, &path)?;
        self.files.push(path);
        self.write_csv(
            "metrics.csv",
            &["config", "shot", "split", "bacc", "roc_auc", "pr_auc"],
            &[vec![
                arm.label.clone(),
                f.shot.to_string(),
                f.split.to_string(),
                metrics.bacc.to_string(),
                metrics.roc_auc.to_string(),
                metrics.pr_auc.to_string(),
            ]],
        )?;
        if let Some(params) = run.params {
            let stage = match f.method {
                crate::fewshot_eval::Method::LinearProbe => Stage::LinearProbe,
                _ => Stage::Finetune,
            };
            let out = Checkpoint::new(
                params.cast(),
                Provenance {
                    stage,
                    dataset: format!("{} shot {} split {}", f.configuration.label(), f.shot, f.split),
                    mask_ratio: self.exp.pretrain.mask_ratio,
                    steps: f.epochs as u64,
                    seed,
                },
            );
            let path = self.dir.join("finetuned.ckpt");
            save_checkpoint(&out, &path)?;
            self.files.push(path);
        }
        (self.log)(&format!(
            "{} {}-shot split {}: bacc {:.4} roc_auc {:.4} pr_auc {:.4}",
            arm.label, f.shot, f.split, metrics.bacc, metrics.roc_auc, metrics.pr_auc
        ));
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let ratio = self.exp.pretrain.mask_ratio;
        let mut arms = Vec::new();
        for spec in &self.exp.eval.arms.clone() {
            let ckpt = self.checkpoint(spec.configuration, ratio)?;
            arms.push(Arm::new(spec.configuration.label(), ckpt, spec.method));
        }
        let table = self.protocol(&arms)?;
        self.write_table(&table)
    }

    fn write_table(&mut self, table: &ResultsTable) -> Result<()> {
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        self.write("results.csv", &buf)?;
        Ok(())
    }

    fn ablate(&mut self) -> Result<()> {
        let ratio = self.exp.pretrain.mask_ratio;
        let mut arms = Vec::new();
        for &c in &self.exp.ablate.configurations.clone() {
            let ckpt = self.checkpoint(c, ratio)?;
            arms.push(Arm::new(c.label(), ckpt, crate::fewshot_eval::Method::Finetune));
        }
        let table = self.protocol(&arms)?;
        self.write_table(&table)?;
        let mut rows = Vec::new();
        for r in &table.summary {
            for m in METRIC_NAMES {
                rows.push(vec![
                    r.config.clone(),
                    r.shot.to_string(),
                    m.to_string(),
                    r.metrics.get(m).unwrap_or(f64::NAN).to_string(),
                ]);
            }
        }
        self.write_csv("ablation.csv", &["config", "shot", "metric", "value"], &rows)?;
        Ok(())
    }

    fn sweep_mask(&mut self) -> Result<()> {
        let mut rows = Vec::new();
        let mut best: Vec<(String, f64, Metrics)> = Vec::new();
        for &ratio in &self.exp.sweep.ratios.clone() {
            let mut arms = Vec::new();
            for &c in &self.exp.sweep.configurations.clone() {
                let ckpt = self.checkpoint(c, ratio)?;
                arms.push(Arm::new(c.label(), ckpt, crate::fewshot_eval::Method::Finetune));
            }
            let table = self.protocol(&arms)?;
            for r in &table.summary {
                rows.push(vec![
                    ratio.to_string(),
                    r.config.clone(),
                    r.shot.to_string(),
                    r.metrics.bacc.to_string(),
                ]);
                if r.shot == ShotKey::Avg {
                    match best.iter_mut().find(|b| b.0 == r.config) {
                        Some(b) if r.metrics.bacc > b.2.bacc => *b = (r.config.clone(), ratio, r.metrics),
                        Some(_) => {}
                        None => best.push((r.config.clone(), ratio, r.metrics)),
                    }
                }
            }
        }
        self.write_csv("sweep.csv", &["ratio", "config", "shot", "bacc"], &rows)?;
        let best_rows: Vec<Vec<String>> = best
            .iter()
            .map(|(c, r, m)| vec![c.clone(), r.to_string(), m.bacc.to_string()])
            .collect();
        self.write_csv("sweep_best.csv", &["config", "best_ratio", "avg_bacc"], &best_rows)?;
        for (c, r, m) in &best {
            (self.log)(&format!("{c}: best mask ratio {r} (avg bacc {:.4})", m.bacc));
        }
        Ok(())
    }
}

/// Runs `command` under `exp`, writing into `<output_dir>/<command>/`.
pub fn run_command(command: Command, exp: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    exp.validate()?;
    let dir = exp.output_dir.join(command.name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut runner = Runner {
        exp,
        dir: dir.clone(),
        cache: CheckpointCache::new(exp.cache_dir()),
        files: Vec::new(),
        pretrain_steps: 0,
        log,
    };
    runner.write("resolved_config.json", exp.to_json()?.as_bytes())?;
    runner.write("tool_version.txt", format!("{TOOL_VERSION}\n").as_bytes())?;
    match command {
        Command::GenData => runner.gen_data()?,
        Command::Pretrain => runner.pretrain()?,
        Command::Finetune => runner.finetune()?,
        Command::Evaluate => runner.evaluate()?,
        Command::Ablate => runner.ablate()?,
        Command::SweepMask => runner.sweep_mask()?,
    }
    Ok(RunSummary {
        dir,
        files: runner.files,
        pretrain_steps: runner.pretrain_steps,
    })
}

/// Loads a config file and applies environment overrides.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map(ExperimentConfig::with_env_overrides)
}

#[cfg(test)]
mod tests;
