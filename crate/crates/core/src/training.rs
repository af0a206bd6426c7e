//! Reconstruction pretraining, few-shot fine-tuning and linear probing.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, Checkpoint, ModelConfig, ModelParams, Provenance, Session, Stage};
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor};
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Pretrain,
    Finetune,
    LinearProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub lr: f64,
    pub epochs: usize,
    /// Clips per step during pretraining; fine-tuning is always full batch.
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        Self {
            stage: TrainStage::Pretrain,
            lr: 1e-4,
            epochs: 50,
            batch_size: 8,
            mask_ratio: 0.3,
            seed,
        }
    }

    pub fn finetune(seed: u64) -> Self {
        Self {
            stage: TrainStage::Finetune,
            epochs: 20,
            ..Self::pretrain(seed)
        }
    }

    pub fn linear_probe(seed: u64) -> Self {
        Self {
            stage: TrainStage::LinearProbe,
            ..Self::finetune(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.stage == TrainStage::Pretrain {
            if self.batch_size == 0 {
                return Err(Error::config("train.batch_size", "must be at least 1"));
            }
            if !(0.1..=0.9).contains(&self.mask_ratio) {
                return Err(Error::config(
                    "train.mask_ratio",
                    format!("{} outside [0.1, 0.9]", self.mask_ratio),
                ));
            }
        }
        Ok(())
    }

    fn expect_stage(&self, allowed: &[TrainStage]) -> Result<()> {
        self.validate()?;
        if !allowed.contains(&self.stage) {
            return Err(Error::config("train.stage", format!("{:?} not valid here", self.stage)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

pub fn write_loss_trace(trace: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct PretrainOutcome<T> {
    pub params: ModelParams<T>,
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
}

/// Mask seed for clip `clip` at optimizer step `step`.
pub fn mask_seed(seed: u64, step: usize, clip: usize) -> u64 {
    seeds::derive_indexed(seeds::derive_indexed(seed, "pretrain-mask", step as u64), "clip", clip as u64)
}

/// Reconstruction pretraining over `[C, T, H, W]` clips. Each epoch visits
/// the clips in a seeded shuffle; every clip gets a fresh tube mask at every
/// step. One trace entry per step holds the batch-mean loss before the update.
pub fn pretrain<T: Scalar>(
    clips: &[Tensor<T>],
    config: &TrainConfig,
    init: ModelParams<T>,
    dataset: &str,
) -> Result<PretrainOutcome<T>> {
    config.expect_stage(&[TrainStage::Pretrain])?;
    if clips.is_empty() {
        return Err(Error::config("dataset", "pretraining needs at least one clip"));
    }
    let mut params = init;
    params.set_trainable(|_| true);
    let mut adam = AdamState::new(config.adam());
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut rng = seeds::rng(seeds::derive_indexed(config.seed, "pretrain-epoch", epoch as u64));
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            params.zero_grad();
            let scale = T::one() / T::lit(batch.len() as f64);
            let mut total = 0.0;
            let mut grads = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut s = Session::new(&params);
                let loss = s.pretrain_loss(&clips[i], config.mask_ratio, mask_seed(config.seed, step, i))?;
                total += s.value(loss).data()[0].to_f64_lossy();
                grads.push(s.backward(loss)?);
            }
            for g in &grads {
                g.accumulate_into(&mut params, scale)?;
            }
            adam.step(params.tensors_mut())?;
            trace.push(LossRecord {
                step,
                loss: total / batch.len() as f64,
            });
            if !params.all_finite() {
                return Err(Error::contract(format!("non-finite parameters after step {step}")));
            }
            step += 1;
        }
    }
    let checkpoint = Checkpoint::new(
        params.cast::<f32>(),
        Provenance {
            stage: Stage::Pretrain,
            dataset: dataset.to_string(),
            mask_ratio: config.mask_ratio,
            steps: step as u64,
            seed: config.seed,
        },
    );
    Ok(PretrainOutcome {
        params,
        checkpoint,
        trace,
    })
}

/// Checkpoint of freshly initialized parameters, used where no
/// pretraining happens.
pub fn init_checkpoint(model: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    Ok(Checkpoint::new(init_params(model, seed)?, Provenance::init(seed)))
}

/// One labeled support clip; label 1 is pre-ictal.
#[derive(Clone, Debug)]
pub struct Labeled<T> {
    pub frames: Tensor<T>,
    pub label: u8,
}

pub struct FinetuneOutcome<T> {
    pub params: ModelParams<T>,
    /// Support BCE before each epoch's update, then once more after the last.
    pub losses: Vec<f64>,
}

fn check_support<T>(support: &[Labeled<T>]) -> Result<Vec<T>>
where
    T: Scalar,
{
    if let Some(bad) = support.iter().find(|s| s.label > 1) {
        return Err(Error::Protocol(format!("label {} is not binary", bad.label)));
    }
    let pos = support.iter().filter(|s| s.label == 1).count();
    if pos == 0 || pos == support.len() {
        return Err(Error::Protocol(format!(
            "support needs both classes, got {pos} positive of {}",
            support.len()
        )));
    }
    Ok(support.iter().map(|s| T::lit(f64::from(s.label))).collect())
}

fn transferred<T: Scalar>(ckpt: &Checkpoint, model: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    Ok(ckpt.transfer(model, seeds::derive(seed, "transfer"))?.cast::<T>())
}

/// Full-batch binary cross-entropy fine-tuning of the transferred encoder,
/// CLS embedding and classifier for exactly `config.epochs` Adam steps.
pub fn finetune<T: Scalar>(
    support: &[Labeled<T>],
    ckpt: &Checkpoint,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<FinetuneOutcome<T>> {
    config.expect_stage(&[TrainStage::Finetune])?;
    let targets = check_support(support)?;
    let mut params = transferred::<T>(ckpt, model, config.seed)?;
    params.set_trainable(|_| true);
    let mut adam = AdamState::new(config.adam());
    let scale = T::one() / T::lit(support.len() as f64);
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        params.zero_grad();
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(support.len());
        for (s, &y) in support.iter().zip(&targets) {
            let mut sess = Session::new(&params);
            let logit = sess.classify_logit(&s.frames)?;
            let loss = sess.tape_mut().bce_with_logits(logit, &[y])?;
            total += sess.value(loss).data()[0].to_f64_lossy();
            grads.push(sess.backward(loss)?);
        }
        for g in &grads {
            g.accumulate_into(&mut params, scale)?;
        }
        adam.step(params.tensors_mut())?;
        losses.push(total / support.len() as f64);
    }
    losses.push(support_loss(support, &targets, &params)?);
    params.set_trainable(|_| false);
    Ok(FinetuneOutcome { params, losses })
}

fn support_loss<T: Scalar>(support: &[Labeled<T>], targets: &[T], params: &ModelParams<T>) -> Result<f64> {
    let mut total = 0.0;
    for (s, &y) in support.iter().zip(targets) {
        let mut sess = Session::new(params);
        let logit = sess.classify_logit(&s.frames)?;
        let loss = sess.tape_mut().bce_with_logits(logit, &[y])?;
        total += sess.value(loss).data()[0].to_f64_lossy();
    }
    Ok(total / support.len() as f64)
}

/// `z_cls` for each clip under `params`, stacked as `[n, d_e]`.
pub fn cls_features<T: Scalar>(clips: &[&Tensor<T>], params: &ModelParams<T>) -> Result<Tensor<T>> {
    let d = params.config().encoder.dim;
    let mut data = Vec::with_capacity(clips.len() * d);
    let grid = params.config().grid()?;
    let all: Vec<usize> = (0..grid.num_tokens()).collect();
    for x in clips {
        let tokens = crate::tubelet::patchify(x, &grid)?;
        let z = crate::model::encode(&tokens, &all, params, true)?;
        data.extend_from_slice(z.row(0));
    }
    Tensor::new(vec![clips.len(), d], data)
}

/// As [`finetune`], but only the classifier trains; encoder and CLS stay
/// fixed, so `z_cls` is computed once per clip.
pub fn linear_probe<T: Scalar>(
    support: &[Labeled<T>],
    ckpt: &Checkpoint,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<FinetuneOutcome<T>> {
    config.expect_stage(&[TrainStage::LinearProbe])?;
    let targets = check_support(support)?;
    let mut params = transferred::<T>(ckpt, model, config.seed)?;
    params.set_trainable(|_| false);
    let frames: Vec<&Tensor<T>> = support.iter().map(|s| &s.frames).collect();
    let features = cls_features(&frames, &params)?;
    let wi = params.index_of("classifier.weight")?;
    let bi = params.index_of("classifier.bias")?;
    let mut head = vec![params.tensors()[wi].clone(), params.tensors()[bi].clone()];
    for t in &mut head {
        t.set_requires_grad(true);
    }
    let mut adam = AdamState::new(config.adam());
    let mut losses = Vec::with_capacity(config.epochs + 1);
    let eval = |head: &[Tensor<T>], grad: bool| -> Result<(f64, Option<[Vec<T>; 2]>)> {
        let mut tape = Tape::new();
        let z = tape.constant(features.clone());
        let w = tape.leaf(head[0].clone());
        let b = tape.leaf(head[1].clone());
        let wt = tape.transpose(w)?;
        let logits = tape.matmul(z, wt)?;
        let logits = tape.add_row(logits, b)?;
        let loss = tape.bce_with_logits(logits, &targets)?;
        let value = tape.value(loss).data()[0].to_f64_lossy();
        if !grad {
            return Ok((value, None));
        }
        let g = tape.backward(loss)?;
        Ok((value, Some([g.wrt(w), g.wrt(b)])))
    };
    for _ in 0..config.epochs {
        let (loss, g) = eval(&head, true)?;
        let [gw, gb] = g.expect("requested");
        head[0].zero_grad();
        head[0].accumulate_grad(&gw, T::one())?;
        head[1].zero_grad();
        head[1].accumulate_grad(&gb, T::one())?;
        adam.step(&mut head)?;
        losses.push(loss);
    }
    losses.push(eval(&head, false)?.0);
    params.set("classifier.weight", &head[0])?;
    params.set("classifier.bias", &head[1])?;
    Ok(FinetuneOutcome { params, losses })
}

/// Probability of the positive class for each clip.
pub fn predict_all<T: Scalar>(clips: &[&Tensor<T>], params: &ModelParams<T>) -> Result<Vec<f64>> {
    clips
        .iter()
        .map(|x| crate::model::classify_forward(x, params).map(|y| y.to_f64_lossy()))
        .collect()
}

#[cfg(test)]
mod tests;
