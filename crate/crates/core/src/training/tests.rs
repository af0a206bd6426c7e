use super::*;
use crate::model::StackConfig;
use rand::Rng;
use rand_distr::StandardNormal;

fn small() -> ModelConfig {
    ModelConfig {
        frame_shape: [1, 4, 16, 16],
        tubelet: [2, 8, 8],
        encoder: StackConfig {
            dim: 16,
            depth: 1,
            heads: 2,
        },
        decoder: StackConfig {
            dim: 8,
            depth: 1,
            heads: 2,
        },
        mlp_ratio: 2,
        ln_eps: 1e-6,
    }
}

fn noise_clip(seed: u64) -> Tensor<f64> {
    let mut rng = seeds::rng(seed);
    let data = (0..4 * 16 * 16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![1, 4, 16, 16], data).unwrap()
}

/// Noise plus a bright square in the left half (label 1) or right half (label 0).
fn separable_clip(label: u8, seed: u64) -> Labeled<f64> {
    let mut x = noise_clip(seed).map(|v| 0.1 * v);
    let x0 = if label == 1 { 2 } else { 10 };
    for t in 0..4 {
        for y in 4..12 {
            for c in x0..x0 + 4 {
                x.data_mut()[(t * 16 + y) * 16 + c] += 2.0;
            }
        }
    }
    Labeled { frames: x, label }
}

fn separable_support(seed: u64) -> Vec<Labeled<f64>> {
    (0..4).map(|i| separable_clip((i % 2) as u8, seeds::derive_indexed(seed, "support", i))).collect()
}

fn ckpt(seed: u64) -> Checkpoint {
    init_checkpoint(&small(), seed).unwrap()
}

fn accuracy(support: &[Labeled<f64>], params: &ModelParams<f64>) -> f64 {
    let clips: Vec<&Tensor<f64>> = support.iter().map(|s| &s.frames).collect();
    let p = predict_all(&clips, params).unwrap();
    let hits = p
        .iter()
        .zip(support)
        .filter(|(p, s)| u8::from(**p >= 0.5) == s.label)
        .count();
    hits as f64 / support.len() as f64
}

#[test]
fn config_invariants() {
    let mut c = TrainConfig::finetune(0);
    c.epochs = 0;
    assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "train.epochs"));
    let mut c = TrainConfig::pretrain(0);
    c.lr = 0.0;
    assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "train.lr"));
    for bad in [0.05, 0.95] {
        let c = TrainConfig {
            mask_ratio: bad,
            ..TrainConfig::pretrain(0)
        };
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "train.mask_ratio"));
    }
    let c = TrainConfig {
        mask_ratio: 0.05,
        ..TrainConfig::finetune(0)
    };
    assert!(c.validate().is_ok());
}

#[test]
fn config_json_rejects_unknown_keys() {
    let text = r#"{"stage":"pretrain","lr":1e-4,"epochs":2,"batch_size":8,"mask_ratio":0.3,"seed":1,"extra":0}"#;
    assert!(serde_json::from_str::<TrainConfig>(text).is_err());
    let c: TrainConfig = serde_json::from_str(&text.replace(r#","extra":0"#, "")).unwrap();
    assert_eq!(c.stage, TrainStage::Pretrain);
}

#[test]
fn pretrain_rejects_empty_dataset_and_wrong_stage() {
    let init: ModelParams<f64> = init_params(&small(), 0).unwrap();
    let err = pretrain(&[], &TrainConfig::pretrain(0), init.clone(), "none").err().unwrap();
    assert!(matches!(err, Error::Config { path, .. } if path == "dataset"));
    let err = pretrain(&[noise_clip(1)], &TrainConfig::finetune(0), init, "x").err().unwrap();
    assert!(matches!(err, Error::Config { path, .. } if path == "train.stage"));
}

#[test]
fn pretrain_trace_length_counts_steps() {
    let clips: Vec<Tensor<f64>> = (0..5).map(noise_clip).collect();
    let init: ModelParams<f64> = init_params(&small(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        ..TrainConfig::pretrain(4)
    };
    let out = pretrain(&clips, &cfg, init, "noise").unwrap();
    assert_eq!(out.trace.len(), 3 * 3);
    assert!(out.trace.iter().enumerate().all(|(i, r)| r.step == i && r.loss.is_finite()));
    let p = &out.checkpoint.provenance;
    assert_eq!((p.stage, p.steps, p.seed, p.dataset.as_str()), (Stage::Pretrain, 9, 4, "noise"));
}

#[test]
fn pretrain_is_deterministic() {
    let clips: Vec<Tensor<f32>> = (0..3).map(|s| noise_clip(s).cast()).collect();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::pretrain(9)
    };
    let run = || {
        let init: ModelParams<f32> = init_params(&small(), 9).unwrap();
        pretrain(&clips, &cfg, init, "noise").unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.trace, b.trace);
    let other = pretrain(&clips, &TrainConfig { seed: 10, ..cfg.clone() }, init_params(&small(), 9).unwrap(), "noise")
        .unwrap();
    assert_ne!(a.trace, other.trace);
}

#[test]
fn pretrain_reduces_reconstruction_loss() {
    let clips: Vec<Tensor<f64>> = separable_support(7).into_iter().map(|s| s.frames).collect();
    let init: ModelParams<f64> = init_params(&small(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 2,
        lr: 1e-3,
        ..TrainConfig::pretrain(0)
    };
    let eval = |p: &ModelParams<f64>| -> f64 {
        let mut total = 0.0;
        for c in &clips {
            for k in 0..16 {
                total += crate::model::pretrain_forward(c, 0.3, 500 + k, p).unwrap();
            }
        }
        total
    };
    let before = eval(&init);
    let out = pretrain(&clips, &cfg, init, "noise").unwrap();
    let after = eval(&out.params);
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn bce_at_half_is_ln2() {
    for y in [0.0, 1.0] {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![1, 1]));
        let l = tape.bce_with_logits(z, &[y]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn finetune_fits_separable_support() {
    let support = separable_support(0);
    let cfg = TrainConfig {
        lr: 1e-3,
        ..TrainConfig::finetune(0)
    };
    let out = finetune(&support, &ckpt(0), &small(), &cfg).unwrap();
    assert_eq!(out.losses.len(), 21);
    assert!((out.losses[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(accuracy(&support, &out.params), 1.0);
    assert!(!out.params.contains("decoder.head.weight"));
}

/// At lr 1e-4 twenty steps move the logits by about 1e-5: the support is
/// ranked correctly but every probability can still sit on one side of 0.5.
#[test]
fn finetune_default_lr_ranks_support() {
    let support = separable_support(0);
    let out = finetune(&support, &ckpt(0), &small(), &TrainConfig::finetune(0)).unwrap();
    let clips: Vec<&Tensor<f64>> = support.iter().map(|s| &s.frames).collect();
    let p = predict_all(&clips, &out.params).unwrap();
    let pos = p.iter().zip(&support).filter(|(_, s)| s.label == 1).map(|(p, _)| *p);
    let neg = p.iter().zip(&support).filter(|(_, s)| s.label == 0).map(|(p, _)| *p);
    assert!(pos.fold(f64::MAX, f64::min) > neg.fold(f64::MIN, f64::max), "{p:?}");
    assert!(out.losses.last().unwrap() < &out.losses[0]);
}

#[test]
fn finetune_rejects_bad_support() {
    let c = ckpt(0);
    let one_class: Vec<_> = (0..3).map(|i| separable_clip(1, i)).collect();
    let err = finetune(&one_class, &c, &small(), &TrainConfig::finetune(0)).err().unwrap();
    assert!(matches!(err, Error::Protocol(_)));
    let err = linear_probe(&one_class, &c, &small(), &TrainConfig::linear_probe(0)).err().unwrap();
    assert!(matches!(err, Error::Protocol(_)));
    let mut bad = separable_support(0);
    bad[0].label = 2;
    assert!(matches!(finetune(&bad, &c, &small(), &TrainConfig::finetune(0)), Err(Error::Protocol(_))));
    let err = finetune(&separable_support(0), &c, &small(), &TrainConfig::pretrain(0)).err().unwrap();
    assert!(matches!(err, Error::Config { .. }));
}

#[test]
fn finetune_leaves_checkpoint_untouched() {
    let c = ckpt(5);
    let before = c.to_bytes().unwrap();
    let out = finetune(&separable_support(1), &c, &small(), &TrainConfig::finetune(5)).unwrap();
    assert_eq!(c.to_bytes().unwrap(), before);
    let w = "encoder.blocks.0.attn.qkv.weight";
    assert_ne!(out.params.get(w).unwrap(), &c.params.get(w).unwrap().cast::<f64>());
}

#[test]
fn finetune_is_deterministic() {
    let support = separable_support(2);
    let run = || finetune(&support, &ckpt(2), &small(), &TrainConfig::finetune(3)).unwrap();
    let (a, b) = (run(), run());
    assert!(a.params.bit_identical(&b.params));
    assert_eq!(a.losses, b.losses);
}

#[test]
fn finetune_bce_is_nonincreasing_in_most_runs() {
    let mut monotone = 0;
    for seed in 0..20 {
        let support = separable_support(100 + seed);
        let out = finetune(&support, &ckpt(seed), &small(), &TrainConfig::finetune(seed)).unwrap();
        if out.losses.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 19, "{monotone}/20 monotone runs");
}

#[test]
fn linear_probe_freezes_encoder() {
    let c = ckpt(3);
    let support = separable_support(3);
    let out = linear_probe(&support, &c, &small(), &TrainConfig::linear_probe(3)).unwrap();
    let reference: ModelParams<f64> = c.transfer(&small(), seeds::derive(3, "transfer")).unwrap().cast();
    for (name, t) in out.params.iter() {
        let same = t.data().iter().zip(reference.get(name).unwrap().data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert_eq!(same, !name.starts_with("classifier."), "{name}");
    }
}

#[test]
fn linear_probe_never_worse_than_untrained() {
    for seed in 0..20 {
        let support: Vec<_> = (0..6)
            .map(|i| Labeled {
                frames: noise_clip(seeds::derive_indexed(seed, "lp", i)),
                label: (i % 2) as u8,
            })
            .collect();
        let c = ckpt(seed);
        let untrained: ModelParams<f64> = c.transfer(&small(), seeds::derive(seed, "transfer")).unwrap().cast();
        let out = linear_probe(&support, &c, &small(), &TrainConfig::linear_probe(seed)).unwrap();
        assert!(accuracy(&support, &out.params) >= accuracy(&support, &untrained), "seed {seed}");
    }
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

/// Damped Newton iterations for logistic regression on rows `z` with a
/// vanishing ridge, returning the fitted probabilities.
fn newton_logistic(z: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = z[0].len() + 1;
    let rows: Vec<Vec<f64>> = z.iter().map(|r| r.iter().copied().chain([1.0]).collect()).collect();
    let mut w = vec![0.0; d];
    let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
    for _ in 0..100 {
        let p: Vec<f64> = rows.iter().map(|r| sigmoid(r.iter().zip(&w).map(|(a, b)| a * b).sum())).collect();
        let mut h = vec![vec![0.0; d]; d];
        let mut g = vec![0.0; d];
        for (r, (pi, yi)) in rows.iter().zip(p.iter().zip(y)) {
            for i in 0..d {
                g[i] += (pi - yi) * r[i];
                for j in 0..d {
                    h[i][j] += pi * (1.0 - pi) * r[i] * r[j];
                }
            }
        }
        for (i, row) in h.iter_mut().enumerate() {
            row[i] += 1e-10;
        }
        let step = solve(h, g);
        for (wi, si) in w.iter_mut().zip(step) {
            *wi -= si;
        }
    }
    rows.iter().map(|r| sigmoid(r.iter().zip(&w).map(|(a, b)| a * b).sum())).collect()
}

#[test]
fn linear_probe_matches_convex_oracle() {
    let c = ckpt(11);
    let clips: Vec<Tensor<f64>> = (0..3).map(|i| noise_clip(40 + i)).collect();
    // Repeated clips with mixed labels give a finite optimum:
    // empirical positive rates 2/3, 1/3 and 1/2.
    let plan = [(0, 1), (0, 1), (0, 0), (1, 1), (1, 0), (1, 0), (2, 1), (2, 0)];
    let support: Vec<Labeled<f64>> = plan
        .iter()
        .map(|&(i, label)| Labeled {
            frames: clips[i].clone(),
            label,
        })
        .collect();
    let cfg = TrainConfig {
        lr: 0.3,
        epochs: 4000,
        ..TrainConfig::linear_probe(11)
    };
    let out = linear_probe(&support, &c, &small(), &cfg).unwrap();
    let refs: Vec<&Tensor<f64>> = clips.iter().collect();
    let probe = predict_all(&refs, &out.params).unwrap();

    let feats = cls_features(&refs, &out.params).unwrap();
    let z: Vec<Vec<f64>> = plan.iter().map(|&(i, _)| feats.row(i).to_vec()).collect();
    let y: Vec<f64> = plan.iter().map(|&(_, l)| f64::from(l)).collect();
    let oracle = newton_logistic(&z, &y);
    for (k, expected) in [(0, 2.0 / 3.0), (3, 1.0 / 3.0), (6, 0.5)] {
        assert!((oracle[k] - expected).abs() < 1e-6, "oracle {} vs {expected}", oracle[k]);
        let i = plan[k].0;
        assert!((probe[i] - oracle[k]).abs() < 1e-3, "clip {i}: probe {} oracle {}", probe[i], oracle[k]);
    }
}

#[test]
fn loss_trace_csv_has_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let trace = [LossRecord { step: 0, loss: 0.5 }, LossRecord { step: 1, loss: 0.25 }];
    write_loss_trace(&trace, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "step,loss\n0,0.5\n1,0.25\n");
}
