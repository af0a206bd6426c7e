use rand::Rng;

use super::*;
use crate::clipdata::{generate_synthetic_clip, sample_frames, ClipGeometry, ClipMeta, Condition, FrameSampling, Species};
use crate::numerics::gradcheck::{numeric_gradients, GradCheckReport};
use crate::numerics::Tensor;
use crate::seeds;
use crate::tubelet::{make_tube_mask, masked_cell_count, patchify, select_visible, TubeMask};

fn tiny(depth: usize) -> ModelConfig {
    ModelConfig {
        frame_shape: [1, 4, 8, 8],
        tubelet: [2, 4, 4],
        encoder: StackConfig {
            dim: 8,
            depth,
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

fn random_frames<T: crate::Scalar>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    let mut rng = seeds::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

fn probe_clip() -> Tensor<f32> {
    let meta = ClipMeta::new("probe", Species::Human, Condition::Preictal, 7);
    let clip = generate_synthetic_clip(&meta, &ClipGeometry::default()).unwrap();
    sample_frames(&clip, &FrameSampling::default()).unwrap()
}

#[test]
fn init_is_deterministic_per_seed() {
    let c = ModelConfig::default();
    let a: ModelParams<f32> = init_params(&c, 3).unwrap();
    let b: ModelParams<f32> = init_params(&c, 3).unwrap();
    let d: ModelParams<f32> = init_params(&c, 4).unwrap();
    assert!(a.bit_identical(&b));
    assert!(!a.bit_identical(&d));
    assert!(a.all_finite());
}

#[test]
fn default_parameter_count_matches_closed_form() {
    let c = ModelConfig::default();
    let p: ModelParams<f32> = init_params(&c, 0).unwrap();
    let token = 2 * 8 * 8;
    let block = |d: usize| 12 * d * d + 13 * d;
    let (de, dd) = (64, 32);
    let expected = (token * de + de)
        + 4 * block(de)
        + (de * dd + dd)
        + dd
        + 2 * block(dd)
        + 2 * dd
        + (dd * token + token)
        + de
        + (de + 1);
    assert_eq!(expected, 240_129);
    assert_eq!(p.num_scalars(), expected);
}

#[test]
fn initial_weights_are_truncated_at_two_std() {
    let p: ModelParams<f64> = init_params(&ModelConfig::default(), 1).unwrap();
    let w = p.get("encoder.blocks.0.mlp.fc1.weight").unwrap();
    assert!(w.data().iter().all(|v| v.abs() <= 0.04));
    let mean = w.data().iter().sum::<f64>() / w.numel() as f64;
    let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.numel() as f64;
    // Truncation at 2 std shrinks the std by a factor of about 0.88.
    assert!((var.sqrt() - 0.0176).abs() < 0.001, "{}", var.sqrt());
    assert!(p.get("classifier.weight").unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(p.get("classifier.bias").unwrap().data(), &[0.0]);
}

#[test]
fn sinusoidal_table_first_rows() {
    let t: Tensor<f64> = sinusoidal_table(3, 4);
    assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
    assert!((t.row(1)[0] - 1f64.sin()).abs() < 1e-15);
    assert!((t.row(1)[3] - (1.0f64 / 100.0).cos()).abs() < 1e-15);
}

#[test]
fn untrained_head_predicts_exactly_half() {
    let p: ModelParams<f32> = init_params(&ModelConfig::default(), 0).unwrap();
    assert_eq!(classify_forward(&probe_clip(), &p).unwrap(), 0.5);
}

#[test]
fn classifier_bias_saturates_and_is_monotone() {
    let mut p: ModelParams<f64> = init_params(&tiny(1), 2).unwrap();
    let x = random_frames::<f64>([1, 4, 8, 8], 9);
    p.get_mut("classifier.weight").unwrap().data_mut().fill(0.3);
    let mut last = 0.0;
    for b in [-2.0, -0.5, 0.0, 0.7, 3.0] {
        p.get_mut("classifier.bias").unwrap().data_mut()[0] = b;
        let y = classify_forward(&x, &p).unwrap();
        assert!(y > last && y < 1.0);
        last = y;
    }
    p.get_mut("classifier.weight").unwrap().data_mut().fill(0.0);
    p.get_mut("classifier.bias").unwrap().data_mut()[0] = 10.0;
    assert!(classify_forward(&x, &p).unwrap() >= 0.9999);
}

#[test]
fn encode_shapes_with_and_without_cls() {
    let c = ModelConfig::default();
    let p: ModelParams<f32> = init_params(&c, 0).unwrap();
    let grid = c.grid().unwrap();
    let tokens = patchify(&probe_clip(), &grid).unwrap();
    let mask = make_tube_mask(&grid, 0.3, 5).unwrap();
    let (vis, idx) = select_visible(&tokens, &mask).unwrap();
    let v = idx.len();
    assert_eq!(encode(&vis, &idx, &p, false).unwrap().shape(), &[v, 64]);
    assert_eq!(encode(&vis, &idx, &p, true).unwrap().shape(), &[v + 1, 64]);
}

#[test]
fn encode_rejects_out_of_range_positions() {
    let c = tiny(1);
    let p: ModelParams<f64> = init_params(&c, 0).unwrap();
    let tokens = Tensor::zeros(vec![2, 32]);
    let err = encode(&tokens, &[0, 8], &p, false).unwrap_err();
    assert!(matches!(err, crate::Error::Index(_)), "{err:?}");
}

#[test]
fn encoder_is_permutation_equivariant() {
    let c = tiny(2);
    let p: ModelParams<f64> = init_params(&c, 11).unwrap();
    let grid = c.grid().unwrap();
    let tokens = patchify(&random_frames::<f64>([1, 4, 8, 8], 1), &grid).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let perm = [5, 2, 7, 0, 3, 6, 1, 4];
    let mut rows = Vec::new();
    for &i in &perm {
        rows.extend_from_slice(tokens.row(i));
    }
    let permuted = Tensor::new(vec![8, 32], rows).unwrap();
    let base = encode(&tokens, &idx, &p, true).unwrap();
    let out = encode(&permuted, &perm, &p, true).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in out.row(k + 1).iter().zip(base.row(i + 1)) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
    for (a, b) in out.row(0).iter().zip(base.row(0)) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn zero_depth_encoder_is_projection_plus_position() {
    let c = tiny(0);
    let p: ModelParams<f64> = init_params(&c, 4).unwrap();
    let grid = c.grid().unwrap();
    let tokens = patchify(&random_frames::<f64>([1, 4, 8, 8], 2), &grid).unwrap();
    let idx = [1, 4, 6];
    let mut rows = Vec::new();
    for &i in &idx {
        rows.extend_from_slice(tokens.row(i));
    }
    let vis = Tensor::new(vec![3, 32], rows).unwrap();
    let z = encode(&vis, &idx, &p, false).unwrap();
    let w = p.get("patch_embed.weight").unwrap();
    let b = p.get("patch_embed.bias").unwrap();
    let proj = vis.matmul(w).unwrap();
    for (k, &i) in idx.iter().enumerate() {
        for j in 0..8 {
            let expected = proj.row(k)[j] + b.data()[j] + p.pos_encoder().row(i)[j];
            assert!((z.row(k)[j] - expected).abs() < 1e-12);
        }
    }
}

fn mask_from_spatial(grid: crate::tubelet::TubeletGrid, spatial: &[bool]) -> TubeMask {
    TubeMask::from_bits(grid, spatial.repeat(grid.counts[0])).unwrap()
}

#[test]
fn decoder_output_shapes() {
    let c = ModelConfig::default();
    let p: ModelParams<f32> = init_params(&c, 0).unwrap();
    let grid = c.grid().unwrap();
    let tokens = patchify(&probe_clip(), &grid).unwrap();
    let cells = grid.spatial_cells();

    let mask = make_tube_mask(&grid, 0.3, 2).unwrap();
    let expected = masked_cell_count(0.3, cells) * grid.counts[0];
    let (vis, idx) = select_visible(&tokens, &mask).unwrap();
    let z = encode(&vis, &idx, &p, false).unwrap();
    assert_eq!(decode_reconstruct(&z, &mask, &p).unwrap().shape(), &[expected, 128]);

    let mut one_visible = vec![true; cells];
    one_visible[3] = false;
    let mut one_masked = vec![false; cells];
    one_masked[9] = true;
    for (spatial, m) in [(one_visible, cells - 1), (one_masked, 1)] {
        let mask = mask_from_spatial(grid, &spatial);
        let (vis, idx) = select_visible(&tokens, &mask).unwrap();
        let z = encode(&vis, &idx, &p, false).unwrap();
        let out = decode_reconstruct(&z, &mask, &p).unwrap();
        assert_eq!(out.shape(), &[m * grid.counts[0], 128]);
    }
}

#[test]
fn decoder_rejects_inconsistent_rows() {
    let c = tiny(1);
    let p: ModelParams<f64> = init_params(&c, 0).unwrap();
    let mask = make_tube_mask(&c.grid().unwrap(), 0.5, 0).unwrap();
    let z = Tensor::zeros(vec![mask.len(), 8]);
    assert!(matches!(decode_reconstruct(&z, &mask, &p), Err(crate::Error::Dimension(_))));
}

#[test]
fn reconstruction_gradient_reaches_every_encoder_weight() {
    let c = ModelConfig::default();
    let p: ModelParams<f32> = init_params(&c, 0).unwrap();
    let x = probe_clip();
    let mut s = Session::new(&p);
    let loss = s.pretrain_loss(&x, 0.3, 1).unwrap();
    let g = s.backward(loss).unwrap();
    for (i, name) in p.names().iter().enumerate() {
        if (name.starts_with("encoder.") || name.starts_with("patch_embed.")) && name.ends_with("weight") {
            let gi = g.get(i).unwrap_or_else(|| panic!("{name} unreachable"));
            assert!(gi.iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }
    assert!(g.get(p.index_of("cls_token").unwrap()).is_none());
}

#[test]
fn pretrain_loss_is_nonnegative_and_deterministic() {
    let p: ModelParams<f32> = init_params(&ModelConfig::default(), 0).unwrap();
    let x = probe_clip();
    let a = pretrain_forward(&x, 0.3, 4, &p).unwrap();
    let b = pretrain_forward(&x, 0.3, 4, &p).unwrap();
    assert!(a >= 0.0);
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn zero_head_loss_is_mean_squared_target() {
    let c = tiny(1);
    let mut p: ModelParams<f64> = init_params(&c, 0).unwrap();
    p.get_mut("decoder.head.weight").unwrap().data_mut().fill(0.0);
    let x = random_frames::<f64>([1, 4, 8, 8], 3).map(|v| v - 0.5);
    let grid = c.grid().unwrap();
    let mask = make_tube_mask(&grid, 0.5, 8).unwrap();
    let tokens = patchify(&x, &grid).unwrap();
    let mut sum = 0.0;
    let mut n = 0;
    for i in mask.masked_indices() {
        for v in tokens.row(i) {
            sum += v * v;
            n += 1;
        }
    }
    let mut s = Session::new(&p);
    let loss = s.masked_loss(&tokens, &mask).unwrap();
    assert!((s.value(loss).data()[0] - sum / n as f64).abs() < 1e-15);
}

/// Reverse-mode gradients of the reconstruction loss against central
/// differences over every parameter of a tiny model.
pub(crate) fn pipeline_gradcheck(seed: u64) -> GradCheckReport {
    let c = tiny(1);
    let p: ModelParams<f64> = init_params(&c, seed).unwrap();
    // Spread the weights so no layer is near-linear.
    let scaled: Vec<Tensor<f64>> = p
        .tensors()
        .iter()
        .zip(p.names())
        .map(|(t, n)| if n.ends_with("bias") { t.clone() } else { t.map(|v| v * 10.0) })
        .collect();
    let p = p.with_tensors(scaled).unwrap();
    let x = random_frames::<f64>([1, 4, 8, 8], seed);
    let mask = make_tube_mask(&c.grid().unwrap(), 0.5, seed).unwrap();
    let tokens = patchify(&x, &c.grid().unwrap()).unwrap();

    let mut s = Session::new(&p);
    let loss = s.masked_loss(&tokens, &mask).unwrap();
    let g = s.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = (0..p.len())
        .map(|i| g.get(i).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensors()[i].numel()]))
        .collect();
    let numeric = numeric_gradients(
        p.tensors(),
        |ts| {
            let q = p.with_tensors(ts.to_vec())?;
            let mut s = Session::new(&q);
            let l = s.masked_loss(&tokens, &mask)?;
            Ok(s.value(l).data()[0])
        },
        1e-5,
    )
    .unwrap();
    GradCheckReport::compare(analytic, numeric)
}

#[test]
fn pipeline_gradients_match_finite_differences() {
    for seed in 0..2 {
        let r = pipeline_gradcheck(seed);
        let total = GradCheckReport::compare(
            vec![r.analytic.concat()],
            vec![r.numeric.concat()],
        );
        assert!(total.max_relative_error() <= 1e-3, "seed {seed}: {}", total.max_relative_error());
    }
}

fn pretrain_ckpt() -> Checkpoint {
    let p: ModelParams<f32> = init_params(&ModelConfig::default(), 21).unwrap();
    Checkpoint::new(
        p,
        Provenance {
            stage: Stage::Pretrain,
            dataset: "+R(Y/N)+H".into(),
            mask_ratio: 0.3,
            steps: 450,
            seed: 21,
        },
    )
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let ck = pretrain_ckpt();
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(back.params.bit_identical(&ck.params));
    assert_eq!(back.provenance, ck.provenance);
    assert_eq!(back.config(), ck.config());
    let x = probe_clip();
    let mut p = ck.params.clone();
    p.get_mut("classifier.bias").unwrap().data_mut()[0] = 0.25;
    p.get_mut("classifier.weight").unwrap().data_mut().fill(0.01);
    let q = Checkpoint::from_bytes(&Checkpoint::new(p.clone(), ck.provenance.clone()).to_bytes().unwrap())
        .unwrap()
        .params;
    assert_eq!(
        classify_forward(&x, &p).unwrap().to_bits(),
        classify_forward(&x, &q).unwrap().to_bits()
    );
}

#[test]
fn transfer_keeps_encoder_and_resets_head() {
    let ck = pretrain_ckpt();
    let before = ck.clone();
    let mut src = ck.params.clone();
    src.get_mut("classifier.bias").unwrap().data_mut()[0] = 3.0;
    let ck = Checkpoint::new(src, ck.provenance);
    let p = ck.transfer(&ModelConfig::default(), 99).unwrap();
    for (name, t) in p.iter() {
        if name.starts_with("encoder.") || name.starts_with("patch_embed.") {
            assert_eq!(t.data(), ck.params.get(name).unwrap().data(), "{name}");
        }
    }
    assert!(!p.names().iter().any(|n| n.starts_with("decoder.")));
    assert!(p.get("classifier.weight").unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(p.get("classifier.bias").unwrap().data(), &[0.0]);
    assert_ne!(p.get("cls_token").unwrap().data(), ck.params.get("cls_token").unwrap().data());
    assert!(before.params.get("encoder.blocks.0.attn.qkv.weight").unwrap().data()
        == ck.params.get("encoder.blocks.0.attn.qkv.weight").unwrap().data());
    assert_eq!(classify_forward(&probe_clip(), &p).unwrap(), 0.5);
}

#[test]
fn grid_mismatch_is_a_compatibility_error() {
    let ck = pretrain_ckpt();
    let model = ModelConfig {
        tubelet: [2, 4, 4],
        ..ModelConfig::default()
    };
    match ck.transfer(&model, 0) {
        Err(crate::Error::Compatibility { fields }) => {
            assert_eq!(fields.len(), 1);
            assert!(fields[0].starts_with("tubelet"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = pretrain_ckpt().to_bytes().unwrap();
    let short = &bytes[..bytes.len() - 1];
    assert!(matches!(Checkpoint::from_bytes(short), Err(crate::Error::Truncated { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(crate::Error::Format { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(crate::Error::Format { field, .. }) if field == "magic"));
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&nan), Err(crate::Error::Format { .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(crate::Error::Truncated { .. })));
}

#[test]
fn config_validation_names_the_field() {
    let c = ModelConfig {
        encoder: StackConfig {
            dim: 10,
            depth: 1,
            heads: 4,
        },
        ..ModelConfig::default()
    };
    match c.validate() {
        Err(crate::Error::Config { path, .. }) => assert_eq!(path, "model.encoder"),
        other => panic!("unexpected {other:?}"),
    }
}
