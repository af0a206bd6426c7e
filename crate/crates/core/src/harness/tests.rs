use super::*;
use crate::clipdata::{ClipGeometry, FrameSampling};
use crate::fewshot_eval::Method;
use crate::model::{load_checkpoint, ModelConfig, StackConfig};

/// A configuration small enough to run every command in seconds.
pub(crate) fn tiny_experiment(dir: &Path) -> ExperimentConfig {
    let mut exp = ExperimentConfig {
        seed: 5,
        output_dir: dir.to_path_buf(),
        model: ModelConfig {
            frame_shape: [1, 4, 16, 16],
            tubelet: [2, 4, 4],
            encoder: StackConfig {
                dim: 8,
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
        },
        ..ExperimentConfig::default()
    };
    exp.data.geometry = ClipGeometry {
        channels: 1,
        frames: 8,
        height: 16,
        width: 16,
    };
    exp.data.sampling = FrameSampling {
        frames: 4,
        ..FrameSampling::default()
    };
    exp.data.rodent_seizure = 2;
    exp.data.rodent_normal_pool = 4;
    exp.data.rodent_normal = 2;
    exp.data.human_normal = 2;
    exp.pretrain.epochs = 1;
    exp.pretrain.batch_size = 4;
    exp.finetune.epochs = 2;
    exp.eval.n_splits = 1;
    exp
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn default_config_is_valid_and_roundtrips() {
    let exp = ExperimentConfig::default();
    exp.validate().unwrap();
    let back = ExperimentConfig::from_json(&exp.to_json().unwrap()).unwrap();
    assert_eq!(back, exp);
    assert_eq!(ExperimentConfig::from_json("{}").unwrap(), exp);
    assert_eq!(exp.sweep.ratios.len(), 9);
    assert_eq!(exp.sweep.configurations.len(), 5);
}

#[test]
fn config_errors_name_the_field() {
    let path_of = |text: &str| match ExperimentConfig::from_json(text) {
        Err(Error::Config { path, .. }) => path,
        other => panic!("expected config error, got {other:?}"),
    };
    assert_eq!(path_of(r#"{"pretrain": {"mask_ratio": 0.95}}"#), "pretrain.mask_ratio");
    assert_eq!(path_of(r#"{"pretrain": {"epochs": "many"}}"#), "pretrain.epochs");
    assert_eq!(path_of(r#"{"eval": {"bogus": 1}}"#), "eval.bogus");
    assert_eq!(path_of(r#"{"finetune": {"epochs": 0}}"#), "finetune.epochs");
    assert_eq!(path_of(r#"{"sweep": {"ratios": [0.3, 1.5]}}"#), "sweep.ratios[1]");
    assert_eq!(path_of(r#"{"eval": {"shots": [1]}}"#), "eval.shots");
    assert_eq!(path_of(r#"{"ablate": {"configurations": ["+Q"]}}"#), "ablate.configurations[0]");
    assert_eq!(path_of(r#"{"model": {"encoder": {"dim": 10, "depth": 1, "heads": 4}}}"#), "model.encoder");
    assert_eq!(path_of(r#"{"data": {"sampling": {"frames": 8}}}"#), "model.frame_shape");
    assert_eq!(path_of(r#"{"seed": -1}"#), "seed");
}

#[test]
fn output_dir_env_override() {
    let exp = ExperimentConfig::default();
    std::env::set_var(OUTPUT_ENV, "/tmp/preictal-override");
    let got = exp.clone().with_env_overrides();
    std::env::remove_var(OUTPUT_ENV);
    assert_eq!(got.output_dir, PathBuf::from("/tmp/preictal-override"));
    assert_eq!(got.cache_dir(), PathBuf::from("/tmp/preictal-override/cache"));
}

#[test]
fn commands_parse_by_name() {
    for c in Command::ALL {
        assert_eq!(c.name().parse::<Command>().unwrap(), c);
    }
    assert!(matches!("train".parse::<Command>(), Err(Error::Config { .. })));
}

#[test]
fn cache_hits_and_keys() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny_experiment(dir.path());
    let cache = CheckpointCache::new(exp.cache_dir());
    let c = Configuration::RodentBoth;
    let (a, first) = cache.get_or_train(&exp, c, 0.3, |_| {}).unwrap();
    assert_eq!(first, CacheOutcome::Trained(1));
    let (b, second) = cache.get_or_train(&exp, c, 0.3, |_| {}).unwrap();
    assert_eq!(second, CacheOutcome::Hit);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let (_, other) = cache.get_or_train(&exp, c, 0.5, |_| {}).unwrap();
    assert_eq!(other, CacheOutcome::Trained(1));
    assert_ne!(cache.path(c, 0.3, 1), cache.path(c, 0.5, 1));
    let (_, base) = cache.get_or_train(&exp, Configuration::Base, 0.3, |_| {}).unwrap();
    assert_eq!(base, CacheOutcome::Init);

    // A fresh cache object over the same directory sees the files.
    let again = CheckpointCache::new(exp.cache_dir());
    assert_eq!(again.get_or_train(&exp, c, 0.3, |_| {}).unwrap().1, CacheOutcome::Hit);
}

#[test]
fn stale_cache_entries_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = tiny_experiment(dir.path());
    let cache = CheckpointCache::new(exp.cache_dir());
    let c = Configuration::Human;
    cache.get_or_train(&exp, c, 0.3, |_| {}).unwrap();
    exp.pretrain.epochs = 2;
    let err = cache.get_or_train(&exp, c, 0.3, |_| {}).unwrap_err();
    assert!(matches!(&err, Error::StaleCache { message, .. } if message.contains("steps")), "{err}");

    exp.pretrain.epochs = 1;
    let path = cache.path(c, 0.3, exp.pretrain_config(0.3).seed);
    let mut ckpt = load_checkpoint(&path).unwrap();
    ckpt.provenance.dataset = "+R(Y)".into();
    crate::model::save_checkpoint(&ckpt, &path).unwrap();
    assert!(matches!(cache.get_or_train(&exp, c, 0.3, |_| {}), Err(Error::StaleCache { .. })));
}

#[test]
fn ablate_counts_and_warm_cache() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny_experiment(dir.path());
    let first = run_command(Command::Ablate, &exp, &mut quiet()).unwrap();
    assert_eq!(first.pretrain_steps, 6);
    let ablation = fs::read_to_string(first.dir.join("ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 1 + 72);
    assert!(ablation.starts_with("config,shot,metric,value\n"));
    let results = fs::read(first.dir.join("results.csv")).unwrap();

    let second = run_command(Command::Ablate, &exp, &mut quiet()).unwrap();
    assert_eq!(second.pretrain_steps, 0);
    assert_eq!(fs::read(second.dir.join("results.csv")).unwrap(), results);

    let resolved = ExperimentConfig::load(first.dir.join("resolved_config.json")).unwrap();
    assert_eq!(resolved, exp);
    let version = fs::read_to_string(first.dir.join("tool_version.txt")).unwrap();
    assert_eq!(version.trim(), TOOL_VERSION);
}

#[test]
fn sweep_emits_full_grid_deterministically() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = tiny_experiment(dir.path());
        exp.eval.shots = vec![2, 3, 4];
        let s = run_command(Command::SweepMask, &exp, &mut quiet()).unwrap();
        (fs::read(s.dir.join("sweep.csv")).unwrap(), dir)
    };
    let (a, _d1) = run();
    let (b, _d2) = run();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 180);
    assert!(text.starts_with("ratio,config,shot,bacc\n0.1,+H,2,"));
    assert!(text.contains("\n0.9,+R(Y/N)+H,avg,"));
}

#[test]
fn finetune_and_evaluate_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = tiny_experiment(dir.path());
    exp.finetune.method = Method::LinearProbe;
    let s = run_command(Command::Finetune, &exp, &mut quiet()).unwrap();
    let preds = fs::read_to_string(s.dir.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 36);
    let ck = load_checkpoint(s.dir.join("finetuned.ckpt")).unwrap();
    assert_eq!(ck.provenance.stage, crate::model::Stage::LinearProbe);
    assert_eq!(fs::read_to_string(s.dir.join("loss.csv")).unwrap().lines().count(), 1 + 3);

    exp.eval.shots = vec![2];
    let s = run_command(Command::Evaluate, &exp, &mut quiet()).unwrap();
    let results = fs::read_to_string(s.dir.join("results.csv")).unwrap();
    for label in ["+R(Y/N)+H,", "+R(Y/N)+H:linear_probe,", "+H,", "Base,", "+R(Y/N)+H:zero_shot,", "Base:zero_shot,"] {
        assert!(results.lines().any(|l| l.starts_with(label)), "{label}");
    }
    assert!(results.contains("\nBase:zero_shot,avg,mean,0.5,0.5,"));
}

#[test]
fn gen_data_and_pretrain_write_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny_experiment(dir.path());
    let s = run_command(Command::GenData, &exp, &mut quiet()).unwrap();
    assert_eq!(crate::clipdata::read_manifest(&s.dir.join("pool")).unwrap().len(), 40);
    assert_eq!(crate::clipdata::read_manifest(&s.dir.join("pretrain")).unwrap().len(), 6);
    let s = run_command(Command::Pretrain, &exp, &mut quiet()).unwrap();
    assert_eq!(s.pretrain_steps, 6);
    let rows = fs::read_to_string(s.dir.join("checkpoints.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 5);
}

mod schema {
    use std::collections::BTreeSet;
    use std::path::PathBuf;

    use serde_json::Value;

    use crate::clipdata::Configuration;
    use crate::harness::ExperimentConfig;

    fn repo_file(rel: &str) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
    }

    fn schema() -> Value {
        let text = std::fs::read_to_string(repo_file("schema/experiment.schema.json")).unwrap();
        serde_json::from_str(&text).unwrap()
    }

    fn resolve<'a>(root: &'a Value, node: &'a Value) -> &'a Value {
        match node.get("$ref").and_then(Value::as_str) {
            Some(r) => {
                let name = r.strip_prefix("#/$defs/").expect("local ref");
                &root["$defs"][name]
            }
            None => node,
        }
    }

    /// Collects dotted key paths of every object field in `value`.
    fn value_paths(value: &Value, prefix: &str, out: &mut BTreeSet<String>) {
        match value {
            Value::Object(map) => {
                for (k, v) in map {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    out.insert(path.clone());
                    value_paths(v, &path, out);
                }
            }
            Value::Array(items) => {
                for v in items {
                    value_paths(v, &format!("{prefix}[]"), out);
                }
            }
            _ => {}
        }
    }

    fn schema_paths(root: &Value, node: &Value, prefix: &str, out: &mut BTreeSet<String>) {
        let node = resolve(root, node);
        if let Some(props) = node.get("properties").and_then(Value::as_object) {
            assert_eq!(node["additionalProperties"], Value::Bool(false), "{prefix} must be closed");
            for (k, v) in props {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                out.insert(path.clone());
                schema_paths(root, v, &path, out);
            }
        }
        if let Some(items) = node.get("items") {
            schema_paths(root, items, &format!("{prefix}[]"), out);
        }
    }

    #[test]
    fn schema_covers_exactly_the_config_fields() {
        let root = schema();
        let mut declared = BTreeSet::new();
        schema_paths(&root, &root, "", &mut declared);
        let default = serde_json::to_value(ExperimentConfig::default()).unwrap();
        let mut used = BTreeSet::new();
        value_paths(&default, "", &mut used);
        assert_eq!(declared, used);
    }

    #[test]
    fn schema_enums_match_configuration_labels() {
        let root = schema();
        let labels: Vec<Value> = Configuration::ALL.iter().map(|c| Value::from(c.label())).collect();
        assert_eq!(root["$defs"]["configuration"]["enum"].as_array().unwrap(), &labels);
        let pretrained: Vec<Value> = Configuration::ALL
            .iter()
            .filter(|c| c.pretrains())
            .map(|c| Value::from(c.label()))
            .collect();
        assert_eq!(root["$defs"]["pretrained_configuration"]["enum"].as_array().unwrap(), &pretrained);
    }

    #[test]
    fn shipped_configs_load() {
        let default = ExperimentConfig::load(repo_file("configs/default.json")).unwrap();
        assert_eq!(default, ExperimentConfig::default());
        let smoke = ExperimentConfig::load(repo_file("configs/smoke.json")).unwrap();
        assert_eq!(smoke.model.frame_shape, [1, 4, 16, 16]);
    }
}
