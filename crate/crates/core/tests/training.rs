use std::path::Path;

use msmvd::datasets::{load_dataset, Dataset};
use msmvd::inference::{InferenceConfig, Predictor};
use msmvd::network::{load_checkpoint, BackboneConfig, NetworkConfig};
use msmvd::scenegen::{Scene, SceneSpec};
use msmvd::trainer::{evaluate_model, train_new, TrainConfig, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE};

fn toy_dataset(root: &Path) -> Dataset {
    let spec = SceneSpec {
        region: (4.0, 4.0),
        n_cameras: 3,
        n_pedestrians_range: (2, 4),
        image_size: (64, 64),
        n_frames: 4,
        seed: 5,
        cell_size: 0.125,
        ..SceneSpec::default()
    };
    let out = root.join("data");
    Scene::generate(&spec).unwrap().write(&out).unwrap();
    load_dataset(&out).unwrap()
}

fn tiny() -> NetworkConfig {
    NetworkConfig { backbone: BackboneConfig::tiny(), channels: 8, ..NetworkConfig::default() }
}

fn quick() -> TrainConfig {
    TrainConfig { epochs: 1, accumulation: 2, augmentation: None, target_diameters: [6.0, 3.0, 2.0], ..TrainConfig::default() }
}

#[test]
fn one_epoch_writes_checkpoints_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    let out = dir.path().join("run");
    let (_, _, report) = train_new(&tiny(), &ds, &quick(), &out).unwrap();
    assert_eq!(report.steps, 2);
    assert_eq!(report.losses.len(), 4);
    assert!(report.losses.iter().all(|l| l.is_finite() && *l > 0.0));
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "frame").count(), 4);
    assert_eq!(kinds.iter().filter(|k| *k == "step").count(), 2);
    assert_eq!(kinds.iter().filter(|k| *k == "val").count(), 1);
}

#[test]
fn reloaded_checkpoint_reproduces_validation_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    let out = dir.path().join("run");
    let cfg = TrainConfig { epochs: 2, ..quick() };
    let (model, params, report) = train_new(&tiny(), &ds, &cfg, &out).unwrap();
    let icfg = InferenceConfig { threshold: 0.05, ..InferenceConfig::default() };
    let idx = ds.train_indices();
    let live = Predictor::new(model, params, &ds.calibrations, ds.grid()).unwrap();
    let ck = load_checkpoint(&out.join(LAST_CHECKPOINT)).unwrap();
    let loaded = Predictor::new(ck.model, ck.params, &ds.calibrations, ds.grid()).unwrap();
    let (a, da) = evaluate_model(&live, &ds, &idx, &icfg, 0.5).unwrap();
    let (b, db) = evaluate_model(&loaded, &ds, &idx, &icfg, 0.5).unwrap();
    assert_eq!(da, db);
    assert_eq!((a.moda, a.modp, a.tp, a.fp), (b.moda, b.modp, b.tp, b.fp));
    assert_eq!(report.history.len(), 2);
}

#[test]
fn fixed_seed_reproduces_the_loss_curve_and_seed_changes_it() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    let cfg = TrainConfig { epochs: 2, augmentation: Some((0.8, 1.2)), ..quick() };
    let run = |name: &str, seed: u64| {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        train_new(&tiny(), &ds, &cfg, &dir.path().join(name)).unwrap().2.losses
    };
    let (a, b, c) = (run("a", 1), run("b", 1), run("c", 2));
    assert_eq!(a, b);
    assert_ne!(a, c);
}
