use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msmvd::datasets::load_dataset;
use msmvd::inference::parse_detections;

const SCENE: &str = r#"
region = [4.0, 4.0]
n_cameras = 3
camera_layout = "ring"
n_pedestrians_range = [2, 4]
n_frames = 4
image_size = [64, 64]
seed = 11
cell_size = 0.125
"#;

const RUN: &str = r#"
dataset = "data"

[network]
channels = 8

[network.backbone]
stem = 4
stages = [4, 4, 8, 8]
blocks = [1, 1, 1, 1]

[train]
epochs = 1
accumulation = 2
augmentation = false
target_diameters = [6.0, 3.0, 2.0]
"#;

fn msmvd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msmvd"))
        .args(args)
        .env_remove("MSMVD_SEED")
        .env_remove("MSMVD_OUT")
        .env_remove("MSMVD_CONFIG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str) -> PathBuf {
    let spec = dir.join("scene.toml");
    std::fs::write(&spec, SCENE).unwrap();
    let out = dir.join(name);
    let o = msmvd(&["gen-data", "--config", s(&spec), "--out", s(&out)]);
    assert!(o.status.success(), "gen-data failed: {}", stderr(&o));
    out
}

/// Relative path and bytes of every file below `root`, sorted.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut acc = Vec::new();
    walk(root, root, &mut acc);
    acc.sort();
    acc
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a");
    let b = gen(dir.path(), "b");
    let strip = |t: Vec<(PathBuf, Vec<u8>)>| -> Vec<_> {
        t.into_iter().filter(|(p, _)| p != Path::new("run_manifest.json")).collect()
    };
    let (ta, tb) = (strip(tree(&a)), strip(tree(&b)));
    assert!(ta.len() > 4);
    assert_eq!(ta, tb);
    let (da, db) = (load_dataset(&a).unwrap(), load_dataset(&b).unwrap());
    assert_eq!(da.manifest.dataset_hash, db.manifest.dataset_hash);
    assert!(a.join("run_manifest.json").exists());
}

#[test]
fn seed_override_changes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a");
    let b = dir.path().join("b");
    let spec = dir.path().join("scene.toml");
    let o = msmvd(&["gen-data", "--config", s(&spec), "--out", s(&b), "--seed", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(load_dataset(&a).unwrap().manifest.dataset_hash, load_dataset(&b).unwrap().manifest.dataset_hash);
}

#[test]
fn invalid_camera_layout_is_a_usage_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scene.toml");
    std::fs::write(&spec, SCENE.replace("\"ring\"", "\"spiral\"")).unwrap();
    let o = msmvd(&["gen-data", "--config", s(&spec), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("camera_layout"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let o = msmvd(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("nope.ckpt")),
        "--dataset",
        s(&data),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn ground_truth_detections_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let ds = load_dataset(&data).unwrap();
    let mut text = String::from("# frame_id x y score\n");
    for i in 0..ds.len() {
        for a in ds.load_annotations(i).unwrap() {
            text.push_str(&format!("{} {} {} 1.0\n", ds.manifest.frames[i].frame_id, a.x, a.y));
        }
    }
    let dets = dir.path().join("gt.txt");
    std::fs::write(&dets, text).unwrap();
    let out = dir.path().join("eval");
    let o = msmvd(&["eval", "--detections", s(&dets), "--dataset", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("MODA 100.0"), "{}", stdout(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["moda"], 1.0);
}

#[test]
fn train_eval_infer_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let run = dir.path().join("run.toml");
    std::fs::write(&run, RUN).unwrap();
    let train_out = dir.path().join("train");
    let o = msmvd(&["train", "--config", s(&run), "--out", s(&train_out)]);
    assert!(o.status.success(), "train failed: {}", stderr(&o));
    assert!(stdout(&o).contains("MODA "));
    for f in ["best.ckpt", "last.ckpt", "train_log.jsonl", "report.json", "run_manifest.json"] {
        assert!(train_out.join(f).exists(), "missing {f}");
    }
    let ckpt = train_out.join("best.ckpt");

    let eval_out = dir.path().join("eval");
    let o = msmvd(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--split", "all", "--out", s(&eval_out)]);
    assert!(o.status.success(), "eval failed: {}", stderr(&o));
    let table = stdout(&o);
    for key in ["MODA", "MODP", "Precision", "Recall"] {
        assert!(table.contains(key), "{table}");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval_out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["moda"].is_number());

    let infer_out = dir.path().join("infer");
    let o = msmvd(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
        "--threshold",
        "0.05",
        "--maps",
        "--out",
        s(&infer_out),
    ]);
    assert!(o.status.success(), "infer failed: {}", stderr(&o));
    let det_path = infer_out.join("detections.txt");
    let sets = parse_detections(&std::fs::read_to_string(&det_path).unwrap(), &det_path).unwrap();
    assert_eq!(sets.len(), 4);
    let o = msmvd(&["eval", "--detections", s(&det_path), "--dataset", s(&data), "--out", s(&dir.path().join("e2"))]);
    assert!(o.status.success(), "eval of infer output failed: {}", stderr(&o));

    let maps = infer_out.join("maps").join("000000.json");
    assert!(maps.exists());
    let png = dir.path().join("plot.png");
    let o = msmvd(&["plot", "--maps", s(&maps), "--out", s(&png)]);
    assert!(o.status.success(), "plot failed: {}", stderr(&o));
    let single = image::open(&png).unwrap();
    let png3 = dir.path().join("plot3.png");
    let o = msmvd(&["plot", "--maps", s(&maps), "--per-level", "--out", s(&png3)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let triple = image::open(&png3).unwrap();
    assert!(triple.width() > 3 * single.width() - 1);
}

#[test]
fn plot_of_dataset_targets_and_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let png = dir.path().join("gt.png");
    let o = msmvd(&["plot", "--dataset", s(&data), "--frame", "1", "--out", s(&png)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(png.exists());

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "").unwrap();
    let blank = dir.path().join("blank.png");
    let o = msmvd(&["plot", "--maps", s(&empty), "--out", s(&blank)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(blank.exists());
}

#[test]
fn invalid_threshold_and_device_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data");
    let ckpt = dir.path().join("x.ckpt");
    let o = msmvd(&["infer", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--threshold", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    let spec = dir.path().join("scene.toml");
    let o = msmvd(&["gen-data", "--config", s(&spec), "--out", s(&dir.path().join("y")), "--device", "cuda"]);
    assert_eq!(o.status.code(), Some(2));
}
