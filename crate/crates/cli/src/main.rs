//! `msmvd` command-line interface.
//!
//! Every option can also be set through an environment variable with the
//! `MSMVD_` prefix, e.g. `MSMVD_SEED=3` for `--seed 3`. Exit codes: 0 on
//! success, 1 on runtime failure, 2 on usage or validation errors.

mod manifest;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use msmvd::datasets::{load_dataset, make_target_maps_at, Dataset};
use msmvd::inference::{
    format_detections, parse_detections, FrameMaps, InferenceConfig, InferenceMode, MapRecord, OccupancyMap, Predictor,
};
use msmvd::metrics::{evaluate, EvalResult, DEFAULT_RADIUS};
use msmvd::network::load_checkpoint;
use msmvd::scenegen::{Scene, SceneSpec};
use msmvd::trainer::{apply_ablation, detections_by_frame, ground_truth, train_new, RunConfig};

use crate::manifest::RunManifest;

#[derive(Parser)]
#[command(name = "msmvd", version, about = "Multi-scale multi-view pedestrian detection on a bird's-eye-view grid")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Scene spec (gen-data) or run config (train), TOML or JSON.
    #[arg(long, global = true, env = "MSMVD_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "MSMVD_SEED")]
    seed: Option<u64>,
    /// Output directory (image path for `plot`).
    #[arg(long, global = true, env = "MSMVD_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "MSMVD_DEVICE")]
    device: Option<String>,
    /// Detection threshold in (0, 1).
    #[arg(long, global = true, env = "MSMVD_THRESHOLD")]
    threshold: Option<f64>,
    /// Comma-separated ablations, e.g. `baseline` or `msp_only,mean_pooling`.
    #[arg(long, global = true, env = "MSMVD_ABLATION")]
    ablation: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene spec.
    GenData,
    /// Train a model from a run config.
    Train {
        /// Overrides the config's dataset path.
        #[arg(long, env = "MSMVD_DATASET")]
        dataset: Option<PathBuf>,
        /// Overrides the config's epoch count.
        #[arg(long, env = "MSMVD_EPOCHS")]
        epochs: Option<usize>,
    },
    /// Score a checkpoint or a detection file against a dataset's labels.
    Eval {
        #[arg(long, env = "MSMVD_CHECKPOINT", conflicts_with = "detections", required_unless_present = "detections")]
        checkpoint: Option<PathBuf>,
        /// Detection records as written by `infer`.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, env = "MSMVD_DATASET")]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Match radius in metres.
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: f64,
        /// `merged` or `single:<level>`.
        #[arg(long, default_value = "merged")]
        mode: String,
    },
    /// Write detection records (and optionally BEV maps) for a dataset.
    Infer {
        #[arg(long, env = "MSMVD_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "MSMVD_DATASET")]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        #[arg(long, default_value = "merged")]
        mode: String,
        /// Also write per-frame occupancy maps under `maps/`.
        #[arg(long)]
        maps: bool,
    },
    /// Render BEV occupancy maps with detection and ground-truth markers.
    Plot {
        /// Frame maps written by `infer --maps`.
        #[arg(long, conflicts_with = "dataset")]
        maps: Option<PathBuf>,
        /// Render the ground-truth target maps of a dataset frame instead.
        #[arg(long, requires = "frame")]
        dataset: Option<PathBuf>,
        /// Dataset frame index for `--dataset`.
        #[arg(long)]
        frame: Option<usize>,
        /// Detection records to overlay.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Draw M_3, M_4 and M_5 side by side.
        #[arg(long)]
        per_level: bool,
    },
}

/// Failure with its exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

impl From<msmvd::Error> for Failure {
    fn from(e: msmvd::Error) -> Self {
        use msmvd::Error as E;
        match &e {
            E::Config(_) | E::Parse { .. } | E::Dataset { .. } | E::Calibration { .. } | E::Checkpoint { .. } => {
                Failure::Usage(e.into())
            }
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData => gen_data(&cli.global),
        Command::Train { dataset, epochs } => train(&cli.global, dataset.as_deref(), *epochs),
        Command::Eval { checkpoint, detections, dataset, split, radius, mode } => eval(
            &cli.global,
            checkpoint.as_deref(),
            detections.as_deref(),
            dataset,
            *split,
            *radius,
            mode,
        ),
        Command::Infer { checkpoint, dataset, split, mode, maps } => {
            infer(&cli.global, checkpoint, dataset, *split, mode, *maps)
        }
        Command::Plot { maps, dataset, frame, detections, per_level } => {
            plot_cmd(&cli.global, maps.as_deref(), dataset.as_deref(), *frame, detections.as_deref(), *per_level)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

/// Reads TOML or JSON into `T`, naming the offending field on failure.
fn read_structured<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| msmvd::Error::Io { path: path.into(), source: e })?;
    let value: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| usage(format!("{}: {e}", path.display())))?
    };
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        usage(format!("{}: field `{field}`: {}", path.display(), e.into_inner()))
    })
}

fn require_cpu(g: &GlobalOpts) -> CmdResult<()> {
    match g.device.as_deref() {
        None | Some("cpu") => Ok(()),
        Some(d) => Err(usage(format!("device `{d}` is unavailable; only `cpu` is supported"))),
    }
}

fn gen_data(g: &GlobalOpts) -> CmdResult<()> {
    require_cpu(g)?;
    let started = manifest::now();
    let config = g.config.as_deref().ok_or_else(|| usage("gen-data needs --config <scene spec>"))?;
    let out = g.out.as_deref().ok_or_else(|| usage("gen-data needs --out <dir>"))?;
    let mut spec: SceneSpec = read_structured(config)?;
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let scene = Scene::generate(&spec)?;
    let m = scene.write(out)?;
    println!("wrote {} frames to {} (dataset {})", m.frames.len(), out.display(), m.dataset_hash);
    RunManifest {
        command: command_line(),
        config_hash: manifest::hash_json(&spec),
        dataset_hash: Some(m.dataset_hash.clone()),
        code_version: manifest::code_version(),
        started,
        finished: manifest::now(),
        outputs: vec![out.to_path_buf()],
    }
    .write(&out.join(manifest::FILE))?;
    Ok(())
}

fn parse_mode(mode: &str) -> CmdResult<InferenceMode> {
    match mode {
        "merged" => Ok(InferenceMode::Merged),
        _ => mode
            .strip_prefix("single:")
            .and_then(|l| l.parse().ok())
            .filter(|l| (3..=5).contains(l))
            .map(InferenceMode::Single)
            .ok_or_else(|| usage(format!("mode `{mode}` must be `merged` or `single:<3|4|5>`"))),
    }
}

fn inference_config(g: &GlobalOpts, mode: &str) -> CmdResult<InferenceConfig> {
    let mut cfg = InferenceConfig { mode: parse_mode(mode)?, ..InferenceConfig::default() };
    if let Some(t) = g.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn indices(dataset: &Dataset, split: Split) -> Vec<usize> {
    match split {
        Split::Train => dataset.train_indices(),
        Split::Val => dataset.val_indices(),
        Split::All => (0..dataset.len()).collect(),
    }
}

fn train(g: &GlobalOpts, dataset: Option<&Path>, epochs: Option<usize>) -> CmdResult<()> {
    let started = manifest::now();
    let config = g.config.as_deref().ok_or_else(|| usage("train needs --config <run config>"))?;
    let mut cfg = RunConfig::load(config)?;
    if let Some(d) = dataset {
        cfg.dataset = d.to_path_buf();
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
        cfg.network.init_seed = seed;
    }
    if let Some(d) = &g.device {
        cfg.train.device = d.clone();
    }
    if let Some(t) = g.threshold {
        cfg.train.inference.threshold = t;
    }
    if let Some(a) = &g.ablation {
        apply_ablation(&mut cfg, a)?;
    }
    cfg.network.validate()?;
    cfg.train.validate()?;
    let out = g.out.clone().or(cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/train"));
    let ds = load_dataset(&cfg.dataset)?;
    let (_, _, report) = train_new(&cfg.network, &ds, &cfg.train, &out)?;
    let report_path = out.join("report.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&report).context("serializing report")?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!("best validation at epoch {} ({} optimizer steps)", report.best_epoch, report.steps);
    let b = &report.best;
    print!(
        "MODA {:.1}\nMODP {:.1}\nPrecision {:.1}\nRecall {:.1}\n",
        100.0 * b.moda,
        100.0 * b.modp,
        100.0 * b.precision,
        100.0 * b.recall
    );
    RunManifest {
        command: command_line(),
        config_hash: cfg.hash(),
        dataset_hash: Some(ds.manifest.dataset_hash.clone()),
        code_version: manifest::code_version(),
        started,
        finished: manifest::now(),
        outputs: vec![report.best_checkpoint, report.last_checkpoint, report.log, report_path],
    }
    .write(&out.join(manifest::FILE))?;
    Ok(())
}

fn load_predictor(checkpoint: &Path, ds: &Dataset) -> CmdResult<Predictor> {
    let ck = load_checkpoint(checkpoint)?;
    Ok(Predictor::new(ck.model, ck.params, &ds.calibrations, ds.grid())?)
}

fn eval(
    g: &GlobalOpts,
    checkpoint: Option<&Path>,
    detections: Option<&Path>,
    dataset: &Path,
    split: Split,
    radius: f64,
    mode: &str,
) -> CmdResult<()> {
    require_cpu(g)?;
    let started = manifest::now();
    if !(radius > 0.0) {
        return Err(usage(format!("radius must be positive, got {radius}")));
    }
    let ds = load_dataset(dataset)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("runs/eval"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (result, config_hash): (EvalResult, String) = match (checkpoint, detections) {
        (Some(ck), _) => {
            let cfg = inference_config(g, mode)?;
            let predictor = load_predictor(ck, &ds)?;
            let idx = indices(&ds, split);
            let sets = predictor.detect_frames(&ds, &idx, &cfg)?;
            let det_path = out.join("detections.txt");
            std::fs::write(&det_path, format_detections(&sets)).with_context(|| format!("writing {}", det_path.display()))?;
            let r = evaluate(&detections_by_frame(&sets), &ground_truth(&ds, &idx)?, radius)?;
            (r, manifest::hash_json(&(hex::encode(predictor.model.config.hash()), &cfg)))
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| msmvd::Error::Io { path: path.into(), source: e })?;
            let sets = parse_detections(&text, path)?;
            let by_id: std::collections::BTreeMap<usize, usize> =
                ds.manifest.frames.iter().enumerate().map(|(i, f)| (f.frame_id, i)).collect();
            let idx = sets
                .iter()
                .map(|s| by_id.get(&s.frame_id).copied().ok_or_else(|| usage(format!("frame {} is not in the dataset", s.frame_id))))
                .collect::<CmdResult<Vec<_>>>()?;
            let r = evaluate(&detections_by_frame(&sets), &ground_truth(&ds, &idx)?, radius)?;
            (r, manifest::hash_json(&path.display().to_string()))
        }
        (None, None) => return Err(usage("eval needs --checkpoint or --detections")),
    };
    print!("{}", result.table());
    let metrics_path = out.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_vec_pretty(&result).context("serializing metrics")?)
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    RunManifest {
        command: command_line(),
        config_hash,
        dataset_hash: Some(ds.manifest.dataset_hash.clone()),
        code_version: manifest::code_version(),
        started,
        finished: manifest::now(),
        outputs: vec![metrics_path],
    }
    .write(&out.join(manifest::FILE))?;
    Ok(())
}

fn infer(g: &GlobalOpts, checkpoint: &Path, dataset: &Path, split: Split, mode: &str, maps: bool) -> CmdResult<()> {
    require_cpu(g)?;
    let started = manifest::now();
    let cfg = inference_config(g, mode)?;
    let ds = load_dataset(dataset)?;
    let predictor = load_predictor(checkpoint, &ds)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("runs/infer"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut sets = Vec::new();
    let mut outputs = Vec::new();
    for i in indices(&ds, split) {
        let frame = ds.load_frame(i)?;
        let heads = predictor.heads(&frame.images)?;
        let dets = msmvd::inference::detect(&heads, ds.grid(), &cfg)?;
        if maps {
            let mut fm = FrameMaps::from_heads(frame.frame_id, &heads, ds.grid(), dets.clone())?;
            fm.ground_truth = frame.annotations.iter().map(|a| [a.x, a.y]).collect();
            let dir = out.join("maps");
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let p = dir.join(format!("{:06}.json", frame.frame_id));
            std::fs::write(&p, serde_json::to_vec(&fm).context("serializing maps")?)
                .with_context(|| format!("writing {}", p.display()))?;
            outputs.push(p);
        }
        sets.push(msmvd::inference::DetectionSet { frame_id: frame.frame_id, detections: dets });
    }
    let det_path = out.join("detections.txt");
    std::fs::write(&det_path, format_detections(&sets)).with_context(|| format!("writing {}", det_path.display()))?;
    let n: usize = sets.iter().map(|s| s.detections.len()).sum();
    println!("{n} detections over {} frames written to {}", sets.len(), det_path.display());
    outputs.insert(0, det_path);
    RunManifest {
        command: command_line(),
        config_hash: manifest::hash_json(&cfg),
        dataset_hash: Some(ds.manifest.dataset_hash.clone()),
        code_version: manifest::code_version(),
        started,
        finished: manifest::now(),
        outputs,
    }
    .write(&out.join(manifest::FILE))?;
    Ok(())
}

/// Ground-truth target maps of a dataset frame, drawn like predictions.
fn target_frame_maps(ds: &Dataset, index: usize) -> CmdResult<FrameMaps> {
    if index >= ds.len() {
        return Err(usage(format!("frame index {index} out of range ({} frames)", ds.len())));
    }
    let anns = ds.load_annotations(index)?;
    let grid = ds.grid();
    let levels: Vec<MapRecord> = [3usize, 4, 5]
        .iter()
        .map(|&l| {
            let t = make_target_maps_at(&anns, l, grid, msmvd::datasets::DEFAULT_DIAMETERS[l - 3]);
            MapRecord::from_map(l, &OccupancyMap { level: l, rows: t.rows, cols: t.cols, values: t.occupancy })
        })
        .collect();
    Ok(FrameMaps {
        frame_id: ds.manifest.frames[index].frame_id,
        grid: grid.clone(),
        merged: Some(levels[0].clone()),
        levels,
        detections: Vec::new(),
        ground_truth: anns.iter().map(|a| [a.x, a.y]).collect(),
    })
}

fn plot_cmd(
    g: &GlobalOpts,
    maps: Option<&Path>,
    dataset: Option<&Path>,
    frame: Option<usize>,
    detections: Option<&Path>,
    per_level: bool,
) -> CmdResult<()> {
    let started = manifest::now();
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("plot.png"));
    let mut fm = match (maps, dataset) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| msmvd::Error::Io { path: p.into(), source: e })?;
            if text.trim().is_empty() {
                plot::blank_frame()
            } else {
                serde_json::from_str::<FrameMaps>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
        }
        (None, Some(d)) => target_frame_maps(&load_dataset(d)?, frame.expect("clap enforces --frame"))?,
        (None, None) => return Err(usage("plot needs --maps or --dataset with --frame")),
    };
    if let Some(p) = detections {
        let text = std::fs::read_to_string(p).map_err(|e| msmvd::Error::Io { path: p.into(), source: e })?;
        let sets = parse_detections(&text, p)?;
        fm.detections = sets.into_iter().find(|s| s.frame_id == fm.frame_id).map(|s| s.detections).unwrap_or_default();
    }
    let image = plot::render(&fm, per_level);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    image.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    let mut manifest_path = out.clone().into_os_string();
    manifest_path.push(".manifest.json");
    RunManifest {
        command: command_line(),
        config_hash: manifest::hash_json(&(per_level, fm.frame_id)),
        dataset_hash: None,
        code_version: manifest::code_version(),
        started,
        finished: manifest::now(),
        outputs: vec![out],
    }
    .write(Path::new(&manifest_path))?;
    Ok(())
}
