//! Training loop: Adam under a cosine learning-rate schedule with gradient
//! accumulation, periodic validation and best-MODA checkpointing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{augment, make_target_maps_at, Annotation, Dataset, Frame, TargetMaps, DEFAULT_DIAMETERS};
use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;
use crate::inference::{DetectionSet, InferenceConfig, Predictor};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::metrics::{evaluate, EvalResult, DEFAULT_RADIUS};
use crate::network::{save_checkpoint, Ctx, Model, NetworkConfig, ProjectionTables};
use crate::tensor::{Graph, ParamStore};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const NONFINITE_DUMP: &str = "nonfinite_dump.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    /// Frames per optimizer step.
    pub accumulation: usize,
    /// Per-view random rescale range; `None` (`false` or `null` in config
    /// files) disables augmentation.
    #[serde(deserialize_with = "augmentation_range")]
    pub augmentation: Option<(f64, f64)>,
    pub seed: u64,
    pub device: String,
    pub shuffle: bool,
    /// Epochs between `last.ckpt` writes.
    pub checkpoint_every: usize,
    /// Epochs between validations; the final epoch is always validated.
    pub validate_every: usize,
    /// Gaussian target diameters for BEV levels 3/4/5 in level cells.
    pub target_diameters: [f64; 3],
    pub radius: f64,
    pub loss: LossConfig,
    pub inference: InferenceConfig,
    /// Keep decoded frames in memory between epochs.
    pub cache_frames: bool,
}

fn augmentation_range<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<(f64, f64)>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Range {
        Off(bool),
        On((f64, f64)),
    }
    match Option::<Range>::deserialize(d)? {
        None | Some(Range::Off(false)) => Ok(None),
        Some(Range::Off(true)) => Ok(TrainConfig::default().augmentation),
        Some(Range::On(r)) => Ok(Some(r)),
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_start: 1e-3,
            lr_end: 1e-6,
            batch_size: 1,
            accumulation: 16,
            augmentation: Some((0.8, 1.2)),
            seed: 0,
            device: "cpu".into(),
            shuffle: true,
            checkpoint_every: 1,
            validate_every: 1,
            target_diameters: DEFAULT_DIAMETERS,
            radius: DEFAULT_RADIUS,
            loss: LossConfig::default(),
            inference: InferenceConfig::default(),
            cache_frames: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_end < self.lr_start) || self.lr_end < 0.0 {
            return bad(format!("lr_end ({}) must be below lr_start ({})", self.lr_end, self.lr_start));
        }
        if self.accumulation == 0 {
            return bad("accumulation must be at least 1".into());
        }
        if self.batch_size != 1 {
            return bad("batch_size must be 1; use accumulation for larger effective batches".into());
        }
        if self.device != "cpu" {
            return bad(format!("device `{}` is unavailable; only `cpu` is supported", self.device));
        }
        if let Some((lo, hi)) = self.augmentation {
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("augmentation range ({lo}, {hi}) is invalid"));
            }
        }
        if self.checkpoint_every == 0 || self.validate_every == 0 {
            return bad("checkpoint_every and validate_every must be at least 1".into());
        }
        if self.target_diameters.iter().any(|&d| !(d > 0.0)) || !(self.radius > 0.0) {
            return bad("target diameters and radius must be positive".into());
        }
        self.inference.validate()
    }

    /// Optimizer steps over the whole run for `frames` training frames.
    pub fn total_steps(&self, frames: usize) -> usize {
        self.epochs * frames.div_ceil(self.accumulation)
    }
}

/// Cosine decay from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.lr_start;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam without weight decay.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// Averages the accumulated gradients of `count` frames, steps and clears.
pub fn optimizer_step(params: &mut ParamStore<f32>, adam: &mut Adam, count: usize, lr: f64) {
    params.scale_grads(1.0 / count as f32);
    adam.step(params, lr);
    params.zero_grad();
}

/// Dataset location, model and optimization settings of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`. Relative dataset
    /// and output paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.out_dir = cfg.out_dir.map(|o| base.join(o));
        Ok(cfg)
    }

    /// SHA-256 hex of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Ablation names accepted by [`apply_ablation`].
pub const ABLATIONS: [&str; 10] = [
    "full",
    "msp_only",
    "baseline",
    "mean_pooling",
    "no_image_bottom_up",
    "no_bev_bottom_up",
    "unshared_heads",
    "shared_bev_resolution",
    "no_aux_offsets",
    "single_scale_inference",
];

/// Applies a comma-separated list of ablations to a run configuration.
pub fn apply_ablation(cfg: &mut RunConfig, spec: &str) -> Result<()> {
    use crate::inference::InferenceMode;
    use crate::network::{Mode, Pooling};
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let net = &mut cfg.network;
        match name {
            "full" => net.mode = Mode::Full,
            "msp_only" => net.mode = Mode::MspOnly,
            "baseline" => net.mode = Mode::Baseline,
            "mean_pooling" => net.pooling = Pooling::Mean,
            "no_image_bottom_up" => net.image_fpn_bottom_up = false,
            "no_bev_bottom_up" => net.bev_fpn_bottom_up = false,
            "unshared_heads" => net.share_heads = false,
            "shared_bev_resolution" => net.shared_bev_resolution = true,
            "no_aux_offsets" => cfg.train.loss.aux_offsets = false,
            "single_scale_inference" => cfg.train.inference.mode = InferenceMode::Single(3),
            other => {
                return Err(Error::Config(format!("unknown ablation `{other}`; expected one of {}", ABLATIONS.join(", "))))
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub moda: f64,
    pub modp: f64,
    pub precision: f64,
    pub recall: f64,
}

impl From<&EvalResult> for EvalSummary {
    fn from(r: &EvalResult) -> Self {
        Self { moda: r.moda, modp: r.modp, precision: r.precision, recall: r.recall }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub val: Option<EvalSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    /// Per-frame total loss in training order.
    pub losses: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best: EvalSummary,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord<'a> {
    Frame { epoch: usize, step: usize, frame_id: usize, lr: f64, loss: &'a LossBreakdown },
    Step { epoch: usize, step: usize, lr: f64, frames: usize },
    Val { epoch: usize, metrics: &'a EvalSummary },
}

struct Log(BufWriter<File>, PathBuf);

impl Log {
    fn write(&mut self, rec: &LogRecord<'_>) -> Result<()> {
        let line = serde_json::to_string(rec).expect("log record serializes");
        writeln!(self.0, "{line}").map_err(|e| Error::io(&self.1, e))
    }
}

/// Targets for every head output, made on the output's BEV lattice.
pub fn frame_targets(annotations: &[Annotation], levels: &[(usize, usize)], grid: &BevGridSpec, diameters: &[f64; 3]) -> Vec<TargetMaps> {
    levels
        .iter()
        .map(|&(_, bl)| make_target_maps_at(annotations, bl, grid, diameters[bl - 3]))
        .collect()
}

/// Ground-truth positions of the frames at `indices`, keyed by frame id.
pub fn ground_truth(dataset: &Dataset, indices: &[usize]) -> Result<BTreeMap<usize, Vec<[f64; 2]>>> {
    indices
        .iter()
        .map(|&i| {
            let anns = dataset.load_annotations(i)?;
            Ok((dataset.manifest.frames[i].frame_id, anns.iter().map(|a| [a.x, a.y]).collect()))
        })
        .collect()
}

pub fn detections_by_frame(sets: &[DetectionSet]) -> BTreeMap<usize, Vec<[f64; 2]>> {
    sets.iter()
        .map(|s| (s.frame_id, s.detections.iter().map(|d| [d.x, d.y]).collect()))
        .collect()
}

/// Detects on the frames at `indices` and scores them against their labels.
pub fn evaluate_model(
    predictor: &Predictor,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &InferenceConfig,
    radius: f64,
) -> Result<(EvalResult, Vec<DetectionSet>)> {
    let sets = predictor.detect_frames(dataset, indices, cfg)?;
    let result = evaluate(&detections_by_frame(&sets), &ground_truth(dataset, indices)?, radius)?;
    Ok((result, sets))
}

fn inputs_hash(frame: &Frame) -> String {
    let mut h = Sha256::new();
    for img in &frame.images {
        img.data().iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    for a in &frame.annotations {
        h.update(a.x.to_le_bytes());
        h.update(a.y.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Trains `params` in place on the dataset's training split.
///
/// Writes `train_log.jsonl`, `best.ckpt` (highest validation MODA, later
/// epochs winning ties) and `last.ckpt` under `out_dir`.
pub fn fit(
    model: &Model,
    params: &mut ParamStore<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.check_grid(dataset.grid())?;
    let train = dataset.train_indices();
    let val = dataset.val_indices();
    if train.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = Log(BufWriter::new(file), log_path.clone());

    let grid = dataset.grid().clone();
    let pairs = model.config.projection_pairs();
    let levels = model.config.output_levels();
    let base_tables = ProjectionTables::<f32>::build(&dataset.calibrations, &grid, &pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params);
    params.zero_grad();
    let total = cfg.total_steps(train.len());
    let mut cache: Vec<Option<(Frame, Vec<TargetMaps>)>> = vec![None; dataset.len()];

    let (mut step, mut losses, mut history) = (0usize, Vec::new(), Vec::new());
    let mut best: Option<(usize, EvalSummary)> = None;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);

    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut pending, mut epoch_loss, steps_before) = (0usize, 0.0, step);
        for (n, &idx) in order.iter().enumerate() {
            let (frame, targets) = match &cache[idx] {
                Some(entry) => entry.clone(),
                None => {
                    let frame = dataset.load_frame(idx)?;
                    let targets = frame_targets(&frame.annotations, &levels, &grid, &cfg.target_diameters);
                    if cfg.cache_frames {
                        cache[idx] = Some((frame.clone(), targets.clone()));
                    }
                    (frame, targets)
                }
            };
            let lr = lr_at(step, total, cfg);
            let (images, tables) = match cfg.augmentation {
                Some(range) => {
                    let (aug, calibs, _) = augment(&frame, &dataset.calibrations, range, &mut rng);
                    (aug.images, ProjectionTables::build(&calibs, &grid, &pairs)?)
                }
                None => (frame.images.clone(), base_tables.clone()),
            };
            let mut g = Graph::new();
            let out = {
                let mut cx = Ctx::new(&mut g, params);
                let x = cx.g.input(Model::prepare_images::<f32>(&images), false);
                model.forward(&mut cx, x, &tables)?
            };
            let (root, breakdown) = total_loss(&mut g, &out, &targets, &cfg.loss)?;
            log.write(&LogRecord::Frame { epoch, step, frame_id: frame.frame_id, lr, loss: &breakdown })?;
            if !breakdown.total.is_finite() {
                let hash = inputs_hash(&frame);
                let dump = serde_json::json!({
                    "step": step, "epoch": epoch, "frame_id": frame.frame_id, "lr": lr,
                    "inputs_hash": hash, "loss": breakdown,
                });
                let p = out_dir.join(NONFINITE_DUMP);
                std::fs::write(&p, serde_json::to_vec_pretty(&dump).expect("dump serializes")).map_err(|e| Error::io(&p, e))?;
                log.0.flush().map_err(|e| Error::io(&log_path, e))?;
                return Err(Error::NonFiniteLoss { step, lr, inputs_hash: hash });
            }
            let grads = g.backward(root);
            g.accumulate_param_grads(&grads, params);
            drop(g);
            epoch_loss += breakdown.total;
            losses.push(breakdown.total);
            pending += 1;
            if pending == cfg.accumulation || n + 1 == order.len() {
                optimizer_step(params, &mut adam, pending, lr);
                log.write(&LogRecord::Step { epoch, step, lr, frames: pending })?;
                step += 1;
                pending = 0;
            }
        }
        let last_epoch = epoch + 1 == cfg.epochs;
        let val_summary = if (epoch + 1) % cfg.validate_every == 0 || last_epoch {
            let predictor = Predictor::new(model.clone(), params.clone(), &dataset.calibrations, &grid)?;
            let (result, _) = evaluate_model(&predictor, dataset, &val, &cfg.inference, cfg.radius)?;
            let summary = EvalSummary::from(&result);
            log.write(&LogRecord::Val { epoch, metrics: &summary })?;
            if best.as_ref().is_none_or(|(_, b)| summary.moda >= b.moda) {
                save_checkpoint(&best_path, &model.config, params)?;
                best = Some((epoch, summary.clone()));
            }
            Some(summary)
        } else {
            None
        };
        if (epoch + 1) % cfg.checkpoint_every == 0 || last_epoch {
            save_checkpoint(&last_path, &model.config, params)?;
        }
        let record = EpochRecord { epoch, mean_loss: epoch_loss / order.len() as f64, steps: step - steps_before, val: val_summary };
        log::info!("epoch {epoch}: loss {:.4} val {:?}", record.mean_loss, record.val.as_ref().map(|v| v.moda));
        history.push(record);
        log.0.flush().map_err(|e| Error::io(&log_path, e))?;
    }
    let (best_epoch, best) = best.ok_or_else(|| Error::Config("epochs must be at least 1".into()))?;
    Ok(TrainReport {
        epochs: cfg.epochs,
        steps: step,
        losses,
        history,
        best_epoch,
        best,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log: log_path,
    })
}

/// Builds a fresh model from `network` and trains it.
pub fn train_new(network: &NetworkConfig, dataset: &Dataset, cfg: &TrainConfig, out_dir: &Path) -> Result<(Model, ParamStore<f32>, TrainReport)> {
    let (model, mut params) = Model::new::<f32>(network)?;
    let report = fit(&model, &mut params, dataset, cfg, out_dir)?;
    Ok((model, params, report))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::network::{Conv, ConvSpec};
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert!((lr_at(0, 100, &cfg) - 1e-3).abs() < 1e-15);
        assert!((lr_at(100, 100, &cfg) - 1e-6).abs() < 1e-15);
        assert!((lr_at(50, 100, &cfg) - 5.005e-4).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn schedule_is_non_increasing(total in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
            let cfg = TrainConfig::default();
            let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
            prop_assert!(lr_at(hi, total, &cfg) <= lr_at(lo, total, &cfg));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr_end: 1e-2, ..TrainConfig::default() },
            TrainConfig { accumulation: 0, ..TrainConfig::default() },
            TrainConfig { device: "cuda".into(), ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
        assert_eq!(TrainConfig { accumulation: 16, epochs: 3, ..TrainConfig::default() }.total_steps(20), 6);
    }

    #[test]
    fn augmentation_accepts_switch_or_range() {
        let parse = |s: &str| toml::from_str::<TrainConfig>(s).unwrap().augmentation;
        assert_eq!(parse("augmentation = false"), None);
        assert_eq!(parse("augmentation = true"), Some((0.8, 1.2)));
        assert_eq!(parse("augmentation = [0.9, 1.1]"), Some((0.9, 1.1)));
        assert_eq!(parse("epochs = 2"), Some((0.8, 1.2)));
        let json: TrainConfig = serde_json::from_str(r#"{"augmentation": null}"#).unwrap();
        assert_eq!(json.augmentation, None);
    }

    /// One 3x3 convolution scored by a squared error against fixed targets.
    fn toy() -> (Conv, ParamStore<f32>, Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv::new(&mut store, "toy", ConvSpec::new(2, 3, 3), &mut rng);
        let mk = |rng: &mut ChaCha8Rng, c: usize| {
            Tensor::from_vec(&[1, c, 5, 5], (0..c * 25).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        };
        let xs = (0..16).map(|_| mk(&mut rng, 2)).collect();
        let ys = (0..16).map(|_| mk(&mut rng, 3)).collect();
        (conv, store, xs, ys)
    }

    fn accumulate_mse(conv: &Conv, store: &mut ParamStore<f32>, x: Tensor<f32>, y: &Tensor<f32>, scale: f32) {
        let mut g = Graph::new();
        let (root, _) = {
            let mut cx = Ctx::new(&mut g, store);
            let xv = cx.g.input(x, false);
            let out = conv.forward(&mut cx, xv);
            let diff: Vec<f32> = cx.g.value(out).data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
            let value = diff.iter().map(|d| d * d).sum::<f32>() * scale;
            let grad = Tensor::from_vec(cx.g.value(out).shape(), diff.iter().map(|d| 2.0 * d * scale).collect());
            (cx.g.scalar_fn(out, value, grad), ())
        };
        let grads = g.backward(root);
        g.accumulate_param_grads(&grads, store);
    }

    #[test]
    fn accumulated_steps_equal_one_batch_step() {
        let (conv, mut a, xs, ys) = toy();
        let mut b = a.clone();
        let (mut adam_a, mut adam_b) = (Adam::new(&a), Adam::new(&b));
        for (x, y) in xs.iter().zip(&ys) {
            accumulate_mse(&conv, &mut a, x.clone(), y, 1.0);
        }
        optimizer_step(&mut a, &mut adam_a, 16, 1e-2);
        accumulate_mse(&conv, &mut b, Tensor::stack(&xs), &Tensor::stack(&ys), 1.0 / 16.0);
        optimizer_step(&mut b, &mut adam_b, 1, 1e-2);
        for (pa, pb) in a.iter().zip(b.iter()) {
            for (u, v) in pa.value.data().iter().zip(pb.value.data()) {
                assert!((u - v).abs() <= 1e-6 * u.abs().max(1e-3), "{}: {u} vs {v}", pa.name);
            }
        }
    }

    #[test]
    fn ablation_flags_map_to_config_axes() {
        let mut cfg = RunConfig {
            dataset: "d".into(),
            out_dir: None,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
        };
        apply_ablation(&mut cfg, "baseline, mean_pooling,no_aux_offsets").unwrap();
        assert_eq!(cfg.network.mode, crate::network::Mode::Baseline);
        assert_eq!(cfg.network.pooling, crate::network::Pooling::Mean);
        assert!(!cfg.train.loss.aux_offsets);
        assert!(matches!(apply_ablation(&mut cfg, "turbo"), Err(Error::Config(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        store.get_mut(id).grad = Tensor::from_vec(&[2], vec![0.5, -3.0]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1);
        let w = store.get(id).value.data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
