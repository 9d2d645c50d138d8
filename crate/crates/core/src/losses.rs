//! Training objective: penalty-reduced focal loss on occupancy maps plus an
//! L1 offset loss at positive cells, summed over output levels.

use serde::{Deserialize, Serialize};

use crate::datasets::TargetMaps;
use crate::error::{Error, Result};
use crate::network::{ForwardOutput, HeadOutputs};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Exponent on `(1 - p)` at positive cells.
    pub alpha: f64,
    /// Exponent on `(1 - target)` at negative cells.
    pub beta: f64,
    /// Train offsets at every output level, not just the first.
    pub aux_offsets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0, aux_offsets: true }
    }
}

/// Per-level loss terms of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub levels: Vec<usize>,
    pub det: Vec<f64>,
    pub off: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn from_terms(levels: Vec<usize>, det: Vec<f64>, off: Vec<f64>) -> Self {
        let total = det.iter().chain(&off).sum();
        Self { levels, det, off, total }
    }
}

fn check_len(what: &str, got: usize, target: &TargetMaps, per_cell: usize) -> Result<()> {
    if got != per_cell * target.cells() {
        return Err(Error::Shape(format!(
            "{what} has {got} values, level-{} target needs {}x{}x{per_cell}",
            target.level, target.rows, target.cols
        )));
    }
    Ok(())
}

/// Focal loss and its derivative with respect to each clamped probability.
pub fn focal_loss_with_grad(p: &[f64], target: &TargetMaps, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_len("occupancy map", p.len(), target, 1)?;
    let norm = target.num_pos().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (i, &raw) in p.iter().enumerate() {
        let clamped = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let inside = raw > PROB_EPS && raw < 1.0 - PROB_EPS;
        let (term, dterm) = if target.pos_mask[i] {
            let q = 1.0 - clamped;
            let qa = q.powf(cfg.alpha);
            let t = qa * clamped.ln();
            let dt = -cfg.alpha * q.powf(cfg.alpha - 1.0) * clamped.ln() + qa / clamped;
            (t, dt)
        } else {
            let w = (1.0 - target.occupancy[i]).powf(cfg.beta);
            let pa = clamped.powf(cfg.alpha);
            let lq = (1.0 - clamped).ln();
            let t = w * pa * lq;
            let dt = w * (cfg.alpha * clamped.powf(cfg.alpha - 1.0) * lq - pa / (1.0 - clamped));
            (t, dt)
        };
        loss -= term;
        if inside {
            grad[i] = -dterm / norm;
        }
    }
    Ok((loss / norm, grad))
}

pub fn focal_loss(p: &[f64], target: &TargetMaps) -> Result<f64> {
    Ok(focal_loss_with_grad(p, target, &LossConfig::default())?.0)
}

/// L1 offset loss over positive cells and its subgradient; `offset` is
/// channel-major `[2, R, C]`.
pub fn offset_loss_with_grad(offset: &[f64], target: &TargetMaps) -> Result<(f64, Vec<f64>)> {
    check_len("offset map", offset.len(), target, 2)?;
    let norm = target.num_pos().max(1) as f64;
    let cells = target.cells();
    let mut loss = 0.0;
    let mut grad = vec![0.0; offset.len()];
    for cell in (0..cells).filter(|&c| target.pos_mask[c]) {
        for ch in 0..2 {
            let i = ch * cells + cell;
            let d = offset[i] - target.offset[i];
            loss += d.abs();
            grad[i] = d.signum() * (d != 0.0) as u8 as f64 / norm;
        }
    }
    Ok((loss / norm, grad))
}

pub fn offset_loss(offset: &[f64], target: &TargetMaps) -> Result<f64> {
    Ok(offset_loss_with_grad(offset, target)?.0)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn check_targets(levels: usize, targets: &[TargetMaps]) -> Result<()> {
    if levels != targets.len() {
        return Err(Error::Shape(format!("{levels} output levels but {} target maps", targets.len())));
    }
    Ok(())
}

/// Loss terms from logits, returning values and gradients for each level.
fn level_terms(
    logits: &[f64],
    offset: &[f64],
    target: &TargetMaps,
    with_offset: bool,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, f64, Vec<f64>)> {
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let (det, dp) = focal_loss_with_grad(&p, target, cfg)?;
    let dz = dp.iter().zip(&p).map(|(g, p)| g * p * (1.0 - p)).collect();
    let (off, doff) = if with_offset {
        offset_loss_with_grad(offset, target)?
    } else {
        check_len("offset map", offset.len(), target, 2)?;
        (0.0, vec![0.0; offset.len()])
    };
    Ok((det, dz, off, doff))
}

/// Adds the loss of every output level to the graph and returns its root.
pub fn total_loss<F: Float>(
    g: &mut Graph<F>,
    out: &ForwardOutput,
    targets: &[TargetMaps],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    check_targets(out.occupancy.len(), targets)?;
    let (mut det, mut off, mut parts) = (Vec::new(), Vec::new(), Vec::new());
    for (k, target) in targets.iter().enumerate() {
        let logits: Vec<f64> = g.value(out.occupancy[k]).data().iter().map(|v| v.to_f64_lossy()).collect();
        let offset: Vec<f64> = g.value(out.offset[k]).data().iter().map(|v| v.to_f64_lossy()).collect();
        let (d, dz, o, doff) = level_terms(&logits, &offset, target, k == 0 || cfg.aux_offsets, cfg)?;
        let to_tensor = |var: Var, grad: Vec<f64>, g: &Graph<F>| {
            Tensor::from_vec(g.value(var).shape(), grad.into_iter().map(F::from_f64_lossy).collect())
        };
        let gz = to_tensor(out.occupancy[k], dz, g);
        let go = to_tensor(out.offset[k], doff, g);
        parts.push(g.scalar_fn(out.occupancy[k], F::from_f64_lossy(d), gz));
        parts.push(g.scalar_fn(out.offset[k], F::from_f64_lossy(o), go));
        det.push(d);
        off.push(o);
    }
    let root = g.sum(&parts);
    let levels = out.levels.iter().map(|&(l, _)| l).collect();
    Ok((root, LossBreakdown::from_terms(levels, det, off)))
}

/// Loss terms of already evaluated head outputs.
pub fn loss_breakdown(heads: &HeadOutputs, targets: &[TargetMaps], cfg: &LossConfig) -> Result<LossBreakdown> {
    check_targets(heads.occupancy_logits.len(), targets)?;
    let (mut det, mut off) = (Vec::new(), Vec::new());
    for (k, target) in targets.iter().enumerate() {
        let logits: Vec<f64> = heads.occupancy_logits[k].data().iter().map(|&v| v as f64).collect();
        let offset: Vec<f64> = heads.offset[k].data().iter().map(|&v| v as f64).collect();
        let (d, _, o, _) = level_terms(&logits, &offset, target, k == 0 || cfg.aux_offsets, cfg)?;
        det.push(d);
        off.push(o);
    }
    let levels = heads.levels.iter().map(|&(l, _)| l).collect();
    Ok(LossBreakdown::from_terms(levels, det, off))
}
