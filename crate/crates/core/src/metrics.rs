//! MODA, MODP, precision and recall under distance-gated optimal matching.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RADIUS: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub det: usize,
    pub gt: usize,
    pub distance: f64,
}

/// Minimum-cost perfect assignment of a square cost matrix; returns the
/// column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    // Potentials and augmenting paths over a 1-based sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Matching with the most pairs within `radius`, and among those the least
/// total distance.
pub fn match_frame(dets: &[[f64; 2]], gts: &[[f64; 2]], radius: f64) -> Vec<Match> {
    let n = dets.len().max(gts.len());
    if dets.is_empty() || gts.is_empty() {
        return Vec::new();
    }
    // Any excluded pair costs more than every admissible assignment combined.
    let big = radius * (n as f64 + 1.0) + 1.0;
    let mut cost = vec![big; n * n];
    for (i, &d) in dets.iter().enumerate() {
        for (j, &g) in gts.iter().enumerate() {
            let e = dist(d, g);
            if e <= radius {
                cost[i * n + j] = e;
            }
        }
    }
    let mut out: Vec<Match> = hungarian(&cost, n)
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < dets.len() && j < gts.len())
        .map(|(i, j)| Match { det: i, gt: j, distance: dist(dets[i], gts[j]) })
        .filter(|m| m.distance <= radius)
        .collect();
    out.sort_by_key(|m| m.det);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt: usize,
    /// Sum of `1 - d / radius` over matched pairs.
    pub precision_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub moda: f64,
    pub modp: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt_count: usize,
    pub radius: f64,
    pub frames: Vec<FrameResult>,
}

impl EvalResult {
    /// Metrics from aggregate counts.
    pub fn from_frames(frames: Vec<FrameResult>, radius: f64) -> Result<Self> {
        let tp: usize = frames.iter().map(|f| f.tp).sum();
        let fp: usize = frames.iter().map(|f| f.fp).sum();
        let fn_: usize = frames.iter().map(|f| f.fn_).sum();
        let gt_count: usize = frames.iter().map(|f| f.gt).sum();
        if gt_count == 0 {
            return Err(Error::Evaluation("ground truth is empty over all frames".into()));
        }
        let psum: f64 = frames.iter().map(|f| f.precision_sum).sum();
        Ok(Self {
            moda: 1.0 - (fp + fn_) as f64 / gt_count as f64,
            modp: if tp == 0 { 0.0 } else { psum / tp as f64 },
            precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
            recall: tp as f64 / gt_count as f64,
            tp,
            fp,
            fn_,
            gt_count,
            radius,
            frames,
        })
    }

    /// The four rates scaled by 100 with one decimal.
    pub fn table(&self) -> String {
        format!(
            "MODA {:.1}\nMODP {:.1}\nPrecision {:.1}\nRecall {:.1}\n",
            100.0 * self.moda,
            100.0 * self.modp,
            100.0 * self.precision,
            100.0 * self.recall
        )
    }
}

pub fn evaluate_frame(frame_id: usize, dets: &[[f64; 2]], gts: &[[f64; 2]], radius: f64) -> FrameResult {
    let matches = match_frame(dets, gts, radius);
    FrameResult {
        frame_id,
        tp: matches.len(),
        fp: dets.len() - matches.len(),
        fn_: gts.len() - matches.len(),
        gt: gts.len(),
        precision_sum: matches.iter().map(|m| 1.0 - m.distance / radius).sum(),
    }
}

/// Aggregates over every ground-truth frame; frames absent from `dets` have
/// no detections.
pub fn evaluate(
    dets: &BTreeMap<usize, Vec<[f64; 2]>>,
    gts: &BTreeMap<usize, Vec<[f64; 2]>>,
    radius: f64,
) -> Result<EvalResult> {
    if !(radius > 0.0) {
        return Err(Error::Evaluation(format!("radius must be positive, got {radius}")));
    }
    if let Some(extra) = dets.keys().find(|k| !gts.contains_key(k)) {
        return Err(Error::Evaluation(format!("detections for frame {extra} which has no ground truth")));
    }
    let frames = gts
        .iter()
        .map(|(&id, g)| evaluate_frame(id, dets.get(&id).map(Vec::as_slice).unwrap_or(&[]), g, radius))
        .collect();
    EvalResult::from_frames(frames, radius)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;

    /// Best (count, -total distance) over all injective assignments.
    fn brute_force(dets: &[[f64; 2]], gts: &[[f64; 2]], radius: f64) -> (usize, f64) {
        fn go(i: usize, dets: &[[f64; 2]], gts: &[[f64; 2]], r: f64, used: &mut Vec<bool>, acc: (usize, f64), best: &mut (usize, f64)) {
            if i == dets.len() {
                if acc.0 > best.0 || (acc.0 == best.0 && acc.1 < best.1) {
                    *best = acc;
                }
                return;
            }
            go(i + 1, dets, gts, r, used, acc, best);
            for j in 0..gts.len() {
                let d = dist(dets[i], gts[j]);
                if !used[j] && d <= r {
                    used[j] = true;
                    go(i + 1, dets, gts, r, used, (acc.0 + 1, acc.1 + d), best);
                    used[j] = false;
                }
            }
        }
        let mut best = (0, 0.0);
        go(0, dets, gts, radius, &mut vec![false; gts.len()], (0, 0.0), &mut best);
        best
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let nd = rng.random_range(0..=6);
            let ng = rng.random_range(0..=6);
            let pts = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<[f64; 2]> {
                (0..n).map(|_| [rng.random_range(0.0..1.5), rng.random_range(0.0..1.5)]).collect()
            };
            let (d, g) = (pts(nd, &mut rng), pts(ng, &mut rng));
            let m = match_frame(&d, &g, 0.5);
            let (count, total) = brute_force(&d, &g, 0.5);
            assert_eq!(m.len(), count);
            let got: f64 = m.iter().map(|m| m.distance).sum();
            assert!((got - total).abs() < 1e-12, "{got} vs {total}");
        }
    }

    #[test]
    fn single_pair_examples() {
        let m = match_frame(&[[0.0, 0.0]], &[[0.0, 0.3]], 0.5);
        assert_eq!(m.len(), 1);
        assert!((m[0].distance - 0.3).abs() < 1e-15);
        assert!(match_frame(&[[0.0, 0.0]], &[[0.0, 0.6]], 0.5).is_empty());
    }

    #[test]
    fn worked_counts() {
        let f = FrameResult { frame_id: 0, tp: 8, fp: 1, fn_: 2, gt: 10, precision_sum: 4.0 };
        let r = EvalResult::from_frames(vec![f], 0.5).unwrap();
        assert!((r.moda - 0.7).abs() < 1e-12);
        assert!((r.precision - 8.0 / 9.0).abs() < 1e-12);
        assert!((r.recall - 0.8).abs() < 1e-12);
        assert_eq!(format!("{:.3} {:.3} {:.3}", r.moda, r.precision, r.recall), "0.700 0.889 0.800");
    }

    #[test]
    fn modp_of_two_quarter_radius_matches() {
        let gts = BTreeMap::from([(0, vec![[0.0, 0.0], [5.0, 5.0]])]);
        let dets = BTreeMap::from([(0, vec![[0.25, 0.0], [5.0, 4.75]])]);
        let r = evaluate(&dets, &gts, 0.5).unwrap();
        assert!((r.modp - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_detector_scores_one_and_empty_gt_is_an_error() {
        let gts = BTreeMap::from([(0, vec![[1.0, 2.0], [3.0, 4.0]]), (1, vec![[0.5, 0.5]])]);
        let r = evaluate(&gts, &gts, 0.5).unwrap();
        assert_eq!((r.moda, r.modp, r.precision, r.recall), (1.0, 1.0, 1.0, 1.0));
        assert!(r.table().starts_with("MODA 100.0\n"));
        let empty = BTreeMap::from([(0, vec![])]);
        assert!(matches!(evaluate(&empty, &empty, 0.5), Err(Error::Evaluation(_))));
        assert!(evaluate(&BTreeMap::from([(7, vec![])]), &gts, 0.5).is_err());
    }

    #[test]
    fn no_detections_define_precision_one() {
        let gts = BTreeMap::from([(0, vec![[1.0, 2.0]])]);
        let r = evaluate(&BTreeMap::new(), &gts, 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.modp, r.moda), (1.0, 0.0, 0.0, 0.0));
    }

    fn points(max: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec(prop::array::uniform2(0.0f64..3.0), 0..=max)
    }

    proptest! {
        #[test]
        fn metrics_are_scale_invariant(d in points(8), g in points(8), k in 0.1f64..20.0) {
            prop_assume!(!g.is_empty());
            let a = evaluate_frame(0, &d, &g, 0.5);
            let scale = |v: &[[f64; 2]]| v.iter().map(|p| [p[0] * k, p[1] * k]).collect::<Vec<_>>();
            let b = evaluate_frame(0, &scale(&d), &scale(&g), 0.5 * k);
            let (ra, rb) = (EvalResult::from_frames(vec![a], 0.5).unwrap(), EvalResult::from_frames(vec![b], 0.5 * k).unwrap());
            prop_assert_eq!((ra.tp, ra.fp, ra.fn_), (rb.tp, rb.fp, rb.fn_));
            prop_assert!((ra.modp - rb.modp).abs() < 1e-9);
        }

        #[test]
        fn far_detection_costs_precision_only(d in points(6), g in points(6)) {
            prop_assume!(!g.is_empty());
            let base = EvalResult::from_frames(vec![evaluate_frame(0, &d, &g, 0.5)], 0.5).unwrap();
            let mut more = d.clone();
            more.push([100.0, 100.0]);
            let r = EvalResult::from_frames(vec![evaluate_frame(0, &more, &g, 0.5)], 0.5).unwrap();
            prop_assert!(r.precision < base.precision || (base.tp == 0 && r.precision == 0.0));
            prop_assert!(r.moda < base.moda);
            prop_assert_eq!(r.recall, base.recall);
            prop_assert_eq!(r.modp, base.modp);
        }
    }
}
