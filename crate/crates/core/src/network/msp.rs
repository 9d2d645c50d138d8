use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{build_sampling_grid_at, BevGridSpec, CameraCalibration, SamplingGrid};
use crate::tensor::{Float, ParamStore, SampleTable, Var};

use super::layers::{Conv, ConvSpec, Ctx};

/// Gather table projecting level-`feature_level` image features onto the
/// BEV shape of `bev_level`, for every view and height.
#[derive(Clone, Debug)]
pub struct LevelTable<F> {
    pub feature_level: usize,
    pub bev_level: usize,
    pub table: Arc<SampleTable<F>>,
}

/// All gather tables one forward pass needs, in projection order.
#[derive(Clone, Debug)]
pub struct ProjectionTables<F> {
    pub levels: Vec<LevelTable<F>>,
}

/// Packs `[view][height]` sampling grids into one gather table.
pub fn sample_table_from_grids<F: Float>(grids: &[Vec<SamplingGrid>]) -> Result<SampleTable<F>> {
    let first = grids
        .first()
        .and_then(|g| g.first())
        .ok_or_else(|| Error::Config("no sampling grids supplied".into()))?;
    let (rows, cols) = (first.rows, first.cols);
    let extent = first.feature_extent;
    let heights = grids[0].len();
    let mut index = Vec::with_capacity(grids.len() * heights * rows * cols);
    let mut weight = Vec::with_capacity(index.capacity());
    for per_view in grids {
        if per_view.len() != heights {
            return Err(Error::Config("views disagree on the number of heights".into()));
        }
        for g in per_view {
            if (g.rows, g.cols, g.feature_extent) != (rows, cols, extent) {
                return Err(Error::Config(format!(
                    "sampling grid for level {} has mismatched shape; all views need equal image sizes",
                    g.level
                )));
            }
            for cell in 0..rows * cols {
                let (idx, w) = g.bilinear_taps(cell);
                index.push(idx);
                weight.push(w.map(F::from_f64_lossy));
            }
        }
    }
    Ok(SampleTable {
        views: grids.len(),
        heights,
        in_h: extent.0,
        in_w: extent.1,
        out_h: rows,
        out_w: cols,
        index,
        weight,
    })
}

impl<F: Float> ProjectionTables<F> {
    /// Tables for each `(feature_level, bev_level)` pair.
    pub fn build(calibs: &[CameraCalibration], grid: &BevGridSpec, pairs: &[(usize, usize)]) -> Result<Self> {
        let levels = pairs
            .iter()
            .map(|&(fl, bl)| {
                let grids = calibs
                    .iter()
                    .map(|c| {
                        (0..grid.heights.len())
                            .map(|h| build_sampling_grid_at(c, fl, bl, h, grid))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LevelTable {
                    feature_level: fl,
                    bev_level: bl,
                    table: Arc::new(sample_table_from_grids(&grids)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    /// Gathers from a prebuilt cache instead of reprojecting.
    pub fn from_cache(cache: &crate::geometry::GridCache, pairs: &[(usize, usize)]) -> Result<Self> {
        let levels = pairs
            .iter()
            .map(|&(fl, bl)| {
                let grids = (0..cache.views())
                    .map(|v| {
                        let mut per_height = Vec::new();
                        let mut h = 0;
                        while let Some(g) = cache.get(v, fl, h) {
                            if g.bev_level != bl {
                                return Err(Error::Config(format!(
                                    "cached grid for level {fl} targets BEV level {}, need {bl}",
                                    g.bev_level
                                )));
                            }
                            per_height.push(g.clone());
                            h += 1;
                        }
                        if per_height.is_empty() {
                            return Err(Error::Config(format!("missing cached grid for view {v}, level {fl}")));
                        }
                        Ok(per_height)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LevelTable {
                    feature_level: fl,
                    bev_level: bl,
                    table: Arc::new(sample_table_from_grids(&grids)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }
}

/// Multi-height projection followed by a per-level 1x1 fusion of the
/// height-stacked samples back to C channels.
#[derive(Clone, Debug)]
pub struct Msp {
    fuse: Vec<Conv>,
    pub channels: usize,
    pub heights: usize,
}

impl Msp {
    pub fn new<F: Float>(store: &mut ParamStore<F>, levels: &[usize], c: usize, heights: usize, rng: &mut impl Rng) -> Self {
        let fuse = levels
            .iter()
            .map(|l| Conv::new(store, &format!("msp.fuse{l}"), ConvSpec::new(heights * c, c, 1), rng))
            .collect();
        Self { fuse, channels: c, heights }
    }

    /// Projects the `k`-th table's feature level; `feats` is `[N, C, h, w]`.
    pub fn project<F: Float>(&self, cx: &mut Ctx<'_, F>, k: usize, feats: Var, table: &LevelTable<F>) -> Result<Var> {
        let [n, c, h, w] = cx.shape(feats);
        let t = &table.table;
        if t.views != n || (t.in_h, t.in_w) != (h, w) || t.heights != self.heights || c != self.channels {
            return Err(Error::Shape(format!(
                "projection table (views {}, {}x{}, {} heights) does not fit level-{} features {n}x{c}x{h}x{w}",
                t.views, t.in_h, t.in_w, t.heights, table.feature_level
            )));
        }
        let stacked = cx.g.sample(feats, Arc::clone(t));
        Ok(self.fuse[k].forward(cx, stacked))
    }
}
