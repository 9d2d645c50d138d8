//! Multi-scale occupancy merging, peak extraction and offset decoding.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{level_coord_to_world, BevGridSpec, CameraCalibration};
use crate::network::{HeadOutputs, Model, ProjectionTables};
use crate::tensor::kernels::bilinear_resize_plane;
use crate::tensor::{ParamStore, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Occupancy probabilities on the BEV lattice of `level`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMap {
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl OccupancyMap {
    pub fn new(level: usize, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} map", values.len())));
        }
        Ok(Self { level, rows, cols, values })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub frame_id: usize,
    pub detections: Vec<Detection>,
}

/// Which occupancy maps feed peak extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Average of all levels upsampled to the finest one, decoded with `O_3`.
    Merged,
    /// `M_l` and `O_l` of one pyramid level, unmerged.
    Single(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub threshold: f64,
    /// Odd side length of the local-maximum window.
    pub nms_window: usize,
    pub mode: InferenceMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, nms_window: 3, mode: InferenceMode::Merged }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.nms_window.is_multiple_of(2) {
            return Err(Error::Config(format!("nms_window must be odd, got {}", self.nms_window)));
        }
        Ok(())
    }
}

/// Averages the maps after bilinear upsampling to the first map's shape.
/// Every map must have its level's shape on `grid`.
pub fn merge_maps(maps: &[OccupancyMap], grid: &BevGridSpec) -> Result<OccupancyMap> {
    let first = maps.first().ok_or_else(|| Error::Shape("no occupancy maps to merge".into()))?;
    for m in maps {
        if (m.rows, m.cols) != grid.level_shape(m.level) || m.values.len() != m.rows * m.cols {
            return Err(Error::Shape(format!(
                "level-{} map is {}x{}, grid expects {:?}",
                m.level,
                m.rows,
                m.cols,
                grid.level_shape(m.level)
            )));
        }
    }
    let (rows, cols) = (first.rows, first.cols);
    let mut sum = vec![0.0; rows * cols];
    for m in maps {
        let up = bilinear_resize_plane(&m.values, m.rows, m.cols, rows, cols);
        sum.iter_mut().zip(&up).for_each(|(s, v)| *s += v);
    }
    let n = maps.len() as f64;
    let values = sum.into_iter().map(|s| (s / n).clamp(0.0, 1.0)).collect();
    Ok(OccupancyMap { level: first.level, rows, cols, values })
}

/// Cells that are the maximum of their `window x window` neighbourhood; on
/// ties only the lowest row-major index survives.
pub fn local_maxima(map: &OccupancyMap, window: usize) -> Vec<usize> {
    let r = (window / 2) as isize;
    let (rows, cols) = (map.rows as isize, map.cols as isize);
    let mut keep = Vec::new();
    for i in 0..rows {
        'cell: for j in 0..cols {
            let idx = (i * cols + j) as usize;
            let v = map.values[idx];
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (i + di, j + dj);
                    if (di, dj) == (0, 0) || a < 0 || b < 0 || a >= rows || b >= cols {
                        continue;
                    }
                    let n = (a * cols + b) as usize;
                    let w = map.values[n];
                    if w > v || (w == v && n < idx) {
                        continue 'cell;
                    }
                }
            }
            keep.push(idx);
        }
    }
    keep
}

/// Peaks of `map` scoring at least `threshold`, decoded to metres with the
/// channel-major `[2, R, C]` offset map of the same lattice.
pub fn extract_detections(
    map: &OccupancyMap,
    offset: &[f64],
    grid: &BevGridSpec,
    threshold: f64,
    window: usize,
) -> Result<Vec<Detection>> {
    let cells = map.rows * map.cols;
    if offset.len() != 2 * cells {
        return Err(Error::Shape(format!("offset map has {} values, expected {}", offset.len(), 2 * cells)));
    }
    let s = BevGridSpec::level_scale(map.level) as f64;
    let (max_i, max_j) = (grid.cells_x as f64 / s, grid.cells_y as f64 / s);
    let mut dets: Vec<Detection> = local_maxima(map, window)
        .into_iter()
        .filter(|&c| map.values[c] >= threshold)
        .map(|c| {
            let (i, j) = (c / map.cols, c % map.cols);
            let ci = (i as f64 + offset[c]).clamp(0.0, max_i);
            let cj = (j as f64 + offset[cells + c]).clamp(0.0, max_j);
            let [x, y] = level_coord_to_world(ci, cj, map.level, grid);
            Detection { x, y, score: map.values[c] }
        })
        .collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(dets)
}

/// Runs the configured inference path on one frame's head outputs.
pub fn detect(heads: &HeadOutputs, grid: &BevGridSpec, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let map_of = |k: usize| {
        let (_, bl) = heads.levels[k];
        let shape = heads.occupancy_logits[k].shape();
        OccupancyMap::new(bl, shape[2], shape[3], heads.probabilities(k))
    };
    let offsets_of = |k: usize| heads.offset[k].data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let missing = |l: usize| Error::Config(format!("model has no level-{l} output"));
    match cfg.mode {
        InferenceMode::Merged => {
            let maps = (0..heads.levels.len()).map(map_of).collect::<Result<Vec<_>>>()?;
            let merged = merge_maps(&maps, grid)?;
            let k3 = heads.index_of_level(3).ok_or_else(|| missing(3))?;
            if heads.levels[k3].1 != merged.level {
                return Err(Error::Shape("level-3 offsets do not share the merged lattice".into()));
            }
            extract_detections(&merged, &offsets_of(k3), grid, cfg.threshold, cfg.nms_window)
        }
        InferenceMode::Single(l) => {
            let k = heads.index_of_level(l).ok_or_else(|| missing(l))?;
            extract_detections(&map_of(k)?, &offsets_of(k), grid, cfg.threshold, cfg.nms_window)
        }
    }
}

/// A trained model bound to one camera rig.
pub struct Predictor {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub grid: BevGridSpec,
    tables: ProjectionTables<f32>,
}

impl Predictor {
    pub fn new(model: Model, params: ParamStore<f32>, calibs: &[CameraCalibration], grid: &BevGridSpec) -> Result<Self> {
        model.config.check_grid(grid)?;
        let tables = ProjectionTables::build(calibs, grid, &model.config.projection_pairs())?;
        Ok(Self { model, params, grid: grid.clone(), tables })
    }

    pub fn heads(&self, images: &[Tensor<f32>]) -> Result<HeadOutputs> {
        self.model.predict(&self.params, images, &self.tables)
    }

    pub fn detect(&self, images: &[Tensor<f32>], cfg: &InferenceConfig) -> Result<Vec<Detection>> {
        detect(&self.heads(images)?, &self.grid, cfg)
    }

    /// Detections for the dataset frames at `indices`.
    pub fn detect_frames(&self, dataset: &Dataset, indices: &[usize], cfg: &InferenceConfig) -> Result<Vec<DetectionSet>> {
        indices
            .iter()
            .map(|&i| {
                let frame = dataset.load_frame(i)?;
                Ok(DetectionSet { frame_id: frame.frame_id, detections: self.detect(&frame.images, cfg)? })
            })
            .collect()
    }
}

/// Text records `frame_id x y score`, one detection per line, after a
/// `# frames` header listing every frame including empty ones.
pub fn format_detections(sets: &[DetectionSet]) -> String {
    let ids: Vec<String> = sets.iter().map(|s| s.frame_id.to_string()).collect();
    let mut out = format!("# frames {}\n# frame_id x y score\n", ids.join(" "));
    for set in sets {
        for d in &set.detections {
            out.push_str(&format!("{} {} {} {}\n", set.frame_id, d.x, d.y, d.score));
        }
    }
    out
}

/// Parses detection records; frames are returned in ascending id order.
pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<DetectionSet>> {
    let mut frames: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        let bad = |what: &str| Error::parse(path, format!("line {}: {what}", n + 1));
        if let Some(ids) = line.strip_prefix("# frames") {
            for id in ids.split_whitespace() {
                frames.entry(id.parse().map_err(|_| bad("bad frame id"))?).or_default();
            }
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad("expected `frame_id x y score`"));
        }
        let frame_id = f[0].parse().map_err(|_| bad("bad frame id"))?;
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("bad number"));
        frames
            .entry(frame_id)
            .or_default()
            .push(Detection { x: num(f[1])?, y: num(f[2])?, score: num(f[3])? });
    }
    Ok(frames.into_iter().map(|(frame_id, detections)| DetectionSet { frame_id, detections }).collect())
}

/// Occupancy maps of one frame in a serializable layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    /// Pyramid label of the head that produced the map; 0 for merged maps.
    pub pyramid_level: usize,
    pub bev_level: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl MapRecord {
    pub fn from_map(pyramid_level: usize, map: &OccupancyMap) -> Self {
        Self { pyramid_level, bev_level: map.level, rows: map.rows, cols: map.cols, values: map.values.clone() }
    }
}

/// Everything needed to draw one frame's BEV maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMaps {
    pub frame_id: usize,
    pub grid: BevGridSpec,
    pub merged: Option<MapRecord>,
    pub levels: Vec<MapRecord>,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<[f64; 2]>,
}

impl FrameMaps {
    /// Per-level probabilities and the merged map of a head output.
    pub fn from_heads(frame_id: usize, heads: &HeadOutputs, grid: &BevGridSpec, detections: Vec<Detection>) -> Result<Self> {
        let maps = (0..heads.levels.len())
            .map(|k| {
                let s = heads.occupancy_logits[k].shape();
                OccupancyMap::new(heads.levels[k].1, s[2], s[3], heads.probabilities(k))
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = merge_maps(&maps, grid)?;
        Ok(Self {
            frame_id,
            grid: grid.clone(),
            merged: Some(MapRecord::from_map(0, &merged)),
            levels: maps.iter().zip(&heads.levels).map(|(m, &(pl, _))| MapRecord::from_map(pl, m)).collect(),
            detections,
            ground_truth: Vec::new(),
        })
    }
}
