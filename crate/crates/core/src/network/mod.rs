//! The detector: residual encoder, image-space feature pyramid, multi-scale
//! BEV projection, view pooling, BEV feature pyramid and prediction heads.

mod backbone;
mod checkpoint;
mod fpn;
mod heads;
mod layers;
mod msp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, LEVELS};
use crate::tensor::{Float, Graph, ParamStore, Tensor, Var};

pub use backbone::{Backbone, BackboneConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use fpn::Fpn;
pub use heads::{Head, OCCUPANCY_PRIOR_BIAS};
pub use layers::{Conv, ConvSpec, Ctx};
pub use msp::{sample_table_from_grids, LevelTable, Msp, ProjectionTables};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Multi-scale projection, BEV pyramid and per-level heads.
    Full,
    /// Multi-scale projection with heads directly on the pooled BEV maps.
    MspOnly,
    /// Level-5 image features projected onto the level-3 BEV grid, one head.
    Baseline,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "msp_only" => Ok(Mode::MspOnly),
            "baseline" => Ok(Mode::Baseline),
            other => Err(Error::Config(format!("mode: unknown ablation mode `{other}` (full, msp_only, baseline)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    /// Pyramid width C.
    pub channels: usize,
    pub mode: Mode,
    pub pooling: Pooling,
    pub image_fpn_bottom_up: bool,
    pub bev_fpn_bottom_up: bool,
    pub share_heads: bool,
    /// Project every level onto the level-3 BEV shape.
    pub shared_bev_resolution: bool,
    /// Group normalization inside pyramid fusion blocks.
    pub norm: bool,
    pub heights: usize,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::resnet18(),
            channels: 256,
            mode: Mode::Full,
            pooling: Pooling::Max,
            image_fpn_bottom_up: true,
            bev_fpn_bottom_up: true,
            share_heads: true,
            shared_bev_resolution: false,
            norm: true,
            heights: 5,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn small(channels: usize) -> Self {
        Self { backbone: BackboneConfig::small(), channels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heights == 0 {
            return Err(Error::Config("channels and heights must be positive".into()));
        }
        if self.backbone.stages.contains(&0) || self.backbone.blocks.contains(&0) || self.backbone.stem == 0 {
            return Err(Error::Config("backbone widths and block counts must be positive".into()));
        }
        Ok(())
    }

    /// Checks that `grid` supplies the height planes the fusion layers expect.
    pub fn check_grid(&self, grid: &BevGridSpec) -> Result<()> {
        if grid.heights.len() != self.heights {
            return Err(Error::Config(format!(
                "network expects {} height planes but the BEV grid has {}",
                self.heights,
                grid.heights.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("config serializes")).into()
    }

    /// `(feature_level, bev_level)` for every projection the mode performs.
    pub fn projection_pairs(&self) -> Vec<(usize, usize)> {
        match self.mode {
            Mode::Baseline => vec![(5, 3)],
            _ if self.shared_bev_resolution => LEVELS.iter().map(|&l| (l, 3)).collect(),
            _ => LEVELS.iter().map(|&l| (l, l)).collect(),
        }
    }

    /// Pyramid label and BEV geometry level of every head output.
    pub fn output_levels(&self) -> Vec<(usize, usize)> {
        match self.mode {
            Mode::Baseline => vec![(3, 3)],
            _ => self.projection_pairs().iter().map(|&(fl, bl)| (fl, bl)).collect(),
        }
    }
}

/// Raw forward results: per output level, occupancy logits `[1, 1, R, C]`
/// and offsets `[1, 2, R, C]`.
pub struct ForwardOutput {
    /// `(pyramid level, BEV geometry level)` per output.
    pub levels: Vec<(usize, usize)>,
    pub occupancy: Vec<Var>,
    pub offset: Vec<Var>,
    /// Named intermediate shapes in evaluation order.
    pub shapes: Vec<(String, [usize; 4])>,
}

/// Per-level head predictions copied out of a graph.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub levels: Vec<(usize, usize)>,
    pub occupancy_logits: Vec<Tensor<f32>>,
    pub offset: Vec<Tensor<f32>>,
}

impl HeadOutputs {
    pub fn from_graph<F: Float>(g: &Graph<F>, out: &ForwardOutput) -> Self {
        Self {
            levels: out.levels.clone(),
            occupancy_logits: out.occupancy.iter().map(|&v| g.value(v).cast()).collect(),
            offset: out.offset.iter().map(|&v| g.value(v).cast()).collect(),
        }
    }

    /// Sigmoid occupancy of output `k` as a row-major plane.
    pub fn probabilities(&self, k: usize) -> Vec<f64> {
        self.occupancy_logits[k]
            .data()
            .iter()
            .map(|&z| 1.0 / (1.0 + (-(z as f64)).exp()))
            .collect()
    }

    pub fn index_of_level(&self, level: usize) -> Option<usize> {
        self.levels.iter().position(|&(l, _)| l == level)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    backbone: Backbone,
    image_fpn: Fpn,
    msp: Msp,
    bev_fpn: Option<Fpn>,
    occupancy_heads: Vec<Head>,
    offset_heads: Vec<Head>,
}

/// Per-channel normalization applied to `[0, 1]` images.
const IMAGE_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGE_STD: [f32; 3] = [0.229, 0.224, 0.225];

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn new<F: Float>(config: &NetworkConfig) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let c = config.channels;
        let backbone = Backbone::new(&mut store, &config.backbone, &mut rng);
        let image_fpn = Fpn::new(&mut store, "image_fpn", config.backbone.out_channels(), c, config.image_fpn_bottom_up, config.norm, &mut rng);
        let proj_levels: Vec<usize> = config.projection_pairs().iter().map(|&(fl, _)| fl).collect();
        let msp = Msp::new(&mut store, &proj_levels, c, config.heights, &mut rng);
        let bev_fpn = (config.mode == Mode::Full)
            .then(|| Fpn::new(&mut store, "bev_fpn", [c; 3], c, config.bev_fpn_bottom_up, config.norm, &mut rng));
        let n_heads = if config.share_heads || config.mode == Mode::Baseline { 1 } else { 3 };
        let mut occupancy_heads = Vec::new();
        let mut offset_heads = Vec::new();
        for k in 0..n_heads {
            let tag = if n_heads == 1 { String::new() } else { format!("{}", LEVELS[k]) };
            occupancy_heads.push(Head::new(&mut store, &format!("head.occupancy{tag}"), c, 1, OCCUPANCY_PRIOR_BIAS, &mut rng));
            offset_heads.push(Head::new(&mut store, &format!("head.offset{tag}"), c, 2, 0.0, &mut rng));
        }
        let model = Self {
            config: config.clone(),
            backbone,
            image_fpn,
            msp,
            bev_fpn,
            occupancy_heads,
            offset_heads,
        };
        Ok((model, store))
    }

    /// Stacks `3 x H x W` views into a normalized `[N, 3, H, W]` batch.
    pub fn prepare_images<F: Float>(images: &[Tensor<f32>]) -> Tensor<F> {
        let shape = images[0].shape().to_vec();
        assert_eq!(shape.len(), 3, "images must be [3, H, W]");
        let plane = shape[1] * shape[2];
        let mut data = Vec::with_capacity(images.len() * 3 * plane);
        for img in images {
            assert_eq!(img.shape(), shape.as_slice(), "all views need equal image sizes");
            for (ch, chunk) in img.data().chunks(plane).enumerate() {
                data.extend(chunk.iter().map(|&v| F::from_f64_lossy(((v - IMAGE_MEAN[ch]) / IMAGE_STD[ch]) as f64)));
            }
        }
        Tensor::from_vec(&[images.len(), shape[0], shape[1], shape[2]], data)
    }

    /// Runs the detector on one multi-view frame, `images` being `[N, 3, H, W]`.
    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, images: Var, tables: &ProjectionTables<F>) -> Result<ForwardOutput> {
        let pairs = self.config.projection_pairs();
        if tables.levels.len() != pairs.len()
            || tables.levels.iter().zip(&pairs).any(|(t, &(fl, bl))| (t.feature_level, t.bev_level) != (fl, bl))
        {
            return Err(Error::Config(format!("projection tables do not match the mode's projections {pairs:?}")));
        }
        let mut shapes = Vec::new();
        let mut record = |cx: &Ctx<'_, F>, name: String, v: Var| shapes.push((name, cx.shape(v)));
        record(cx, "images".into(), images);
        let raw = self.backbone.forward(cx, images)?;
        for (l, &v) in LEVELS.iter().zip(&raw) {
            record(cx, format!("backbone.F{l}"), v);
        }
        let feats = self.image_fpn.forward(cx, raw);
        for (l, &v) in LEVELS.iter().zip(&feats) {
            record(cx, format!("image_fpn.F{l}"), v);
        }
        let mut pooled = Vec::with_capacity(pairs.len());
        for (k, (&(fl, _), table)) in pairs.iter().zip(&tables.levels).enumerate() {
            let p = self.msp.project(cx, k, feats[fl - 3], table)?;
            record(cx, format!("msp.P{fl}"), p);
            let b = match self.config.pooling {
                Pooling::Max => cx.g.view_max(p),
                Pooling::Mean => cx.g.view_mean(p),
            };
            record(cx, format!("pool.B{fl}"), b);
            pooled.push(b);
        }
        let bev: Vec<Var> = match &self.bev_fpn {
            Some(fpn) => {
                let out = fpn.forward(cx, [pooled[0], pooled[1], pooled[2]]);
                for (l, &v) in LEVELS.iter().zip(&out) {
                    record(cx, format!("bev_fpn.B{l}"), v);
                }
                out.to_vec()
            }
            None => pooled,
        };
        let levels = self.config.output_levels();
        let mut occupancy = Vec::with_capacity(bev.len());
        let mut offset = Vec::with_capacity(bev.len());
        for (k, (&b, &(l, _))) in bev.iter().zip(&levels).enumerate() {
            let h = if self.occupancy_heads.len() == 1 { 0 } else { k };
            let m = self.occupancy_heads[h].forward(cx, b);
            let o = self.offset_heads[h].forward(cx, b);
            record(cx, format!("head.M{l}"), m);
            record(cx, format!("head.O{l}"), o);
            occupancy.push(m);
            offset.push(o);
        }
        Ok(ForwardOutput { levels, occupancy, offset, shapes })
    }

    /// Forward pass without gradient tracking on a fresh graph.
    pub fn predict(&self, store: &ParamStore<f32>, images: &[Tensor<f32>], tables: &ProjectionTables<f32>) -> Result<HeadOutputs> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, store);
        let x = cx.g.input(Self::prepare_images(images), false);
        let out = self.forward(&mut cx, x, tables)?;
        Ok(HeadOutputs::from_graph(&g, &out))
    }
}

#[cfg(test)]
mod tests;
