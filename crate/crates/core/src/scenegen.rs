//! Deterministic synthetic multi-camera scenes: camera placement, a seeded
//! pedestrian random walk, flat-shaded rasterization and dataset export.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{annotation_path, format_annotations, image_path};
use crate::datasets::{Annotation, DatasetManifest, DatasetWriter, FrameEntry, Splits};
use crate::error::{Error, Result};
use crate::geometry::{look_at, mat_vec, project_world_to_pixel, BevGridSpec, CameraCalibration};

pub const PEDESTRIAN_HEIGHT: f64 = 1.7;
pub const PEDESTRIAN_WIDTH: f64 = 0.4;
pub const SCENE_SPEC_FILE: &str = "scene_spec.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraLayout {
    Ring,
    TwoSided,
    RandomPose,
}

fn default_cell_size() -> f64 {
    0.1
}
fn default_camera_height() -> f64 {
    2.5
}
fn default_fov() -> f64 {
    100.0
}
fn default_margin() -> f64 {
    0.5
}
fn default_step() -> f64 {
    0.15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// `(width, depth)` metres along world x and y; the region starts at the
    /// origin.
    pub region: (f64, f64),
    pub n_cameras: usize,
    pub camera_layout: CameraLayout,
    pub n_pedestrians_range: (usize, usize),
    pub n_frames: usize,
    /// `(H, W)` pixels.
    pub image_size: (usize, usize),
    pub seed: u64,
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
    #[serde(default = "default_camera_height")]
    pub camera_height: f64,
    /// Horizontal field of view, degrees.
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    /// Distance of cameras outside the region boundary, metres.
    #[serde(default = "default_margin")]
    pub camera_margin: f64,
    /// Standard deviation of the per-frame random-walk step, metres.
    #[serde(default = "default_step")]
    pub walk_step: f64,
    /// Trailing frames assigned to the validation split.
    #[serde(default)]
    pub val_frames: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            region: (12.0, 12.0),
            n_cameras: 4,
            camera_layout: CameraLayout::Ring,
            n_pedestrians_range: (5, 10),
            n_frames: 20,
            image_size: (360, 640),
            seed: 0,
            cell_size: default_cell_size(),
            camera_height: default_camera_height(),
            fov_deg: default_fov(),
            camera_margin: default_margin(),
            walk_step: default_step(),
            val_frames: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.region.0 > 1.0 && self.region.1 > 1.0) {
            return bad("region: both extents must exceed 1 m".into());
        }
        if self.n_cameras < 2 {
            return bad("n_cameras: at least 2 cameras are required".into());
        }
        let (lo, hi) = self.n_pedestrians_range;
        if lo > hi {
            return bad("n_pedestrians_range: min exceeds max".into());
        }
        if self.n_frames == 0 || self.val_frames >= self.n_frames {
            return bad("n_frames: need at least one training frame".into());
        }
        if self.image_size.0 < 16 || self.image_size.1 < 16 {
            return bad("image_size: images must be at least 16x16".into());
        }
        if !(self.cell_size > 0.0) {
            return bad("cell_size: must be positive".into());
        }
        if !(10.0..170.0).contains(&self.fov_deg) {
            return bad("fov_deg: must lie in [10, 170)".into());
        }
        let capacity = (self.region.0 / MIN_SEPARATION) * (self.region.1 / MIN_SEPARATION) / 4.0;
        if hi as f64 > capacity {
            return bad("n_pedestrians_range: too many pedestrians for the region".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> BevGridSpec {
        BevGridSpec::for_region(self.region.0, self.region.1, self.cell_size, [0.0, 0.0])
    }
}

const MIN_SEPARATION: f64 = 0.6;

/// Vertical axis-aligned box with a flat color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPrimitive {
    pub center: [f64; 2],
    pub half_width: f64,
    pub z0: f64,
    pub z1: f64,
    pub color: [u8; 3],
}

impl BoxPrimitive {
    pub fn pedestrian(center: [f64; 2], color: [u8; 3]) -> Self {
        Self {
            center,
            half_width: PEDESTRIAN_WIDTH / 2.0,
            z0: 0.0,
            z1: PEDESTRIAN_HEIGHT,
            color,
        }
    }

    fn corners(&self) -> [[f64; 3]; 8] {
        let [cx, cy] = self.center;
        let h = self.half_width;
        let mut out = [[0.0; 3]; 8];
        for (k, c) in out.iter_mut().enumerate() {
            let dx = if k & 1 == 0 { -h } else { h };
            let dy = if k & 2 == 0 { -h } else { h };
            let z = if k & 4 == 0 { self.z0 } else { self.z1 };
            *c = [cx + dx, cy + dy, z];
        }
        out
    }

    /// Convex hull of the projected corners, `None` if any corner is not in
    /// front of the camera.
    pub fn image_hull(&self, calib: &CameraCalibration) -> Option<Vec<[f64; 2]>> {
        let mut pts = Vec::with_capacity(8);
        for c in self.corners() {
            match project_world_to_pixel(&c, calib) {
                Ok((p, d)) if d > 1e-3 => pts.push(p),
                _ => return None,
            }
        }
        Some(convex_hull(pts))
    }

    fn depth(&self, calib: &CameraCalibration) -> f64 {
        let mid = [self.center[0], self.center[1], 0.5 * (self.z0 + self.z1)];
        let cam = mat_vec(&calib.rotation, &mid);
        cam[2] + calib.translation[2]
    }
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap().then(a[1].partial_cmp(&b[1]).unwrap()));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Pixel centres `(u, v)` inside a convex polygon, clipped to the image.
fn fill_convex(hull: &[[f64; 2]], w: usize, h: usize, mut put: impl FnMut(usize, usize)) {
    if hull.len() < 3 {
        return;
    }
    let vmin = hull.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
    let vmax = hull.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).floor();
    if vmax < 0.0 {
        return;
    }
    let vmax = (vmax as usize).min(h.saturating_sub(1));
    for v in vmin..=vmax {
        let y = v as f64;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..hull.len() {
            let a = hull[k];
            let b = hull[(k + 1) % hull.len()];
            if (a[1] <= y && b[1] >= y) || (b[1] <= y && a[1] >= y) {
                let x = if (b[1] - a[1]).abs() < 1e-12 {
                    lo = lo.min(a[0].min(b[0]));
                    a[0].max(b[0])
                } else {
                    a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0])
                };
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if hi < 0.0 || lo > (w - 1) as f64 || lo > hi {
            continue;
        }
        let (u0, u1) = (lo.ceil().max(0.0) as usize, (hi.floor() as usize).min(w - 1));
        for u in u0..=u1 {
            put(u, v);
        }
    }
}

fn hash2(a: i64, b: i64, seed: u64) -> f64 {
    let mut x = (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ seed;
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

const SKY: [u8; 3] = [150, 185, 225];

/// Ground texture color at world `(x, y)`: a 0.5 m checker modulated by
/// 0.1 m value noise, dimmed outside the region.
fn ground_color(x: f64, y: f64, region: (f64, f64), seed: u64) -> [u8; 3] {
    let checker = ((x / 0.5).floor() as i64 + (y / 0.5).floor() as i64).rem_euclid(2) as f64;
    let noise = hash2((x / 0.1).floor() as i64, (y / 0.1).floor() as i64, seed);
    let inside = x >= 0.0 && y >= 0.0 && x <= region.0 && y <= region.1;
    let base = if inside { 0.45 } else { 0.3 };
    let l = base + 0.15 * checker + 0.12 * (noise - 0.5);
    [(l * 200.0) as u8, (l * 190.0) as u8, (l * 160.0) as u8]
}

/// Rasterizes boxes over a background with painter's ordering.
pub fn render_view(background: &RgbImage, calib: &CameraCalibration, boxes: &[BoxPrimitive]) -> RgbImage {
    let mut img = background.clone();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut order: Vec<(f64, usize)> = boxes.iter().enumerate().map(|(i, b)| (b.depth(calib), i)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for (_, i) in order {
        if let Some(hull) = boxes[i].image_hull(calib) {
            fill_convex(&hull, w, h, |u, v| img.put_pixel(u as u32, v as u32, Rgb(boxes[i].color)));
        }
    }
    img
}

/// Textured ground plane and sky as seen by one camera.
pub fn render_background(calib: &CameraCalibration, region: (f64, f64), seed: u64) -> RgbImage {
    RgbImage::from_fn(calib.image_width as u32, calib.image_height as u32, |u, v| {
        match calib.unproject_to_height([u as f64, v as f64], 0.0) {
            Some([x, y]) => Rgb(ground_color(x, y, region, seed)),
            None => Rgb(SKY),
        }
    })
}

fn intrinsics(spec: &SceneSpec) -> [[f64; 3]; 3] {
    let (h, w) = (spec.image_size.0 as f64, spec.image_size.1 as f64);
    let f = (w / 2.0) / (spec.fov_deg.to_radians() / 2.0).tan();
    [[f, 0.0, (w - 1.0) / 2.0], [0.0, f, (h - 1.0) / 2.0], [0.0, 0.0, 1.0]]
}

fn calibration(spec: &SceneSpec, view: usize, eye: [f64; 3], target: [f64; 3]) -> CameraCalibration {
    let rotation = look_at(&eye, &target);
    let translation = mat_vec(&rotation, &eye).map(|v| -v);
    CameraCalibration {
        view_id: view,
        intrinsics: intrinsics(spec),
        rotation,
        translation,
        image_height: spec.image_size.0,
        image_width: spec.image_size.1,
    }
}

/// Camera poses for the spec's layout; all cameras stand outside the region
/// and look towards it.
pub fn place_cameras(spec: &SceneSpec) -> Result<Vec<CameraCalibration>> {
    spec.validate()?;
    let (w, d) = spec.region;
    let centre = [w / 2.0, d / 2.0, 0.0];
    let n = spec.n_cameras;
    let hz = spec.camera_height;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xCA3E_7A5C);
    let radius = 0.5 * (w * w + d * d).sqrt() + spec.camera_margin;
    let cams = match spec.camera_layout {
        CameraLayout::Ring => (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                let (rx, ry) = (w / 2.0 + spec.camera_margin, d / 2.0 + spec.camera_margin);
                let eye = [centre[0] + rx * a.cos(), centre[1] + ry * a.sin(), hz];
                calibration(spec, k, eye, centre)
            })
            .collect(),
        CameraLayout::TwoSided => (0..n)
            .map(|k| {
                let side = k % 2;
                let slot = k / 2;
                let per_side = n.div_ceil(2) - if side == 1 && n % 2 == 1 { 1 } else { 0 };
                let x = w * (slot as f64 + 0.5) / per_side as f64;
                let y = if side == 0 { -spec.camera_margin } else { d + spec.camera_margin };
                let target = [x + (centre[0] - x) * 0.5, centre[1], 0.0];
                calibration(spec, k, [x, y, hz], target)
            })
            .collect(),
        CameraLayout::RandomPose => (0..n)
            .map(|k| {
                let a = 2.0 * PI * (k as f64 + rng.random_range(-0.25..0.25)) / n as f64;
                let r = radius * rng.random_range(0.95..1.2);
                let eye = [centre[0] + r * a.cos(), centre[1] + r * a.sin(), hz * rng.random_range(0.8..1.3)];
                let target = [
                    centre[0] + rng.random_range(-0.15..0.15) * w,
                    centre[1] + rng.random_range(-0.15..0.15) * d,
                    0.0,
                ];
                calibration(spec, k, eye, target)
            })
            .collect(),
    };
    Ok(cams)
}

/// Fraction of ground-grid cells visible from at least one camera and the
/// centroid of the unseen cells.
pub fn coverage(calibs: &[CameraCalibration], grid: &BevGridSpec) -> (usize, usize, [f64; 2]) {
    let mut uncovered = 0;
    let mut centroid = [0.0, 0.0];
    for gx in 0..grid.cells_x {
        for gy in 0..grid.cells_y {
            let [x, y] = grid.grid_to_world(gx as f64, gy as f64);
            let seen = calibs.iter().any(|c| match project_world_to_pixel(&[x, y, 0.0], c) {
                Ok(([u, v], d)) => d > 0.0 && u >= 0.0 && v >= 0.0 && u <= (c.image_width - 1) as f64 && v <= (c.image_height - 1) as f64,
                Err(_) => false,
            });
            if !seen {
                uncovered += 1;
                centroid[0] += x;
                centroid[1] += y;
            }
        }
    }
    if uncovered > 0 {
        centroid = centroid.map(|v| v / uncovered as f64);
    }
    (uncovered, grid.cells_x * grid.cells_y, centroid)
}

/// Per-frame pedestrian positions from a seeded random walk.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectories {
    pub frames: Vec<Vec<Annotation>>,
    pub colors: Vec<[u8; 3]>,
}

fn hsv_color(rng: &mut impl Rng) -> [u8; 3] {
    let h = rng.random_range(0.0..6.0f64);
    let s = rng.random_range(0.6..1.0f64);
    let v = rng.random_range(0.55..1.0f64);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|t| ((t + m) * 255.0).round() as u8)
}

pub fn simulate_pedestrians(spec: &SceneSpec, sub_seed: u64) -> Trajectories {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x100_0000_01B3).wrapping_add(sub_seed));
    let (lo, hi) = spec.n_pedestrians_range;
    let margin = PEDESTRIAN_WIDTH / 2.0 + 0.05;
    let (w, d) = spec.region;
    let far_enough = |p: [f64; 2], others: &[[f64; 2]], skip: usize| {
        others
            .iter()
            .enumerate()
            .all(|(k, q)| k == skip || (p[0] - q[0]).hypot(p[1] - q[1]) >= MIN_SEPARATION)
    };
    let mut pool: Vec<[f64; 2]> = Vec::with_capacity(hi);
    while pool.len() < hi {
        let p = [rng.random_range(margin..w - margin), rng.random_range(margin..d - margin)];
        if far_enough(p, &pool, usize::MAX) {
            pool.push(p);
        }
    }
    let colors = (0..hi).map(|_| hsv_color(&mut rng)).collect();
    let step = Normal::new(0.0, spec.walk_step.max(1e-9)).expect("valid std");
    let mut frames = Vec::with_capacity(spec.n_frames);
    for f in 0..spec.n_frames {
        if f > 0 {
            for k in 0..pool.len() {
                for _ in 0..8 {
                    let p = [
                        (pool[k][0] + step.sample(&mut rng)).clamp(margin, w - margin),
                        (pool[k][1] + step.sample(&mut rng)).clamp(margin, d - margin),
                    ];
                    if far_enough(p, &pool, k) {
                        pool[k] = p;
                        break;
                    }
                }
            }
        }
        let count = rng.random_range(lo..=hi);
        let mut ids: Vec<usize> = (0..hi).collect();
        ids.shuffle(&mut rng);
        ids.truncate(count);
        ids.sort_unstable();
        frames.push(
            ids.iter()
                .map(|&k| Annotation { id: k as u64, x: pool[k][0], y: pool[k][1] })
                .collect(),
        );
    }
    Trajectories { frames, colors }
}

fn bbox(hull: &[[f64; 2]]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in hull {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].min(p[1]);
        b[2] = b[2].max(p[0]);
        b[3] = b[3].max(p[1]);
    }
    b
}

/// Largest intersection-over-smaller-area between two pedestrians' image
/// boxes over all frames and views.
pub fn max_occlusion(traj: &Trajectories, calibs: &[CameraCalibration]) -> f64 {
    let mut best: f64 = 0.0;
    for frame in &traj.frames {
        for c in calibs {
            let boxes: Vec<[f64; 4]> = frame
                .iter()
                .filter_map(|a| BoxPrimitive::pedestrian([a.x, a.y], [0; 3]).image_hull(c))
                .map(|h| bbox(&h))
                .collect();
            for i in 0..boxes.len() {
                for j in i + 1..boxes.len() {
                    let (a, b) = (boxes[i], boxes[j]);
                    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
                    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
                    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
                    let smaller = area(a).min(area(b));
                    if smaller > 0.0 {
                        best = best.max(iw * ih / smaller);
                    }
                }
            }
        }
    }
    best
}

/// A generated scene held in memory.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub calibrations: Vec<CameraCalibration>,
    pub grid: BevGridSpec,
    pub trajectories: Trajectories,
}

impl Scene {
    pub fn generate(spec: &SceneSpec) -> Result<Self> {
        let calibrations = place_cameras(spec)?;
        let grid = spec.grid();
        let (uncovered, total, [x, y]) = coverage(&calibrations, &grid);
        if uncovered as f64 > 0.01 * total as f64 {
            return Err(Error::Coverage { uncovered, total, x, y });
        }
        let needs_occlusion = spec.n_pedestrians_range.1 >= 10;
        let mut sub_seed = 0;
        let trajectories = loop {
            let t = simulate_pedestrians(spec, sub_seed);
            if !needs_occlusion || max_occlusion(&t, &calibrations) >= 0.5 {
                break t;
            }
            sub_seed += 1;
            if sub_seed > 64 {
                return Err(Error::Config(
                    "no occluding pedestrian pair after 64 regenerations; lower the camera or add pedestrians".into(),
                ));
            }
        };
        Ok(Self { spec: spec.clone(), calibrations, grid, trajectories })
    }

    pub fn backgrounds(&self) -> Vec<RgbImage> {
        self.calibrations
            .iter()
            .map(|c| render_background(c, self.spec.region, self.spec.seed))
            .collect()
    }

    pub fn boxes(&self, frame: usize) -> Vec<BoxPrimitive> {
        self.trajectories.frames[frame]
            .iter()
            .map(|a| BoxPrimitive::pedestrian([a.x, a.y], self.trajectories.colors[a.id as usize]))
            .collect()
    }

    /// Renders every view of `frame`.
    pub fn render_frame(&self, frame: usize, backgrounds: &[RgbImage]) -> Vec<RgbImage> {
        let boxes = self.boxes(frame);
        self.calibrations
            .iter()
            .zip(backgrounds)
            .map(|(c, bg)| render_view(bg, c, &boxes))
            .collect()
    }

    /// Writes the canonical dataset layout plus `scene_spec.json`.
    pub fn write(&self, out: &Path) -> Result<DatasetManifest> {
        let mut writer = DatasetWriter::create(out)?;
        let spec_json = serde_json::to_string_pretty(&self.spec).expect("spec serializes") + "\n";
        writer.write(SCENE_SPEC_FILE, spec_json.as_bytes())?;
        writer.write_calibrations(&self.calibrations)?;
        let backgrounds = self.backgrounds();
        let mut frames = Vec::with_capacity(self.spec.n_frames);
        for f in 0..self.spec.n_frames {
            let mut images = Vec::new();
            for (v, img) in self.render_frame(f, &backgrounds).iter().enumerate() {
                let rel = image_path(v, f);
                writer.write_png(&rel, img)?;
                images.push(rel);
            }
            let rel = annotation_path(f);
            writer.write(&rel, format_annotations(&self.trajectories.frames[f]).as_bytes())?;
            frames.push(FrameEntry { frame_id: f, annotations: rel, images });
        }
        let n_train = self.spec.n_frames - self.spec.val_frames;
        let splits = Splits {
            train: (0..n_train).collect(),
            val: (n_train..self.spec.n_frames).collect(),
        };
        writer.finish("scenegen", &self.calibrations, &self.grid, frames, splits)
    }
}

/// Generates a scene from `spec` and writes it to `out`.
pub fn generate_dataset(spec: &SceneSpec, out: &Path) -> Result<DatasetManifest> {
    Scene::generate(spec)?.write(out)
}
