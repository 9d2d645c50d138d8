//! Pinhole camera model, BEV grid quantization and precomputed BEV sampling
//! grids.
//!
//! World frame: z up, ground plane at z = 0, metres. A full-resolution grid
//! coordinate `g` maps to world `origin + g * cell_size`; integer coordinates
//! are cell centres. A level-`l` BEV cell `(i, j)` sits at full-grid coordinate
//! `(i, j) * 2^(l-2)`, so decoding `(cell + offset) * 2^(l-2)` recovers the
//! full-grid coordinate exactly.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Pyramid levels carried through the detector.
pub const LEVELS: [usize; 3] = [3, 4, 5];

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn inverse(m: &Mat3) -> Option<Mat3> {
    let det = determinant(m);
    if det.abs() < 1e-300 {
        return None;
    }
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / det)))
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

/// Rotation from an axis-angle vector.
pub fn rodrigues(rvec: &Vec3) -> Mat3 {
    let theta = (rvec[0] * rvec[0] + rvec[1] * rvec[1] + rvec[2] * rvec[2]).sqrt();
    if theta < 1e-15 {
        return identity();
    }
    let k = rvec.map(|v| v / theta);
    let (s, c) = theta.sin_cos();
    let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    let kk = mat_mul(&kx, &kx);
    let mut r = identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += s * kx[i][j] + (1.0 - c) * kk[i][j];
        }
    }
    r
}

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// World-to-camera rotation for a camera at `eye` looking at `target`, with
/// camera x right, y down and z forward. `target - eye` must not be vertical.
pub fn look_at(eye: &Vec3, target: &Vec3) -> Mat3 {
    let forward = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
    let right = normalize(cross(&forward, &[0.0, 0.0, 1.0]));
    let down = cross(&forward, &right);
    [right, down, forward]
}

/// Intrinsics, extrinsics and image size of one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibration {
    pub view_id: usize,
    pub intrinsics: Mat3,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation, metres.
    pub translation: Vec3,
    pub image_height: usize,
    pub image_width: usize,
}

impl CameraCalibration {
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        let fail = |reason: String| Err(Error::Calibration { view: self.view_id, reason });
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return fail("intrinsics must be upper-triangular".into());
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return fail("focal lengths must be positive".into());
        }
        if (k[2][2] - 1.0).abs() > 1e-12 {
            return fail(format!("K[2][2] must be 1, got {}", k[2][2]));
        }
        let rrt = mat_mul(&self.rotation, &transpose(&self.rotation));
        let ortho_err = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (rrt[i][j] - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        if ortho_err > 1e-6 {
            return fail(format!("rotation not orthonormal (error {ortho_err:e})"));
        }
        if (determinant(&self.rotation) - 1.0).abs() > 1e-6 {
            return fail("rotation determinant is not 1".into());
        }
        if self.image_height == 0 || self.image_width == 0 {
            return fail("empty image size".into());
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        let rt = transpose(&self.rotation);
        mat_vec(&rt, &self.translation).map(|v| -v)
    }

    /// World point where the ray through `pixel` meets the plane at height
    /// `z`, or `None` when the ray is parallel to it or meets it behind the
    /// camera.
    pub fn unproject_to_height(&self, pixel: [f64; 2], z: f64) -> Option<[f64; 2]> {
        let kinv = inverse(&self.intrinsics)?;
        let ray_cam = mat_vec(&kinv, &[pixel[0], pixel[1], 1.0]);
        let dir = mat_vec(&transpose(&self.rotation), &ray_cam);
        let c = self.center();
        if dir[2].abs() < 1e-12 {
            return None;
        }
        let t = (z - c[2]) / dir[2];
        (t > 0.0).then(|| [c[0] + t * dir[0], c[1] + t * dir[1]])
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.view_id as u64).to_le_bytes());
        for row in self.intrinsics.iter().chain(self.rotation.iter()) {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        for v in &self.translation {
            h.update(v.to_le_bytes());
        }
        h.update((self.image_height as u64).to_le_bytes());
        h.update((self.image_width as u64).to_le_bytes());
    }
}

/// `gamma * (u, v, 1) = K [R | T] (x, y, z, 1)`; returns `((u, v), gamma)`.
pub fn project_world_to_pixel(point: &Vec3, calib: &CameraCalibration) -> Result<([f64; 2], f64)> {
    let cam = mat_vec(&calib.rotation, point);
    let cam = [
        cam[0] + calib.translation[0],
        cam[1] + calib.translation[1],
        cam[2] + calib.translation[2],
    ];
    let p = mat_vec(&calib.intrinsics, &cam);
    if p[2].abs() < 1e-9 {
        return Err(Error::DegenerateProjection { depth: p[2] });
    }
    Ok(([p[0] / p[2], p[1] / p[2]], p[2]))
}

/// BEV discretization of the ground plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub cells_x: usize,
    pub cells_y: usize,
    /// Metres per cell edge.
    pub cell_size: f64,
    /// World (x, y) of full-resolution cell (0, 0).
    pub origin: [f64; 2],
    /// Projection heights in metres.
    pub heights: Vec<f64>,
}

impl BevGridSpec {
    pub fn new(cells_x: usize, cells_y: usize, cell_size: f64, origin: [f64; 2]) -> Self {
        Self {
            cells_x,
            cells_y,
            cell_size,
            origin,
            heights: Self::default_heights(),
        }
    }

    /// `z_i = 0.30 * i` metres for `i` in `0..5`.
    pub fn default_heights() -> Vec<f64> {
        (0..5).map(|i| 0.30 * i as f64).collect()
    }

    /// Grid covering `width x depth` metres from `origin` with square cells.
    pub fn for_region(width: f64, depth: f64, cell_size: f64, origin: [f64; 2]) -> Self {
        let cells_x = (width / cell_size).round() as usize;
        let cells_y = (depth / cell_size).round() as usize;
        Self::new(cells_x, cells_y, cell_size, origin)
    }

    /// Wildtrack: 12 m x 36 m quantized into 480 x 1440 cells of 2.5 cm.
    pub fn wildtrack() -> Self {
        Self::new(480, 1440, 0.025, [-3.0, -9.0])
    }

    /// MultiviewX: 25 m x 16 m quantized into 1000 x 640 cells of 2.5 cm.
    pub fn multiviewx() -> Self {
        Self::new(1000, 640, 0.025, [0.0, 0.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells_x == 0 || self.cells_y == 0 {
            return Err(Error::Config("BEV grid must have at least one cell per axis".into()));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::Config("BEV cell size must be positive".into()));
        }
        if self.heights.is_empty() {
            return Err(Error::Config("BEV grid needs at least one projection height".into()));
        }
        Ok(())
    }

    /// Full-resolution cells per level-`level` cell along each axis.
    pub fn level_scale(level: usize) -> usize {
        1 << (level - 2)
    }

    /// `(ceil(X / 2^(l-2)), ceil(Y / 2^(l-2)))`.
    pub fn level_shape(&self, level: usize) -> (usize, usize) {
        let s = Self::level_scale(level);
        (self.cells_x.div_ceil(s), self.cells_y.div_ceil(s))
    }

    pub fn world_to_grid(&self, x: f64, y: f64) -> [f64; 2] {
        [(x - self.origin[0]) / self.cell_size, (y - self.origin[1]) / self.cell_size]
    }

    pub fn grid_to_world(&self, gx: f64, gy: f64) -> [f64; 2] {
        [self.origin[0] + gx * self.cell_size, self.origin[1] + gy * self.cell_size]
    }

    /// Whether a full-grid coordinate lies inside `[0, X) x [0, Y)`.
    pub fn contains_grid(&self, g: [f64; 2]) -> bool {
        g[0] >= 0.0 && g[1] >= 0.0 && g[0] < self.cells_x as f64 && g[1] < self.cells_y as f64
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.cells_x as u64).to_le_bytes());
        h.update((self.cells_y as u64).to_le_bytes());
        h.update(self.cell_size.to_le_bytes());
        h.update(self.origin[0].to_le_bytes());
        h.update(self.origin[1].to_le_bytes());
        for z in &self.heights {
            h.update(z.to_le_bytes());
        }
    }
}

/// World (x, y) of level-`level` BEV cell `(i, j)`.
pub fn cell_to_world(i: usize, j: usize, level: usize, grid: &BevGridSpec) -> Result<[f64; 2]> {
    if !(2..=10).contains(&level) {
        return Err(Error::Domain(format!("level {level} out of range")));
    }
    let (rows, cols) = grid.level_shape(level);
    if i >= rows || j >= cols {
        return Err(Error::Domain(format!(
            "cell ({i}, {j}) outside the {rows}x{cols} level-{level} grid"
        )));
    }
    Ok(level_coord_to_world(i as f64, j as f64, level, grid))
}

/// World (x, y) of a continuous level-`level` cell coordinate.
pub fn level_coord_to_world(ci: f64, cj: f64, level: usize, grid: &BevGridSpec) -> [f64; 2] {
    let s = BevGridSpec::level_scale(level) as f64;
    grid.grid_to_world(ci * s, cj * s)
}

/// Feature-map extent `(ceil(H / 2^l), ceil(W / 2^l))` of a view at `level`.
pub fn feature_extent(calib: &CameraCalibration, level: usize) -> (usize, usize) {
    let s = 1usize << level;
    (calib.image_height.div_ceil(s), calib.image_width.div_ceil(s))
}

/// Continuous feature-map coordinates of every BEV cell of one
/// (view, level, height) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    /// Pyramid level of the sampled image features (stride `2^level`).
    pub level: usize,
    /// Level whose BEV shape the grid has; equals `level` unless the BEV
    /// resolutions are shared.
    pub bev_level: usize,
    pub height_index: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `(x, y)` feature coordinates, `rows * cols` entries.
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    /// Feature-map extent `(height, width)` the coordinates index into.
    pub feature_extent: (usize, usize),
}

impl SamplingGrid {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }

    /// Bilinear taps `(indices, weights)` of cell `cell` into a row-major
    /// `fh x fw` plane; invalid cells get zero weights.
    pub fn bilinear_taps(&self, cell: usize) -> ([u32; 4], [f64; 4]) {
        if !self.valid[cell] {
            return ([0; 4], [0.0; 4]);
        }
        let (fh, fw) = self.feature_extent;
        let [x, y] = self.coords[cell];
        let x0 = (x.floor() as usize).min(fw - 1);
        let y0 = (y.floor() as usize).min(fh - 1);
        let x1 = (x0 + 1).min(fw - 1);
        let y1 = (y0 + 1).min(fh - 1);
        let (ax, ay) = (x - x0 as f64, y - y0 as f64);
        let idx = |yy: usize, xx: usize| (yy * fw + xx) as u32;
        (
            [idx(y0, x0), idx(y0, x1), idx(y1, x0), idx(y1, x1)],
            [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay],
        )
    }
}

/// Sampling grid of `level` features onto the level's own BEV shape.
pub fn build_sampling_grid(
    calib: &CameraCalibration,
    level: usize,
    height_index: usize,
    grid: &BevGridSpec,
) -> Result<SamplingGrid> {
    build_sampling_grid_at(calib, level, level, height_index, grid)
}

/// Sampling grid of `level` features onto the BEV shape of `bev_level`.
pub fn build_sampling_grid_at(
    calib: &CameraCalibration,
    level: usize,
    bev_level: usize,
    height_index: usize,
    grid: &BevGridSpec,
) -> Result<SamplingGrid> {
    if !LEVELS.contains(&level) || !LEVELS.contains(&bev_level) {
        return Err(Error::Domain(format!("levels must be in {LEVELS:?}, got {level}/{bev_level}")));
    }
    let z = *grid
        .heights
        .get(height_index)
        .ok_or_else(|| Error::Domain(format!("height index {height_index} out of range")))?;
    let (rows, cols) = grid.level_shape(bev_level);
    let (fh, fw) = feature_extent(calib, level);
    let stride = (1usize << level) as f64;
    let mut coords = Vec::with_capacity(rows * cols);
    let mut valid = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let [x, y] = level_coord_to_world(i as f64, j as f64, bev_level, grid);
            match project_world_to_pixel(&[x, y, z], calib) {
                Ok(([u, v], depth)) => {
                    let (fx, fy) = (u / stride, v / stride);
                    let inside = fx >= 0.0 && fy >= 0.0 && fx <= (fw - 1) as f64 && fy <= (fh - 1) as f64;
                    coords.push([fx, fy]);
                    valid.push(depth > 0.0 && inside);
                }
                Err(_) => {
                    coords.push([f64::NAN, f64::NAN]);
                    valid.push(false);
                }
            }
        }
    }
    Ok(SamplingGrid {
        level,
        bev_level,
        height_index,
        rows,
        cols,
        coords,
        valid,
        feature_extent: (fh, fw),
    })
}

/// Every sampling grid of a calibration set, indexed
/// `[view][level index][height index]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCache {
    pub key: [u8; 32],
    pub shared_bev_resolution: bool,
    pub grids: Vec<Vec<Vec<SamplingGrid>>>,
}

const GRID_CACHE_MAGIC: &[u8; 8] = b"MSMVDGRD";
const GRID_CACHE_VERSION: u32 = 1;

impl GridCache {
    /// Content hash of the inputs that determine the grids.
    pub fn content_key(calibs: &[CameraCalibration], grid: &BevGridSpec, shared_bev_resolution: bool) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(GRID_CACHE_VERSION.to_le_bytes());
        for c in calibs {
            c.hash_into(&mut h);
        }
        grid.hash_into(&mut h);
        for l in LEVELS {
            h.update([l as u8]);
        }
        h.update([shared_bev_resolution as u8]);
        h.finalize().into()
    }

    pub fn build(calibs: &[CameraCalibration], grid: &BevGridSpec, shared_bev_resolution: bool) -> Result<Self> {
        let mut grids = Vec::with_capacity(calibs.len());
        for calib in calibs {
            let mut per_level = Vec::with_capacity(LEVELS.len());
            for level in LEVELS {
                let bev_level = if shared_bev_resolution { LEVELS[0] } else { level };
                let per_height = (0..grid.heights.len())
                    .map(|h| build_sampling_grid_at(calib, level, bev_level, h, grid))
                    .collect::<Result<Vec<_>>>()?;
                per_level.push(per_height);
            }
            grids.push(per_level);
        }
        Ok(Self {
            key: Self::content_key(calibs, grid, shared_bev_resolution),
            shared_bev_resolution,
            grids,
        })
    }

    pub fn get(&self, view: usize, level: usize, height_index: usize) -> Option<&SamplingGrid> {
        let li = LEVELS.iter().position(|&l| l == level)?;
        self.grids.get(view)?.get(li)?.get(height_index)
    }

    pub fn views(&self) -> usize {
        self.grids.len()
    }

    pub fn key_hex(&self) -> String {
        hex::encode(self.key)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(GRID_CACHE_MAGIC);
        buf.extend_from_slice(&GRID_CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.key);
        buf.push(self.shared_bev_resolution as u8);
        let all: Vec<(usize, &SamplingGrid)> = self
            .grids
            .iter()
            .enumerate()
            .flat_map(|(v, lv)| lv.iter().flatten().map(move |g| (v, g)))
            .collect();
        buf.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (view, g) in all {
            for v in [view, g.level, g.bev_level, g.height_index, g.rows, g.cols, g.feature_extent.0, g.feature_extent.1] {
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for (c, &ok) in g.coords.iter().zip(&g.valid) {
                buf.extend_from_slice(&c[0].to_le_bytes());
                buf.extend_from_slice(&c[1].to_le_bytes());
                buf.push(ok as u8);
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache file, rejecting it unless its key equals `expected_key`.
    pub fn load(path: &Path, expected_key: &[u8; 32]) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::parse(path, m.to_string());
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != GRID_CACHE_MAGIC {
            return Err(bad("not a sampling-grid cache"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != GRID_CACHE_VERSION {
            return Err(bad(&format!("unsupported cache version {version}")));
        }
        let key: [u8; 32] = r.take(32).ok_or_else(|| bad("truncated key"))?.try_into().unwrap();
        if &key != expected_key {
            return Err(bad("cache key does not match calibrations/grid"));
        }
        let shared = r.take(1).ok_or_else(|| bad("truncated header"))?[0] != 0;
        let count = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut grids: Vec<Vec<Vec<SamplingGrid>>> = Vec::new();
        for _ in 0..count {
            let mut hdr = [0usize; 8];
            for v in &mut hdr {
                *v = r.u32().ok_or_else(|| bad("truncated grid header"))? as usize;
            }
            let [view, level, bev_level, height_index, rows, cols, fh, fw] = hdr;
            let mut coords = Vec::with_capacity(rows * cols);
            let mut valid = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let x = r.f64().ok_or_else(|| bad("truncated grid body"))?;
                let y = r.f64().ok_or_else(|| bad("truncated grid body"))?;
                coords.push([x, y]);
                valid.push(r.take(1).ok_or_else(|| bad("truncated grid body"))?[0] != 0);
            }
            let li = LEVELS.iter().position(|&l| l == level).ok_or_else(|| bad("bad level"))?;
            while grids.len() <= view {
                grids.push(vec![Vec::new(); LEVELS.len()]);
            }
            grids[view][li].push(SamplingGrid {
                level,
                bev_level,
                height_index,
                rows,
                cols,
                coords,
                valid,
                feature_extent: (fh, fw),
            });
        }
        Ok(Self { key, shared_bev_resolution: shared, grids })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

const CALIB_HEADER: &str = "# msmvd calibration v1";

/// Serializes calibrations in the `[view]` key-value text format.
pub fn format_calibrations(calibs: &[CameraCalibration]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CALIB_HEADER}");
    let join = |vals: &mut dyn Iterator<Item = &f64>| vals.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
    for c in calibs {
        let _ = writeln!(s, "\n[view]");
        let _ = writeln!(s, "view_id = {}", c.view_id);
        let _ = writeln!(s, "intrinsics = {}", join(&mut c.intrinsics.iter().flatten()));
        let _ = writeln!(s, "rotation = {}", join(&mut c.rotation.iter().flatten()));
        let _ = writeln!(s, "translation = {}", join(&mut c.translation.iter()));
        let _ = writeln!(s, "image_size = {} {}", c.image_height, c.image_width);
    }
    s
}

pub fn parse_calibrations(text: &str, path: &Path) -> Result<Vec<CameraCalibration>> {
    #[derive(Default)]
    struct Partial {
        view_id: Option<usize>,
        k: Option<Vec<f64>>,
        r: Option<Vec<f64>>,
        t: Option<Vec<f64>>,
        size: Option<(usize, usize)>,
        line: usize,
    }
    let err = |line: usize, msg: String| Error::parse(path, format!("line {line}: {msg}"));
    let finish = |p: Partial| -> Result<CameraCalibration> {
        let missing = |k: &str| err(p.line, format!("view record is missing `{k}`"));
        let to_m3 = |v: &[f64]| [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
        let k = p.k.as_deref().ok_or_else(|| missing("intrinsics"))?;
        let r = p.r.as_deref().ok_or_else(|| missing("rotation"))?;
        let t = p.t.as_deref().ok_or_else(|| missing("translation"))?;
        let (h, w) = p.size.ok_or_else(|| missing("image_size"))?;
        let calib = CameraCalibration {
            view_id: p.view_id.ok_or_else(|| missing("view_id"))?,
            intrinsics: to_m3(k),
            rotation: to_m3(r),
            translation: [t[0], t[1], t[2]],
            image_height: h,
            image_width: w,
        };
        calib.validate()?;
        Ok(calib)
    };
    let mut out = Vec::new();
    let mut current: Option<Partial> = None;
    let mut saw_header = false;
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.trim();
        if line == CALIB_HEADER {
            saw_header = true;
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "[view]" {
            if let Some(p) = current.take() {
                out.push(finish(p)?);
            }
            current = Some(Partial { line: ln, ..Default::default() });
            continue;
        }
        let p = current.as_mut().ok_or_else(|| err(ln, "key outside a [view] record".into()))?;
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(ln, format!("expected `key = value`, got `{line}`")))?;
        let reals = |n: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = value
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| err(ln, format!("`{t}` is not a number"))))
                .collect::<Result<_>>()?;
            if vals.len() != n {
                return Err(err(ln, format!("`{key}` needs {n} values, got {}", vals.len())));
            }
            Ok(vals)
        };
        match key {
            "view_id" => p.view_id = Some(value.parse().map_err(|_| err(ln, "bad view_id".into()))?),
            "intrinsics" => p.k = Some(reals(9)?),
            "rotation" => p.r = Some(reals(9)?),
            "translation" => p.t = Some(reals(3)?),
            "image_size" => {
                let v: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| err(ln, format!("bad image size `{t}`"))))
                    .collect::<Result<_>>()?;
                if v.len() != 2 {
                    return Err(err(ln, "image_size needs height and width".into()));
                }
                p.size = Some((v[0], v[1]));
            }
            other => return Err(err(ln, format!("unknown key `{other}`"))),
        }
    }
    if !saw_header {
        return Err(Error::parse(path, "missing calibration header line"));
    }
    if let Some(p) = current.take() {
        out.push(finish(p)?);
    }
    Ok(out)
}
