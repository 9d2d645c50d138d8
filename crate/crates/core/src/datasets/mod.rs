//! Canonical on-disk dataset layout, loaders, BEV target maps and
//! training-time augmentation.
//!
//! A dataset directory holds `manifest.json`, `calibrations.txt`, one
//! `annotations/NNNNNN.txt` record per frame and one PNG per (view, frame)
//! under `images/C{view}/`. The layout is described in `docs/DATA_FORMAT.md`.

mod adapters;
mod augment;
mod targets;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{format_calibrations, parse_calibrations, BevGridSpec, CameraCalibration};
use crate::tensor::Tensor;

pub use adapters::{convert_pom_dataset, PomLayout};
pub use augment::{augment, augment_view, resize_view, ViewTransform};
pub use targets::{make_target_maps, make_target_maps_at, TargetMaps, DEFAULT_DIAMETERS};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CALIBRATION_FILE: &str = "calibrations.txt";

/// One annotated pedestrian, world coordinates in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

/// N view images (3 x H x W, values in [0, 1]) and the frame's annotations.
#[derive(Clone, Debug)]
pub struct Frame {
    pub frame_id: usize,
    pub images: Vec<Tensor<f32>>,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: usize,
    pub annotations: String,
    pub images: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub n_views: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub grid: BevGridSpec,
    pub calibrations: String,
    pub frames: Vec<FrameEntry>,
    /// Indices into `frames`.
    pub splits: Splits,
    /// Relative path to SHA-256 of every dataset file except the manifest.
    pub files: BTreeMap<String, String>,
    pub dataset_hash: String,
}

/// SHA-256 over the sorted `(path, file hash)` list.
pub fn dataset_hash(files: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (path, digest) in files {
        h.update(path.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn annotation_path(frame_id: usize) -> String {
    format!("annotations/{frame_id:06}.txt")
}

pub fn image_path(view: usize, frame_id: usize) -> String {
    format!("images/C{view}/{frame_id:06}.png")
}

pub fn format_annotations(annotations: &[Annotation]) -> String {
    let mut s = String::from("# id x y\n");
    for a in annotations {
        let _ = writeln!(s, "{} {} {}", a.id, a.x, a.y);
    }
    s
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::parse(path, format!("line {}: expected `id x y`, got `{line}`", ln + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        out.push(Annotation {
            id: fields[0].parse().map_err(|_| bad())?,
            x: fields[1].parse().map_err(|_| bad())?,
            y: fields[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Writes dataset files under a root directory and records their hashes.
pub struct DatasetWriter {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl DatasetWriter {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_png(&mut self, rel: &str, image: &image::RgbImage) -> Result<()> {
        let mut bytes = Vec::new();
        image
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: self.root.join(rel),
                source: e,
            })?;
        self.write(rel, &bytes)
    }

    pub fn write_calibrations(&mut self, calibs: &[CameraCalibration]) -> Result<()> {
        self.write(CALIBRATION_FILE, format_calibrations(calibs).as_bytes())
    }

    /// Writes `manifest.json` and returns the manifest.
    pub fn finish(
        self,
        name: &str,
        calibs: &[CameraCalibration],
        grid: &BevGridSpec,
        frames: Vec<FrameEntry>,
        splits: Splits,
    ) -> Result<DatasetManifest> {
        let first = calibs
            .first()
            .ok_or_else(|| Error::dataset(&self.root, "dataset has no views"))?;
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            name: name.to_string(),
            n_views: calibs.len(),
            image_height: first.image_height,
            image_width: first.image_width,
            grid: grid.clone(),
            calibrations: CALIBRATION_FILE.to_string(),
            frames,
            splits,
            dataset_hash: dataset_hash(&self.files),
            files: self.files,
        };
        let path = self.root.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// A dataset opened from its manifest; frames load on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub calibrations: Vec<CameraCalibration>,
}

/// Opens a canonical dataset directory.
///
/// Validates the manifest, the calibration set against the view count and
/// the presence of every referenced image and annotation file.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&manifest_path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::dataset(
            &manifest_path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    manifest.grid.validate()?;
    let calib_path = root.join(&manifest.calibrations);
    let calib_text = std::fs::read_to_string(&calib_path).map_err(|e| Error::io(&calib_path, e))?;
    let calibrations = parse_calibrations(&calib_text, &calib_path)?;
    if calibrations.len() != manifest.n_views {
        return Err(Error::dataset(
            &calib_path,
            format!("{} calibrations for {} views", calibrations.len(), manifest.n_views),
        ));
    }
    for c in &calibrations {
        if (c.image_height, c.image_width) != (manifest.image_height, manifest.image_width) {
            return Err(Error::dataset(
                &calib_path,
                format!("view {} image size differs from the manifest", c.view_id),
            ));
        }
    }
    for entry in &manifest.frames {
        if entry.images.len() != manifest.n_views {
            return Err(Error::dataset(
                &manifest_path,
                format!("frame {} lists {} images for {} views", entry.frame_id, entry.images.len(), manifest.n_views),
            ));
        }
        for rel in entry.images.iter().chain(std::iter::once(&entry.annotations)) {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::dataset(p, format!("missing file for frame {}", entry.frame_id)));
            }
        }
    }
    for &i in manifest.splits.train.iter().chain(&manifest.splits.val) {
        if i >= manifest.frames.len() {
            return Err(Error::dataset(&manifest_path, format!("split index {i} out of range")));
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        calibrations,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn grid(&self) -> &BevGridSpec {
        &self.manifest.grid
    }

    pub fn train_indices(&self) -> Vec<usize> {
        if self.manifest.splits.train.is_empty() {
            (0..self.len()).collect()
        } else {
            self.manifest.splits.train.clone()
        }
    }

    /// Validation frames; falls back to the training split when none are
    /// listed.
    pub fn val_indices(&self) -> Vec<usize> {
        if self.manifest.splits.val.is_empty() {
            self.train_indices()
        } else {
            self.manifest.splits.val.clone()
        }
    }

    pub fn load_annotations(&self, index: usize) -> Result<Vec<Annotation>> {
        let entry = &self.manifest.frames[index];
        let path = self.root.join(&entry.annotations);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let annotations = parse_annotations(&text, &path)?;
        let grid = self.grid();
        for a in &annotations {
            if !grid.contains_grid(grid.world_to_grid(a.x, a.y)) {
                return Err(Error::dataset(
                    &path,
                    format!("pedestrian {} at ({}, {}) lies outside the BEV region", a.id, a.x, a.y),
                ));
            }
        }
        Ok(annotations)
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame> {
        let entry = &self.manifest.frames[index];
        let images = entry
            .images
            .iter()
            .map(|rel| {
                let img = load_image(&self.root.join(rel))?;
                let (h, w) = (img.shape()[1], img.shape()[2]);
                if (h, w) != (self.manifest.image_height, self.manifest.image_width) {
                    return Err(Error::dataset(self.root.join(rel), format!("image is {h}x{w}")));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Frame {
            frame_id: entry.frame_id,
            images,
            annotations: self.load_annotations(index)?,
        })
    }

    /// Recomputes every file hash and compares with the manifest.
    pub fn verify(&self) -> Result<()> {
        for (rel, digest) in &self.manifest.files {
            let p = self.root.join(rel);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if &sha256_hex(&bytes) != digest {
                return Err(Error::dataset(p, "content hash mismatch"));
            }
        }
        if dataset_hash(&self.manifest.files) != self.manifest.dataset_hash {
            return Err(Error::dataset(self.root.join(MANIFEST_FILE), "dataset hash mismatch"));
        }
        Ok(())
    }
}

/// Decodes an image file to a `3 x H x W` tensor in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> image::RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[c * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}
