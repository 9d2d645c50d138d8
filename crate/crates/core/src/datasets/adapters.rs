//! Converters from the public POM-style multi-view layouts (Wildtrack,
//! MultiviewX and GMVD scenes) to the canonical layout.
//!
//! Source layout: `Image_subsets/<camera>/<frame>.png`,
//! `annotations_positions/<frame>.json` (entries with `personID` and
//! `positionID`), OpenCV XML intrinsics (`camera_matrix`) and extrinsics
//! (`rvec`, `tvec`). Lens distortion is ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{rodrigues, BevGridSpec, CameraCalibration};

use super::{annotation_path, format_annotations, image_path, resize_view, rgb_to_tensor, tensor_to_rgb};
use super::{Annotation, DatasetManifest, DatasetWriter, FrameEntry, Splits};

/// Where a POM-style dataset keeps its files and how its position ids map
/// to the ground grid.
#[derive(Clone, Debug)]
pub struct PomLayout {
    pub name: String,
    pub cameras: Vec<String>,
    pub intrinsic_files: Vec<PathBuf>,
    pub extrinsic_files: Vec<PathBuf>,
    /// Metres per calibration translation unit.
    pub translation_unit: f64,
    pub grid: BevGridSpec,
    /// `positionID = gx + pos_cols * gy`.
    pub pos_cols: usize,
    /// Fraction of frames (in id order) assigned to the training split.
    pub train_fraction: f64,
    /// Optional output image size `(h, w)`.
    pub resize: Option<(usize, usize)>,
}

impl PomLayout {
    /// Seven cameras, translations in centimetres, 480 x 1440 grid at
    /// 2.5 cm with origin (-3, -9) m.
    pub fn wildtrack() -> Self {
        let cams = ["CVLab1", "CVLab2", "CVLab3", "CVLab4", "IDIAP1", "IDIAP2", "IDIAP3"];
        Self {
            name: "wildtrack".into(),
            cameras: (1..=7).map(|i| format!("C{i}")).collect(),
            intrinsic_files: cams
                .iter()
                .map(|c| PathBuf::from(format!("calibrations/intrinsic_zero/intr_{c}.xml")))
                .collect(),
            extrinsic_files: cams
                .iter()
                .map(|c| PathBuf::from(format!("calibrations/extrinsic/extr_{c}.xml")))
                .collect(),
            translation_unit: 0.01,
            grid: BevGridSpec::wildtrack(),
            pos_cols: 480,
            train_fraction: 0.9,
            resize: None,
        }
    }

    /// Six cameras, metric translations, 1000 x 640 grid at 2.5 cm.
    pub fn multiviewx() -> Self {
        Self {
            name: "multiviewx".into(),
            cameras: (1..=6).map(|i| format!("C{i}")).collect(),
            intrinsic_files: (1..=6)
                .map(|i| PathBuf::from(format!("calibrations/intrinsic/intr_Camera{i}.xml")))
                .collect(),
            extrinsic_files: (1..=6)
                .map(|i| PathBuf::from(format!("calibrations/extrinsic/extr_Camera{i}.xml")))
                .collect(),
            translation_unit: 1.0,
            grid: BevGridSpec::multiviewx(),
            pos_cols: 1000,
            train_fraction: 0.9,
            resize: None,
        }
    }

    pub fn position_to_world(&self, position_id: u64) -> [f64; 2] {
        let cols = self.pos_cols as u64;
        let (gx, gy) = (position_id % cols, position_id / cols);
        self.grid.grid_to_world(gx as f64, gy as f64)
    }
}

/// Text content of the first `<tag>` element; for OpenCV matrices the
/// nested `<data>` element.
fn xml_numbers(text: &str, tag: &str, path: &Path) -> Result<Vec<f64>> {
    let open = format!("<{tag}");
    let start = text
        .match_indices(&open)
        .map(|(i, _)| i)
        .find(|&i| matches!(text.as_bytes().get(i + open.len()), Some(b'>' | b' ' | b'\t' | b'\n' | b'\r')))
        .ok_or_else(|| Error::parse(path, format!("no <{tag}> element")))?;
    let body_start = start + text[start..].find('>').unwrap() + 1;
    let close = format!("</{tag}>");
    let body_end = text[body_start..]
        .find(&close)
        .map(|i| body_start + i)
        .ok_or_else(|| Error::parse(path, format!("unterminated <{tag}>")))?;
    let mut body = &text[body_start..body_end];
    if let (Some(a), Some(b)) = (body.find("<data>"), body.find("</data>")) {
        body = &body[a + "<data>".len()..b];
    }
    body.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, format!("<{tag}>: `{t}` is not a number"))))
        .collect()
}

fn read_calibration(src: &Path, layout: &PomLayout, view: usize, h: usize, w: usize) -> Result<CameraCalibration> {
    let ipath = src.join(&layout.intrinsic_files[view]);
    let epath = src.join(&layout.extrinsic_files[view]);
    let itext = std::fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let etext = std::fs::read_to_string(&epath).map_err(|e| Error::io(&epath, e))?;
    let k = xml_numbers(&itext, "camera_matrix", &ipath)?;
    let r = xml_numbers(&etext, "rvec", &epath)?;
    let t = xml_numbers(&etext, "tvec", &epath)?;
    if k.len() != 9 || r.len() != 3 || t.len() != 3 {
        return Err(Error::parse(&epath, "expected a 3x3 camera_matrix and 3-vector rvec/tvec"));
    }
    let calib = CameraCalibration {
        view_id: view,
        intrinsics: [[k[0], k[1], k[2]], [k[3], k[4], k[5]], [k[6], k[7], k[8]]],
        rotation: rodrigues(&[r[0], r[1], r[2]]),
        translation: [t[0], t[1], t[2]].map(|v| v * layout.translation_unit),
        image_height: h,
        image_width: w,
    };
    calib.validate()?;
    Ok(calib)
}

fn frame_number(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.parse().ok()
}

fn numbered_files(dir: &Path) -> Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(n) = frame_number(&p) {
            out.insert(n, p);
        }
    }
    Ok(out)
}

fn read_positions(path: &Path, layout: &PomLayout) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let entries = value.as_array().ok_or_else(|| Error::parse(path, "expected a JSON array"))?;
    entries
        .iter()
        .map(|e| {
            let field = |k: &str| {
                e.get(k)
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| Error::parse(path, format!("entry without integer `{k}`")))
            };
            let [x, y] = layout.position_to_world(field("positionID")?);
            Ok(Annotation { id: field("personID")?, x, y })
        })
        .collect()
}

/// Converts a POM-style dataset at `src` into the canonical layout at `dst`.
pub fn convert_pom_dataset(src: &Path, dst: &Path, layout: &PomLayout) -> Result<DatasetManifest> {
    let ann_dir = src.join("annotations_positions");
    let ann_files = numbered_files(&ann_dir)?;
    if ann_files.is_empty() {
        return Err(Error::dataset(&ann_dir, "no annotation files"));
    }
    let image_dirs: Vec<BTreeMap<usize, PathBuf>> = layout
        .cameras
        .iter()
        .map(|c| numbered_files(&src.join("Image_subsets").join(c)))
        .collect::<Result<_>>()?;
    let first_frame = *ann_files.keys().next().unwrap();
    let mut sizes = Vec::new();
    for (v, dir) in image_dirs.iter().enumerate() {
        let p = dir
            .get(&first_frame)
            .ok_or_else(|| Error::dataset(src.join("Image_subsets").join(&layout.cameras[v]), format!("missing frame {first_frame}")))?;
        let (w, h) = image::image_dimensions(p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
        sizes.push((h as usize, w as usize));
    }
    let raw_calibs: Vec<CameraCalibration> = (0..layout.cameras.len())
        .map(|v| read_calibration(src, layout, v, sizes[v].0, sizes[v].1))
        .collect::<Result<_>>()?;

    let mut writer = DatasetWriter::create(dst)?;
    let mut calibs = raw_calibs.clone();
    let mut frames = Vec::new();
    for (idx, (&number, ann_path)) in ann_files.iter().enumerate() {
        let mut annotations = read_positions(ann_path, layout)?;
        annotations.retain(|a| layout.grid.contains_grid(layout.grid.world_to_grid(a.x, a.y)));
        let mut images = Vec::new();
        for (v, dir) in image_dirs.iter().enumerate() {
            let p = dir
                .get(&number)
                .ok_or_else(|| Error::dataset(src.join("Image_subsets").join(&layout.cameras[v]), format!("missing frame {number}")))?;
            let img = image::open(p).map_err(|e| Error::Image { path: p.clone(), source: e })?.to_rgb8();
            let rgb = match layout.resize {
                Some((h, w)) => {
                    let (t, c) = resize_view(&rgb_to_tensor(&img), &raw_calibs[v], h, w);
                    calibs[v] = c;
                    tensor_to_rgb(&t)
                }
                None => img,
            };
            let rel = image_path(v, idx);
            writer.write_png(&rel, &rgb)?;
            images.push(rel);
        }
        let rel = annotation_path(idx);
        writer.write(&rel, format_annotations(&annotations).as_bytes())?;
        frames.push(FrameEntry { frame_id: number, annotations: rel, images });
    }
    writer.write_calibrations(&calibs)?;
    let n_train = ((frames.len() as f64) * layout.train_fraction).round() as usize;
    let splits = Splits {
        train: (0..n_train).collect(),
        val: (n_train..frames.len()).collect(),
    };
    writer.finish(&layout.name, &calibs, &layout.grid, frames, splits)
}
