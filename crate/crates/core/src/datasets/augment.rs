use rand::Rng;

use crate::geometry::{mat_mul, CameraCalibration};
use crate::tensor::Tensor;

use super::Frame;

/// Similarity map from original to transformed pixel coordinates,
/// `u' = sx * u - ox`, `v' = sy * v - oy`, producing an `out_h x out_w`
/// image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewTransform {
    pub sx: f64,
    pub sy: f64,
    pub ox: f64,
    pub oy: f64,
    pub out_h: usize,
    pub out_w: usize,
}

impl ViewTransform {
    pub fn identity(h: usize, w: usize) -> Self {
        Self { sx: 1.0, sy: 1.0, ox: 0.0, oy: 0.0, out_h: h, out_w: w }
    }

    pub fn apply(&self, pixel: [f64; 2]) -> [f64; 2] {
        [self.sx * pixel[0] - self.ox, self.sy * pixel[1] - self.oy]
    }

    /// `K' = A K` with `A = [[sx, 0, -ox], [0, sy, -oy], [0, 0, 1]]`.
    pub fn adjust(&self, calib: &CameraCalibration) -> CameraCalibration {
        let a = [[self.sx, 0.0, -self.ox], [0.0, self.sy, -self.oy], [0.0, 0.0, 1.0]];
        CameraCalibration {
            intrinsics: mat_mul(&a, &calib.intrinsics),
            image_height: self.out_h,
            image_width: self.out_w,
            ..calib.clone()
        }
    }

    /// Resamples a `3 x H x W` image: output pixel `(u', v')` reads the
    /// source bilinearly at `((u' + ox) / sx, (v' + oy) / sy)`, zero outside.
    pub fn warp(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let src = image.data();
        let (oh, ow) = (self.out_h, self.out_w);
        let mut out = vec![0.0f32; c * oh * ow];
        for v in 0..oh {
            let y = (v as f64 + self.oy) / self.sy;
            if y < 0.0 || y > (h - 1) as f64 {
                continue;
            }
            let y0 = (y.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ay = (y - y0 as f64) as f32;
            for u in 0..ow {
                let x = (u as f64 + self.ox) / self.sx;
                if x < 0.0 || x > (w - 1) as f64 {
                    continue;
                }
                let x0 = (x.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let ax = (x - x0 as f64) as f32;
                for ch in 0..c {
                    let p = &src[ch * h * w..(ch + 1) * h * w];
                    let top = p[y0 * w + x0] * (1.0 - ax) + p[y0 * w + x1] * ax;
                    let bot = p[y1 * w + x0] * (1.0 - ax) + p[y1 * w + x1] * ax;
                    out[ch * oh * ow + v * ow + u] = top * (1.0 - ay) + bot * ay;
                }
            }
        }
        Tensor::from_vec(&[c, oh, ow], out)
    }
}

/// Applies `t` to one view's image and calibration.
pub fn augment_view(image: &Tensor<f32>, calib: &CameraCalibration, t: &ViewTransform) -> (Tensor<f32>, CameraCalibration) {
    let is_identity = t.sx == 1.0 && t.sy == 1.0 && t.ox == 0.0 && t.oy == 0.0;
    let same_size = (t.out_h, t.out_w) == (image.shape()[1], image.shape()[2]);
    if is_identity && same_size {
        return (image.clone(), calib.clone());
    }
    (t.warp(image), t.adjust(calib))
}

/// Rescales a view to `h x w`, adjusting its intrinsics.
pub fn resize_view(image: &Tensor<f32>, calib: &CameraCalibration, h: usize, w: usize) -> (Tensor<f32>, CameraCalibration) {
    let t = ViewTransform {
        sx: w as f64 / image.shape()[2] as f64,
        sy: h as f64 / image.shape()[1] as f64,
        ox: 0.0,
        oy: 0.0,
        out_h: h,
        out_w: w,
    };
    augment_view(image, calib, &t)
}

/// Random resize in `scale_range` followed by a crop or pad back to the
/// original size, sampled independently per view. World annotations are
/// untouched.
pub fn augment(
    frame: &Frame,
    calibs: &[CameraCalibration],
    scale_range: (f64, f64),
    rng: &mut impl Rng,
) -> (Frame, Vec<CameraCalibration>, Vec<ViewTransform>) {
    let mut images = Vec::with_capacity(frame.images.len());
    let mut out_calibs = Vec::with_capacity(calibs.len());
    let mut transforms = Vec::with_capacity(calibs.len());
    for (image, calib) in frame.images.iter().zip(calibs) {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let s = if scale_range.0 < scale_range.1 {
            rng.random_range(scale_range.0..=scale_range.1)
        } else {
            scale_range.0
        };
        let mut offset = |len: usize| {
            let slack = (s * len as f64).floor() as i64 - len as i64;
            let (lo, hi) = (slack.min(0), slack.max(0));
            rng.random_range(lo..=hi) as f64
        };
        let (ox, oy) = (offset(w), offset(h));
        let t = ViewTransform { sx: s, sy: s, ox, oy, out_h: h, out_w: w };
        let (img, cal) = augment_view(image, calib, &t);
        images.push(img);
        out_calibs.push(cal);
        transforms.push(t);
    }
    let frame = Frame {
        frame_id: frame.frame_id,
        images,
        annotations: frame.annotations.clone(),
    };
    (frame, out_calibs, transforms)
}
