//! Raw forward/backward kernels over NCHW buffers.

use super::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad).saturating_sub(k) / stride + 1;
        let wo = (w + 2 * pad).saturating_sub(k) / stride + 1;
        Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<F: Float>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let spatial = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * spatial..(row + 1) * spatial];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    let spatial = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * spatial..(row + 1) * spatial];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let [n, cin, h, wd] = x.dims4();
    let [cout, wcin, k, k2] = w.dims4();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
    assert_eq!(k, k2, "conv2d: only square kernels");
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let spatial = g.ho * g.wo;
    let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); g.col_rows() * spatial]
    };
    for i in 0..n {
        let xi = &x.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
        let oi = &mut out.data_mut()[i * cout * spatial..(i + 1) * cout * spatial];
        if let Some(b) = b {
            for (co, chunk) in oi.chunks_mut(spatial).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        let rhs: &[F] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut col);
            &col
        };
        F::gemm(cout, g.col_rows(), spatial, F::one(), w.data(), false, rhs, false, beta, oi);
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is only computed when requested.
pub fn conv2d_backward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dout: &Tensor<F>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> (Option<Tensor<F>>, Tensor<F>, Tensor<F>) {
    let [n, cin, h, wd] = x.dims4();
    let [cout, _, k, _] = w.dims4();
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let spatial = g.ho * g.wo;
    let rows = g.col_rows();
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); rows * spatial]
    };
    let mut dcol = if want_dx && !g.is_pointwise() {
        vec![F::zero(); rows * spatial]
    } else {
        Vec::new()
    };
    for i in 0..n {
        let xi = &x.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
        let di = &dout.data()[i * cout * spatial..(i + 1) * cout * spatial];
        for (co, chunk) in di.chunks(spatial).enumerate() {
            db.data_mut()[co] += chunk.iter().copied().sum::<F>();
        }
        let cols: &[F] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut col);
            &col
        };
        // dw += dout_i (cout x spatial) * cols^T (spatial x rows)
        F::gemm(cout, spatial, rows, F::one(), di, false, cols, true, F::one(), dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * cin * h * wd..(i + 1) * cin * h * wd];
            if g.is_pointwise() {
                F::gemm(rows, cout, spatial, F::one(), w.data(), true, di, false, F::one(), dxi);
            } else {
                F::gemm(rows, cout, spatial, F::one(), w.data(), true, di, false, F::zero(), &mut dcol);
                col2im(&dcol, &g, dxi);
            }
        }
    }
    (dx, dw, db)
}

/// Saved statistics of a group-norm forward pass, one entry per (item, group).
pub struct NormStats<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn group_norm_forward<F: Float>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
    eps: F,
) -> (Tensor<F>, NormStats<F>) {
    let [n, c, h, w] = x.dims4();
    assert_eq!(c % groups, 0, "group norm: {c} channels not divisible by {groups}");
    let per_group = (c / groups) * h * w;
    let hw = h * w;
    let count = F::from_usize(per_group).unwrap();
    let mut out = Tensor::zeros(x.shape());
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for i in 0..n {
        for gi in 0..groups {
            let start = (i * c) * hw + gi * per_group;
            let xs = &x.data()[start..start + per_group];
            let mu = xs.iter().copied().sum::<F>() / count;
            let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / count;
            let rs = F::one() / (var + eps).sqrt();
            mean.push(mu);
            rstd.push(rs);
            let os = &mut out.data_mut()[start..start + per_group];
            for (ci, (oc, xc)) in os.chunks_mut(hw).zip(xs.chunks(hw)).enumerate() {
                let ch = gi * (c / groups) + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for (o, &v) in oc.iter_mut().zip(xc) {
                    *o = (v - mu) * rs * ga + be;
                }
            }
        }
    }
    (out, NormStats { mean, rstd })
}

pub fn group_norm_backward<F: Float>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    stats: &NormStats<F>,
    groups: usize,
    dout: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let [n, c, h, w] = x.dims4();
    let cpg = c / groups;
    let hw = h * w;
    let per_group = cpg * hw;
    let count = F::from_usize(per_group).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for i in 0..n {
        for gi in 0..groups {
            let si = i * groups + gi;
            let (mu, rs) = (stats.mean[si], stats.rstd[si]);
            let start = (i * c) * hw + gi * per_group;
            let xs = &x.data()[start..start + per_group];
            let ds = &dout.data()[start..start + per_group];
            // dxhat = dout * gamma; dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let ga = gamma.data()[ch];
                let mut dg = F::zero();
                let mut dbe = F::zero();
                for p in 0..hw {
                    let xhat = (xs[ci * hw + p] - mu) * rs;
                    let d = ds[ci * hw + p];
                    dg += d * xhat;
                    dbe += d;
                    sum_dxhat += d * ga;
                    sum_dxhat_xhat += d * ga * xhat;
                }
                dgamma.data_mut()[ch] += dg;
                dbeta.data_mut()[ch] += dbe;
            }
            let m1 = sum_dxhat / count;
            let m2 = sum_dxhat_xhat / count;
            let dxs = &mut dx.data_mut()[start..start + per_group];
            for ci in 0..cpg {
                let ga = gamma.data()[gi * cpg + ci];
                for p in 0..hw {
                    let xhat = (xs[ci * hw + p] - mu) * rs;
                    let dxhat = ds[ci * hw + p] * ga;
                    dxs[ci * hw + p] = rs * (dxhat - m1 - xhat * m2);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 3x3, stride 2, padding 1 max pooling; returns the flat argmax per output.
pub fn max_pool_forward<F: Float>(x: &Tensor<F>) -> (Tensor<F>, Vec<u32>) {
    let [n, c, h, w] = x.dims4();
    let g = ConvGeom::new(c, h, w, 3, 2, 1);
    let mut out = Tensor::zeros(&[n, c, g.ho, g.wo]);
    let mut arg = vec![0u32; n * c * g.ho * g.wo];
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = F::neg_infinity();
                let mut best_i = base;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            best_i = idx;
                        }
                    }
                }
                out.data_mut()[o] = best;
                arg[o] = best_i as u32;
                o += 1;
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour resize, `out[y][x] = in[y * h / ho][x * w / wo]`.
pub fn nearest_index(out_len: usize, in_len: usize, i: usize) -> usize {
    (i * in_len / out_len).min(in_len - 1)
}

pub fn upsample_nearest_forward<F: Float>(x: &Tensor<F>, ho: usize, wo: usize) -> Tensor<F> {
    let [n, c, h, w] = x.dims4();
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xs: Vec<usize> = (0..wo).map(|ox| nearest_index(wo, w, ox)).collect();
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let iy = nearest_index(ho, h, oy);
            for ox in 0..wo {
                dst[oy * wo + ox] = src[iy * w + xs[ox]];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<F: Float>(dout: &Tensor<F>, h: usize, w: usize) -> Tensor<F> {
    let [n, c, ho, wo] = dout.dims4();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let src = &dout.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            let iy = nearest_index(ho, h, oy);
            for ox in 0..wo {
                dst[iy * w + nearest_index(wo, w, ox)] += src[oy * wo + ox];
            }
        }
    }
    dx
}

/// Bilinear resize of a single `h x w` plane to `ho x wo` using
/// half-pixel-centre alignment (`align_corners = false`).
pub fn bilinear_resize_plane(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    if h == ho && w == wo {
        return src.to_vec();
    }
    let coord = |o: usize, out_len: usize, in_len: usize| -> (usize, usize, f64) {
        let s = in_len as f64 / out_len as f64;
        let p = ((o as f64 + 0.5) * s - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = vec![0.0; ho * wo];
    let cols: Vec<_> = (0..wo).map(|ox| coord(ox, wo, w)).collect();
    for oy in 0..ho {
        let (y0, y1, fy) = coord(oy, ho, h);
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out[oy * wo + ox] = lerp(top, bot, fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims4();
        let [cout, _, k, _] = w.dims4();
        let g = ConvGeom::new(cin, h, wd, k, stride, pad);
        let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
        for i in 0..n {
            for co in 0..cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at4(i, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set4(i, co, oy, ox, s);
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64 + seed) * 0.731).sin()).collect())
    }

    #[test]
    fn conv_matches_direct_sum() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 2, 3), (1, 2, 0)] {
            let x = pseudo(&[2, 3, 9, 7], 0.3);
            let w = pseudo(&[4, 3, k, k], 1.7);
            let got = conv2d_forward(&x, &w, None, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn ceil_stride_shapes() {
        assert_eq!(ConvGeom::new(1, 45, 80, 3, 2, 1).ho, 23);
        assert_eq!(ConvGeom::new(1, 720, 1280, 7, 2, 3).ho, 360);
        assert_eq!(ConvGeom::new(1, 360, 640, 3, 2, 1).wo, 320);
    }

    #[test]
    fn bilinear_resize_keeps_constants() {
        let src = vec![0.6; 4 * 5];
        let out = bilinear_resize_plane(&src, 4, 5, 8, 10);
        assert!(out.iter().all(|&v| (v - 0.6).abs() < 1e-15));
    }
}
