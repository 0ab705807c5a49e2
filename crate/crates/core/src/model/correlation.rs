//! Correlation volumes, soft-argmax flow readout, feature warping and
//! resampling, each with its backward pass.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationMode {
    /// Every reference location against every query location.
    Global,
    /// Displacements within `[-d, d]^2`.
    Local(usize),
}

/// Correlation values stored as a `1 x D x h x w` tensor: channel `kl`
/// indexes the candidate, spatial `(i, j)` the reference location.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume {
    pub mode: CorrelationMode,
    pub values: Tensor,
}

impl CorrelationVolume {
    pub fn h(&self) -> usize {
        self.values.h
    }

    pub fn w(&self) -> usize {
        self.values.w
    }

    /// Shape of one displacement slice.
    pub fn slice_dims(&self) -> (usize, usize) {
        match self.mode {
            CorrelationMode::Global => (self.values.h, self.values.w),
            CorrelationMode::Local(d) => (2 * d + 1, 2 * d + 1),
        }
    }

    /// Entry for reference `(i, j)` and candidate `(k, l)`; for local volumes
    /// `k, l` are offsets in `[-d, d]`, for global ones absolute positions.
    pub fn get(&self, i: usize, j: usize, k: isize, l: isize) -> f64 {
        let (sh, sw) = self.slice_dims();
        let (ck, cl) = match self.mode {
            CorrelationMode::Global => (k, l),
            CorrelationMode::Local(d) => (k + d as isize, l + d as isize),
        };
        assert!(ck >= 0 && cl >= 0 && (ck as usize) < sh && (cl as usize) < sw, "displacement out of range");
        self.values.at(0, ck as usize * sw + cl as usize, i, j)
    }

    /// All slices as a batch `h*w x 1 x sh x sw`, batch index `i*w + j`.
    pub fn slices(&self) -> Tensor {
        let (h, w) = (self.h(), self.w());
        let (sh, sw) = self.slice_dims();
        let d = sh * sw;
        let mut out = Tensor::zeros(h * w, 1, sh, sw);
        for c in 0..d {
            let plane = self.values.plane(0, c);
            for p in 0..h * w {
                out.data[p * d + c] = plane[p];
            }
        }
        out
    }
}

/// Transposes a slice-batch gradient back to volume layout, accumulating.
pub fn slices_backward(g_slices: &Tensor, g_volume: &mut Tensor) {
    let d = g_volume.c;
    let hw = g_volume.h * g_volume.w;
    for c in 0..d {
        let plane = g_volume.plane_mut(0, c);
        for p in 0..hw {
            plane[p] += g_slices.data[p * d + c];
        }
    }
}

/// Dot products of feature vectors, `C_ijkl = f_r(i,j) . f_q(i+k, j+l)` (local)
/// or `f_r(i,j) . f_q(k,l)` (global). Local candidates outside the grid are 0.
pub fn correlate(fr: &Tensor, fq: &Tensor, mode: CorrelationMode) -> Result<CorrelationVolume> {
    if fr.c != fq.c || fr.h != fq.h || fr.w != fq.w || fr.n != 1 || fq.n != 1 {
        return Err(Error::ShapeMismatch("correlated features differ in shape".into()));
    }
    let (c, h, w) = (fr.c, fr.h, fr.w);
    let values = match mode {
        CorrelationMode::Global => {
            let mut v = Tensor::zeros(1, h * w, h, w);
            for q in 0..h * w {
                let out = v.plane_mut(0, q);
                for ch in 0..c {
                    let fq_val = fq.plane(0, ch)[q];
                    let r = fr.plane(0, ch);
                    for p in 0..h * w {
                        out[p] += r[p] * fq_val;
                    }
                }
            }
            v
        }
        CorrelationMode::Local(d) => {
            let s = 2 * d + 1;
            let mut v = Tensor::zeros(1, s * s, h, w);
            for k in 0..s {
                for l in 0..s {
                    let (dk, dl) = (k as isize - d as isize, l as isize - d as isize);
                    let out = v.plane_mut(0, k * s + l);
                    for ch in 0..c {
                        let r = fr.plane(0, ch);
                        let q = fq.plane(0, ch);
                        for i in 0..h {
                            let qi = i as isize + dk;
                            if qi < 0 || qi >= h as isize {
                                continue;
                            }
                            for j in 0..w {
                                let qj = j as isize + dl;
                                if qj < 0 || qj >= w as isize {
                                    continue;
                                }
                                out[i * w + j] += r[i * w + j] * q[qi as usize * w + qj as usize];
                            }
                        }
                    }
                }
            }
            v
        }
    };
    Ok(CorrelationVolume { mode, values })
}

/// Gradient of a local correlation with respect to the query features.
pub fn correlate_local_backward_query(fr: &Tensor, g: &Tensor, d: usize) -> Tensor {
    let (c, h, w) = (fr.c, fr.h, fr.w);
    let s = 2 * d + 1;
    let mut gq = Tensor::zeros(1, c, h, w);
    for k in 0..s {
        for l in 0..s {
            let (dk, dl) = (k as isize - d as isize, l as isize - d as isize);
            let gp = g.plane(0, k * s + l);
            for ch in 0..c {
                let r = fr.plane(0, ch);
                let out = gq.plane_mut(0, ch);
                for i in 0..h {
                    let qi = i as isize + dk;
                    if qi < 0 || qi >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let qj = j as isize + dl;
                        if qj < 0 || qj >= w as isize {
                            continue;
                        }
                        out[qi as usize * w + qj as usize] += gp[i * w + j] * r[i * w + j];
                    }
                }
            }
        }
    }
    gq
}

/// Displacement `(du, dv)` of candidate channel `kl` at reference `(i, j)`,
/// in units of the level grid.
fn displacement(mode: CorrelationMode, sw: usize, kl: usize, i: usize, j: usize) -> (f64, f64) {
    let (k, l) = (kl / sw, kl % sw);
    match mode {
        CorrelationMode::Global => (l as f64 - j as f64, k as f64 - i as f64),
        CorrelationMode::Local(d) => (l as f64 - d as f64, k as f64 - d as f64),
    }
}

/// Expected displacement under `softmax(tau * C)`, scaled by `stride`:
/// a `1 x 2 x h x w` flow plus the probabilities for the backward pass.
pub fn soft_argmax(vol: &CorrelationVolume, tau: f64, stride: f64) -> (Tensor, Vec<f64>) {
    let (h, w) = (vol.h(), vol.w());
    let (_, sw) = vol.slice_dims();
    let d = vol.values.c;
    let mut flow = Tensor::zeros(1, 2, h, w);
    let mut probs = vec![0.0; h * w * d];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let pr = &mut probs[p * d..(p + 1) * d];
            let mut max = f64::NEG_INFINITY;
            for (c, v) in pr.iter_mut().enumerate() {
                *v = tau * vol.values.plane(0, c)[p];
                max = max.max(*v);
            }
            let mut sum = 0.0;
            for v in pr.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let (mut u, mut vv) = (0.0, 0.0);
            for (c, v) in pr.iter_mut().enumerate() {
                *v /= sum;
                let (du, dv) = displacement(vol.mode, sw, c, i, j);
                u += *v * du;
                vv += *v * dv;
            }
            flow.data[p] = u * stride;
            flow.data[h * w + p] = vv * stride;
        }
    }
    (flow, probs)
}

/// Backward of [`soft_argmax`]: accumulates into `g_vol` (if given) and
/// returns the gradient with respect to `tau`.
pub fn soft_argmax_backward(
    vol: &CorrelationVolume,
    probs: &[f64],
    tau: f64,
    stride: f64,
    g_flow: &Tensor,
    mut g_vol: Option<&mut Tensor>,
) -> f64 {
    let (h, w) = (vol.h(), vol.w());
    let (_, sw) = vol.slice_dims();
    let d = vol.values.c;
    let mut g_tau = 0.0;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let gu = g_flow.data[p] * stride;
            let gv = g_flow.data[h * w + p] * stride;
            if gu == 0.0 && gv == 0.0 {
                continue;
            }
            let pr = &probs[p * d..(p + 1) * d];
            let (mut mu, mut mv) = (0.0, 0.0);
            for (c, &pc) in pr.iter().enumerate() {
                let (du, dv) = displacement(vol.mode, sw, c, i, j);
                mu += pc * du;
                mv += pc * dv;
            }
            for (c, &pc) in pr.iter().enumerate() {
                let (du, dv) = displacement(vol.mode, sw, c, i, j);
                // d flow / d logit_c = p_c (disp_c - mean).
                let gl = pc * (gu * (du - mu) + gv * (dv - mv));
                g_tau += gl * vol.values.plane(0, c)[p];
                if let Some(g) = g_vol.as_deref_mut() {
                    g.plane_mut(0, c)[p] += gl * tau;
                }
            }
        }
    }
    g_tau
}

/// Cubic B-spline weights and their derivatives for fractional offset `t`;
/// taps sit at `floor - 1 ..= floor + 2`.
#[inline]
fn bspline(t: f64) -> ([f64; 4], [f64; 4]) {
    let (t2, t3) = (t * t, t * t * t);
    let s = 1.0 - t;
    (
        [
            s * s * s / 6.0,
            (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0,
        ],
        [-0.5 * s * s, 1.5 * t2 - 2.0 * t, -1.5 * t2 + t + 0.5, 0.5 * t2],
    )
}

/// Samples `features` at `x + flow(x)` (flow in grid units) with a cubic
/// B-spline kernel, so the result is twice continuously differentiable in
/// the flow. Taps outside the grid contribute zero.
pub fn warp_features(features: &Tensor, flow: &Tensor) -> Tensor {
    let (c, h, w) = (features.c, features.h, features.w);
    let hw = h * w;
    let mut out = Tensor::zeros(1, c, h, w);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let x = j as f64 + flow.data[p];
            let y = i as f64 + flow.data[hw + p];
            let (x0, y0) = (x.floor(), y.floor());
            let (wx, _) = bspline(x - x0);
            let (wy, _) = bspline(y - y0);
            let (x0, y0) = (x0 as isize - 1, y0 as isize - 1);
            for (a, wya) in wy.iter().enumerate() {
                let ty = y0 + a as isize;
                if ty < 0 || ty >= h as isize {
                    continue;
                }
                for (b, wxb) in wx.iter().enumerate() {
                    let tx = x0 + b as isize;
                    if tx < 0 || tx >= w as isize {
                        continue;
                    }
                    let wt = wya * wxb;
                    let q = ty as usize * w + tx as usize;
                    for ch in 0..c {
                        out.data[ch * hw + p] += wt * features.data[ch * hw + q];
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`warp_features`] with respect to the flow (features are
/// frozen and receive none).
pub fn warp_features_backward_flow(features: &Tensor, flow: &Tensor, g_out: &Tensor) -> Tensor {
    let (c, h, w) = (features.c, features.h, features.w);
    let hw = h * w;
    let mut g_flow = Tensor::zeros(1, 2, h, w);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let x = j as f64 + flow.data[p];
            let y = i as f64 + flow.data[hw + p];
            let (x0, y0) = (x.floor(), y.floor());
            let (wx, dx) = bspline(x - x0);
            let (wy, dy) = bspline(y - y0);
            let (x0, y0) = (x0 as isize - 1, y0 as isize - 1);
            let (mut gx, mut gy) = (0.0, 0.0);
            for a in 0..4 {
                let ty = y0 + a as isize;
                if ty < 0 || ty >= h as isize {
                    continue;
                }
                for b in 0..4 {
                    let tx = x0 + b as isize;
                    if tx < 0 || tx >= w as isize {
                        continue;
                    }
                    let q = ty as usize * w + tx as usize;
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += g_out.data[ch * hw + p] * features.data[ch * hw + q];
                    }
                    gx += dot * dx[b] * wy[a];
                    gy += dot * wx[b] * dy[a];
                }
            }
            g_flow.data[p] = gx;
            g_flow.data[hw + p] = gy;
        }
    }
    g_flow
}

/// Precomputed bilinear taps of a pixel-center resize (clamped borders),
/// usable forward and transposed.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let s = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let f = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f64);
            let a = f.floor() as usize;
            let b = (a + 1).min(n_in - 1);
            (a, b, f - a as f64)
        })
        .collect()
}

impl Resampler {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            ys: axis_taps(in_h, out_h),
            xs: axis_taps(in_w, out_w),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.n, x.c, self.out_h, self.out_w);
        for n in 0..x.n {
            for c in 0..x.c {
                let src = x.plane(n, c);
                let dst = out.plane_mut(n, c);
                for (oy, &(y0, y1, wy)) in self.ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in self.xs.iter().enumerate() {
                        dst[oy * self.out_w + ox] = (1.0 - wy)
                            * ((1.0 - wx) * src[y0 * self.in_w + x0] + wx * src[y0 * self.in_w + x1])
                            + wy * ((1.0 - wx) * src[y1 * self.in_w + x0] + wx * src[y1 * self.in_w + x1]);
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, g: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(g.n, g.c, self.in_h, self.in_w);
        for n in 0..g.n {
            for c in 0..g.c {
                let src = g.plane(n, c);
                let dst = out.plane_mut(n, c);
                for (oy, &(y0, y1, wy)) in self.ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in self.xs.iter().enumerate() {
                        let v = src[oy * self.out_w + ox];
                        dst[y0 * self.in_w + x0] += (1.0 - wy) * (1.0 - wx) * v;
                        dst[y0 * self.in_w + x1] += (1.0 - wy) * wx * v;
                        dst[y1 * self.in_w + x0] += wy * (1.0 - wx) * v;
                        dst[y1 * self.in_w + x1] += wy * wx * v;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(1, c, h, w, (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    fn normalize(t: &mut Tensor) {
        let hw = t.h * t.w;
        for p in 0..hw {
            let n: f64 = (0..t.c).map(|c| t.data[c * hw + p].powi(2)).sum::<f64>().sqrt();
            for c in 0..t.c {
                t.data[c * hw + p] /= n;
            }
        }
    }

    #[test]
    fn self_correlation_peaks_at_zero_displacement() {
        let mut f = random(6, 5, 7, 1);
        normalize(&mut f);
        let v = correlate(&f, &f, CorrelationMode::Local(2)).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let c0 = v.get(i, j, 0, 0);
                assert!((c0 - 1.0).abs() < 1e-12);
                for k in -2..=2 {
                    for l in -2..=2 {
                        assert!(v.get(i, j, k, l) <= c0 + 1e-12);
                    }
                }
            }
        }
        let g = correlate(&f, &f, CorrelationMode::Global).unwrap();
        assert!((g.get(2, 3, 2, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_features_correlate_to_zero() {
        let mut a = Tensor::zeros(1, 2, 3, 3);
        let mut b = Tensor::zeros(1, 2, 3, 3);
        a.plane_mut(0, 0).iter_mut().for_each(|v| *v = 1.0);
        b.plane_mut(0, 1).iter_mut().for_each(|v| *v = 1.0);
        let v = correlate(&a, &b, CorrelationMode::Global).unwrap();
        assert!(v.values.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn correlation_matches_dot_products() {
        let fr = random(4, 6, 5, 2);
        let fq = random(4, 6, 5, 3);
        let lv = correlate(&fr, &fq, CorrelationMode::Local(3)).unwrap();
        let gv = correlate(&fr, &fq, CorrelationMode::Global).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let (i, j) = (r.gen_range(0..6), r.gen_range(0..5));
            let (k, l) = (r.gen_range(-3..=3isize), r.gen_range(-3..=3isize));
            let (qi, qj) = (i as isize + k, j as isize + l);
            let want = if qi >= 0 && qj >= 0 && qi < 6 && qj < 5 {
                (0..4).map(|c| fr.at(0, c, i, j) * fq.at(0, c, qi as usize, qj as usize)).sum()
            } else {
                0.0
            };
            assert!((lv.get(i, j, k, l) - want).abs() < 1e-12);
            let (gk, gl) = (r.gen_range(0..6), r.gen_range(0..5));
            let want: f64 = (0..4).map(|c| fr.at(0, c, i, j) * fq.at(0, c, gk, gl)).sum();
            assert!((gv.get(i, j, gk as isize, gl as isize) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn slices_round_trip() {
        let v = correlate(&random(3, 4, 5, 5), &random(3, 4, 5, 6), CorrelationMode::Local(1)).unwrap();
        let s = v.slices();
        assert_eq!((s.n, s.h, s.w), (20, 3, 3));
        assert_eq!(s.at(7, 0, 2, 0), v.get(1, 2, 1, -1));
        let mut g = Tensor::zeros_like(&v.values);
        slices_backward(&s, &mut g);
        assert_eq!(g, v.values);
    }

    #[test]
    fn soft_argmax_gradients_match_differences() {
        let fr = random(3, 4, 4, 7);
        let fq = random(3, 4, 4, 8);
        let v = correlate(&fr, &fq, CorrelationMode::Local(1)).unwrap();
        let gflow = random(2, 4, 4, 9);
        let tau = 2.5;
        let obj = |v: &CorrelationVolume, t: f64| -> f64 {
            let (f, _) = soft_argmax(v, t, 4.0);
            f.data.iter().zip(&gflow.data).map(|(a, b)| a * b).sum()
        };
        let (_, probs) = soft_argmax(&v, tau, 4.0);
        let mut gv = Tensor::zeros_like(&v.values);
        let gt = soft_argmax_backward(&v, &probs, tau, 4.0, &gflow, Some(&mut gv));
        let h = 1e-6;
        let fd = (obj(&v, tau + h) - obj(&v, tau - h)) / (2.0 * h);
        assert!((fd - gt).abs() < 1e-6 * (1.0 + fd.abs()));
        for idx in [0, 17, 60, 143] {
            let mut a = v.clone();
            let mut b = v.clone();
            a.values.data[idx] += h;
            b.values.data[idx] -= h;
            let fd = (obj(&a, tau) - obj(&b, tau)) / (2.0 * h);
            assert!((fd - gv.data[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn warp_gradient_matches_differences() {
        let f = random(3, 6, 6, 10);
        let mut flow = random(2, 6, 6, 11);
        flow.data.iter_mut().for_each(|v| *v = *v * 1.7 + 0.13);
        let g = random(3, 6, 6, 12);
        let obj = |fl: &Tensor| -> f64 { warp_features(&f, fl).data.iter().zip(&g.data).map(|(a, b)| a * b).sum() };
        let gf = warp_features_backward_flow(&f, &flow, &g);
        let h = 1e-7;
        for idx in 0..flow.data.len() {
            let mut a = flow.clone();
            let mut b = flow.clone();
            a.data[idx] += h;
            b.data[idx] -= h;
            let fd = (obj(&a) - obj(&b)) / (2.0 * h);
            assert!((fd - gf.data[idx]).abs() < 1e-5, "{idx}: {fd} vs {}", gf.data[idx]);
        }
    }

    #[test]
    fn resampler_is_adjoint_and_exact_on_identity() {
        let x = random(2, 4, 5, 13);
        let same = Resampler::new(4, 5, 4, 5);
        assert_eq!(same.forward(&x), x);
        let up = Resampler::new(4, 5, 8, 10);
        let y = up.forward(&x);
        let g = random(2, 8, 10, 14);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = up.backward(&g).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
