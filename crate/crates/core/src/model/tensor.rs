//! Minimal NCHW tensors and 3x3 convolutions with explicit backward passes.

use nalgebra::DMatrix;

/// Dense `n x c x h x w` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.n, other.c, other.h, other.w)
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor shape");
        Self { n, c, h, w, data }
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let s = self.h * self.w;
        let i = (n * self.c + c) * s;
        &self.data[i..i + s]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let s = self.h * self.w;
        let i = (n * self.c + c) * s;
        &mut self.data[i..i + s]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// Channel concatenation of single-batch tensors.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].h, parts[0].w);
        let c = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for p in parts {
            assert!(p.n == 1 && p.h == h && p.w == w, "concat shape");
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(1, c, h, w, data)
    }

    /// Inverse of [`Tensor::concat`].
    pub fn split(&self, channels: &[usize]) -> Vec<Tensor> {
        let s = self.h * self.w;
        let mut out = Vec::with_capacity(channels.len());
        let mut off = 0;
        for &c in channels {
            out.push(Tensor::from_vec(1, c, self.h, self.w, self.data[off * s..(off + c) * s].to_vec()));
            off += c;
        }
        assert_eq!(off, self.c, "split channel count");
        out
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * crate::mixture::sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = crate::mixture::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// 3x3 (or 1x1) convolution geometry and its parameter offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvSpec {
    pub fn num_params(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }


    /// Valid output range `[lo, hi)` along one axis for kernel tap `t`.
    #[inline]
    fn range(&self, t: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        // input index = o * stride + t - pad must lie in [0, n_in).
        let lo = if t >= self.pad { 0 } else { (self.pad - t).div_ceil(self.stride) };
        let hi = ((n_in + self.pad).saturating_sub(t)).div_ceil(self.stride).min(n_out);
        (lo, hi)
    }

    /// Patch matrix `P x K` (column-major), `P = n * oh * ow` output
    /// positions and `K = cin * k * k` taps; out-of-range taps are zero.
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> DMatrix<f64> {
        let kk = self.k * self.k;
        let ohw = oh * ow;
        let p = x.n * ohw;
        let mut cols = DMatrix::zeros(p, self.cin * kk);
        for ci in 0..self.cin {
            for ky in 0..self.k {
                let (y_lo, y_hi) = self.range(ky, x.h, oh);
                for kx in 0..self.k {
                    let (x_lo, x_hi) = self.range(kx, x.w, ow);
                    let r = (ci * self.k + ky) * self.k + kx;
                    let col = &mut cols.as_mut_slice()[r * p..(r + 1) * p];
                    for n in 0..x.n {
                        let inp = x.plane(n, ci);
                        for oy in y_lo..y_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let base = n * ohw + oy * ow;
                            for ox in x_lo..x_hi {
                                col[base + ox] = inp[iy * x.w + ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, gcols: &DMatrix<f64>, gx: &mut Tensor, oh: usize, ow: usize) {
        let ohw = oh * ow;
        let p = gx.n * ohw;
        let (h, w) = (gx.h, gx.w);
        for ci in 0..self.cin {
            for ky in 0..self.k {
                let (y_lo, y_hi) = self.range(ky, h, oh);
                for kx in 0..self.k {
                    let (x_lo, x_hi) = self.range(kx, w, ow);
                    let r = (ci * self.k + ky) * self.k + kx;
                    let col = &gcols.as_slice()[r * p..(r + 1) * p];
                    for n in 0..gx.n {
                        let gin = gx.plane_mut(n, ci);
                        for oy in y_lo..y_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let base = n * ohw + oy * ow;
                            for ox in x_lo..x_hi {
                                gin[iy * w + ox * self.stride + kx - self.pad] += col[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn weight_matrix(&self, params: &[f64]) -> DMatrix<f64> {
        let kdim = self.cin * self.k * self.k;
        DMatrix::from_column_slice(kdim, self.cout, &params[self.w_off..self.w_off + kdim * self.cout])
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_dims(x.h, x.w);
        let ohw = oh * ow;
        let cols = self.im2col(x, oh, ow);
        let yt = &cols * self.weight_matrix(params);
        let p = x.n * ohw;
        let mut y = Tensor::zeros(x.n, self.cout, oh, ow);
        for n in 0..x.n {
            for co in 0..self.cout {
                let bias = params[self.b_off + co];
                let src = &yt.as_slice()[co * p + n * ohw..co * p + (n + 1) * ohw];
                for (o, s) in y.plane_mut(n, co).iter_mut().zip(src) {
                    *o = s + bias;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grads` and, if requested, the
    /// input gradient into `gx`.
    pub fn backward(&self, params: &[f64], x: &Tensor, gy: &Tensor, grads: &mut [f64], gx: Option<&mut Tensor>) {
        let (oh, ow) = (gy.h, gy.w);
        let ohw = oh * ow;
        let p = x.n * ohw;
        let mut gyt = DMatrix::zeros(p, self.cout);
        for n in 0..x.n {
            for co in 0..self.cout {
                let g = gy.plane(n, co);
                grads[self.b_off + co] += g.iter().sum::<f64>();
                gyt.as_mut_slice()[co * p + n * ohw..co * p + (n + 1) * ohw].copy_from_slice(g);
            }
        }
        let cols = self.im2col(x, oh, ow);
        let gw = cols.tr_mul(&gyt);
        let kdim = self.cin * self.k * self.k;
        for (g, v) in grads[self.w_off..self.w_off + kdim * self.cout].iter_mut().zip(gw.as_slice()) {
            *g += v;
        }
        if let Some(gx) = gx {
            let gcols = &gyt * self.weight_matrix(params).transpose();
            self.col2im(&gcols, gx, oh, ow);
        }
    }
}

/// A chain of convolutions with SiLU between layers; the last layer is
/// linear when `last_linear` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStack {
    pub layers: Vec<ConvSpec>,
    pub last_linear: bool,
}

/// Per-layer inputs and pre-activations of one stack evaluation.
#[derive(Debug, Clone)]
pub struct StackCache {
    pub inputs: Vec<Tensor>,
    pub pre: Vec<Tensor>,
}

impl StackCache {
    /// Input of the last layer, i.e. the second-to-last activation.
    pub fn penultimate(&self) -> &Tensor {
        self.inputs.last().expect("non-empty stack")
    }
}

impl ConvStack {
    fn activated(&self, i: usize) -> bool {
        !(self.last_linear && i + 1 == self.layers.len())
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, StackCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(params, &cur);
            let next = if self.activated(i) {
                Tensor {
                    data: z.data.iter().map(|&v| silu(v)).collect(),
                    ..z.clone()
                }
            } else {
                z.clone()
            };
            inputs.push(cur);
            pre.push(z);
            cur = next;
        }
        (cur, StackCache { inputs, pre })
    }

    /// Backward from the output gradient. `g_penultimate` is an extra
    /// gradient arriving at the last layer's input. Returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &StackCache,
        g_out: &Tensor,
        g_penultimate: Option<&Tensor>,
        grads: &mut [f64],
        need_input: bool,
    ) -> Option<Tensor> {
        let mut g = g_out.clone();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if self.activated(i) {
                for (gv, &z) in g.data.iter_mut().zip(&cache.pre[i].data) {
                    *gv *= silu_grad(z);
                }
            }
            let want_gx = i > 0 || need_input;
            let mut gx = if want_gx { Some(Tensor::zeros_like(&cache.inputs[i])) } else { None };
            self.layers[i].backward(params, &cache.inputs[i], &g, grads, gx.as_mut());
            match gx {
                Some(mut gx) => {
                    if i == last {
                        if let Some(extra) = g_penultimate {
                            gx.add_assign(extra);
                        }
                    }
                    g = gx;
                }
                None => return None,
            }
        }
        Some(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(cin: usize, cout: usize, stride: usize, pad: usize) -> ConvSpec {
        ConvSpec {
            cin,
            cout,
            k: 3,
            stride,
            pad,
            w_off: 0,
            b_off: cout * cin * 9,
        }
    }

    fn naive(s: &ConvSpec, p: &[f64], x: &Tensor) -> Tensor {
        let (oh, ow) = s.out_dims(x.h, x.w);
        let mut y = Tensor::zeros(x.n, s.cout, oh, ow);
        for n in 0..x.n {
            for co in 0..s.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p[s.b_off + co];
                        for ci in 0..s.cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        acc += p[((co * s.cin + ci) * 3 + ky) * 3 + kx] * x.at(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let i = y.idx(n, co, oy, ox);
                        y.data[i] = acc;
                    }
                }
            }
        }
        y
    }

    fn filled(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..n * c * h * w)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect();
        Tensor::from_vec(n, c, h, w, data)
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, h, w) in &[(1, 1, 5, 6), (2, 1, 8, 7), (1, 0, 9, 9), (2, 1, 5, 5)] {
            let s = spec(2, 3, stride, pad);
            let p = filled(1, 1, 1, s.num_params(), 3).data;
            let x = filled(2, 2, h, w, 5);
            let a = s.forward(&p, &x);
            let b = naive(&s, &p, &x);
            assert_eq!((a.h, a.w), (b.h, b.w));
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <gy, conv(x)> - <gy, bias> must equal <gx, x> for the linear part.
        let s = spec(2, 3, 2, 1);
        let p = filled(1, 1, 1, s.num_params(), 7).data;
        let x = filled(1, 2, 7, 8, 9);
        let y = s.forward(&p, &x);
        let gy = filled(1, 3, y.h, y.w, 11);
        let mut grads = vec![0.0; p.len()];
        let mut gx = Tensor::zeros_like(&x);
        s.backward(&p, &x, &gy, &mut grads, Some(&mut gx));
        let lhs: f64 = gy.data.iter().zip(&y.data).map(|(a, b)| a * b).sum::<f64>()
            - (0..3).map(|c| p[s.b_off + c] * gy.plane(0, c).iter().sum::<f64>()).sum::<f64>();
        let rhs: f64 = gx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let wsum: f64 = (0..s.b_off).map(|i| grads[i] * p[i]).sum();
        assert!((wsum - lhs).abs() < 1e-10);
    }
}
