//! Dense flow-field arithmetic.
//!
//! Convention used across the crate: a flow `Y` lives on the reference grid
//! and maps reference pixel `x` to query location `x + Y(x)`. Pixel `(i, j)`
//! (row, column) has its center at coordinates `(x = j, y = i)`.

use nalgebra::DMatrix;
pub use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Dense flow with a per-pixel validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    vectors: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            vectors: vec![[0.0; 2]; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, v: [f64; 2]) -> Self {
        Self {
            width,
            height,
            vectors: vec![v; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 2]) -> Self {
        let mut vectors = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                vectors.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            vectors,
            valid: vec![true; width * height],
        }
    }

    pub fn from_parts(width: usize, height: usize, vectors: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        if vectors.len() != width * height || valid.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} flow needs {} vectors, got {} vectors and {} flags",
                width,
                height,
                width * height,
                vectors.len(),
                valid.len()
            )));
        }
        Ok(Self {
            width,
            height,
            vectors,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_mask(&self) -> Mask {
        Mask::from_vec(self.width, self.height, self.valid.clone()).expect("shape")
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.vectors[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 2]) {
        self.vectors[y * self.width + x] = v;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    #[inline]
    pub fn set_valid(&mut self, x: usize, y: usize, v: bool) {
        self.valid[y * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &FlowField) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> FlowField {
        let mut out = FlowField::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                out.set(x, y, self.get(x + x0, y + y0));
                out.set_valid(x, y, self.is_valid(x + x0, y + y0));
            }
        }
        out
    }

    /// Bilinear lookup of the flow at a continuous location. `None` outside
    /// the pixel-center hull or when a contributing tap is invalid.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let taps = hull_taps(self.width, self.height, x, y)?;
        let mut out = [0.0; 2];
        for (ix, iy, w) in taps {
            if w == 0.0 {
                continue;
            }
            if !self.is_valid(ix, iy) {
                return None;
            }
            let v = self.get(ix, iy);
            out[0] += w * v[0];
            out[1] += w * v[1];
        }
        Some(out)
    }

    /// Bilinear resize of the grid with vector values multiplied by `scale`.
    pub fn resize(&self, width: usize, height: usize, scale: [f64; 2]) -> FlowField {
        let u = Image::from_fn(self.width, self.height, 2, |x, y, c| self.get(x, y)[c]);
        let r = u.resize(width, height);
        let mut out = FlowField::from_fn(width, height, |x, y| [r.get(x, y, 0) * scale[0], r.get(x, y, 1) * scale[1]]);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            for x in 0..width {
                let fx = (((x as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(self.width - 1);
                let fy = (((y as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(self.height - 1);
                out.set_valid(x, y, self.is_valid(fx, fy));
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.vectors
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(v, _)| v[0].abs().max(v[1].abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.vectors
            .iter()
            .zip(&self.valid)
            .all(|(v, &ok)| !ok || (v[0].is_finite() && v[1].is_finite()))
    }
}

/// Bilinear taps for a point inside `[0, w-1] x [0, h-1]`.
#[inline]
pub(crate) fn hull_taps(w: usize, h: usize, x: f64, y: f64) -> Option<[(usize, usize, f64); 4]> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Some([
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ])
}

/// Projective transform of the plane, stored with `m[(2,2)] = 1` whenever that
/// entry is nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    matrix: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        let mut m = matrix;
        let s = m[(2, 2)];
        if s != 0.0 {
            m /= s;
        }
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateHomography("non-finite entries".into()));
        }
        let scale = m.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if scale == 0.0 || (m / scale).determinant().abs() <= 1e-12 {
            return Err(Error::DegenerateHomography("singular matrix".into()));
        }
        Ok(Self { matrix: m })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            matrix: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self {
            matrix: Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> Self {
        let inv = self.matrix.try_inverse().expect("validated invertible");
        Homography::new(inv).unwrap_or(Self { matrix: inv })
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &Homography) -> Self {
        let m = self.matrix * first.matrix;
        Homography::new(m).unwrap_or(Self { matrix: m })
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let m = &self.matrix;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w.abs() <= 1e-9 {
            return None;
        }
        Some([
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        ])
    }

    /// Normalized DLT: exact for four points in general position, algebraic
    /// least squares for more.
    pub fn from_correspondences(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Self> {
        let n = src.len();
        if n < 4 || dst.len() != n {
            return Err(Error::TooFewMatches { need: 4, got: n.min(dst.len()) });
        }
        let (ns, ts) = normalize_points(src)?;
        let (nd, td) = normalize_points(dst)?;
        let rows = (2 * n).max(9);
        let mut a = DMatrix::<f64>::zeros(rows, 9);
        for (i, (p, q)) in ns.iter().zip(&nd).enumerate() {
            let (x, y, u, v) = (p[0], p[1], q[0], q[1]);
            let r = 2 * i;
            a[(r, 0)] = -x;
            a[(r, 1)] = -y;
            a[(r, 2)] = -1.0;
            a[(r, 6)] = u * x;
            a[(r, 7)] = u * y;
            a[(r, 8)] = u;
            a[(r + 1, 3)] = -x;
            a[(r + 1, 4)] = -y;
            a[(r + 1, 5)] = -1.0;
            a[(r + 1, 6)] = v * x;
            a[(r + 1, 7)] = v * y;
            a[(r + 1, 8)] = v;
        }
        let svd = a.svd(false, true);
        let vt = svd
            .v_t
            .ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
        let (mut best, mut best_s) = (0, f64::INFINITY);
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s < best_s {
                best_s = s;
                best = k;
            }
        }
        let h = vt.row(best);
        let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
        let td_inv = td
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("normalization not invertible".into()))?;
        Homography::new(td_inv * hn * ts)
    }
}

/// Hartley normalization: zero centroid, mean distance `sqrt(2)`.
fn normalize_points(pts: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, Matrix3<f64>)> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist <= 1e-12 {
        return Err(Error::Degenerate("coincident points".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = pts.iter().map(|p| [s * (p[0] - cx), s * (p[1] - cy)]).collect();
    Ok((out, t))
}

/// `Y(x) = H(x) - x` for every pixel.
pub fn homography_to_flow(h: &Homography, width: usize, height: usize) -> Result<FlowField> {
    let mut flow = FlowField::zeros(width, height);
    let mut bad = 0usize;
    for y in 0..height {
        for x in 0..width {
            match h.apply(x as f64, y as f64) {
                Some(p) => flow.set(x, y, [p[0] - x as f64, p[1] - y as f64]),
                None => {
                    flow.set_valid(x, y, false);
                    bad += 1;
                }
            }
        }
    }
    if 2 * bad > width * height {
        return Err(Error::DegenerateHomography(format!(
            "projection undefined on {bad} of {} pixels",
            width * height
        )));
    }
    Ok(flow)
}

/// Samples `image` at `x + flow(x)`. Points outside the pixel-center hull (or
/// at invalid flow) produce zeros and are flagged in the returned mask.
pub fn warp_bilinear(image: &Image, flow: &FlowField) -> Result<(Image, Mask)> {
    if image.width() != flow.width() || image.height() != flow.height() {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs flow {}x{}",
            image.width(),
            image.height(),
            flow.width(),
            flow.height()
        )));
    }
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut out = Image::new(w, h, c);
    let mut out_of_view = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if !flow.is_valid(x, y) {
                out_of_view.set(x, y, true);
                continue;
            }
            let v = flow.get(x, y);
            match hull_taps(w, h, x as f64 + v[0], y as f64 + v[1]) {
                Some(taps) => {
                    let px = out.pixel_mut(x, y);
                    for (ix, iy, wt) in taps {
                        if wt == 0.0 {
                            continue;
                        }
                        for (o, s) in px.iter_mut().zip(image.pixel(ix, iy)) {
                            *o += wt * s;
                        }
                    }
                }
                None => out_of_view.set(x, y, true),
            }
        }
    }
    Ok((out, out_of_view))
}

/// `Y(x) = base(x + residual(x)) + residual(x)` with a bilinear lookup of
/// `base`.
pub fn compose_flows(base: &FlowField, residual: &FlowField) -> Result<FlowField> {
    if !base.same_dims(residual) {
        return Err(Error::ShapeMismatch("compose_flows operands differ in size".into()));
    }
    let (w, h) = (base.width(), base.height());
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let e = residual.get(x, y);
            if !residual.is_valid(x, y) {
                out.set(x, y, e);
                out.set_valid(x, y, false);
                continue;
            }
            if e == [0.0, 0.0] {
                out.set(x, y, base.get(x, y));
                out.set_valid(x, y, base.is_valid(x, y));
                continue;
            }
            match base.sample(x as f64 + e[0], y as f64 + e[1]) {
                Some(b) => out.set(x, y, [b[0] + e[0], b[1] + e[1]]),
                None => {
                    out.set(x, y, e);
                    out.set_valid(x, y, false);
                }
            }
        }
    }
    Ok(out)
}

/// Exact composition `H(x + fine(x)) - x` of a homography with a residual
/// flow expressed on the homography-aligned grid.
pub fn compose_with_homography(h: &Homography, fine: &FlowField) -> FlowField {
    let mut out = FlowField::zeros(fine.width(), fine.height());
    for y in 0..fine.height() {
        for x in 0..fine.width() {
            let f = fine.get(x, y);
            match h.apply(x as f64 + f[0], y as f64 + f[1]) {
                Some(p) if fine.is_valid(x, y) => out.set(x, y, [p[0] - x as f64, p[1] - y as f64]),
                _ => {
                    out.set(x, y, f);
                    out.set_valid(x, y, false);
                }
            }
        }
    }
    out
}

/// `e(x) = |forward(x) + backward(x + forward(x))|`, infinite where the
/// lookup leaves the image.
pub fn fb_consistency_error(forward: &FlowField, backward: &FlowField) -> Result<Image> {
    if !forward.same_dims(backward) {
        return Err(Error::ShapeMismatch("forward and backward flows differ in size".into()));
    }
    let (w, h) = (forward.width(), forward.height());
    let mut err = Image::filled(w, h, 1, f64::INFINITY);
    for y in 0..h {
        for x in 0..w {
            if !forward.is_valid(x, y) {
                continue;
            }
            let f = forward.get(x, y);
            if let Some(b) = backward.sample(x as f64 + f[0], y as f64 + f[1]) {
                err.set(x, y, 0, ((f[0] + b[0]).powi(2) + (f[1] + b[1]).powi(2)).sqrt());
            }
        }
    }
    Ok(err)
}

/// Four-corner jitter of a centered square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomographySpec {
    pub center: [f64; 2],
    pub half_size: f64,
    /// Maximal per-axis corner displacement as a fraction of the square side.
    pub jitter: f64,
}

impl HomographySpec {
    pub fn centered(width: usize, height: usize, jitter: f64) -> Self {
        Self {
            center: [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
            half_size: width.min(height) as f64 / 2.0,
            jitter,
        }
    }

    pub fn square(&self) -> [[f64; 2]; 4] {
        let [cx, cy] = self.center;
        let s = self.half_size;
        [[cx - s, cy - s], [cx + s, cy - s], [cx + s, cy + s], [cx - s, cy + s]]
    }

    pub fn max_displacement(&self) -> f64 {
        self.jitter * 2.0 * self.half_size
    }
}

/// Bounded random affine motion about `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineSpec {
    pub center: [f64; 2],
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    pub max_shear: f64,
    pub max_translation: f64,
}

impl AffineSpec {
    pub fn identity_at(center: [f64; 2]) -> Self {
        Self {
            center,
            max_rotation: 0.0,
            scale_range: (1.0, 1.0),
            max_shear: 0.0,
            max_translation: 0.0,
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound <= 0.0 {
        0.0
    } else {
        rng.gen_range(-bound..=bound)
    }
}

fn is_convex(quad: &[[f64; 2]; 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let a = quad[i];
        let b = quad[(i + 1) % 4];
        let c = quad[(i + 2) % 4];
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross == 0.0 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Maps the square of `spec` onto a randomly jittered copy of itself.
pub fn sample_random_homography<R: Rng + ?Sized>(spec: &HomographySpec, rng: &mut R) -> Result<Homography> {
    if spec.jitter <= 0.0 {
        return Ok(Homography::identity());
    }
    let src = spec.square();
    let d = spec.max_displacement();
    for _ in 0..100 {
        let mut dst = src;
        for p in dst.iter_mut() {
            p[0] += symmetric(rng, d);
            p[1] += symmetric(rng, d);
        }
        if !is_convex(&dst) {
            continue;
        }
        if let Ok(h) = Homography::from_correspondences(&src, &dst) {
            return Ok(h);
        }
    }
    Err(Error::DegenerateHomography("no convex jittered quad in 100 draws".into()))
}

/// `T(c) * [shift] * R * Shear * S * T(-c)`.
pub fn sample_random_affine<R: Rng + ?Sized>(spec: &AffineSpec, rng: &mut R) -> Result<Homography> {
    let theta = symmetric(rng, spec.max_rotation);
    let (lo, hi) = spec.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let shear = symmetric(rng, spec.max_shear);
    let tx = symmetric(rng, spec.max_translation);
    let ty = symmetric(rng, spec.max_translation);
    let (s, c) = theta.sin_cos();
    let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let sh = Matrix3::new(1.0, shear, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
    let sc = Matrix3::new(scale, 0.0, 0.0, 0.0, scale, 0.0, 0.0, 0.0, 1.0);
    let [cx, cy] = spec.center;
    let to = Matrix3::new(1.0, 0.0, cx + tx, 0.0, 1.0, cy + ty, 0.0, 0.0, 1.0);
    let from = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    Homography::new(to * rot * sh * sc * from)
}

/// Local flow perturbations: one shared elastic field masked by `count`
/// Gaussian blobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub count: usize,
    pub elastic_sigma: f64,
    pub elastic_alpha: f64,
    pub mask_std_range: (f64, f64),
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            count: 3,
            elastic_sigma: 4.0,
            elastic_alpha: 3.0,
            mask_std_range: (2.0, 6.0),
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped borders.
pub(crate) fn blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let xx = (x as isize + t as isize - r).clamp(0, width as isize - 1) as usize;
                acc += kv * data[y * width + xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let yy = (y as isize + t as isize - r).clamp(0, height as isize - 1) as usize;
                acc += kv * tmp[yy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller, first branch only.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Gaussian-smoothed white noise, rescaled to unit maximal magnitude and then
/// multiplied by `elastic_alpha`.
pub fn elastic_field<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    spec: &PerturbationSpec,
    rng: &mut R,
) -> FlowField {
    let n = width * height;
    let nu: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
    let nv: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
    if spec.elastic_alpha == 0.0 {
        return FlowField::zeros(width, height);
    }
    let bu = blur(&nu, width, height, spec.elastic_sigma);
    let bv = blur(&nv, width, height, spec.elastic_sigma);
    let max = bu
        .iter()
        .zip(&bv)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0, f64::max);
    let s = if max > 0.0 { spec.elastic_alpha / max } else { 0.0 };
    FlowField::from_fn(width, height, |x, y| {
        let i = y * width + x;
        [bu[i] * s, bv[i] * s]
    })
}

/// `min(2 exp(-|x - c|^2 / (2 std^2)), 1)` on the pixel grid.
pub fn gaussian_mask(center: [f64; 2], std: f64, width: usize, height: usize) -> Image {
    Image::from_fn(width, height, 1, |x, y, _| {
        let dx = x as f64 - center[0];
        let dy = y as f64 - center[1];
        (2.0 * (-(dx * dx + dy * dy) / (2.0 * std * std)).exp()).min(1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_and_translation_flows() {
        let f = homography_to_flow(&Homography::identity(), 7, 5).unwrap();
        assert!(f.vectors().iter().all(|v| *v == [0.0, 0.0]));
        let t = homography_to_flow(&Homography::translation(3.0, 5.0), 7, 5).unwrap();
        assert!(t.vectors().iter().all(|v| *v == [3.0, 5.0]));
    }

    #[test]
    fn homography_flow_matches_point_transform() {
        let mut r = rng(1);
        let spec = HomographySpec::centered(40, 30, 0.15);
        let h = sample_random_homography(&spec, &mut r).unwrap();
        let flow = homography_to_flow(&h, 40, 30).unwrap();
        let m = h.matrix();
        for _ in 0..10 {
            let x = r.gen_range(0..40);
            let y = r.gen_range(0..30);
            // Plain projective arithmetic, written out independently.
            let (xf, yf) = (x as f64, y as f64);
            let w = m[(2, 0)] * xf + m[(2, 1)] * yf + m[(2, 2)];
            let u = (m[(0, 0)] * xf + m[(0, 1)] * yf + m[(0, 2)]) / w - xf;
            let v = (m[(1, 0)] * xf + m[(1, 1)] * yf + m[(1, 2)]) / w - yf;
            let got = flow.get(x, y);
            assert!((got[0] - u).abs() < 1e-9 && (got[1] - v).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_projection_is_reported() {
        // w = x - 3 vanishes on column 3 only; w < 0 is still a valid projection.
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -3.0);
        let h = Homography::new(m).unwrap();
        let f = homography_to_flow(&h, 8, 4).unwrap();
        assert!(!f.is_valid(3, 0) && f.is_valid(2, 0));
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1e-12, 1e-12);
        assert!(Homography::new(m).is_err() || homography_to_flow(&Homography::new(m).unwrap(), 4, 4).is_err());
    }

    #[test]
    fn warp_zero_and_integer_shift() {
        let im = Image::from_fn(6, 5, 2, |x, y, c| (x * 10 + y + c * 100) as f64);
        let (w, oov) = warp_bilinear(&im, &FlowField::zeros(6, 5)).unwrap();
        assert_eq!(w, im);
        assert_eq!(oov.count(), 0);
        let (w, oov) = warp_bilinear(&im, &FlowField::constant(6, 5, [2.0, -1.0])).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let inside = x + 2 < 6 && y >= 1;
                assert_eq!(oov.get(x, y), !inside);
                for c in 0..2 {
                    let want = if inside { im.get(x + 2, y - 1, c) } else { 0.0 };
                    assert_eq!(w.get(x, y, c), want);
                }
            }
        }
    }

    #[test]
    fn warp_is_linear_in_image() {
        let mut r = rng(4);
        let a = Image::from_fn(9, 7, 3, |_, _, _| r.gen());
        let b = Image::from_fn(9, 7, 3, |_, _, _| r.gen());
        let flow = FlowField::from_fn(9, 7, |_, _| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]);
        let combo = Image::from_fn(9, 7, 3, |x, y, c| 0.3 * a.get(x, y, c) - 1.7 * b.get(x, y, c));
        let (wa, _) = warp_bilinear(&a, &flow).unwrap();
        let (wb, _) = warp_bilinear(&b, &flow).unwrap();
        let (wc, _) = warp_bilinear(&combo, &flow).unwrap();
        for i in 0..wc.data().len() {
            assert!((wc.data()[i] - (0.3 * wa.data()[i] - 1.7 * wb.data()[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn compose_with_zero_operands() {
        let mut r = rng(5);
        let a = FlowField::from_fn(8, 8, |_, _| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]);
        let z = FlowField::zeros(8, 8);
        assert_eq!(compose_flows(&a, &z).unwrap(), a);
        let c = compose_flows(&z, &a).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if c.is_valid(x, y) {
                    assert_eq!(c.get(x, y), a.get(x, y));
                }
            }
        }
    }

    #[test]
    fn compose_matches_homography_chain() {
        let (w, h) = (48, 40);
        let mut r = rng(6);
        let h1 = sample_random_homography(&HomographySpec::centered(w, h, 0.08), &mut r).unwrap();
        let h2 = sample_random_homography(&HomographySpec::centered(w, h, 0.02), &mut r).unwrap();
        let base = homography_to_flow(&h1, w, h).unwrap();
        let residual = homography_to_flow(&h2, w, h).unwrap();
        let composed = compose_flows(&base, &residual).unwrap();
        // Oracle: x -> h1(h2(x)).
        let chain = homography_to_flow(&h1.after(&h2), w, h).unwrap();
        for y in 6..h - 6 {
            for x in 6..w - 6 {
                if composed.is_valid(x, y) {
                    let a = composed.get(x, y);
                    let b = chain.get(x, y);
                    assert!((a[0] - b[0]).abs() < 0.05 && (a[1] - b[1]).abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn homography_sampling_properties() {
        let spec = HomographySpec::centered(64, 64, 0.0);
        assert_eq!(sample_random_homography(&spec, &mut rng(0)).unwrap(), Homography::identity());
        let spec = HomographySpec::centered(64, 64, 0.1);
        let a = sample_random_homography(&spec, &mut rng(8)).unwrap();
        let b = sample_random_homography(&spec, &mut rng(8)).unwrap();
        assert_eq!(a, b);
        let mut r = rng(9);
        let bound = spec.max_displacement();
        for _ in 0..1000 {
            let h = sample_random_homography(&spec, &mut r).unwrap();
            assert!(h.matrix().try_inverse().is_some());
            for c in spec.square() {
                let p = h.apply(c[0], c[1]).unwrap();
                assert!((p[0] - c[0]).abs() <= bound + 1e-6 && (p[1] - c[1]).abs() <= bound + 1e-6);
            }
        }
    }

    #[test]
    fn affine_sampling_is_affine_and_deterministic() {
        let spec = AffineSpec {
            center: [10.0, 12.0],
            max_rotation: 0.3,
            scale_range: (0.8, 1.2),
            max_shear: 0.1,
            max_translation: 5.0,
        };
        let a = sample_random_affine(&spec, &mut rng(2)).unwrap();
        assert_eq!(a, sample_random_affine(&spec, &mut rng(2)).unwrap());
        let m = a.matrix();
        assert_eq!((m[(2, 0)], m[(2, 1)], m[(2, 2)]), (0.0, 0.0, 1.0));
        let id = sample_random_affine(&AffineSpec::identity_at([3.0, 4.0]), &mut rng(2)).unwrap();
        assert!((id.matrix() - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn dlt_exact_on_four_points() {
        let src = [[0.0, 0.0], [10.0, 0.0], [10.0, 8.0], [0.0, 8.0]];
        let dst = [[1.0, 2.0], [12.0, 1.0], [11.5, 9.0], [-0.5, 10.0]];
        let h = Homography::from_correspondences(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let p = h.apply(s[0], s[1]).unwrap();
            assert!((p[0] - d[0]).abs() < 1e-9 && (p[1] - d[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn elastic_and_mask() {
        let mut spec = PerturbationSpec::default();
        spec.elastic_alpha = 0.0;
        let f = elastic_field(16, 12, &spec, &mut rng(1));
        assert!(f.vectors().iter().all(|v| *v == [0.0, 0.0]));
        spec.elastic_alpha = 2.5;
        let f = elastic_field(16, 12, &spec, &mut rng(1));
        assert!((f.vectors().iter().map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt()).fold(0.0, f64::max) - 2.5).abs() < 1e-12);
        assert_eq!(f, elastic_field(16, 12, &spec, &mut rng(1)));

        let m = gaussian_mask([5.0, 4.0], 2.0, 12, 10);
        assert_eq!(m.get(5, 4, 0), 1.0);
        // 2 exp(-r^2 / 8) = 0.5  =>  r^2 = 8 ln 4.
        let std = 2.0f64;
        let r = (2.0 * std * std * 4.0f64.ln()).sqrt();
        let direct = gaussian_mask([0.0, 0.0], std, 1, 1);
        let shifted = gaussian_mask([-r, 0.0], std, 1, 1);
        assert_eq!(direct.get(0, 0, 0), 1.0);
        assert!((shifted.get(0, 0, 0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fb_consistency_examples() {
        let f = FlowField::constant(10, 8, [1.5, -0.5]);
        let b = FlowField::constant(10, 8, [-1.5, 0.5]);
        let e = fb_consistency_error(&f, &b).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                let inside = x as f64 + 1.5 <= 9.0 && y as f64 - 0.5 >= 0.0;
                if inside {
                    assert_eq!(e.get(x, y, 0), 0.0);
                } else {
                    assert!(e.get(x, y, 0).is_infinite());
                }
            }
        }
        let b2 = FlowField::constant(10, 8, [-0.5, 0.5]);
        let e2 = fb_consistency_error(&f, &b2).unwrap();
        assert!((e2.get(2, 3, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fb_consistency_with_inverse_homography() {
        let (w, h) = (48, 48);
        let hom = sample_random_homography(&HomographySpec::centered(w, h, 0.06), &mut rng(12)).unwrap();
        let f = homography_to_flow(&hom, w, h).unwrap();
        let b = homography_to_flow(&hom.inverse(), w, h).unwrap();
        let e = fb_consistency_error(&f, &b).unwrap();
        for y in 8..40 {
            for x in 8..40 {
                let v = e.get(x, y, 0);
                assert!(v.is_infinite() || v <= 0.05, "{v}");
            }
        }
    }
}
