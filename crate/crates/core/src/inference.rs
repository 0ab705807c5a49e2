//! Confidence-driven inference: match extraction, RANSAC homographies,
//! multi-stage and multi-scale refinement, and sparse keypoint matching.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose_with_homography, FlowField, Homography};
use crate::image::Image;
use crate::io::MatchRecord;
use crate::model::network::{forward, DensePrediction, LevelPrediction, ModelWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Confidence threshold on `P_R`.
    pub gamma: f64,
    /// Radius `R` of the confidence box, px.
    pub radius: f64,
    pub ransac_iters: usize,
    pub inlier_thresh: f64,
    pub ms_ratios: Vec<f64>,
    pub keypoint_dist: f64,
    pub cyclic_thresh: f64,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            radius: 1.0,
            ransac_iters: 1000,
            inlier_thresh: 1.0,
            ms_ratios: vec![0.5, 0.88, 1.0, 1.33, 1.66, 2.0],
            keypoint_dist: 4.0,
            cyclic_thresh: 2.0,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.radius > 0.0) || !(self.inlier_thresh > 0.0) || !(self.keypoint_dist > 0.0) {
            return Err(Error::Config("radius, inlier_thresh and keypoint_dist must be positive".into()));
        }
        if self.ms_ratios.is_empty() || self.ms_ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("ms_ratios must be a nonempty list of positive values".into()));
        }
        Ok(())
    }
}

/// Correspondences between the reference and query frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub entries: Vec<MatchRecord>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorts by reference raster order (row, then column), then by query point.
    pub fn canonical_sort(&mut self) {
        self.entries.sort_by(|a, b| {
            (a.reference[1], a.reference[0], a.query[1], a.query[0])
                .partial_cmp(&(b.reference[1], b.reference[0], b.query[1], b.query[0]))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
    }
}

fn in_image(p: [f64; 2], w: usize, h: usize) -> bool {
    p[0] >= -0.5 && p[1] >= -0.5 && p[0] <= w as f64 - 0.5 && p[1] <= h as f64 - 0.5
}

/// One match per pixel with `pr >= gamma` and valid flow. Flow whose target
/// leaves the (same-sized) query image counts as invalid.
pub fn extract_matches(flow: &FlowField, pr: &Image, gamma: f64) -> Result<MatchSet> {
    if pr.width() != flow.width() || pr.height() != flow.height() || pr.channels() != 1 {
        return Err(Error::ShapeMismatch("confidence map and flow differ in size".into()));
    }
    let mut entries = Vec::new();
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let c = pr.get(x, y, 0);
            if c < gamma || !flow.is_valid(x, y) {
                continue;
            }
            let f = flow.get(x, y);
            let q = [x as f64 + f[0], y as f64 + f[1]];
            if in_image(q, flow.width(), flow.height()) {
                entries.push(MatchRecord {
                    reference: [x as f64, y as f64],
                    query: q,
                    confidence: c.clamp(0.0, 1.0),
                });
            }
        }
    }
    Ok(MatchSet { entries })
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let scale = ((b[0] - a[0]).hypot(b[1] - a[1]) * (c[0] - a[0]).hypot(c[1] - a[1])).max(1e-12);
    cross.abs() / scale < 1e-6
}

fn degenerate_sample(pts: &[[f64; 2]]) -> bool {
    (0..4).any(|i| {
        let o: Vec<[f64; 2]> = (0..4).filter(|&j| j != i).map(|j| pts[j]).collect();
        collinear(o[0], o[1], o[2])
    })
}

/// Mean of the forward and backward transfer errors.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, m: &MatchRecord) -> f64 {
    let fwd = h.apply(m.reference[0], m.reference[1]);
    let bwd = h_inv.apply(m.query[0], m.query[1]);
    match (fwd, bwd) {
        (Some(f), Some(b)) => {
            let ef = (f[0] - m.query[0]).hypot(f[1] - m.query[1]);
            let eb = (b[0] - m.reference[0]).hypot(b[1] - m.reference[1]);
            0.5 * (ef + eb)
        }
        _ => f64::INFINITY,
    }
}

fn inliers(h: &Homography, matches: &[MatchRecord], thresh: f64) -> Vec<usize> {
    let h_inv = h.inverse();
    (0..matches.len())
        .filter(|&i| symmetric_transfer_error(h, &h_inv, &matches[i]) <= thresh)
        .collect()
}

fn fit(matches: &[MatchRecord], idx: &[usize]) -> Result<Homography> {
    let src: Vec<[f64; 2]> = idx.iter().map(|&i| matches[i].reference).collect();
    let dst: Vec<[f64; 2]> = idx.iter().map(|&i| matches[i].query).collect();
    Homography::from_correspondences(&src, &dst)
}

/// RANSAC over minimal 4-point samples, refit on the best inlier set.
/// Returns the homography mapping reference to query points and the
/// inlier ratio.
pub fn fit_homography_ransac(matches: &MatchSet, cfg: &InferenceConfig, rng: &mut ChaCha8Rng) -> Result<(Homography, f64)> {
    let n = matches.len();
    if n < 4 {
        return Err(Error::TooFewMatches { need: 4, got: n });
    }
    let mut sorted = matches.clone();
    sorted.canonical_sort();
    let ms = &sorted.entries;
    let mut best: Option<Vec<usize>> = None;
    for _ in 0..cfg.ransac_iters.max(1) {
        let idx = sample(rng, n, 4).into_vec();
        let src: Vec<[f64; 2]> = idx.iter().map(|&i| ms[i].reference).collect();
        let dst: Vec<[f64; 2]> = idx.iter().map(|&i| ms[i].query).collect();
        if degenerate_sample(&src) || degenerate_sample(&dst) {
            continue;
        }
        let Ok(h) = Homography::from_correspondences(&src, &dst) else {
            continue;
        };
        let inl = inliers(&h, ms, cfg.inlier_thresh);
        if best.as_ref().is_none_or(|b| inl.len() > b.len()) {
            let all = inl.len() == n;
            best = Some(inl);
            if all {
                break;
            }
        }
    }
    let best = best.ok_or_else(|| Error::Degenerate("every RANSAC sample was collinear".into()))?;
    if best.len() < 4 {
        return Err(Error::TooFewMatches { need: 4, got: best.len() });
    }
    let mut h = fit(ms, &best)?;
    let refined = inliers(&h, ms, cfg.inlier_thresh);
    if refined.len() >= 4 && refined.len() > best.len() {
        if let Ok(h2) = fit(ms, &refined) {
            h = h2;
        }
    }
    let ratio = inliers(&h, ms, cfg.inlier_thresh).len() as f64 / n as f64;
    Ok((h, ratio))
}

/// Dense output of an inference strategy.
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub flow: FlowField,
    /// `P_R` per pixel.
    pub confidence: Image,
    pub dense: DensePrediction,
    /// The alignment used, `None` for single-pass output.
    pub homography: Option<Homography>,
    pub inlier_ratio: Option<f64>,
    pub selected_ratio: Option<f64>,
}

fn single_pass(query: &Image, reference: &Image, weights: &ModelWeights, cfg: &InferenceConfig) -> Result<(InferenceOutput, LevelPrediction)> {
    let preds = forward(query, reference, weights)?;
    let fine = preds.into_iter().nth(1).expect("two levels");
    let dense = DensePrediction::from_level(&fine, weights.config.width, weights.config.height, &weights.constraints);
    Ok((
        InferenceOutput {
            flow: dense.flow.clone(),
            confidence: dense.confidence(cfg.radius),
            dense,
            homography: None,
            inlier_ratio: None,
            selected_ratio: None,
        },
        fine,
    ))
}

/// Direct single-pass estimation.
pub fn infer_direct(query: &Image, reference: &Image, weights: &ModelWeights, cfg: &InferenceConfig) -> Result<InferenceOutput> {
    cfg.validate()?;
    Ok(single_pass(query, reference, weights, cfg)?.0)
}

/// Matches at the model's native output grid, scaled to image pixels.
pub fn native_matches(fine: &LevelPrediction, weights: &ModelWeights, cfg: &InferenceConfig) -> MatchSet {
    let (h, w) = fine.dims();
    let sx = weights.config.width as f64 / w as f64;
    let sy = weights.config.height as f64 / h as f64;
    let mut entries = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let p = fine.params_at(i, j, &weights.constraints);
            let c = crate::mixture::confidence_pr(&p, cfg.radius);
            let r = [(j as f64 + 0.5) * sx - 0.5, (i as f64 + 0.5) * sy - 0.5];
            let q = [r[0] + p.mu[0], r[1] + p.mu[1]];
            if c >= cfg.gamma && in_image(q, weights.config.width, weights.config.height) {
                entries.push(MatchRecord {
                    reference: r,
                    query: q,
                    confidence: c.clamp(0.0, 1.0),
                });
            }
        }
    }
    MatchSet { entries }
}

/// `out(x) = image(h(x))` with clamped bilinear taps, zero where `h(x)`
/// leaves the image.
pub fn warp_by_homography(image: &Image, h: &Homography) -> Image {
    let (w, ht) = (image.width() as f64, image.height() as f64);
    let mut out = Image::new(image.width(), image.height(), image.channels());
    for y in 0..image.height() {
        for x in 0..image.width() {
            if let Some(p) = h.apply(x as f64, y as f64) {
                if p[0] > -0.5 && p[1] > -0.5 && p[0] < w - 0.5 && p[1] < ht - 0.5 {
                    image.sample_clamped(p[0], p[1], out.pixel_mut(x, y));
                }
            }
        }
    }
    out
}

/// Second pass on the pair aligned by `h` and exact composition.
pub fn refine_with_homography(
    query: &Image,
    reference: &Image,
    h: &Homography,
    weights: &ModelWeights,
    cfg: &InferenceConfig,
) -> Result<InferenceOutput> {
    let aligned = warp_by_homography(query, h);
    let (second, _) = single_pass(&aligned, reference, weights, cfg)?;
    Ok(InferenceOutput {
        flow: compose_with_homography(h, &second.flow),
        homography: Some(*h),
        ..second
    })
}

/// Multi-stage (H): falls back to the single pass when RANSAC fails.
pub fn infer_multistage_h(query: &Image, reference: &Image, weights: &ModelWeights, cfg: &InferenceConfig) -> Result<InferenceOutput> {
    cfg.validate()?;
    let (first, fine) = single_pass(query, reference, weights, cfg)?;
    let matches = native_matches(&fine, weights, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match fit_homography_ransac(&matches, cfg, &mut rng) {
        Ok((h, ratio)) => {
            let mut out = refine_with_homography(query, reference, &h, weights, cfg)?;
            out.inlier_ratio = Some(ratio);
            Ok(out)
        }
        Err(_) => Ok(first),
    }
}

/// `p -> (p + 0.5) * s - 0.5`, the resize coordinate map.
fn resize_map(s: f64) -> Homography {
    Homography::translation(0.5 * s - 0.5, 0.5 * s - 0.5).after(&Homography::scaling(s, s))
}

fn resized_padded(image: &Image, s: f64) -> (Image, usize, usize) {
    let w = ((image.width() as f64 * s).round() as usize).clamp(1, image.width());
    let h = ((image.height() as f64 * s).round() as usize).clamp(1, image.height());
    (image.resize(w, h).pad_to(image.width(), image.height()), w, h)
}

/// Homography for one scale ratio, expressed at the original resolution.
fn ratio_homography(
    query: &Image,
    reference: &Image,
    ratio: f64,
    weights: &ModelWeights,
    cfg: &InferenceConfig,
) -> Result<(Homography, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if ratio == 1.0 {
        let (_, fine) = single_pass(query, reference, weights, cfg)?;
        return fit_homography_ransac(&native_matches(&fine, weights, cfg), cfg, &mut rng);
    }
    // Below 1 the reference shrinks, above 1 the query does.
    let (s_ref, s_q) = if ratio < 1.0 { (ratio, 1.0) } else { (1.0, 1.0 / ratio) };
    let (r_img, rw, rh) = if s_ref == 1.0 {
        (reference.clone(), reference.width(), reference.height())
    } else {
        resized_padded(reference, s_ref)
    };
    let (q_img, qw, qh) = if s_q == 1.0 {
        (query.clone(), query.width(), query.height())
    } else {
        resized_padded(query, s_q)
    };
    let (_, fine) = single_pass(&q_img, &r_img, weights, cfg)?;
    let inside = |p: [f64; 2], w: usize, h: usize| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64;
    let matches = MatchSet {
        entries: native_matches(&fine, weights, cfg)
            .entries
            .into_iter()
            .filter(|m| inside(m.reference, rw, rh) && inside(m.query, qw, qh))
            .collect(),
    };
    let (h_scaled, ratio_in) = fit_homography_ransac(&matches, cfg, &mut rng)?;
    let h = resize_map(s_q).inverse().after(&h_scaled.after(&resize_map(s_ref)));
    Ok((h, ratio_in))
}

/// Multi-scale (MS): the max-inlier-ratio homography over all ratios drives
/// the (H) refinement.
pub fn infer_multiscale_ms(query: &Image, reference: &Image, weights: &ModelWeights, cfg: &InferenceConfig) -> Result<InferenceOutput> {
    cfg.validate()?;
    let mut best: Option<(Homography, f64, f64)> = None;
    for &r in &cfg.ms_ratios {
        if let Ok((h, ratio)) = ratio_homography(query, reference, r, weights, cfg) {
            if best.is_none_or(|b| ratio > b.1) {
                best = Some((h, ratio, r));
            }
        }
    }
    match best {
        Some((h, ratio, r)) => {
            let mut out = refine_with_homography(query, reference, &h, weights, cfg)?;
            out.inlier_ratio = Some(ratio);
            out.selected_ratio = Some(r);
            Ok(out)
        }
        None => infer_direct(query, reference, weights, cfg),
    }
}

/// Uniform grid of bucketed points for radius queries.
struct Buckets {
    cell: f64,
    map: std::collections::HashMap<(i64, i64), Vec<usize>>,
}

impl Buckets {
    fn new(points: &[[f64; 2]], cell: f64) -> Self {
        let mut map: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, map }
    }

    fn key(p: &[f64; 2], cell: f64) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    /// Nearest point strictly closer than `d` (ties go to the lower index).
    fn nearest(&self, points: &[[f64; 2]], q: [f64; 2], d: f64) -> Option<(usize, f64)> {
        let (cx, cy) = Self::key(&q, self.cell);
        let reach = (d / self.cell).ceil() as i64;
        let mut best: Option<(usize, f64)> = None;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let Some(ids) = self.map.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &i in ids {
                    let e = (points[i][0] - q[0]).hypot(points[i][1] - q[1]);
                    if e < d && best.is_none_or(|(bi, be)| e < be || (e == be && i < bi)) {
                        best = Some((i, e));
                    }
                }
            }
        }
        best
    }
}

/// Maps confident reference keypoints through the flow and pairs each with
/// its nearest query keypoint closer than `keypoint_dist`.
pub fn sparse_match(
    flow: &FlowField,
    pr: &Image,
    keypoints_ref: &[[f64; 2]],
    keypoints_query: &[[f64; 2]],
    cfg: &InferenceConfig,
) -> Result<MatchSet> {
    if keypoints_ref.is_empty() || keypoints_query.is_empty() {
        return Err(Error::TooFewMatches { need: 1, got: 0 });
    }
    if pr.width() != flow.width() || pr.height() != flow.height() {
        return Err(Error::ShapeMismatch("confidence map and flow differ in size".into()));
    }
    let index = Buckets::new(keypoints_query, cfg.keypoint_dist);
    let mut entries = Vec::new();
    let mut c = [0.0];
    for kp in keypoints_ref {
        let Some(f) = flow.sample(kp[0], kp[1]) else {
            continue;
        };
        pr.sample_clamped(kp[0], kp[1], &mut c);
        if c[0] < cfg.gamma {
            continue;
        }
        let mapped = [kp[0] + f[0], kp[1] + f[1]];
        if let Some((j, _)) = index.nearest(keypoints_query, mapped, cfg.keypoint_dist) {
            entries.push(MatchRecord {
                reference: *kp,
                query: keypoints_query[j],
                confidence: c[0].clamp(0.0, 1.0),
            });
        }
    }
    Ok(MatchSet { entries })
}

/// Keeps a reference-to-query match iff a query-to-reference match starts at
/// its query point and returns within `thresh` of its reference point.
pub fn cyclic_filter(c_rq: &MatchSet, c_qr: &MatchSet, thresh: f64) -> MatchSet {
    let entries = c_rq
        .entries
        .iter()
        .filter(|m| {
            c_qr.entries.iter().any(|r| {
                r.reference == m.query && (r.query[0] - m.reference[0]).hypot(r.query[1] - m.reference[1]) <= thresh
            })
        })
        .copied()
        .collect();
    MatchSet { entries }
}
