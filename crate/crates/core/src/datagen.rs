//! Synthetic training pairs: a warped base image, local flow perturbations and
//! independently moving objects, plus the injective and occlusion masks.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    compose_flows, elastic_field, gaussian_mask, homography_to_flow, sample_random_affine,
    sample_random_homography, warp_bilinear, AffineSpec, FlowField, Homography, HomographySpec,
    PerturbationSpec,
};
use crate::image::{Image, Mask};

/// Multi-octave value noise with optional flat patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub octaves: usize,
    /// Cell size of the coarsest octave, px.
    pub base_cell: f64,
    /// Approximate fraction of the frame replaced by constant-color patches.
    pub flat_fraction: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            octaves: 3,
            base_cell: 16.0,
            flat_fraction: 0.25,
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise<R: Rng + ?Sized>(width: usize, height: usize, cell: f64, rng: &mut R) -> Vec<f64> {
    let gw = (width as f64 / cell).ceil() as usize + 2;
    let gh = (height as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = y as f64 / cell;
        let iy = fy.floor() as usize;
        let ty = smoothstep(fy - iy as f64);
        for x in 0..width {
            let fx = x as f64 / cell;
            let ix = fx.floor() as usize;
            let tx = smoothstep(fx - ix as f64);
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
            let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Seeded RGB noise texture in `[0, 1]`.
pub fn noise_texture<R: Rng + ?Sized>(width: usize, height: usize, spec: &TextureSpec, rng: &mut R) -> Image {
    let mut im = Image::new(width, height, 3);
    for c in 0..3 {
        let mut acc = vec![0.0; width * height];
        let mut amp = 1.0;
        let mut norm = 0.0;
        let mut cell = spec.base_cell;
        for _ in 0..spec.octaves.max(1) {
            let n = value_noise(width, height, cell.max(2.0), rng);
            acc.iter_mut().zip(&n).for_each(|(a, v)| *a += amp * v);
            norm += amp;
            amp *= 0.5;
            cell /= 2.0;
        }
        let lo: f64 = rng.gen_range(0.0..0.3);
        let hi: f64 = rng.gen_range(0.7..1.0);
        for (i, v) in acc.iter().enumerate() {
            // Stretch the contrast: averaged noise concentrates near 0.5.
            let t = ((v / norm - 0.5) * 2.2 + 0.5).clamp(0.0, 1.0);
            im.data_mut()[i * 3 + c] = lo + (hi - lo) * t;
        }
    }
    if spec.flat_fraction > 0.0 {
        let region = value_noise(width, height, spec.base_cell * 2.0, rng);
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let threshold = 1.0 - spec.flat_fraction;
        for (i, &r) in region.iter().enumerate() {
            if r > threshold {
                im.data_mut()[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
        }
    }
    im
}

/// Geometry of the base pair: output crop size, margin of the larger canvas,
/// and the corner jitter of the background homography.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseSpec {
    pub width: usize,
    pub height: usize,
    pub margin: usize,
    pub jitter: f64,
}

impl BaseSpec {
    pub fn canvas(&self) -> (usize, usize) {
        (self.width + 2 * self.margin, self.height + 2 * self.margin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasePair {
    pub query: Image,
    pub reference: Image,
    pub flow: FlowField,
}

fn prepare_base(base: &Image, spec: &BaseSpec) -> Result<Image> {
    let (bw, bh) = spec.canvas();
    if base.width() < bw || base.height() < bh {
        return Err(Error::ImageTooSmall {
            need_w: bw,
            need_h: bh,
            got_w: base.width(),
            got_h: base.height(),
        });
    }
    if base.width() == bw && base.height() == bh {
        Ok(base.clone())
    } else {
        Ok(base.resize(bw, bh))
    }
}

/// Base pair for a known `transform` of the canvas. The transform moves
/// content: the reference shows the base image displaced by `transform`.
pub fn base_pair_from_transform(base: &Image, spec: &BaseSpec, transform: &Homography) -> Result<BasePair> {
    let canvas = prepare_base(base, spec)?;
    let (bw, bh) = spec.canvas();
    let flow_big = homography_to_flow(&transform.inverse(), bw, bh)?;
    let (reference_big, _) = warp_bilinear(&canvas, &flow_big)?;
    let m = spec.margin;
    Ok(BasePair {
        query: canvas.crop(m, m, spec.width, spec.height)?,
        reference: reference_big.crop(m, m, spec.width, spec.height)?,
        flow: flow_big.crop(m, m, spec.width, spec.height),
    })
}

/// Random background homography followed by the central crop of both frames.
pub fn generate_base_pair<R: Rng + ?Sized>(base: &Image, spec: &BaseSpec, rng: &mut R) -> Result<BasePair> {
    let (bw, bh) = spec.canvas();
    let t = sample_random_homography(&HomographySpec::centered(bw, bh, spec.jitter), rng)?;
    base_pair_from_transform(base, spec, &t)
}

/// Residual flow `sum_i E * S_i`, with each vector shortened so that its
/// target stays inside the pixel-center hull.
pub fn perturbation_residual<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    spec: &PerturbationSpec,
    rng: &mut R,
) -> FlowField {
    if spec.count == 0 {
        return FlowField::zeros(width, height);
    }
    let e = elastic_field(width, height, spec, rng);
    let mut s = vec![0.0; width * height];
    for _ in 0..spec.count {
        let c = [rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64)];
        let (lo, hi) = spec.mask_std_range;
        let std = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let m = gaussian_mask(c, std, width, height);
        s.iter_mut().zip(m.data()).for_each(|(a, b)| *a += b);
    }
    FlowField::from_fn(width, height, |x, y| {
        let k = s[y * width + x];
        let v = e.get(x, y);
        let (u, w) = (v[0] * k, v[1] * k);
        if u.abs().max(w.abs()) < 1e-6 {
            return [0.0, 0.0];
        }
        let tx = (x as f64 + u).clamp(0.0, (width - 1) as f64);
        let ty = (y as f64 + w).clamp(0.0, (height - 1) as f64);
        [tx - x as f64, ty - y as f64]
    })
}

/// Re-warps the reference by a random residual and composes the flow.
pub fn apply_perturbations<R: Rng + ?Sized>(pair: &BasePair, spec: &PerturbationSpec, rng: &mut R) -> Result<BasePair> {
    if spec.count == 0 {
        return Ok(pair.clone());
    }
    let (w, h) = (pair.reference.width(), pair.reference.height());
    let eps = perturbation_residual(w, h, spec, rng);
    let (reference, _) = warp_bilinear(&pair.reference, &eps)?;
    let flow = compose_flows(&pair.flow, &eps)?;
    Ok(BasePair {
        query: pair.query.clone(),
        reference,
        flow,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Visibility {
    Both,
    ReferenceOnly,
    QueryOnly,
}

/// One object to paste: its motion (reference to query), its support in the
/// reference frame, and a full-frame texture in reference coordinates.
#[derive(Debug, Clone)]
pub struct ObjectInsert {
    pub visibility: Visibility,
    pub motion: Homography,
    pub mask: Mask,
    pub texture: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLayer {
    pub priority: u32,
    pub visibility: Visibility,
    pub motion: Homography,
    pub mask_reference: Mask,
    pub mask_query: Mask,
}

#[derive(Debug, Clone)]
pub struct SamplePack {
    pub query: Image,
    pub reference: Image,
    pub gt_flow: FlowField,
    /// True marks pixels excluded from the loss.
    pub inj_mask: Mask,
    pub occ_mask: Mask,
    pub layers: Vec<ObjectLayer>,
    /// Layer whose content is shown at each reference pixel (0 = background).
    pub layer_reference: Vec<u32>,
    /// Topmost layer drawn at each query pixel.
    pub layer_query: Vec<u32>,
}

impl SamplePack {
    pub fn from_pair(pair: BasePair) -> Self {
        let (w, h) = (pair.reference.width(), pair.reference.height());
        Self {
            query: pair.query,
            reference: pair.reference,
            gt_flow: pair.flow,
            inj_mask: Mask::new(w, h),
            occ_mask: Mask::new(w, h),
            layers: Vec::new(),
            layer_reference: vec![0; w * h],
            layer_query: vec![0; w * h],
        }
    }

    pub fn width(&self) -> usize {
        self.reference.width()
    }

    pub fn height(&self) -> usize {
        self.reference.height()
    }

    /// Recomputes both masks from the current flow and layers.
    pub fn finalize(&mut self) {
        let (inj, occ) = compute_masks(self);
        self.inj_mask = inj;
        self.occ_mask = occ;
    }
}

/// Query-frame support of an object: forward splat of the reference mask
/// united with the inverse-sampled mask.
fn advect_mask(mask: &Mask, motion: &Homography) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            if let Some(p) = motion.apply(x as f64, y as f64) {
                let (qx, qy) = (p[0].round(), p[1].round());
                if qx >= 0.0 && qy >= 0.0 && (qx as usize) < w && (qy as usize) < h {
                    out.set(qx as usize, qy as usize, true);
                }
            }
        }
    }
    let inv = motion.inverse();
    for y in 0..h {
        for x in 0..w {
            if let Some(p) = inv.apply(x as f64, y as f64) {
                let (rx, ry) = (p[0].round(), p[1].round());
                if rx >= 0.0 && ry >= 0.0 && (rx as usize) < w && (ry as usize) < h && mask.get(rx as usize, ry as usize) {
                    out.set(x, y, true);
                }
            }
        }
    }
    out
}

/// Pastes an object on top of everything inserted so far.
pub fn insert_object(pack: &mut SamplePack, object: &ObjectInsert) -> Result<()> {
    let (w, h) = (pack.width(), pack.height());
    if object.mask.width() != w || object.mask.height() != h || object.texture.width() != w || object.texture.height() != h {
        return Err(Error::ShapeMismatch("object mask/texture must match the frame".into()));
    }
    let priority = pack.layers.len() as u32 + 1;
    let mask_query = advect_mask(&object.mask, &object.motion);
    let channels = pack.reference.channels();

    if object.visibility != Visibility::QueryOnly {
        let flow = homography_to_flow(&object.motion, w, h)?;
        for y in 0..h {
            for x in 0..w {
                if !object.mask.get(x, y) {
                    continue;
                }
                let src = object.texture.pixel(x, y).to_vec();
                pack.reference.pixel_mut(x, y).copy_from_slice(&src[..channels]);
                pack.layer_reference[y * w + x] = priority;
                if object.visibility == Visibility::Both {
                    pack.gt_flow.set(x, y, flow.get(x, y));
                    pack.gt_flow.set_valid(x, y, flow.is_valid(x, y));
                }
            }
        }
    }
    if object.visibility != Visibility::ReferenceOnly {
        let inv = object.motion.inverse();
        let mut px = vec![0.0; object.texture.channels()];
        for y in 0..h {
            for x in 0..w {
                if !mask_query.get(x, y) {
                    continue;
                }
                let p = inv.apply(x as f64, y as f64).unwrap_or([x as f64, y as f64]);
                object.texture.sample_clamped(p[0], p[1], &mut px);
                pack.query.pixel_mut(x, y).copy_from_slice(&px[..channels]);
                pack.layer_query[y * w + x] = priority;
            }
        }
    }
    pack.layers.push(ObjectLayer {
        priority,
        visibility: object.visibility,
        motion: object.motion,
        mask_reference: object.mask.clone(),
        mask_query,
    });
    Ok(())
}

/// Rounded query cell targeted by reference pixel `(x, y)`, if in view.
pub fn target_cell(flow: &FlowField, x: usize, y: usize) -> Option<(usize, usize)> {
    if !flow.is_valid(x, y) {
        return None;
    }
    let v = flow.get(x, y);
    let qx = (x as f64 + v[0]).round();
    let qy = (y as f64 + v[1]).round();
    if qx >= 0.0 && qy >= 0.0 && qx < flow.width() as f64 && qy < flow.height() as f64 {
        Some((qx as usize, qy as usize))
    } else {
        None
    }
}

/// `(injMask, occMask)`.
///
/// A reference pixel is occluded when the query content at its target cell
/// comes from a different layer than its own content. For every query cell
/// claimed by several reference pixels, the claimant whose layer is visible
/// there is kept (lowest raster index among equals); without a visible
/// claimant the highest-priority one is kept. All other claimants form the
/// injective mask, which is also added to the occlusion mask.
pub fn compute_masks(pack: &SamplePack) -> (Mask, Mask) {
    let (w, h) = (pack.width(), pack.height());
    let mut occ = Mask::new(w, h);
    let mut inj = Mask::new(w, h);
    let mut claims: HashMap<usize, Vec<usize>> = HashMap::new();
    for y in 0..h {
        for x in 0..w {
            if let Some((qx, qy)) = target_cell(&pack.gt_flow, x, y) {
                let cell = qy * w + qx;
                if pack.layer_query[cell] != pack.layer_reference[y * w + x] {
                    occ.set(x, y, true);
                }
                claims.entry(cell).or_default().push(y * w + x);
            }
        }
    }
    for (cell, ids) in claims {
        if ids.len() < 2 {
            continue;
        }
        let visible = pack.layer_query[cell];
        let keep = ids
            .iter()
            .copied()
            .filter(|&i| pack.layer_reference[i] == visible)
            .min()
            .unwrap_or_else(|| {
                // ids are in raster order: the first maximum wins.
                let best = ids.iter().map(|&i| pack.layer_reference[i]).max().unwrap();
                ids.iter().copied().find(|&i| pack.layer_reference[i] == best).unwrap()
            });
        for i in ids {
            if i != keep {
                inj.set(i % w, i / w, true);
                occ.set(i % w, i / w, true);
            }
        }
    }
    (inj, occ)
}

/// Ranges for the random moving objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub count: usize,
    pub insert_probability: f64,
    pub radius_range: (f64, f64),
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    pub max_shear: f64,
    pub max_translation: f64,
    pub reference_only_probability: f64,
    pub query_only_probability: f64,
    pub texture: TextureSpec,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self {
            count: 4,
            insert_probability: 0.8,
            radius_range: (4.0, 10.0),
            max_rotation: 0.25,
            scale_range: (0.9, 1.1),
            max_shear: 0.05,
            max_translation: 6.0,
            reference_only_probability: 0.15,
            query_only_probability: 0.15,
            texture: TextureSpec {
                octaves: 2,
                base_cell: 6.0,
                flat_fraction: 0.0,
            },
        }
    }
}

fn point_in_polygon(pts: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (a, b) = (pts[i], pts[j]);
        if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Random blob or star-shaped polygon around `center`.
pub fn random_shape<R: Rng + ?Sized>(width: usize, height: usize, center: [f64; 2], radius: f64, rng: &mut R) -> Mask {
    if rng.gen_bool(0.5) {
        let terms: Vec<(f64, f64)> = (2..=4)
            .map(|_| (rng.gen_range(0.0..0.15), rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        Mask::from_fn(width, height, |x, y| {
            let dx = x as f64 - center[0];
            let dy = y as f64 - center[1];
            let theta = dy.atan2(dx);
            let r = radius
                * (1.0
                    + terms
                        .iter()
                        .enumerate()
                        .map(|(k, (a, p))| a * ((k as f64 + 2.0) * theta + p).cos())
                        .sum::<f64>());
            dx * dx + dy * dy <= r * r
        })
    } else {
        let n = rng.gen_range(3..=7);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pts: Vec<[f64; 2]> = angles
            .iter()
            .map(|&a| {
                let r = radius * rng.gen_range(0.7..1.0);
                [center[0] + r * a.cos(), center[1] + r * a.sin()]
            })
            .collect();
        Mask::from_fn(width, height, |x, y| point_in_polygon(&pts, x as f64, y as f64))
    }
}

pub fn random_object<R: Rng + ?Sized>(width: usize, height: usize, spec: &ObjectSpec, rng: &mut R) -> Result<ObjectInsert> {
    let (lo, hi) = spec.radius_range;
    let radius = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let center = [rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64)];
    let mask = random_shape(width, height, center, radius, rng);
    let motion = sample_random_affine(
        &AffineSpec {
            center,
            max_rotation: spec.max_rotation,
            scale_range: spec.scale_range,
            max_shear: spec.max_shear,
            max_translation: spec.max_translation,
        },
        rng,
    )?;
    let texture = noise_texture(width, height, &spec.texture, rng);
    let u: f64 = rng.gen();
    let visibility = if u < spec.reference_only_probability {
        Visibility::ReferenceOnly
    } else if u < spec.reference_only_probability + spec.query_only_probability {
        Visibility::QueryOnly
    } else {
        Visibility::Both
    };
    Ok(ObjectInsert {
        visibility,
        motion,
        mask,
        texture,
    })
}

/// Full generation config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub base: BaseSpec,
    pub texture: TextureSpec,
    pub perturbation: PerturbationSpec,
    pub objects: ObjectSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            base: BaseSpec {
                width: 64,
                height: 64,
                margin: 16,
                jitter: 0.08,
            },
            texture: TextureSpec::default(),
            perturbation: PerturbationSpec::default(),
            objects: ObjectSpec::default(),
        }
    }
}

impl GenConfig {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// RNG stream of sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One complete sample. `bases` optionally supplies user images; otherwise
/// a procedural texture is drawn.
pub fn generate_sample<R: Rng + ?Sized>(config: &GenConfig, bases: &[Image], rng: &mut R) -> Result<SamplePack> {
    let (bw, bh) = config.base.canvas();
    let base = if bases.is_empty() {
        noise_texture(bw, bh, &config.texture, rng)
    } else {
        bases[rng.gen_range(0..bases.len())].clone()
    };
    let pair = generate_base_pair(&base, &config.base, rng)?;
    let pair = apply_perturbations(&pair, &config.perturbation, rng)?;
    let mut pack = SamplePack::from_pair(pair);
    let spec = &config.objects;
    if spec.count > 0 && rng.gen_bool(spec.insert_probability.clamp(0.0, 1.0)) {
        let n = rng.gen_range(1..=spec.count);
        for _ in 0..n {
            let obj = random_object(config.base.width, config.base.height, spec, rng)?;
            insert_object(&mut pack, &obj)?;
        }
    }
    pack.finalize();
    Ok(pack)
}

/// Writes `count` samples under `out` plus a manifest.
pub fn generate_dataset(config: &GenConfig, bases: &[Image], count: usize, seed: u64, out: &Path) -> Result<()> {
    use rayon::prelude::*;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    (0..count).into_par_iter().try_for_each(|i| {
        let mut rng = sample_rng(seed, i as u64);
        let pack = generate_sample(config, bases, &mut rng)?;
        crate::io::write_sample(&out.join(crate::io::sample_dir_name(i)), &pack)
    })?;
    crate::io::write_manifest(
        out,
        &crate::io::Manifest {
            seed,
            config_hash: config.hash(),
            count,
            width: config.base.width,
            height: config.base.height,
        },
    )
}
