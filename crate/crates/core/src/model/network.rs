//! The two-level probabilistic matcher: forward pass with cached
//! intermediates and the matching hand-written backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::correlation::{
    correlate, correlate_local_backward_query, slices_backward, soft_argmax, soft_argmax_backward, warp_features,
    warp_features_backward_flow, CorrelationMode, CorrelationVolume, Resampler,
};
use super::features::FrozenFeatures;
use super::tensor::{ConvSpec, ConvStack, StackCache, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{standard_normal, FlowField};
use crate::image::Image;
use crate::mixture::{ConstraintSpec, MixtureParams};

/// Scale applied to flow values (px) fed back into the network as inputs.
const FLOW_INPUT_SCALE: f64 = 0.1;
pub const STRIDES: [usize; 2] = [8, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub decoder_widths: (usize, usize),
    pub predictor_widths: (usize, usize),
    pub cum_channels: usize,
    pub cum_out: usize,
    pub radius: usize,
    pub feature_seed: u64,
    pub constraints: Vec<(f64, f64)>,
}

impl ModelConfig {
    pub fn for_image(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            decoder_widths: (32, 16),
            predictor_widths: (32, 16),
            cum_channels: 8,
            cum_out: 8,
            radius: 4,
            feature_seed: 7,
            constraints: ConstraintSpec::default_for_image(width, height).bounds().to_vec(),
        }
    }

    pub fn constraint_spec(&self) -> Result<ConstraintSpec> {
        ConstraintSpec::new(self.constraints.clone())
    }

    pub fn components(&self) -> usize {
        self.constraints.len()
    }

    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        (self.height / STRIDES[level], self.width / STRIDES[level])
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % 8 != 0 || self.height % 8 != 0 || self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!("model size {}x{} must be a multiple of 8, at least 16", self.width, self.height)));
        }
        if self.radius == 0 || self.cum_channels == 0 || self.cum_out == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.constraint_spec().map(|_| ())
    }

    /// Stable 64-bit digest of everything that shapes the parameter vector.
    pub fn arch_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let s = format!(
            "uncertflow-v1|{}x{}|{:?}|{:?}|{}|{}|{}|{}|{}",
            self.width,
            self.height,
            self.decoder_widths,
            self.predictor_widths,
            self.cum_channels,
            self.cum_out,
            self.radius,
            self.feature_seed,
            self.components()
        );
        let d = Sha256::digest(s.as_bytes());
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Parameter offsets of every learnable layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tau0: usize,
    pub tau1: usize,
    pub d0: ConvStack,
    pub g0: ConvStack,
    pub g0_head: ConvStack,
    pub q0: ConvStack,
    pub d1: ConvStack,
    pub g1: ConvStack,
    pub q1: ConvStack,
    pub total: usize,
    /// `w_off` of the final layer of each stack, for scaled initialization.
    heads: Vec<ConvSpec>,
}

struct Builder {
    next: usize,
}

impl Builder {
    fn conv(&mut self, cin: usize, cout: usize, k: usize, pad: usize) -> ConvSpec {
        let s = ConvSpec {
            cin,
            cout,
            k,
            stride: 1,
            pad,
            w_off: self.next,
            b_off: self.next + cout * cin * k * k,
        };
        self.next += s.num_params();
        s
    }

    fn scalar(&mut self) -> usize {
        self.next += 1;
        self.next - 1
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let m = cfg.components();
        let (h0, w0) = cfg.level_dims(0);
        let (a, b) = cfg.decoder_widths;
        let (qa, qb) = cfg.predictor_widths;
        let (nc, n) = (cfg.cum_channels, cfg.cum_out);
        let disp1 = (2 * cfg.radius + 1).pow(2);
        let mut bld = Builder { next: 0 };
        let tau0 = bld.scalar();
        let tau1 = bld.scalar();
        let stack = |bld: &mut Builder, dims: &[usize], k: usize, pad: usize, last_linear: bool| ConvStack {
            layers: dims.windows(2).map(|p| bld.conv(p[0], p[1], k, pad)).collect(),
            last_linear,
        };
        let d0 = stack(&mut bld, &[h0 * w0 + 2, a, b, 2], 3, 1, true);
        let g0 = stack(&mut bld, &[1, nc, nc], 3, 1, false);
        let g0_head = stack(&mut bld, &[nc, n], 1, 0, true);
        let q0 = stack(&mut bld, &[n + b, qa, qb, 2 * m], 3, 1, true);
        let d1 = stack(&mut bld, &[disp1 + 2 + 2 * m + 2, a, b, 2], 3, 1, true);
        let mut g1_dims = vec![1];
        g1_dims.extend(std::iter::repeat(nc).take(cfg.radius - 1));
        g1_dims.push(n);
        let g1 = stack(&mut bld, &g1_dims, 3, 0, true);
        let q1 = stack(&mut bld, &[n + b + 2 * m + 2, qa, qb, 2 * m], 3, 1, true);
        let heads = [&d0, &g0_head, &q0, &d1, &g1, &q1]
            .iter()
            .map(|s| *s.layers.last().unwrap())
            .collect();
        Self {
            tau0,
            tau1,
            d0,
            g0,
            g0_head,
            q0,
            d1,
            g1,
            q1,
            total: bld.next,
            heads,
        }
    }

    pub fn stacks(&self) -> [&ConvStack; 7] {
        [&self.d0, &self.g0, &self.g0_head, &self.q0, &self.d1, &self.g1, &self.q1]
    }
}

/// Frozen extractor, learnable parameters and their layout.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub constraints: ConstraintSpec,
    pub features: FrozenFeatures,
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl ModelWeights {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        for stack in layout.stacks() {
            for l in &stack.layers {
                let fan = (l.cin * l.k * l.k) as f64;
                for p in &mut params[l.w_off..l.b_off] {
                    *p = standard_normal(&mut rng) / fan.sqrt();
                }
            }
        }
        for head in &layout.heads {
            params[head.w_off..head.b_off].iter_mut().for_each(|p| *p *= 0.1);
        }
        // Start the free variances well inside their range.
        let m = config.components();
        for q in [&layout.q0, &layout.q1] {
            let head = q.layers.last().unwrap();
            for k in 0..m {
                params[head.b_off + m + k] = -3.0;
            }
        }
        params[layout.tau0] = 10f64.ln();
        params[layout.tau1] = 10f64.ln();
        Ok(Self {
            constraints: config.constraint_spec()?,
            features: FrozenFeatures::new(config.feature_seed),
            config,
            layout,
            params,
        })
    }

    pub fn with_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut w = Self::init(config, 0)?;
        if params.len() != w.layout.total {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                w.layout.total,
                params.len()
            )));
        }
        w.params = params;
        Ok(w)
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }
}

/// Mixture parameters of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub level: usize,
    /// `1 x 2 x h x w`, px at full resolution.
    pub mu: Tensor,
    /// `1 x M x h x w`.
    pub logits: Tensor,
    /// `1 x M x h x w`.
    pub raw: Tensor,
}

impl LevelPrediction {
    fn from_parts(level: usize, mu: &Tensor, phi: &Tensor, m: usize) -> Self {
        let parts = phi.split(&[m, m]);
        Self {
            level,
            mu: mu.clone(),
            logits: parts[0].clone(),
            raw: parts[1].clone(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.mu.h, self.mu.w)
    }

    pub fn params_at(&self, i: usize, j: usize, spec: &ConstraintSpec) -> MixtureParams {
        let m = self.logits.c;
        MixtureParams {
            mu: [self.mu.at(0, 0, i, j), self.mu.at(0, 1, i, j)],
            component_logits: (0..m).map(|k| self.logits.at(0, k, i, j)).collect(),
            raw_scales: (0..m).map(|k| self.raw.at(0, k, i, j)).collect(),
            constraints: spec.clone(),
        }
    }
}

/// Per-pixel correlation-uncertainty vectors from per-slice outputs
/// `(h*w) x n x 1 x 1`.
fn gather_u(out: &Tensor, h: usize, w: usize) -> Tensor {
    let n = out.c;
    let mut u = Tensor::zeros(1, n, h, w);
    for p in 0..h * w {
        for c in 0..n {
            u.data[c * h * w + p] = out.data[p * n + c];
        }
    }
    u
}

fn scatter_u(g: &Tensor) -> Tensor {
    let (n, hw) = (g.c, g.h * g.w);
    let mut out = Tensor::zeros(hw, n, 1, 1);
    for p in 0..hw {
        for c in 0..n {
            out.data[p * n + c] = g.data[c * hw + p];
        }
    }
    out
}

fn global_pool(x: &Tensor) -> Tensor {
    let hw = (x.h * x.w) as f64;
    let mut out = Tensor::zeros(x.n, x.c, 1, 1);
    for n in 0..x.n {
        for c in 0..x.c {
            out.data[n * x.c + c] = x.plane(n, c).iter().sum::<f64>() / hw;
        }
    }
    out
}

fn global_pool_backward(g: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(g.n, g.c, h, w);
    let s = 1.0 / (h * w) as f64;
    for n in 0..g.n {
        for c in 0..g.c {
            let v = g.data[n * g.c + c] * s;
            out.plane_mut(n, c).iter_mut().for_each(|x| *x = v);
        }
    }
    out
}

/// Correlation-uncertainty module: each displacement slice is processed on
/// its own and reduced to an `n`-vector.
#[derive(Debug, Clone)]
pub struct CumCache {
    body: StackCache,
    pooled: Option<(Tensor, StackCache)>,
}

fn cum_forward(weights: &ModelWeights, vol: &CorrelationVolume, level: usize) -> (Tensor, CumCache) {
    let lay = &weights.layout;
    let p = &weights.params;
    let slices = vol.slices();
    if level == 0 {
        let (body_out, body) = lay.g0.forward(p, &slices);
        let pooled = global_pool(&body_out);
        let (out, head) = lay.g0_head.forward(p, &pooled);
        let u = gather_u(&out, vol.h(), vol.w());
        (
            u,
            CumCache {
                body,
                pooled: Some((body_out, head)),
            },
        )
    } else {
        let (out, body) = lay.g1.forward(p, &slices);
        let u = gather_u(&out, vol.h(), vol.w());
        (u, CumCache { body, pooled: None })
    }
}

/// Returns the slice-batch input gradient when `need_input` is set.
fn cum_backward(weights: &ModelWeights, cache: &CumCache, g_u: &Tensor, grads: &mut [f64], level: usize, need_input: bool) -> Option<Tensor> {
    let lay = &weights.layout;
    let p = &weights.params;
    let g_out = scatter_u(g_u);
    if level == 0 {
        let (body_out, head) = cache.pooled.as_ref().expect("level-0 cache");
        let g_pooled = lay.g0_head.backward(p, head, &g_out, None, grads, true).unwrap();
        let g_body = global_pool_backward(&g_pooled, body_out.h, body_out.w);
        lay.g0.backward(p, &cache.body, &g_body, None, grads, need_input)
    } else {
        lay.g1.backward(p, &cache.body, &g_out, None, grads, need_input)
    }
}

/// Output `u` of the correlation-uncertainty module for a volume.
pub fn correlation_uncertainty_forward(weights: &ModelWeights, vol: &CorrelationVolume, level: usize) -> Tensor {
    cum_forward(weights, vol, level).0
}

/// Level-0 intermediates.
#[derive(Debug, Clone)]
pub struct Level0State {
    c0: CorrelationVolume,
    p0: Vec<f64>,
    tau0: f64,
    d0: StackCache,
    cum0: CumCache,
    pub mu0: Tensor,
    q0: StackCache,
    pub phi0: Tensor,
}

/// Level-1 intermediates that precede the learnable level-1 stacks.
#[derive(Debug, Clone)]
pub struct Level1Inputs {
    up: Resampler,
    mu0u: Tensor,
    mu0u_in: Tensor,
    phi0u: Tensor,
    shift: Tensor,
    c1: CorrelationVolume,
    p1: Vec<f64>,
    tau1: f64,
    b1: Tensor,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fr1: Tensor,
    fq1: Tensor,
    pub level0: Level0State,
    pub inputs1: Level1Inputs,
    d1: StackCache,
    r1: Tensor,
    cum1: CumCache,
    u1: Tensor,
    q1: StackCache,
}

fn image_dims_match(weights: &ModelWeights, query: &Image, reference: &Image) -> Result<()> {
    let cfg = &weights.config;
    for im in [query, reference] {
        if im.width() != cfg.width || im.height() != cfg.height {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}x{} images, got {}x{}",
                cfg.width,
                cfg.height,
                im.width(),
                im.height()
            )));
        }
    }
    Ok(())
}

/// Frozen features of both images, `(fr1, fr0, fq1, fq0)`.
pub fn pair_features(query: &Image, reference: &Image, weights: &ModelWeights) -> Result<[Tensor; 4]> {
    image_dims_match(weights, query, reference)?;
    let (fr1, fr0) = weights.features.forward(reference)?;
    let (fq1, fq0) = weights.features.forward(query)?;
    Ok([fr1, fr0, fq1, fq0])
}

/// Global matching at the coarsest level.
pub fn level0_forward(weights: &ModelWeights, fr0: &Tensor, fq0: &Tensor) -> Result<Level0State> {
    let lay = &weights.layout;
    let p = &weights.params;
    let c0 = correlate(fr0, fq0, CorrelationMode::Global)?;
    let tau0 = p[lay.tau0].exp();
    let (b0, p0) = soft_argmax(&c0, tau0, STRIDES[0] as f64);
    let x0 = Tensor::concat(&[&c0.values, &b0.scaled(FLOW_INPUT_SCALE)]);
    let (r0, d0) = lay.d0.forward(p, &x0);
    let mut mu0 = b0;
    mu0.add_assign(&r0);
    let (u0, cum0) = cum_forward(weights, &c0, 0);
    let (phi0, q0) = lay.q0.forward(p, &Tensor::concat(&[&u0, d0.penultimate()]));
    Ok(Level0State {
        c0,
        p0,
        tau0,
        d0,
        cum0,
        mu0,
        q0,
        phi0,
    })
}

/// Upsampling, warping and local correlation around the coarse flow.
pub fn level1_inputs(weights: &ModelWeights, l0: &Level0State, fr1: &Tensor, fq1: &Tensor) -> Result<Level1Inputs> {
    let up = Resampler::new(l0.mu0.h, l0.mu0.w, fr1.h, fr1.w);
    let mu0u = up.forward(&l0.mu0);
    let phi0u = up.forward(&l0.phi0);
    let shift = mu0u.scaled(1.0 / STRIDES[1] as f64);
    let fqw = warp_features(fq1, &shift);
    let c1 = correlate(fr1, &fqw, CorrelationMode::Local(weights.config.radius))?;
    let tau1 = weights.params[weights.layout.tau1].exp();
    let (b1, p1) = soft_argmax(&c1, tau1, STRIDES[1] as f64);
    Ok(Level1Inputs {
        up,
        mu0u_in: mu0u.scaled(FLOW_INPUT_SCALE),
        mu0u,
        phi0u,
        shift,
        c1,
        p1,
        tau1,
        b1,
    })
}

pub fn level1_decoder(weights: &ModelWeights, inp: &Level1Inputs) -> (Tensor, StackCache) {
    let x1 = Tensor::concat(&[&inp.c1.values, &inp.mu0u_in, &inp.phi0u, &inp.b1.scaled(FLOW_INPUT_SCALE)]);
    weights.layout.d1.forward(&weights.params, &x1)
}

pub fn level1_cum(weights: &ModelWeights, inp: &Level1Inputs) -> (Tensor, CumCache) {
    cum_forward(weights, &inp.c1, 1)
}

pub fn level1_head(weights: &ModelWeights, inp: &Level1Inputs, d1: &StackCache, u1: &Tensor) -> (Tensor, StackCache) {
    let x = Tensor::concat(&[u1, d1.penultimate(), &inp.phi0u, &inp.mu0u_in]);
    weights.layout.q1.forward(&weights.params, &x)
}

pub fn level1_mu(inp: &Level1Inputs, r1: &Tensor) -> Tensor {
    let mut mu1 = inp.mu0u.clone();
    mu1.add_assign(&inp.b1);
    mu1.add_assign(r1);
    mu1
}

/// Level predictions from the two stage outputs.
pub fn assemble(weights: &ModelWeights, l0: &Level0State, mu1: &Tensor, phi1: &Tensor) -> Vec<LevelPrediction> {
    let m = weights.config.components();
    vec![
        LevelPrediction::from_parts(0, &l0.mu0, &l0.phi0, m),
        LevelPrediction::from_parts(1, mu1, phi1, m),
    ]
}

/// Coarse-to-fine predictions, level 0 first.
pub fn forward(query: &Image, reference: &Image, weights: &ModelWeights) -> Result<Vec<LevelPrediction>> {
    Ok(forward_cached(query, reference, weights)?.0)
}

pub fn forward_cached(query: &Image, reference: &Image, weights: &ModelWeights) -> Result<(Vec<LevelPrediction>, ForwardCache)> {
    let [fr1, fr0, fq1, fq0] = pair_features(query, reference, weights)?;
    forward_from_features(weights, fr1, &fr0, fq1, &fq0)
}

pub fn forward_from_features(
    weights: &ModelWeights,
    fr1: Tensor,
    fr0: &Tensor,
    fq1: Tensor,
    fq0: &Tensor,
) -> Result<(Vec<LevelPrediction>, ForwardCache)> {
    let level0 = level0_forward(weights, fr0, fq0)?;
    let inputs1 = level1_inputs(weights, &level0, &fr1, &fq1)?;
    let (r1, d1) = level1_decoder(weights, &inputs1);
    let (u1, cum1) = level1_cum(weights, &inputs1);
    let (phi1, q1) = level1_head(weights, &inputs1, &d1, &u1);
    let preds = assemble(weights, &level0, &level1_mu(&inputs1, &r1), &phi1);
    Ok((
        preds,
        ForwardCache {
            fr1,
            fq1,
            level0,
            inputs1,
            d1,
            r1,
            cum1,
            u1,
            q1,
        },
    ))
}

impl ForwardCache {
    /// Predictions after re-running only the level-1 decoder and head.
    pub fn rerun_decoder1(&self, weights: &ModelWeights) -> Vec<LevelPrediction> {
        let (r1, d1) = level1_decoder(weights, &self.inputs1);
        let (phi1, _) = level1_head(weights, &self.inputs1, &d1, &self.u1);
        assemble(weights, &self.level0, &level1_mu(&self.inputs1, &r1), &phi1)
    }

    /// Predictions after re-running only the level-1 correlation-uncertainty
    /// module and head.
    pub fn rerun_cum1(&self, weights: &ModelWeights) -> Vec<LevelPrediction> {
        let (u1, _) = level1_cum(weights, &self.inputs1);
        let (phi1, _) = level1_head(weights, &self.inputs1, &self.d1, &u1);
        assemble(weights, &self.level0, &level1_mu(&self.inputs1, &self.r1), &phi1)
    }

    /// Predictions after re-running only the level-1 head.
    pub fn rerun_head1(&self, weights: &ModelWeights) -> Vec<LevelPrediction> {
        let (phi1, _) = level1_head(weights, &self.inputs1, &self.d1, &self.u1);
        assemble(weights, &self.level0, &level1_mu(&self.inputs1, &self.r1), &phi1)
    }

    /// Predictions after re-running the level-0 uncertainty branch and the
    /// level-1 stacks that consume its output.
    pub fn rerun_uncertainty0(&self, weights: &ModelWeights) -> Vec<LevelPrediction> {
        let l0 = &self.level0;
        let (u0, _) = cum_forward(weights, &l0.c0, 0);
        let (phi0, _) = weights.layout.q0.forward(&weights.params, &Tensor::concat(&[&u0, l0.d0.penultimate()]));
        let mut inputs1 = self.inputs1.clone();
        inputs1.phi0u = inputs1.up.forward(&phi0);
        let (r1, d1) = level1_decoder(weights, &inputs1);
        let (phi1, _) = level1_head(weights, &inputs1, &d1, &self.u1);
        let m = weights.config.components();
        vec![
            LevelPrediction::from_parts(0, &l0.mu0, &phi0, m),
            LevelPrediction::from_parts(1, &level1_mu(&inputs1, &r1), &phi1, m),
        ]
    }

    /// Predictions after re-running everything past the frozen features.
    pub fn rerun_all(&self, weights: &ModelWeights, fr0: &Tensor, fq0: &Tensor) -> Result<Vec<LevelPrediction>> {
        Ok(forward_from_features(weights, self.fr1.clone(), fr0, self.fq1.clone(), fq0)?.0)
    }
}

/// Loss gradients with respect to one level's outputs.
#[derive(Debug, Clone)]
pub struct LevelGradient {
    pub mu: Tensor,
    pub logits: Tensor,
    pub raw: Tensor,
}

impl LevelGradient {
    pub fn zeros_for(pred: &LevelPrediction) -> Self {
        Self {
            mu: Tensor::zeros_like(&pred.mu),
            logits: Tensor::zeros_like(&pred.logits),
            raw: Tensor::zeros_like(&pred.raw),
        }
    }
}

/// Accumulates parameter gradients for the given output gradients.
pub fn backward(weights: &ModelWeights, cache: &ForwardCache, g: &[LevelGradient], grads: &mut [f64]) {
    let lay = &weights.layout;
    let p = &weights.params;
    let cfg = &weights.config;
    let m = cfg.components();
    let d = cfg.radius;
    let hidden = cfg.decoder_widths.1;
    let n_u = cfg.cum_out;
    let disp1 = (2 * d + 1).pow(2);

    // Level 1.
    let g_phi1 = Tensor::concat(&[&g[1].logits, &g[1].raw]);
    let gq1 = lay.q1.backward(p, &cache.q1, &g_phi1, None, grads, true).unwrap();
    let parts = gq1.split(&[n_u, hidden, 2 * m, 2]);
    let (g_u1, g_hidden1, mut g_phi0u, g_mu0u_in_q) = (&parts[0], &parts[1], parts[2].clone(), &parts[3]);

    let mut g_mu0u = g[1].mu.clone();
    let mut g_b1 = g[1].mu.clone();
    let gx1 = lay.d1.backward(p, &cache.d1, &g[1].mu, Some(g_hidden1), grads, true).unwrap();
    let parts = gx1.split(&[disp1, 2, 2 * m, 2]);
    let mut g_c1 = parts[0].clone();
    g_mu0u.add_assign(&parts[1].scaled(FLOW_INPUT_SCALE));
    g_mu0u.add_assign(&g_mu0u_in_q.scaled(FLOW_INPUT_SCALE));
    g_phi0u.add_assign(&parts[2]);
    g_b1.add_assign(&parts[3].scaled(FLOW_INPUT_SCALE));

    if let Some(g_slices) = cum_backward(weights, &cache.cum1, g_u1, grads, 1, true) {
        slices_backward(&g_slices, &mut g_c1);
    }
    let g_tau1 = soft_argmax_backward(&cache.inputs1.c1, &cache.inputs1.p1, cache.inputs1.tau1, STRIDES[1] as f64, &g_b1, Some(&mut g_c1));
    grads[lay.tau1] += g_tau1 * cache.inputs1.tau1;

    let g_fqw = correlate_local_backward_query(&cache.fr1, &g_c1, d);
    let g_shift = warp_features_backward_flow(&cache.fq1, &cache.inputs1.shift, &g_fqw);
    g_mu0u.add_assign(&g_shift.scaled(1.0 / STRIDES[1] as f64));

    // Level 0.
    let mut g_mu0 = cache.inputs1.up.backward(&g_mu0u);
    g_mu0.add_assign(&g[0].mu);
    let mut g_phi0 = cache.inputs1.up.backward(&g_phi0u);
    g_phi0.add_assign(&Tensor::concat(&[&g[0].logits, &g[0].raw]));

    let gq0 = lay.q0.backward(p, &cache.level0.q0, &g_phi0, None, grads, true).unwrap();
    let parts = gq0.split(&[n_u, hidden]);
    cum_backward(weights, &cache.level0.cum0, &parts[0], grads, 0, false);
    let gx0 = lay.d0.backward(p, &cache.level0.d0, &g_mu0, Some(&parts[1]), grads, true).unwrap();
    let c0_ch = cache.level0.c0.values.c;
    let parts0 = gx0.split(&[c0_ch, 2]);
    let mut g_b0 = g_mu0.clone();
    g_b0.add_assign(&parts0[1].scaled(FLOW_INPUT_SCALE));
    let g_tau0 = soft_argmax_backward(&cache.level0.c0, &cache.level0.p0, cache.level0.tau0, STRIDES[0] as f64, &g_b0, None);
    grads[lay.tau0] += g_tau0 * cache.level0.tau0;
}

/// Full-resolution flow and mixture parameters from the finest level.
#[derive(Debug, Clone)]
pub struct DensePrediction {
    pub flow: FlowField,
    /// `M` channels each.
    pub logits: Image,
    pub raw: Image,
    pub constraints: ConstraintSpec,
}

impl DensePrediction {
    pub fn from_level(pred: &LevelPrediction, width: usize, height: usize, constraints: &ConstraintSpec) -> Self {
        let up = Resampler::new(pred.mu.h, pred.mu.w, height, width);
        let mu = up.forward(&pred.mu);
        let lg = up.forward(&pred.logits);
        let rw = up.forward(&pred.raw);
        let m = pred.logits.c;
        let hw = width * height;
        let flow = FlowField::from_fn(width, height, |x, y| [mu.data[y * width + x], mu.data[hw + y * width + x]]);
        let to_image = |t: &Tensor| Image::from_fn(width, height, m, |x, y, c| t.data[c * hw + y * width + x]);
        Self {
            flow,
            logits: to_image(&lg),
            raw: to_image(&rw),
            constraints: constraints.clone(),
        }
    }

    pub fn params_at(&self, x: usize, y: usize) -> MixtureParams {
        MixtureParams {
            mu: self.flow.get(x, y),
            component_logits: self.logits.pixel(x, y).to_vec(),
            raw_scales: self.raw.pixel(x, y).to_vec(),
            constraints: self.constraints.clone(),
        }
    }

    /// `P_R` per pixel.
    pub fn confidence(&self, r: f64) -> Image {
        Image::from_fn(self.flow.width(), self.flow.height(), 1, |x, y, _| {
            crate::mixture::confidence_pr_raw(self.logits.pixel(x, y), self.raw.pixel(x, y), &self.constraints, r)
        })
    }

    /// Mixture variance per pixel.
    pub fn variance(&self) -> Image {
        Image::from_fn(self.flow.width(), self.flow.height(), 1, |x, y, _| {
            crate::mixture::mixture_variance_raw(self.logits.pixel(x, y), self.raw.pixel(x, y), &self.constraints)
        })
    }
}

/// Single forward pass at full resolution.
pub fn predict(query: &Image, reference: &Image, weights: &ModelWeights) -> Result<DensePrediction> {
    let preds = forward(query, reference, weights)?;
    Ok(DensePrediction::from_level(
        &preds[1],
        weights.config.width,
        weights.config.height,
        &weights.constraints,
    ))
}
