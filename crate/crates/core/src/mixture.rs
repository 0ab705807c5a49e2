//! Constrained mixture of Laplace distributions over a 2D flow vector.
//!
//! Every component shares the mean `mu` and uses one variance `sigma2_m` for
//! both axes, so a component density is
//! `1 / (2 sigma2) * exp(-sqrt(2 / sigma2) * |y - mu|_1)`. Component variances
//! are squeezed into ordered intervals `[beta_minus_m, beta_plus_m]` through a
//! sigmoid of an unconstrained value, which makes component roles
//! identifiable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_2: f64 = std::f64::consts::LN_2;

/// Ordered variance intervals, one per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    bounds: Vec<(f64, f64)>,
}

impl ConstraintSpec {
    /// Validates the chain `0 < b1- <= b1+ <= b2- <= ... <= bM+` and the
    /// unit lower bound on the first component.
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::InvalidConstraint("need at least one component".into()));
        }
        let mut prev = 0.0;
        for (m, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::InvalidConstraint(format!("component {m}: non-finite bound")));
            }
            if lo > hi {
                return Err(Error::InvalidConstraint(format!(
                    "component {m}: beta_minus {lo} > beta_plus {hi}"
                )));
            }
            if lo < prev {
                return Err(Error::InvalidConstraint(format!(
                    "component {m}: beta_minus {lo} below previous bound {prev}"
                )));
            }
            prev = hi;
        }
        if bounds[0].0 < 1.0 {
            return Err(Error::InvalidConstraint(format!(
                "first component lower bound {} must be >= 1",
                bounds[0].0
            )));
        }
        Ok(Self { bounds })
    }

    /// Two components: `sigma2_1 = 1` fixed, `2 <= sigma2_2 <= height * width`.
    pub fn default_for_image(width: usize, height: usize) -> Self {
        let upper = ((width * height) as f64).max(2.0);
        Self {
            bounds: vec![(1.0, 1.0), (2.0, upper)],
        }
    }

    pub fn num_components(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn is_fixed(&self, m: usize) -> bool {
        let (lo, hi) = self.bounds[m];
        lo == hi
    }

    /// Variance of component `m` for the unconstrained value `h`.
    pub fn variance(&self, m: usize, h: f64) -> f64 {
        let (lo, hi) = self.bounds[m];
        constrain_variance(h, lo, hi)
    }
}

/// Per-pixel predictive distribution parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub mu: [f64; 2],
    pub component_logits: Vec<f64>,
    pub raw_scales: Vec<f64>,
    pub constraints: ConstraintSpec,
}

/// Gradient of [`nll`] with respect to the raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGradient {
    pub mu: [f64; 2],
    pub component_logits: Vec<f64>,
    pub raw_scales: Vec<f64>,
}

impl MixtureParams {
    pub fn new(
        mu: [f64; 2],
        component_logits: Vec<f64>,
        raw_scales: Vec<f64>,
        constraints: ConstraintSpec,
    ) -> Result<Self> {
        let m = constraints.num_components();
        if component_logits.len() != m || raw_scales.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "expected {m} logits and raw scales, got {} and {}",
                component_logits.len(),
                raw_scales.len()
            )));
        }
        Ok(Self {
            mu,
            component_logits,
            raw_scales,
            constraints,
        })
    }

    /// SoftMax of the component logits.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.component_logits.len()];
        softmax_into(&self.component_logits, &mut w);
        w
    }

    /// Constrained variances `sigma2_m`.
    pub fn variances(&self) -> Vec<f64> {
        self.raw_scales
            .iter()
            .enumerate()
            .map(|(m, &h)| self.constraints.variance(m, h))
            .collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps an unconstrained `h` into `[beta_minus, beta_plus]`.
pub fn constrain_variance(h: f64, beta_minus: f64, beta_plus: f64) -> f64 {
    if beta_minus == beta_plus {
        return beta_minus;
    }
    let v = beta_minus + (beta_plus - beta_minus) * sigmoid(h);
    v.clamp(beta_minus, beta_plus)
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
fn l1(y: [f64; 2], mu: [f64; 2]) -> f64 {
    (y[0] - mu[0]).abs() + (y[1] - mu[1]).abs()
}

/// Mixture density at `y` (units px^-2).
pub fn density(y: [f64; 2], params: &MixtureParams) -> f64 {
    let d = l1(y, params.mu);
    params
        .weights()
        .iter()
        .zip(params.variances())
        .map(|(&a, s2)| a / (2.0 * s2) * (-(2.0 / s2).sqrt() * d).exp())
        .sum()
}

/// `-log density(y)` evaluated in log-variance space with logsumexp.
pub fn nll(y: [f64; 2], params: &MixtureParams) -> f64 {
    nll_raw(
        y,
        params.mu,
        &params.component_logits,
        &params.raw_scales,
        &params.constraints,
    )
}

pub(crate) fn nll_raw(
    y: [f64; 2],
    mu: [f64; 2],
    logits: &[f64],
    raw: &[f64],
    spec: &ConstraintSpec,
) -> f64 {
    let d = l1(y, mu);
    let terms: Vec<f64> = (0..logits.len())
        .map(|k| {
            let s = spec.variance(k, raw[k]).ln();
            logits[k] - LN_2 - s - SQRT_2 * (-0.5 * s).exp() * d
        })
        .collect();
    logsumexp(logits) - logsumexp(&terms)
}

/// Accumulates `scale * d nll / d(raw params)` into the given buffers and
/// returns the nll. Subgradient 0 is used where `y_axis == mu_axis`.
pub(crate) fn nll_grad_raw(
    y: [f64; 2],
    mu: [f64; 2],
    logits: &[f64],
    raw: &[f64],
    spec: &ConstraintSpec,
    scale: f64,
    g_mu: &mut [f64; 2],
    g_logits: &mut [f64],
    g_raw: &mut [f64],
) -> f64 {
    let m = logits.len();
    let d = l1(y, mu);
    let mut alpha = vec![0.0; m];
    softmax_into(logits, &mut alpha);
    let mut terms = vec![0.0; m];
    let mut inv_sigma = vec![0.0; m];
    let mut var = vec![0.0; m];
    for k in 0..m {
        var[k] = spec.variance(k, raw[k]);
        let s = var[k].ln();
        inv_sigma[k] = (-0.5 * s).exp();
        terms[k] = logits[k] - LN_2 - s - SQRT_2 * inv_sigma[k] * d;
    }
    let value = logsumexp(logits) - logsumexp(&terms);
    let mut resp = vec![0.0; m];
    softmax_into(&terms, &mut resp);

    let sign = |e: f64| {
        if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let su = sign(y[0] - mu[0]);
    let sv = sign(y[1] - mu[1]);
    let mut dmu = 0.0;
    for k in 0..m {
        g_logits[k] += scale * (alpha[k] - resp[k]);
        dmu += resp[k] * SQRT_2 * inv_sigma[k];
        if !spec.is_fixed(k) {
            let (lo, hi) = spec.bounds()[k];
            let ds = resp[k] * (1.0 - inv_sigma[k] * d / SQRT_2);
            let sg = sigmoid(raw[k]);
            let dvar = (hi - lo) * sg * (1.0 - sg);
            g_raw[k] += scale * ds * dvar / var[k];
        }
    }
    g_mu[0] -= scale * dmu * su;
    g_mu[1] -= scale * dmu * sv;
    value
}

/// Analytic gradient of [`nll`] with respect to `mu`, the component logits and
/// the raw scales.
pub fn nll_gradient(y: [f64; 2], params: &MixtureParams) -> MixtureGradient {
    let m = params.component_logits.len();
    let mut g = MixtureGradient {
        mu: [0.0; 2],
        component_logits: vec![0.0; m],
        raw_scales: vec![0.0; m],
    };
    nll_grad_raw(
        y,
        params.mu,
        &params.component_logits,
        &params.raw_scales,
        &params.constraints,
        1.0,
        &mut g.mu,
        &mut g.component_logits,
        &mut g.raw_scales,
    );
    g
}

/// Probability mass inside the L-infinity box of radius `r` around `mu`.
pub fn confidence_pr(params: &MixtureParams, r: f64) -> f64 {
    confidence_pr_raw(&params.component_logits, &params.raw_scales, &params.constraints, r)
}

pub(crate) fn confidence_pr_raw(logits: &[f64], raw: &[f64], spec: &ConstraintSpec, r: f64) -> f64 {
    let m = logits.len();
    let mut alpha = vec![0.0; m];
    softmax_into(logits, &mut alpha);
    let r = r.max(0.0);
    let p: f64 = (0..m)
        .map(|k| {
            let sigma = spec.variance(k, raw[k]).sqrt();
            let one_axis = -(-SQRT_2 * r / sigma).exp_m1();
            alpha[k] * one_axis * one_axis
        })
        .sum();
    p.clamp(0.0, 1.0)
}

/// `sum_m alpha_m sigma2_m`.
pub fn mixture_variance(params: &MixtureParams) -> f64 {
    mixture_variance_raw(&params.component_logits, &params.raw_scales, &params.constraints)
}

pub(crate) fn mixture_variance_raw(logits: &[f64], raw: &[f64], spec: &ConstraintSpec) -> f64 {
    let mut alpha = vec![0.0; logits.len()];
    softmax_into(logits, &mut alpha);
    alpha
        .iter()
        .enumerate()
        .map(|(k, a)| a * spec.variance(k, raw[k]))
        .sum()
}

/// Draws one flow vector: a component by weight, then each axis from a
/// Laplace with scale `sigma_m / sqrt(2)`.
pub fn sample<R: Rng + ?Sized>(params: &MixtureParams, rng: &mut R) -> [f64; 2] {
    let weights = params.weights();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut comp = weights.len() - 1;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            comp = k;
            break;
        }
    }
    // A zero-weight trailing component must never be picked by rounding.
    while weights[comp] == 0.0 && comp > 0 {
        comp -= 1;
    }
    let b = params.constraints.variance(comp, params.raw_scales[comp]).sqrt() / SQRT_2;
    [
        params.mu[0] + laplace(rng, b),
        params.mu[1] + laplace(rng, b),
    ]
}

fn laplace<R: Rng + ?Sized>(rng: &mut R, b: f64) -> f64 {
    // Inverse CDF on u in (-1/2, 1/2).
    let u: f64 = rng.gen::<f64>() - 0.5;
    let a = 1.0 - 2.0 * u.abs();
    -b * u.signum() * a.max(f64::MIN_POSITIVE).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(var: f64) -> MixtureParams {
        MixtureParams::new(
            [0.0, 0.0],
            vec![0.0],
            vec![0.0],
            ConstraintSpec::new(vec![(var.max(1.0), var.max(1.0))]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn constrain_variance_examples() {
        assert_eq!(constrain_variance(0.0, 2.0, 10.0), 6.0);
        assert!((constrain_variance(-50.0, 2.0, 10.0) - 2.0).abs() < 1e-12);
        let a = constrain_variance(1.5, 2.0, 512.0);
        let b = constrain_variance(1.4, 2.0, 512.0);
        assert!(a > 2.0 && a < 512.0 && a > b);
        assert_eq!(constrain_variance(123.0, 3.0, 3.0), 3.0);
        for h in [-1e9, -1e3, 1e3, 1e9] {
            let v = constrain_variance(h, 2.0, 4096.0);
            assert!((2.0..=4096.0).contains(&v));
        }
    }

    #[test]
    fn constraint_chain_is_validated() {
        assert!(ConstraintSpec::new(vec![(1.0, 1.0), (2.0, 10.0)]).is_ok());
        assert!(ConstraintSpec::new(vec![(0.5, 1.0)]).is_err());
        assert!(ConstraintSpec::new(vec![(1.0, 3.0), (2.0, 10.0)]).is_err());
        assert!(ConstraintSpec::new(vec![(1.0, 1.0), (20.0, 10.0)]).is_err());
        assert!(ConstraintSpec::new(vec![]).is_err());
        let d = ConstraintSpec::default_for_image(64, 64);
        assert_eq!(d.bounds(), &[(1.0, 1.0), (2.0, 4096.0)]);
    }

    #[test]
    fn density_examples() {
        let p = single(1.0);
        assert_eq!(density([0.0, 0.0], &p), 0.5);
        // 0.5 * exp(-sqrt(2)) = 0.12155836721710710
        let v = density([0.4, -0.6], &p);
        assert!((v - 0.121_558_367_217_107_1).abs() < 1e-12, "{v}");
    }

    #[test]
    fn nll_examples() {
        let p = single(1.0);
        assert!((nll([0.0, 0.0], &p) - LN_2).abs() < 1e-12);
        let far = nll([1e4, 0.0], &p);
        assert!(far.is_finite());
        assert!((far - (LN_2 + SQRT_2 * 1e4)).abs() < 1e-6);
    }

    #[test]
    fn nll_finite_across_variance_range() {
        let spec = ConstraintSpec::new(vec![(1.0, 1.0), (2.0, 1e8)]).unwrap();
        for h in [-40.0, 0.0, 40.0] {
            let p = MixtureParams::new([3.0, -2.0], vec![-3.0, 5.0], vec![0.0, h], spec.clone()).unwrap();
            for d in [0.0, 1.0, 1e2, 1e4] {
                assert!(nll([3.0 + d, -2.0], &p).is_finite());
            }
        }
    }

    #[test]
    fn pr_examples() {
        let p = single(2.0);
        assert_eq!(confidence_pr(&p, 0.0), 0.0);
        let expect = (1.0 - (-1.0f64).exp()).powi(2);
        assert!((confidence_pr(&p, 1.0) - expect).abs() < 1e-12);
        let spec = ConstraintSpec::new(vec![(1.0, 1.0), (1.0, 1.0)]).unwrap();
        let twin = MixtureParams::new([0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0], spec).unwrap();
        for r in [0.5, 1.0, 3.0] {
            assert!((confidence_pr(&twin, r) - confidence_pr(&single(1.0), r)).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_examples() {
        assert_eq!(mixture_variance(&single(1.0)), 1.0);
        let spec = ConstraintSpec::new(vec![(1.0, 1.0), (9.0, 9.0)]).unwrap();
        let p = MixtureParams::new([0.0, 0.0], vec![0.25f64.ln(), 0.75f64.ln()], vec![0.0, 0.0], spec)
            .unwrap();
        assert!((mixture_variance(&p) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let p = single(1.0);
        let g = nll_gradient([0.7, 0.0], &p);
        assert!((g.mu[0] + SQRT_2).abs() < 1e-12);
        assert_eq!(g.mu[1], 0.0);
        let spec = ConstraintSpec::default_for_image(64, 64);
        let p2 = MixtureParams::new([0.0, 0.0], vec![0.3, -0.2], vec![1.0, 0.5], spec).unwrap();
        let g2 = nll_gradient([2.0, -1.0], &p2);
        assert_eq!(g2.raw_scales[0], 0.0);
    }

    #[test]
    fn zero_weight_component_never_sampled() {
        let spec = ConstraintSpec::new(vec![(1.0, 1.0), (100.0, 100.0)]).unwrap();
        let p = MixtureParams::new([0.0, 0.0], vec![0.0, f64::NEG_INFINITY], vec![0.0, 0.0], spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // With variance 1 a draw beyond 40 px is astronomically unlikely, with
        // variance 100 it happens regularly, so any selection would show up.
        for _ in 0..200_000 {
            let y = sample(&p, &mut rng);
            assert!(y[0].abs() < 40.0 && y[1].abs() < 40.0);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let spec = ConstraintSpec::default_for_image(64, 64);
        let p = MixtureParams::new([1.0, 2.0], vec![0.1, 0.4], vec![0.0, -2.0], spec).unwrap();
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..10).map(|_| sample(&p, &mut rng)).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..10).map(|_| sample(&p, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    fn arb_params() -> impl Strategy<Value = MixtureParams> {
        (
            -20.0f64..20.0,
            -20.0f64..20.0,
            -4.0f64..4.0,
            -4.0f64..4.0,
            -6.0f64..6.0,
        )
            .prop_map(|(mu_u, mu_v, a1, a2, h2)| {
                MixtureParams::new(
                    [mu_u, mu_v],
                    vec![a1, a2],
                    vec![0.0, h2],
                    ConstraintSpec::new(vec![(1.0, 1.0), (2.0, 500.0)]).unwrap(),
                )
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn pr_bounded_and_monotone(p in arb_params(), r1 in 0.0f64..50.0, dr in 0.0f64..50.0) {
            let a = confidence_pr(&p, r1);
            let b = confidence_pr(&p, r1 + dr);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b >= a);
        }

        #[test]
        fn nll_matches_naive(p in arb_params(), du in -30.0f64..30.0, dv in -30.0f64..30.0) {
            let y = [p.mu[0] + du, p.mu[1] + dv];
            let naive = -density(y, &p).ln();
            let stable = nll(y, &p);
            prop_assert!((naive - stable).abs() <= 1e-9 * naive.abs().max(1.0));
        }

        #[test]
        fn default_spec_orders_variances(h1 in -1e9f64..1e9, h2 in -1e9f64..1e9) {
            let spec = ConstraintSpec::default_for_image(64, 64);
            prop_assert!(spec.variance(0, h1) <= spec.variance(1, h2));
        }

        #[test]
        fn symmetric_permutation_keeps_density(a1 in -3.0f64..3.0, a2 in -3.0f64..3.0, du in -5.0f64..5.0) {
            let spec = ConstraintSpec::new(vec![(1.0, 4.0), (4.0, 4.0)]).unwrap();
            let twin = ConstraintSpec::new(vec![(4.0, 4.0), (4.0, 4.0)]).unwrap();
            let p = MixtureParams::new([0.0, 0.0], vec![a1, a2], vec![50.0, 0.0], spec).unwrap();
            let q = MixtureParams::new([0.0, 0.0], vec![a2, a1], vec![0.0, 0.0], twin).unwrap();
            prop_assert!((density([du, 1.0], &p) - density([du, 1.0], &q)).abs() < 1e-12);
        }
    }
}
