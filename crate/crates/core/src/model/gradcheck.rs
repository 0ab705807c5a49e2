//! Central finite-difference verification of the hand-written gradients.

use super::loss::{data_term, level_targets, weight_decay, weight_decay_gradient};
use super::network::{pair_features, LevelPrediction, ModelWeights};
use super::tensor::ConvStack;
use super::train::{sample_gradient, TrainSample};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }
}

/// Agreement test `|a - n| <= tol * max(|a|, |n|) + floor`.
pub fn agrees(analytic: f64, numeric: f64, tol: f64, floor: f64) -> bool {
    (analytic - numeric).abs() <= tol * analytic.abs().max(numeric.abs()) + floor
}

fn stack_range(s: &ConvStack) -> std::ops::Range<usize> {
    let first = s.layers.first().unwrap();
    let last = s.layers.last().unwrap();
    first.w_off..last.b_off + last.cout
}

/// Compares the analytic gradient of the single-sample loss
/// `sum_l gamma_l * sum nll + eta * |theta|^2` against central differences
/// with step `step * max(|theta_i|, 1)` for every parameter in `indices`
/// (all parameters when `None`). Only the stages downstream of a parameter
/// are re-evaluated.
pub fn check_gradients(
    weights: &ModelWeights,
    sample: &TrainSample,
    gamma: &[f64],
    eta: f64,
    step: f64,
    tol: f64,
    floor: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let (_, mut analytic) = sample_gradient(weights, sample, gamma, 1.0)?;
    weight_decay_gradient(&weights.params, eta, &mut analytic);

    let [fr1, fr0, fq1, fq0] = pair_features(&sample.query, &sample.reference, weights)?;
    let (preds, cache) = super::network::forward_from_features(weights, fr1, &fr0, fq1, &fq0)?;
    let targets = level_targets(&sample.flow, &sample.excluded, &preds)?;
    let spec = weights.constraints.clone();
    let loss = |w: &ModelWeights, p: &[LevelPrediction]| -> Result<f64> {
        Ok(data_term(p, &targets, gamma, &spec)? + weight_decay(&w.params, eta))
    };

    let lay = &weights.layout;
    let (d1, g1, q1) = (stack_range(&lay.d1), stack_range(&lay.g1), stack_range(&lay.q1));
    let unc0 = [stack_range(&lay.g0), stack_range(&lay.g0_head), stack_range(&lay.q0)];
    let all: Vec<usize> = (0..weights.num_params()).collect();
    let indices = indices.unwrap_or(&all);
    let mut work = weights.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        mismatches: Vec::new(),
    };
    for &i in indices {
        let theta = weights.params[i];
        let h = step * theta.abs().max(1.0);
        let mut eval = |v: f64| -> Result<f64> {
            work.params[i] = v;
            let p = if d1.contains(&i) {
                cache.rerun_decoder1(&work)
            } else if g1.contains(&i) {
                cache.rerun_cum1(&work)
            } else if q1.contains(&i) {
                cache.rerun_head1(&work)
            } else if unc0.iter().any(|r| r.contains(&i)) {
                cache.rerun_uncertainty0(&work)
            } else {
                cache.rerun_all(&work, &fr0, &fq0)?
            };
            loss(&work, &p)
        };
        let numeric = (eval(theta + h)? - eval(theta - h)?) / (2.0 * h);
        work.params[i] = theta;
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
        if !agrees(a, numeric, tol, floor) {
            report.mismatches.push(GradMismatch { index: i, analytic: a, numeric });
        }
    }
    Ok(report)
}
