//! Masked multi-level negative log-likelihood.

use super::network::{LevelGradient, LevelPrediction};
use crate::error::{Error, Result};
use crate::geometry::FlowField;
use crate::image::Mask;
use crate::mixture::{nll_grad_raw, nll_raw, ConstraintSpec};

/// Ground truth and supervision mask at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTarget {
    pub h: usize,
    pub w: usize,
    pub flow: Vec<[f64; 2]>,
    pub supervised: Vec<bool>,
}

impl LevelTarget {
    /// Block-averages `gt` over `stride x stride` cells. A coarse cell is
    /// supervised only if every child has valid flow and is not excluded.
    pub fn downsample(gt: &FlowField, excluded: &Mask, stride: usize) -> Result<Self> {
        let (w, h) = (gt.width(), gt.height());
        if excluded.width() != w || excluded.height() != h {
            return Err(Error::ShapeMismatch("mask and flow sizes differ".into()));
        }
        if w % stride != 0 || h % stride != 0 {
            return Err(Error::ShapeMismatch(format!("{}x{} not divisible by {}", w, h, stride)));
        }
        let (lw, lh) = (w / stride, h / stride);
        let mut flow = vec![[0.0; 2]; lw * lh];
        let mut supervised = vec![true; lw * lh];
        let n = (stride * stride) as f64;
        for i in 0..lh {
            for j in 0..lw {
                let mut acc = [0.0; 2];
                let mut ok = true;
                for y in i * stride..(i + 1) * stride {
                    for x in j * stride..(j + 1) * stride {
                        if !gt.is_valid(x, y) || excluded.get(x, y) {
                            ok = false;
                        } else {
                            let v = gt.get(x, y);
                            acc[0] += v[0];
                            acc[1] += v[1];
                        }
                    }
                }
                let p = i * lw + j;
                supervised[p] = ok;
                if ok {
                    flow[p] = [acc[0] / n, acc[1] / n];
                }
            }
        }
        Ok(Self { h: lh, w: lw, flow, supervised })
    }

    pub fn supervised_count(&self) -> usize {
        self.supervised.iter().filter(|&&b| b).count()
    }
}

/// Targets for every level of a prediction list.
pub fn level_targets(gt: &FlowField, excluded: &Mask, preds: &[LevelPrediction]) -> Result<Vec<LevelTarget>> {
    preds
        .iter()
        .map(|p| {
            let (h, _) = p.dims();
            LevelTarget::downsample(gt, excluded, gt.height() / h)
        })
        .collect()
}

fn check_dims(pred: &LevelPrediction, t: &LevelTarget) -> Result<()> {
    if pred.dims() != (t.h, t.w) {
        return Err(Error::ShapeMismatch(format!(
            "level {} prediction is {:?}, target is {}x{}",
            pred.level,
            pred.dims(),
            t.h,
            t.w
        )));
    }
    Ok(())
}

/// Data term `sum_l gamma_l * sum_supervised nll`.
pub fn data_term(preds: &[LevelPrediction], targets: &[LevelTarget], gamma: &[f64], spec: &ConstraintSpec) -> Result<f64> {
    let m = spec.num_components();
    let mut total = 0.0;
    let mut logits = vec![0.0; m];
    let mut raw = vec![0.0; m];
    for ((pred, t), &g) in preds.iter().zip(targets).zip(gamma) {
        check_dims(pred, t)?;
        if g == 0.0 {
            continue;
        }
        let hw = t.h * t.w;
        let mut level = 0.0;
        for p in 0..hw {
            if !t.supervised[p] {
                continue;
            }
            for k in 0..m {
                logits[k] = pred.logits.data[k * hw + p];
                raw[k] = pred.raw.data[k * hw + p];
            }
            let mu = [pred.mu.data[p], pred.mu.data[hw + p]];
            level += nll_raw(t.flow[p], mu, &logits, &raw, spec);
        }
        total += g * level;
    }
    Ok(total)
}

/// Data term and its gradient with respect to every level's outputs, scaled
/// by `scale`.
pub fn data_term_gradient(
    preds: &[LevelPrediction],
    targets: &[LevelTarget],
    gamma: &[f64],
    spec: &ConstraintSpec,
    scale: f64,
) -> Result<(f64, Vec<LevelGradient>)> {
    let m = spec.num_components();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    let (mut logits, mut raw) = (vec![0.0; m], vec![0.0; m]);
    let (mut gl, mut gr) = (vec![0.0; m], vec![0.0; m]);
    for ((pred, t), &g) in preds.iter().zip(targets).zip(gamma) {
        check_dims(pred, t)?;
        let mut lg = LevelGradient::zeros_for(pred);
        let hw = t.h * t.w;
        if g != 0.0 {
            for p in 0..hw {
                if !t.supervised[p] {
                    continue;
                }
                for k in 0..m {
                    logits[k] = pred.logits.data[k * hw + p];
                    raw[k] = pred.raw.data[k * hw + p];
                }
                gl.iter_mut().for_each(|v| *v = 0.0);
                gr.iter_mut().for_each(|v| *v = 0.0);
                let mut gmu = [0.0; 2];
                let mu = [pred.mu.data[p], pred.mu.data[hw + p]];
                total += g * nll_grad_raw(t.flow[p], mu, &logits, &raw, spec, g * scale, &mut gmu, &mut gl, &mut gr);
                lg.mu.data[p] = gmu[0];
                lg.mu.data[hw + p] = gmu[1];
                for k in 0..m {
                    lg.logits.data[k * hw + p] = gl[k];
                    lg.raw.data[k * hw + p] = gr[k];
                }
            }
        }
        grads.push(lg);
    }
    Ok((total, grads))
}

pub fn weight_decay(params: &[f64], eta: f64) -> f64 {
    eta * params.iter().map(|p| p * p).sum::<f64>()
}

pub fn weight_decay_gradient(params: &[f64], eta: f64, grads: &mut [f64]) {
    for (g, p) in grads.iter_mut().zip(params) {
        *g += 2.0 * eta * p;
    }
}

/// `sum_l gamma_l * sum nll + eta * |theta|^2` for a single sample.
pub fn masked_multiscale_nll(
    preds: &[LevelPrediction],
    gt: &FlowField,
    excluded: &Mask,
    gamma: &[f64],
    eta: f64,
    params: &[f64],
    spec: &ConstraintSpec,
) -> Result<f64> {
    if gamma.len() != preds.len() {
        return Err(Error::Config(format!("{} loss weights for {} levels", gamma.len(), preds.len())));
    }
    let targets = level_targets(gt, excluded, preds)?;
    Ok(data_term(preds, &targets, gamma, spec)? + weight_decay(params, eta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_true_pooling() {
        let gt = FlowField::from_fn(4, 4, |x, y| [x as f64, y as f64]);
        let mut ex = Mask::new(4, 4);
        ex.set(3, 0, true);
        let t = LevelTarget::downsample(&gt, &ex, 2).unwrap();
        assert_eq!(t.supervised, vec![true, false, true, true]);
        assert_eq!(t.flow[0], [0.5, 0.5]);
        assert_eq!(t.flow[3], [2.5, 2.5]);
    }

    #[test]
    fn invalid_gt_unsupervised() {
        let mut gt = FlowField::zeros(4, 4);
        gt.set_valid(0, 0, false);
        let t = LevelTarget::downsample(&gt, &Mask::new(4, 4), 4).unwrap();
        assert_eq!(t.supervised_count(), 0);
    }
}
