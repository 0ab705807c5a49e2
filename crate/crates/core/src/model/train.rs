//! Mini-batch Adam training and checkpoint round-trips.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{data_term_gradient, level_targets, weight_decay, weight_decay_gradient, LevelTarget};
use super::network::{backward, forward_cached, predict, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::geometry::FlowField;
use crate::image::{Image, Mask};
use crate::io::{self, Checkpoint};
use crate::metrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fractions of `iterations` at which the learning rate halves.
    pub lr_milestones: Vec<f64>,
    pub loss_weights: Vec<f64>,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
    pub validation_count: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 4,
            learning_rate: 1e-3,
            lr_milestones: vec![0.6, 0.85],
            loss_weights: vec![0.32, 0.08],
            weight_decay: 4e-4,
            seed: 0,
            log_every: 50,
            validation_count: 16,
            grad_clip: Some(100.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        if self.loss_weights.len() != 2 || self.loss_weights.iter().any(|g| *g < 0.0) {
            return Err(Error::Config("loss_weights needs two non-negative values".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let t = iteration as f64 / self.iterations.max(1) as f64;
        let halvings = self.lr_milestones.iter().filter(|&&m| t >= m).count();
        self.learning_rate * 0.5f64.powi(halvings as i32)
    }
}

/// A training pair with its supervision.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub query: Image,
    pub reference: Image,
    pub flow: FlowField,
    pub excluded: Mask,
}

impl From<io::StoredSample> for TrainSample {
    fn from(s: io::StoredSample) -> Self {
        Self {
            query: s.query,
            reference: s.reference,
            flow: s.flow,
            excluded: s.inj_mask,
        }
    }
}

pub fn load_dataset(dir: &Path) -> Result<Vec<TrainSample>> {
    let paths = io::dataset_samples(dir)?;
    paths.iter().map(|p| io::read_sample(p).map(TrainSample::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub aepe_val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: ModelWeights,
    pub log: Vec<LossRecord>,
    pub final_val_aepe: Option<f64>,
}

/// Adam moments.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Data loss and parameter gradient of one sample, scaled by `scale`.
pub fn sample_gradient(weights: &ModelWeights, sample: &TrainSample, gamma: &[f64], scale: f64) -> Result<(f64, Vec<f64>)> {
    let (preds, cache) = forward_cached(&sample.query, &sample.reference, weights)?;
    let targets: Vec<LevelTarget> = level_targets(&sample.flow, &sample.excluded, &preds)?;
    let (loss, level_grads) = data_term_gradient(&preds, &targets, gamma, &weights.constraints, scale)?;
    let mut grads = vec![0.0; weights.num_params()];
    backward(weights, &cache, &level_grads, &mut grads);
    Ok((loss, grads))
}

/// Batch loss (data term averaged over the batch plus weight decay) and its
/// gradient. Per-sample work runs in parallel; the reduction is ordered.
pub fn batch_gradient(weights: &ModelWeights, batch: &[&TrainSample], gamma: &[f64], eta: f64) -> Result<(f64, Vec<f64>)> {
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch.par_iter().map(|s| sample_gradient(weights, s, gamma, scale)).collect();
    let mut grads = vec![0.0; weights.num_params()];
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l * scale;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    loss += weight_decay(&weights.params, eta);
    weight_decay_gradient(&weights.params, eta, &mut grads);
    Ok((loss, grads))
}

/// Mean AEPE of full-resolution predictions over valid ground truth.
pub fn validation_aepe(weights: &ModelWeights, samples: &[TrainSample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let vals: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let pred = predict(&s.query, &s.reference, weights)?;
            metrics::aepe(&pred.flow, &s.flow, &s.flow.valid_mask())
        })
        .collect();
    let mut sum = 0.0;
    for v in &vals {
        sum += *v.as_ref().map_err(|e| Error::Degenerate(e.to_string()))?;
    }
    Ok(Some(sum / vals.len() as f64))
}

/// Trains from `init`. The last `validation_count` samples (when more than
/// that many exist) are held out for AEPE reporting.
pub fn train(init: ModelWeights, samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::DatasetEmpty(Default::default()));
    }
    let n_val = if samples.len() > cfg.validation_count { cfg.validation_count } else { 0 };
    let (train_set, val_set) = samples.split_at(samples.len() - n_val);
    let mut weights = init;
    let mut adam = Adam::new(weights.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    for it in 0..cfg.iterations {
        let batch: Vec<&TrainSample> = (0..cfg.batch_size).map(|_| &train_set[rng.gen_range(0..train_set.len())]).collect();
        let (loss, mut grads) = batch_gradient(&weights, &batch, &cfg.loss_weights, cfg.weight_decay)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!("loss {loss}, lr {}", cfg.learning_rate_at(it)),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                grads.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        adam.step(&mut weights.params, &grads, cfg.learning_rate_at(it));
        let last = it + 1 == cfg.iterations;
        let aepe_val = if cfg.log_every > 0 && ((it + 1) % cfg.log_every == 0 || last) {
            validation_aepe(&weights, val_set)?
        } else {
            None
        };
        log.push(LossRecord { iteration: it, loss, aepe_val });
    }
    let final_val_aepe = validation_aepe(&weights, val_set)?;
    Ok(TrainReport {
        weights,
        log,
        final_val_aepe,
    })
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                format!("{:.9}", r.loss),
                r.aepe_val.map(|a| format!("{a:.6}")).unwrap_or_default(),
            ]
        })
        .collect();
    io::write_csv(path, &["iteration", "loss", "aepe_val"], &rows)
}

pub fn to_checkpoint(weights: &ModelWeights, extra: serde_json::Value) -> Checkpoint {
    Checkpoint {
        arch_hash: weights.config.arch_hash(),
        params: weights.params.iter().map(|&p| p as f32).collect(),
        metadata: serde_json::json!({ "model": weights.config, "extra": extra }),
    }
}

pub fn save_checkpoint(path: &Path, weights: &ModelWeights, extra: serde_json::Value) -> Result<()> {
    io::write_checkpoint(path, &to_checkpoint(weights, extra))
}

pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<ModelWeights> {
    let config: ModelConfig = serde_json::from_value(ckpt.metadata["model"].clone())
        .map_err(|e| Error::format(path, format!("model config: {e}")))?;
    if config.arch_hash() != ckpt.arch_hash {
        return Err(Error::format(path, "architecture hash does not match its model config"));
    }
    ModelWeights::with_params(config, ckpt.params.iter().map(|&p| p as f64).collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    from_checkpoint(&io::read_checkpoint(path)?, path)
}
