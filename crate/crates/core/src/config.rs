//! `key=value` run configuration with defaults and overrides.

use std::path::Path;

use crate::datagen::GenConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::mixture::ConstraintSpec;
use crate::model::network::ModelConfig;
use crate::model::train::TrainConfig;

/// Every tunable of a run. Parse with [`RunConfig::parse`], then apply
/// command-line overrides with [`RunConfig::set`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub margin: usize,
    pub homography_jitter: f64,
    pub perturbations: usize,
    pub max_objects: usize,
    pub object_probability: f64,
    pub sigma1: f64,
    pub beta2_minus: f64,
    /// Defaults to `width * height`.
    pub beta2_plus: Option<f64>,
    pub loss_weights: Vec<f64>,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_count: usize,
    pub log_every: usize,
    pub grad_clip: Option<f64>,
    pub init_seed: u64,
    pub feature_seed: u64,
    pub gamma: f64,
    pub radius: f64,
    pub ransac_iters: usize,
    pub inlier_thresh: f64,
    pub ms_ratios: Vec<f64>,
    pub keypoint_dist: f64,
    pub cyclic_thresh: f64,
    pub sparsify_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        let train = TrainConfig::default();
        let inf = InferenceConfig::default();
        Self {
            seed: 0,
            width: gen.base.width,
            height: gen.base.height,
            count: 2000,
            margin: gen.base.margin,
            homography_jitter: gen.base.jitter,
            perturbations: gen.perturbation.count,
            max_objects: gen.objects.count,
            object_probability: gen.objects.insert_probability,
            sigma1: 1.0,
            beta2_minus: 2.0,
            beta2_plus: None,
            loss_weights: train.loss_weights,
            weight_decay: train.weight_decay,
            iterations: train.iterations,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            validation_count: train.validation_count,
            log_every: train.log_every,
            grad_clip: train.grad_clip,
            init_seed: 1,
            feature_seed: 7,
            gamma: inf.gamma,
            radius: inf.radius,
            ransac_iters: inf.ransac_iters,
            inlier_thresh: inf.inlier_thresh,
            ms_ratios: inf.ms_ratios,
            keypoint_dist: inf.keypoint_dist,
            cyclic_thresh: inf.cyclic_thresh,
            sparsify_steps: 50,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse_num(key, s)).collect()
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    match v.trim() {
        "" | "none" | "auto" => Ok(None),
        s => parse_num(key, s).map(Some),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "width",
        "height",
        "count",
        "margin",
        "homography_jitter",
        "perturbations",
        "max_objects",
        "object_probability",
        "sigma1",
        "beta2_minus",
        "beta2_plus",
        "loss_weights",
        "weight_decay",
        "iterations",
        "batch_size",
        "learning_rate",
        "validation_count",
        "log_every",
        "grad_clip",
        "init_seed",
        "feature_seed",
        "gamma",
        "radius",
        "ransac_iters",
        "inlier_thresh",
        "ms_ratios",
        "keypoint_dist",
        "cyclic_thresh",
        "sparsify_steps",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "height" => self.height = parse_num(key, v)?,
            "count" => self.count = parse_num(key, v)?,
            "margin" => self.margin = parse_num(key, v)?,
            "homography_jitter" => self.homography_jitter = parse_num(key, v)?,
            "perturbations" => self.perturbations = parse_num(key, v)?,
            "max_objects" => self.max_objects = parse_num(key, v)?,
            "object_probability" => self.object_probability = parse_num(key, v)?,
            "sigma1" => self.sigma1 = parse_num(key, v)?,
            "beta2_minus" => self.beta2_minus = parse_num(key, v)?,
            "beta2_plus" => self.beta2_plus = parse_opt(key, v)?,
            "loss_weights" => self.loss_weights = parse_list(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "validation_count" => self.validation_count = parse_num(key, v)?,
            "log_every" => self.log_every = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_opt(key, v)?,
            "init_seed" => self.init_seed = parse_num(key, v)?,
            "feature_seed" => self.feature_seed = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "radius" => self.radius = parse_num(key, v)?,
            "ransac_iters" => self.ransac_iters = parse_num(key, v)?,
            "inlier_thresh" => self.inlier_thresh = parse_num(key, v)?,
            "ms_ratios" => self.ms_ratios = parse_list(key, v)?,
            "keypoint_dist" => self.keypoint_dist = parse_num(key, v)?,
            "cyclic_thresh" => self.cyclic_thresh = parse_num(key, v)?,
            "sparsify_steps" => self.sparsify_steps = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` override strings, as given on a command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "auto".into());
        let vals: Vec<String> = vec![
            self.seed.to_string(),
            self.width.to_string(),
            self.height.to_string(),
            self.count.to_string(),
            self.margin.to_string(),
            self.homography_jitter.to_string(),
            self.perturbations.to_string(),
            self.max_objects.to_string(),
            self.object_probability.to_string(),
            self.sigma1.to_string(),
            self.beta2_minus.to_string(),
            opt(self.beta2_plus),
            list(&self.loss_weights),
            self.weight_decay.to_string(),
            self.iterations.to_string(),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.validation_count.to_string(),
            self.log_every.to_string(),
            opt(self.grad_clip),
            self.init_seed.to_string(),
            self.feature_seed.to_string(),
            self.gamma.to_string(),
            self.radius.to_string(),
            self.ransac_iters.to_string(),
            self.inlier_thresh.to_string(),
            list(&self.ms_ratios),
            self.keypoint_dist.to_string(),
            self.cyclic_thresh.to_string(),
            self.sparsify_steps.to_string(),
        ];
        Self::KEYS.iter().zip(vals).map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn constraint_spec(&self) -> Result<ConstraintSpec> {
        let hi = self.beta2_plus.unwrap_or((self.width * self.height) as f64);
        ConstraintSpec::new(vec![(self.sigma1, self.sigma1), (self.beta2_minus, hi)])
    }

    pub fn gen_config(&self) -> GenConfig {
        let mut g = GenConfig::default();
        g.base.width = self.width;
        g.base.height = self.height;
        g.base.margin = self.margin;
        g.base.jitter = self.homography_jitter;
        g.perturbation.count = self.perturbations;
        g.objects.count = self.max_objects;
        g.objects.insert_probability = self.object_probability;
        g
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::for_image(self.width, self.height);
        m.feature_seed = self.feature_seed;
        m.constraints = self.constraint_spec()?.bounds().to_vec();
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_milestones: vec![0.6, 0.85],
            loss_weights: self.loss_weights.clone(),
            weight_decay: self.weight_decay,
            seed: self.seed,
            log_every: self.log_every,
            validation_count: self.validation_count,
            grad_clip: self.grad_clip,
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            gamma: self.gamma,
            radius: self.radius,
            ransac_iters: self.ransac_iters,
            inlier_thresh: self.inlier_thresh,
            ms_ratios: self.ms_ratios.clone(),
            keypoint_dist: self.keypoint_dist,
            cyclic_thresh: self.cyclic_thresh,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.gamma, c.radius, c.keypoint_dist, c.inlier_thresh), (0.1, 1.0, 4.0, 1.0));
        assert_eq!((c.sigma1, c.beta2_minus, c.weight_decay), (1.0, 2.0, 4e-4));
        assert_eq!(c.constraint_spec().unwrap().bounds()[1], (2.0, 4096.0));
    }

    #[test]
    fn parse_with_comments_and_overrides() {
        let mut c = RunConfig::parse("# run\nwidth = 32\nheight=32 # small\n\nms_ratios=1.0\n").unwrap();
        assert_eq!((c.width, c.height, c.ms_ratios.clone()), (32, 32, vec![1.0]));
        c.apply_overrides(&["width=48"]).unwrap();
        assert_eq!(c.width, 48);
        assert!(RunConfig::parse("nope=1").is_err());
        assert!(RunConfig::parse("width").is_err());
        assert!(RunConfig::parse("width=abc").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("beta2_plus", "100").unwrap();
        c.set("loss_weights", "0,1").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
