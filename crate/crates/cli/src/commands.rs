//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rayon::prelude::*;
use uncertflow::config::RunConfig;
use uncertflow::datagen::generate_dataset;
use uncertflow::geometry::fb_consistency_error;
use uncertflow::inference::{
    cyclic_filter, extract_matches, infer_direct, infer_multiscale_ms, infer_multistage_h, sparse_match,
    InferenceConfig, InferenceOutput, MatchSet,
};
use uncertflow::io;
use uncertflow::metrics;
use uncertflow::model::network::ModelWeights;
use uncertflow::model::train::{self, load_dataset};
use uncertflow::{Error, FlowField, Image, Mask};

use crate::{ConfigArgs, Mode, Rank};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Prints the one-line error record and maps it to an exit code.
pub fn report(e: &CliError) -> ExitCode {
    let (kind, msg, code) = match e {
        CliError::Usage(m) => ("usage", m.clone(), 2),
        CliError::Lib(err) => {
            let kind = err.kind();
            let code = match kind {
                "config" => 2,
                "numeric" => 4,
                _ => 3,
            };
            (kind, err.to_string(), code)
        }
    };
    eprintln!("error kind={kind} message={}", msg.replace('\n', " "));
    ExitCode::from(code)
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn gendata(out: &Path, count: Option<usize>, images: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let cfg = run_config(args)?;
    let count = count.unwrap_or(cfg.count);
    let bases = match images {
        Some(dir) => io::read_image_dir(dir)?,
        None => Vec::new(),
    };
    generate_dataset(&cfg.gen_config(), &bases, count, cfg.seed, out)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

pub fn train(data: &Path, out: &Path, log: Option<&Path>, iterations: Option<usize>, args: &ConfigArgs) -> Result<()> {
    let mut cfg = run_config(args)?;
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    let manifest = io::read_manifest(data)?;
    if (manifest.width, manifest.height) != (cfg.width, cfg.height) {
        cfg.width = manifest.width;
        cfg.height = manifest.height;
    }
    let samples = load_dataset(data)?;
    let init = ModelWeights::init(cfg.model_config()?, cfg.init_seed)?;
    let report = train::train(init, &samples, &cfg.train_config())?;
    let meta = serde_json::json!({
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "dataset_config_hash": manifest.config_hash,
        "final_val_aepe": report.final_val_aepe,
    });
    train::save_checkpoint(out, &report.weights, meta)?;
    if let Some(p) = log {
        train::write_loss_log(p, &report.log)?;
    }
    match report.final_val_aepe {
        Some(a) => println!("final validation AEPE {a:.6}"),
        None => println!("no validation split"),
    }
    Ok(())
}

pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub mode: Mode,
    pub ratios: Option<Vec<f64>>,
    pub query: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub out_flow: Option<PathBuf>,
    pub out_confidence: Option<PathBuf>,
    pub out_variance: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub backward: bool,
    pub cfg: ConfigArgs,
}

fn inference_config(args: &ConfigArgs, ratios: Option<&Vec<f64>>) -> Result<InferenceConfig> {
    let mut cfg = run_config(args)?.inference_config();
    if let Some(r) = ratios {
        cfg.ms_ratios = r.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_mode(mode: Mode, q: &Image, r: &Image, w: &ModelWeights, cfg: &InferenceConfig) -> uncertflow::Result<InferenceOutput> {
    match mode {
        Mode::D => infer_direct(q, r, w, cfg),
        Mode::H => infer_multistage_h(q, r, w, cfg),
        Mode::Ms => infer_multiscale_ms(q, r, w, cfg),
    }
}


pub fn infer(a: InferArgs) -> Result<()> {
    let cfg = inference_config(&a.cfg, a.ratios.as_ref())?;
    let weights = train::load_checkpoint(&a.checkpoint)?;
    if let (Some(qp), Some(rp)) = (&a.query, &a.reference) {
        let out_flow = a
            .out_flow
            .as_ref()
            .ok_or_else(|| CliError::Usage("--out-flow is required with --query/--reference".into()))?;
        let q = io::read_image(qp)?;
        let r = io::read_image(rp)?;
        let out = run_mode(a.mode, &q, &r, &weights, &cfg)?;
        io::write_flo(out_flow, &out.flow)?;
        if let Some(p) = &a.out_confidence {
            io::write_pfm(p, &out.confidence)?;
        }
        if let Some(p) = &a.out_variance {
            io::write_pfm(p, &out.dense.variance())?;
        }
        if a.backward {
            let back = run_mode(a.mode, &r, &q, &weights, &cfg)?;
            let p = out_flow.with_extension("backward.flo");
            io::write_flo(&p, &back.flow)?;
        }
        if let Some(r) = out.selected_ratio {
            println!("selected ratio {r}");
        }
        return Ok(());
    }
    let (Some(data), Some(out_dir)) = (&a.data, &a.out_dir) else {
        return Err(CliError::Usage("give --query/--reference or --data/--out-dir".into()));
    };
    let paths = io::dataset_samples(data)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out_dir.display())))?;
    let results: Vec<uncertflow::Result<()>> = paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = io::read_sample(p)?;
            let out = run_mode(a.mode, &s.query, &s.reference, &weights, &cfg)?;
            let dir = out_dir.join(io::sample_dir_name(i));
            fs::create_dir_all(&dir).map_err(|e| uncertflow::Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            io::write_flo(&dir.join("flow.flo"), &out.flow)?;
            io::write_pfm(&dir.join("confidence.pfm"), &out.confidence)?;
            io::write_pfm(&dir.join("variance.pfm"), &out.dense.variance())?;
            if a.backward {
                let back = run_mode(a.mode, &s.reference, &s.query, &weights, &cfg)?;
                io::write_flo(&dir.join("backward.flo"), &back.flow)?;
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    println!("wrote {} predictions to {}", paths.len(), out_dir.display());
    Ok(())
}

/// `(name, estimate, ground truth, pred dir)` per pair.
fn flow_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, FlowField, FlowField, Option<PathBuf>)>> {
    if gt.is_dir() {
        let paths = io::dataset_samples(gt)?;
        paths
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let name = io::sample_dir_name(i);
                let dir = pred.join(&name);
                let est = io::read_flo(&dir.join("flow.flo"))?;
                let g = io::read_flo(&p.join("flow.flo"))?;
                Ok((name, est, g, Some(dir)))
            })
            .collect()
    } else {
        Ok(vec![("pair".into(), io::read_flo(pred)?, io::read_flo(gt)?, None)])
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn eval(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let pairs = flow_pairs(pred, gt)?;
    let mut rows = Vec::new();
    let mut sums = [0.0; 5];
    for (name, est, g, _) in &pairs {
        let valid = g.valid_mask();
        let vals = [
            metrics::aepe(est, g, &valid)?,
            metrics::pck(est, g, 1.0, &valid)?,
            metrics::pck(est, g, 3.0, &valid)?,
            metrics::pck(est, g, 5.0, &valid)?,
            metrics::fl(est, g, &valid)?,
        ];
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
        let mut row = vec![name.clone()];
        row.extend(vals.iter().map(|v| fmt(*v)));
        rows.push(row);
    }
    let n = pairs.len() as f64;
    let mut mean = vec!["mean".to_string()];
    mean.extend(sums.iter().map(|s| fmt(s / n)));
    println!("AEPE {} PCK-1 {} PCK-3 {} PCK-5 {} Fl {}", mean[1], mean[2], mean[3], mean[4], mean[5]);
    rows.push(mean);
    io::write_csv(out, &["pair", "aepe", "pck1", "pck3", "pck5", "fl"], &rows)?;
    Ok(())
}

/// Uncertainty per valid pixel (larger means less certain).
fn ranking(rank: Rank, dir: &Path, est: &FlowField, valid: &Mask) -> Result<Vec<f64>> {
    let map = match rank {
        Rank::Pr => {
            let pr = io::read_pfm(&dir.join("confidence.pfm"))?;
            Image::from_fn(pr.width(), pr.height(), 1, |x, y, _| -pr.get(x, y, 0))
        }
        Rank::Variance => io::read_pfm(&dir.join("variance.pfm"))?,
        Rank::Fb => {
            let back = io::read_flo(&dir.join("backward.flo"))?;
            fb_consistency_error(est, &back)?
        }
    };
    if map.width() != valid.width() || map.height() != valid.height() {
        return Err(Error::ShapeMismatch("uncertainty map and flow differ in size".into()).into());
    }
    Ok(valid
        .data()
        .iter()
        .zip(map.data())
        .filter(|(v, _)| **v)
        .map(|(_, u)| *u)
        .collect())
}

pub fn sparsify(pred: &Path, gt: &Path, rank: Rank, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = run_config(args)?;
    if !gt.is_dir() {
        return Err(CliError::Usage("sparsify needs a dataset directory for --gt".into()));
    }
    let pairs = flow_pairs(pred, gt)?;
    let mut curves = Vec::new();
    let mut oracles = Vec::new();
    let mut ause_sum = 0.0;
    for (_, est, g, dir) in &pairs {
        let valid = g.valid_mask();
        let errors = metrics::endpoint_errors(est, g, &valid)?;
        let unc = ranking(rank, dir.as_ref().unwrap(), est, &valid)?;
        let c = metrics::sparsification(&errors, &unc, cfg.sparsify_steps)?.normalize();
        let o = metrics::oracle(&errors, cfg.sparsify_steps)?.normalize();
        ause_sum += metrics::ause(&c, &o)?;
        curves.push(c);
        oracles.push(o);
    }
    let c = metrics::average_curves(&curves)?;
    let o = metrics::average_curves(&oracles)?;
    let rows: Vec<Vec<String>> = c
        .fractions
        .iter()
        .zip(&c.values)
        .zip(&o.values)
        .map(|((f, v), ov)| vec![fmt(*f), fmt(*v), fmt(*ov)])
        .collect();
    io::write_csv(out, &["fraction", "value", "oracle"], &rows)?;
    println!("AUSE {}", fmt(ause_sum / pairs.len() as f64));
    Ok(())
}

pub struct MatchArgs {
    pub checkpoint: PathBuf,
    pub query: PathBuf,
    pub reference: PathBuf,
    pub out: PathBuf,
    pub keypoints_ref: Option<PathBuf>,
    pub keypoints_query: Option<PathBuf>,
    pub cyclic: bool,
    pub mode: Mode,
    pub cfg: ConfigArgs,
}

fn read_points(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut pts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let mut it = line.split(',').map(|v| v.trim().parse::<f64>());
        match (it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y))) => pts.push([x, y]),
            _ => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("line {}: expected x,y", n + 1),
                }
                .into())
            }
        }
    }
    Ok(pts)
}

pub fn match_cmd(a: MatchArgs) -> Result<()> {
    let cfg = inference_config(&a.cfg, None)?;
    let weights = train::load_checkpoint(&a.checkpoint)?;
    let q = io::read_image(&a.query)?;
    let r = io::read_image(&a.reference)?;
    let fwd = run_mode(a.mode, &q, &r, &weights, &cfg)?;
    let matches: MatchSet = match (&a.keypoints_ref, &a.keypoints_query) {
        (Some(kr), Some(kq)) => {
            let kr = read_points(kr)?;
            let kq = read_points(kq)?;
            let rq = sparse_match(&fwd.flow, &fwd.confidence, &kr, &kq, &cfg)?;
            if a.cyclic {
                let bwd = run_mode(a.mode, &r, &q, &weights, &cfg)?;
                let qr = sparse_match(&bwd.flow, &bwd.confidence, &kq, &kr, &cfg)?;
                cyclic_filter(&rq, &qr, cfg.cyclic_thresh)
            } else {
                rq
            }
        }
        _ => extract_matches(&fwd.flow, &fwd.confidence, cfg.gamma)?,
    };
    io::write_matches(&a.out, &matches.entries)?;
    println!("wrote {} matches", matches.len());
    Ok(())
}
