//! `uncertflow` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "uncertflow", version, about = "Probabilistic dense correspondence toolkit")]
struct Cli {
    /// Worker threads (falls back to UNCERTFLOW_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set width=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Single direct pass.
    D,
    /// Multi-stage homography alignment then refinement.
    H,
    /// Multi-scale homography search then refinement.
    Ms,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Rank {
    Pr,
    Variance,
    Fb,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic training dataset.
    Gendata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Directory of PPM/PNG base images; procedural textures otherwise.
        #[arg(long)]
        images: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV (iteration, loss, aepe_val).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Estimate flow and confidence for one pair or every pair of a dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "d")]
        mode: Mode,
        /// Comma-separated scale ratios for MS mode.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, requires = "reference")]
        query: Option<PathBuf>,
        #[arg(long, requires = "query")]
        reference: Option<PathBuf>,
        /// Flow output for a single pair.
        #[arg(long)]
        out_flow: Option<PathBuf>,
        /// P_R map output for a single pair.
        #[arg(long)]
        out_confidence: Option<PathBuf>,
        /// Mixture-variance map output for a single pair.
        #[arg(long)]
        out_variance: Option<PathBuf>,
        /// Dataset to process instead of a single pair.
        #[arg(long, conflicts_with = "query")]
        data: Option<PathBuf>,
        /// Output directory for dataset mode.
        #[arg(long, requires = "data")]
        out_dir: Option<PathBuf>,
        /// Also estimate the query-to-reference flow.
        #[arg(long)]
        backward: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Flow metrics against ground truth, one CSV row per pair plus a mean row.
    Eval {
        /// Predictions: a .flo file or a directory written by `infer --data`.
        #[arg(long)]
        pred: PathBuf,
        /// Ground truth: a .flo file or a dataset directory.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sparsification curves (fraction, value, oracle) averaged over pairs.
    Sparsify {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "pr")]
        rank: Rank,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Confident dense matches or keypoint matches as a CSV match list.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reference keypoints CSV (`x,y` header); dense matches otherwise.
        #[arg(long, requires = "keypoints_query")]
        keypoints_ref: Option<PathBuf>,
        #[arg(long, requires = "keypoints_ref")]
        keypoints_query: Option<PathBuf>,
        /// Keep only cyclically consistent keypoint matches.
        #[arg(long)]
        cyclic: bool,
        #[arg(long, value_enum, default_value = "d")]
        mode: Mode,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("UNCERTFLOW_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("UNCERTFLOW_THREADS={v:?} is not a thread count")),
        _ => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(msg) => return commands::report(&commands::CliError::Usage(msg)),
    };
    if let Some(n) = threads {
        if n == 0 {
            return commands::report(&commands::CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    let result = match cli.command {
        Command::Gendata { out, count, images, cfg } => commands::gendata(&out, count, images.as_deref(), &cfg),
        Command::Train {
            data,
            out,
            log,
            iterations,
            cfg,
        } => commands::train(&data, &out, log.as_deref(), iterations, &cfg),
        Command::Infer {
            checkpoint,
            mode,
            ratios,
            query,
            reference,
            out_flow,
            out_confidence,
            out_variance,
            data,
            out_dir,
            backward,
            cfg,
        } => commands::infer(commands::InferArgs {
            checkpoint,
            mode,
            ratios,
            query,
            reference,
            out_flow,
            out_confidence,
            out_variance,
            data,
            out_dir,
            backward,
            cfg,
        }),
        Command::Eval { pred, gt, out } => commands::eval(&pred, &gt, &out),
        Command::Sparsify { pred, gt, rank, out, cfg } => commands::sparsify(&pred, &gt, rank, &out, &cfg),
        Command::Match {
            checkpoint,
            query,
            reference,
            out,
            keypoints_ref,
            keypoints_query,
            cyclic,
            mode,
            cfg,
        } => commands::match_cmd(commands::MatchArgs {
            checkpoint,
            query,
            reference,
            out,
            keypoints_ref,
            keypoints_query,
            cyclic,
            mode,
            cfg,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::report(&e),
    }
}
