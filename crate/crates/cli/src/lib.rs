//! Subcommands behind the `aqade` binary.
//!
//! Data goes to files (always written atomically); timings and summaries go
//! to stderr.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};

use aqade_core::cae::META_N_CHANNELS;
use aqade_core::eval::{sweep_csv, NORMAL, ANOMALY};
use aqade_core::pq::{encode, fit_codebook};
use aqade_core::storage::{
    read_index, read_scores, read_tensor, read_weights, write_atomic, write_index, write_scores,
    write_tensor,
};
use aqade_core::{
    auc_roc, build_model, fit, sweep, Detector, DetectorConfig, EvalReport, LabeledScores,
    ModelSpec, PqConfig, RunRecord, StoredTensor, SweepGrid, Tensor,
};

pub const THREADS_ENV: &str = "AQADE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "aqade", version, about = "Autoencoder features + product-quantized kNN anomaly scoring")]
pub struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<NonZeroUsize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Map images to 128-d autoencoder representations.
    Extract(ExtractArgs),
    /// Train a PQ codebook on embeddings and write the encoded index.
    Fit(FitArgs),
    /// Score test embeddings by k-th nearest neighbor distance.
    Score(ScoreArgs),
    /// Compute AUC-ROC for a scores file against labels.
    Eval(EvalArgs),
    /// Evaluate AUC and query time over a grid of (m, c).
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Autoencoder weights (AEDW).
    #[arg(long)]
    pub weights: PathBuf,
    /// N×32×32×C images in [0, 1] (AEDT, f32).
    #[arg(long)]
    pub images: PathBuf,
    /// Output N×128 embeddings (AEDT).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// N×D training embeddings (AEDT).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Number of partitions.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    pub m: u32,
    /// Bits per code; each partition gets 2^c centroids.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=16))]
    pub c: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Lloyd iterations per partition.
    #[arg(long, default_value_t = 25)]
    pub max_iter: usize,
    /// Output index (AEDI).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["index", "train"])))]
pub struct ScoreArgs {
    /// Quantized index (AEDI) for QED scoring.
    #[arg(long, conflicts_with_all = ["train", "exact"])]
    pub index: Option<PathBuf>,
    /// Raw training embeddings (AEDT) for EED scoring.
    #[arg(long, requires = "exact")]
    pub train: Option<PathBuf>,
    /// Score with exact distances against --train.
    #[arg(long, requires = "train")]
    pub exact: bool,
    /// Test embeddings (AEDT).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Which neighbor's distance is the score.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub k: u32,
    /// Output `index,score` CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `index,score` CSV.
    #[arg(long)]
    pub scores: PathBuf,
    /// Labels (AEDT, u8 or f32; 0 normal, 1 anomaly).
    #[arg(long)]
    pub labels: PathBuf,
    /// Output JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// N×D training embeddings (AEDT).
    #[arg(long)]
    pub train: PathBuf,
    /// Test embeddings (AEDT).
    #[arg(long)]
    pub test: PathBuf,
    /// Test labels (AEDT).
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = SweepGrid::default().m_values)]
    pub m_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = SweepGrid::default().c_values)]
    pub c_list: Vec<u32>,
    /// Seeds to average over.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub k: u32,
    /// Leave out the exact-distance row.
    #[arg(long)]
    pub no_exact: bool,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.get())
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Extract(a) => cmd_extract(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn read_f32(path: &Path, what: &str) -> Result<Tensor> {
    match read_tensor(path).with_context(|| format!("reading {what} {}", path.display()))? {
        StoredTensor::F32(t) => Ok(t),
        StoredTensor::U8(_) => bail!("{what} {} holds u8 data, expected f32", path.display()),
    }
}

fn read_matrix(path: &Path, what: &str) -> Result<Tensor> {
    let t = read_f32(path, what)?;
    if t.rank() != 2 {
        bail!("{what} {} has dims {:?}, expected N×D", path.display(), t.dims());
    }
    Ok(t)
}

/// Labels stored as u8, or as f32 holding exactly 0 or 1.
pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let stored = read_tensor(path).with_context(|| format!("reading labels {}", path.display()))?;
    let labels = match stored {
        StoredTensor::U8(b) => b.data().to_vec(),
        StoredTensor::F32(t) => t
            .data()
            .iter()
            .map(|&v| match v {
                v if v == NORMAL as f32 => Ok(NORMAL),
                v if v == ANOMALY as f32 => Ok(ANOMALY),
                v => bail!("label {v} is not 0 or 1"),
            })
            .collect::<Result<_>>()?,
    };
    Ok(labels)
}

pub fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let weights = read_weights(&a.weights)
        .with_context(|| format!("reading weights {}", a.weights.display()))?;
    let channels = weights.scalar(META_N_CHANNELS)?;
    let spec = ModelSpec::new(channels as usize)?;
    let model = build_model(spec, &weights)?;
    let images = read_f32(&a.images, "images")?;

    let t0 = Instant::now();
    let reps = model.extract_batch(&images)?;
    let secs = t0.elapsed().as_secs_f64();
    write_tensor(&a.out, &reps)?;
    eprintln!(
        "extract: {} images -> {:?} in {secs:.3}s",
        images.dims().first().copied().unwrap_or(0),
        reps.dims()
    );
    Ok(())
}

pub fn cmd_fit(a: &FitArgs) -> Result<()> {
    let train = read_matrix(&a.embeddings, "embeddings")?;
    let (n, dim) = (train.dims()[0], train.dims()[1]);
    let mut cfg = PqConfig::new(a.m as usize, a.c).with_seed(a.seed);
    cfg.kmeans_max_iter = a.max_iter;
    cfg.check_dim(dim)?;

    let t0 = Instant::now();
    let cb = fit_codebook(&train, &cfg)?;
    let t_fit = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let codes = encode(&cb, &train)?;
    let t_enc = t1.elapsed().as_secs_f64();
    write_index(&a.out, &cb, &codes)?;

    let code_bytes = codes.payload_bits().div_ceil(8);
    let raw_bytes = n * dim * 4;
    eprintln!("fit: n={n} D={dim} m={} c={} codebook {t_fit:.3}s encode {t_enc:.3}s", a.m, a.c);
    eprintln!(
        "fit: codes {code_bytes} bytes ({} bits/vector), raw {raw_bytes} bytes, ratio {:.1}x",
        a.m * a.c,
        raw_bytes as f64 / code_bytes.max(1) as f64
    );
    Ok(())
}

pub fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let k = a.k as usize;
    let detector = match (&a.index, &a.train) {
        (Some(path), _) => {
            let (cb, codes) =
                read_index(path).with_context(|| format!("reading index {}", path.display()))?;
            Detector::from_index(cb, codes, k)?
        }
        (None, Some(path)) => {
            let train = read_matrix(path, "training embeddings")?;
            fit(&train, &DetectorConfig::exact().with_k(k))?
        }
        (None, None) => bail!("one of --index or --train is required"),
    };
    let test = read_matrix(&a.embeddings, "embeddings")?;

    let t0 = Instant::now();
    let scores = detector.score_batch(&test)?;
    let secs = t0.elapsed().as_secs_f64();
    write_scores(&a.out, &scores)?;
    eprintln!(
        "score: {} queries against {} vectors ({}) in {secs:.3}s",
        scores.len(),
        detector.n_train(),
        detector.config().mode
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let scores = read_scores(&a.scores)
        .with_context(|| format!("reading scores {}", a.scores.display()))?;
    let labels = read_labels(&a.labels)?;
    let auc = auc_roc(&LabeledScores::new(scores, labels)?)?;
    let report = EvalReport::single(RunRecord { auc, ..Default::default() });
    let json = serde_json::to_string_pretty(&report)?;
    write_atomic(&a.out, format!("{json}\n").as_bytes())?;
    eprintln!("eval: auc {auc:.6}");
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let train = read_matrix(&a.train, "training embeddings")?;
    let test = read_matrix(&a.test, "test embeddings")?;
    let labels = read_labels(&a.labels)?;
    let grid = SweepGrid {
        m_values: a.m_list.clone(),
        c_values: a.c_list.clone(),
        include_exact: !a.no_exact,
    };
    let t0 = Instant::now();
    let rows = sweep(&train, &test, &labels, &grid, a.k as usize, &a.seeds)?;
    write_atomic(&a.out, sweep_csv(&rows).as_bytes())?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    eprintln!(
        "sweep: {} cells ({failed} failed) in {:.3}s",
        rows.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
