//! AUC-ROC evaluation, run aggregation and the quantization parameter sweep.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{fit, DetectorConfig, ScoreMode};
use crate::error::{Error, Result};
use crate::pq::PqConfig;
use crate::tensor::Tensor;

pub const NORMAL: u8 = 0;
pub const ANOMALY: u8 = 1;

/// Scores paired with labels (`0` normal, `1` anomalous).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > ANOMALY) {
            return Err(Error::InvalidInput(format!("label {bad} is not 0 or 1")));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidInput("scores contain NaN".into()));
        }
        Ok(LabeledScores { scores, labels })
    }

    pub fn from_f32(scores: &[f32], labels: Vec<u8>) -> Result<Self> {
        Self::new(scores.iter().map(|&s| s as f64).collect(), labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Rank-based (Mann–Whitney) area under the ROC curve. Tied scores share
/// their average rank, so a tie between an anomaly and a normal example
/// counts one half.
pub fn auc_roc(ls: &LabeledScores) -> Result<f64> {
    let n = ls.scores.len();
    let n_pos = ls.labels.iter().filter(|&&l| l == ANOMALY).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(
            "AUC needs at least one normal and one anomalous example".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ls.scores[a].total_cmp(&ls.scores[b]));

    let mut rank_sum = 0.0f64;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && ls.scores[order[end]] == ls.scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (0-based) become the 1-based average.
        let avg = (start + end + 1) as f64 / 2.0;
        let positives = order[start..end]
            .iter()
            .filter(|&&i| ls.labels[i] == ANOMALY)
            .count();
        rank_sum += avg * positives as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// One evaluated run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ScoreMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunRecord>,
    pub mean_auc: f64,
    /// Sample standard deviation; zero for a single run.
    pub std_auc: f64,
}

impl EvalReport {
    pub fn single(run: RunRecord) -> Self {
        EvalReport {
            mean_auc: run.auc,
            std_auc: 0.0,
            runs: vec![run],
        }
    }
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    // Sorted summation keeps the result independent of input order.
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

/// Pool the runs of several reports and recompute mean and sample std.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    let runs: Vec<RunRecord> = reports.iter().flat_map(|r| r.runs.iter().cloned()).collect();
    let first = runs.first().ok_or(Error::Empty("aggregate"))?;
    let key = |r: &RunRecord| (r.mode, r.m, r.c_bits);
    if let Some(odd) = runs.iter().find(|r| key(r) != key(first)) {
        return Err(Error::InvalidInput(format!(
            "cannot aggregate runs with different settings: {:?} vs {:?}",
            key(first),
            key(odd)
        )));
    }
    let aucs: Vec<f64> = runs.iter().map(|r| r.auc).collect();
    let (mean_auc, std_auc) = mean_and_std(&aucs);
    Ok(EvalReport {
        runs,
        mean_auc,
        std_auc,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub m_values: Vec<usize>,
    pub c_values: Vec<u32>,
    /// Append one exact-distance row.
    pub include_exact: bool,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            m_values: vec![1, 2, 4, 8, 16, 32, 64, 128],
            c_values: (1..=8).collect(),
            include_exact: true,
        }
    }
}

/// One sweep cell. `m` and `c_bits` are `None` on the exact row.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub m: Option<usize>,
    pub c_bits: Option<u32>,
    /// Mean AUC over seeds.
    pub auc: Option<f64>,
    /// Mean wall-clock seconds to score the test set.
    pub query_seconds: f64,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn is_exact(&self) -> bool {
        self.m.is_none()
    }
}

/// Seed for one grid cell, a function of the base seed and the cell's
/// coordinates only.
pub fn cell_seed(base: u64, m: usize, c_bits: u32) -> u64 {
    let cell = ((m as u64) << 32) | c_bits as u64;
    base ^ cell.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn timed_auc(
    train: &Tensor,
    test: &Tensor,
    labels: &[u8],
    cfg: &DetectorConfig,
) -> Result<(f64, f64)> {
    let det = fit(train, cfg)?;
    let start = Instant::now();
    let scores = det.score_batch(test)?;
    let secs = start.elapsed().as_secs_f64();
    let auc = auc_roc(&LabeledScores::from_f32(&scores, labels.to_vec())?)?;
    Ok((auc, secs))
}

fn run_cell(
    train: &Tensor,
    test: &Tensor,
    labels: &[u8],
    base: &DetectorConfig,
    seeds: &[u64],
    m: usize,
    c: u32,
) -> Result<(f64, f64)> {
    let mut aucs = Vec::with_capacity(seeds.len());
    let mut secs = 0.0;
    for &seed in seeds {
        let mut pq = base.pq.clone().unwrap_or_else(|| PqConfig::new(m, c));
        pq.m = m;
        pq.c_bits = c;
        pq.seed = cell_seed(seed, m, c);
        let cfg = DetectorConfig {
            pq: Some(pq),
            mode: ScoreMode::Qed,
            ..base.clone()
        };
        let (auc, t) = timed_auc(train, test, labels, &cfg)?;
        aucs.push(auc);
        secs += t;
    }
    Ok((mean_and_std(&aucs).0, secs / seeds.len() as f64))
}

/// Fit, score and evaluate every `(m, c)` cell of `grid`, plus the exact row.
///
/// Cell failures (for example `m` not dividing the dimension) are recorded
/// on that row; label problems abort the sweep. Query time covers scoring
/// the test set only, not fitting.
pub fn sweep(
    train: &Tensor,
    test: &Tensor,
    labels: &[u8],
    grid: &SweepGrid,
    k_neighbor: usize,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let (_, dim) = train.matrix_dims("sweep")?;
    let (n_test, test_dim) = test.matrix_dims("sweep")?;
    if dim != test_dim {
        return Err(Error::shape(
            "sweep",
            format!("train has {dim} dims, test has {test_dim}"),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::Empty("sweep seeds"));
    }
    // Validates label count and class balance once, up front.
    auc_roc(&LabeledScores::new(vec![0.0; n_test], labels.to_vec())?)?;

    let base = DetectorConfig::exact().with_k(k_neighbor);
    let mut rows = Vec::new();
    for &m in &grid.m_values {
        for &c in &grid.c_values {
            let row = match run_cell(train, test, labels, &base, seeds, m, c) {
                Ok((auc, secs)) => SweepRow {
                    m: Some(m),
                    c_bits: Some(c),
                    auc: Some(auc),
                    query_seconds: secs,
                    error: None,
                },
                Err(e) => SweepRow {
                    m: Some(m),
                    c_bits: Some(c),
                    auc: None,
                    query_seconds: 0.0,
                    error: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }
    if grid.include_exact {
        let row = match timed_auc(train, test, labels, &base) {
            Ok((auc, secs)) => SweepRow {
                m: None,
                c_bits: None,
                auc: Some(auc),
                query_seconds: secs,
                error: None,
            },
            Err(e) => SweepRow {
                m: None,
                c_bits: None,
                auc: None,
                query_seconds: 0.0,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "m,c,auc,query_seconds,error";

/// Render sweep rows as CSV. The exact row uses `exact` in the `m` and `c`
/// columns; error messages are quoted.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = r.m.map_or("exact".to_owned(), |m| m.to_string());
        let c = r.c_bits.map_or("exact".to_owned(), |c| c.to_string());
        let auc = r.auc.map_or(String::new(), |a| a.to_string());
        let err = r
            .error
            .as_ref()
            .map_or(String::new(), |e| format!("\"{}\"", e.replace('"', "\"\"")));
        let _ = writeln!(out, "{m},{c},{auc},{},{err}", r.query_seconds);
    }
    out
}
