//! Anomaly scoring on learned representations.
//!
//! A test vector's score is its squared distance to the `k`-th nearest
//! training vector, computed either through the product-quantized index
//! (QED) or exactly (EED). Reconstruction-error scoring (RE) works on images
//! instead and goes through [`score_re`]. Larger scores are more anomalous.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cae::Model;
use crate::error::{Error, Result};
use crate::pq::{encode, fit_codebook, knn_exact, knn_quantized, PqCodebook, PqCodes, PqConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Quantized squared Euclidean distance.
    Qed,
    /// Exact squared Euclidean distance.
    Eed,
    /// Reconstruction error.
    Re,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Qed => "qed",
            ScoreMode::Eed => "eed",
            ScoreMode::Re => "re",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qed" => Ok(ScoreMode::Qed),
            "eed" => Ok(ScoreMode::Eed),
            "re" => Ok(ScoreMode::Re),
            other => Err(Error::InvalidParam(format!("unknown score mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub mode: ScoreMode,
    /// Which neighbor's distance is the score; 1 means the nearest.
    pub k_neighbor: usize,
    /// Present exactly when `mode` is [`ScoreMode::Qed`].
    pub pq: Option<PqConfig>,
}

impl DetectorConfig {
    pub fn quantized(pq: PqConfig) -> Self {
        DetectorConfig {
            mode: ScoreMode::Qed,
            k_neighbor: 1,
            pq: Some(pq),
        }
    }

    pub fn exact() -> Self {
        DetectorConfig {
            mode: ScoreMode::Eed,
            k_neighbor: 1,
            pq: None,
        }
    }

    pub fn reconstruction() -> Self {
        DetectorConfig {
            mode: ScoreMode::Re,
            k_neighbor: 1,
            pq: None,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k_neighbor = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_neighbor == 0 {
            return Err(Error::InvalidParam("k_neighbor must be >= 1".into()));
        }
        match (self.mode, &self.pq) {
            (ScoreMode::Qed, Some(pq)) => pq.validate(),
            (ScoreMode::Qed, None) => Err(Error::InvalidParam("QED mode needs a PQ config".into())),
            (_, Some(_)) => Err(Error::InvalidParam(format!(
                "{} mode takes no PQ config",
                self.mode
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
enum Index {
    Quantized { codebook: PqCodebook, codes: PqCodes },
    Exact { train: Tensor },
    Reconstruction,
}

/// A fitted, immutable scorer.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    n_train: usize,
    dim: usize,
    index: Index,
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::InvalidParam(format!(
            "k_neighbor = {k} exceeds the {n} training vectors"
        )));
    }
    Ok(())
}

pub fn fit(train: &Tensor, cfg: &DetectorConfig) -> Result<Detector> {
    cfg.validate()?;
    let (n, dim) = train.matrix_dims("fit")?;
    check_k(cfg.k_neighbor, n)?;
    if !train.all_finite() {
        return Err(Error::NonFinite("training embeddings".into()));
    }
    let index = match cfg.mode {
        ScoreMode::Qed => {
            let pq = cfg.pq.as_ref().expect("validated");
            let codebook = fit_codebook(train, pq)?;
            let codes = encode(&codebook, train)?;
            Index::Quantized { codebook, codes }
        }
        ScoreMode::Eed => Index::Exact {
            train: train.clone(),
        },
        ScoreMode::Re => Index::Reconstruction,
    };
    Ok(Detector {
        config: cfg.clone(),
        n_train: n,
        dim,
        index,
    })
}

impl Detector {
    /// Wrap an already built quantized index.
    pub fn from_index(codebook: PqCodebook, codes: PqCodes, k_neighbor: usize) -> Result<Self> {
        if codes.m() != codebook.m() || codes.c_bits() != codebook.config().c_bits {
            return Err(Error::InvalidParam("codes do not match codebook".into()));
        }
        let config = DetectorConfig::quantized(codebook.config().clone()).with_k(k_neighbor);
        config.validate()?;
        if codes.is_empty() {
            return Err(Error::Empty("index"));
        }
        check_k(k_neighbor, codes.len())?;
        Ok(Detector {
            n_train: codes.len(),
            dim: codebook.dim(),
            config,
            index: Index::Quantized { codebook, codes },
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codebook(&self) -> Option<(&PqCodebook, &PqCodes)> {
        match &self.index {
            Index::Quantized { codebook, codes } => Some((codebook, codes)),
            _ => None,
        }
    }

    pub fn score(&self, embedding: &[f32]) -> Result<f32> {
        if embedding.len() != self.dim {
            return Err(Error::shape(
                "score",
                format!("embedding has {} dims, detector expects {}", embedding.len(), self.dim),
            ));
        }
        let k = self.config.k_neighbor;
        let hits = match &self.index {
            Index::Quantized { codebook, codes } => knn_quantized(codebook, codes, embedding, k)?,
            Index::Exact { train } => knn_exact(train, embedding, k)?,
            Index::Reconstruction => {
                return Err(Error::WrongMode(
                    "reconstruction-error detectors score images via score_re".into(),
                ))
            }
        };
        Ok(hits[k - 1].distance)
    }

    /// Scores for every row, in row order.
    pub fn score_batch(&self, embeddings: &Tensor) -> Result<Vec<f32>> {
        let (_, dim) = embeddings.matrix_dims("score_batch")?;
        if dim != self.dim {
            return Err(Error::shape(
                "score_batch",
                format!("embeddings have {dim} dims, detector expects {}", self.dim),
            ));
        }
        embeddings
            .data()
            .par_chunks_exact(dim)
            .map(|row| self.score(row))
            .collect()
    }
}

/// Per-image reconstruction error for an `N×32×32×C` batch.
pub fn score_re(model: &Model, images: &Tensor) -> Result<Vec<f64>> {
    model.reconstruction_errors(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cae::{build_model, zeroed_weights, ModelSpec};
    use crate::pq::reconstruct;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn full_scale_index_size() {
        let train = random_matrix(1, 6000, 128);
        let det = fit(&train, &DetectorConfig::quantized(PqConfig::new(32, 4))).unwrap();
        let (_, codes) = det.codebook().unwrap();
        assert_eq!(codes.len(), 6000);
        assert_eq!(codes.payload_bits() / 8 / 6000, 16);
    }

    #[test]
    fn exact_mode_keeps_matrix() {
        let train = random_matrix(2, 20, 4);
        let det = fit(&train, &DetectorConfig::exact()).unwrap();
        match &det.index {
            Index::Exact { train: kept } => assert_eq!(kept, &train),
            _ => panic!("wrong index"),
        }
        assert_eq!(det.score(train.row(3)).unwrap(), 0.0);
    }

    #[test]
    fn k_larger_than_training_set() {
        let train = random_matrix(3, 5, 4);
        assert!(fit(&train, &DetectorConfig::exact().with_k(6)).is_err());
        assert!(fit(&train, &DetectorConfig::exact().with_k(0)).is_err());
        let bad = DetectorConfig {
            pq: None,
            ..DetectorConfig::quantized(PqConfig::new(2, 2))
        };
        assert!(fit(&train, &bad).is_err());
    }

    #[test]
    fn quantized_fixed_point_scores_zero() {
        let train = random_matrix(4, 300, 16);
        let det = fit(&train, &DetectorConfig::quantized(PqConfig::new(4, 3))).unwrap();
        let (cb, codes) = det.codebook().unwrap();
        let rec = reconstruct(cb, &codes.row(17)).unwrap();
        assert!(det.score(&rec).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn score_is_kth_neighbor_distance() {
        let train = random_matrix(5, 200, 8);
        let queries = random_matrix(6, 20, 8);
        for k in [1, 3] {
            let eed = fit(&train, &DetectorConfig::exact().with_k(k)).unwrap();
            let qed = fit(&train, &DetectorConfig::quantized(PqConfig::new(2, 4)).with_k(k)).unwrap();
            let (cb, codes) = qed.codebook().unwrap();
            for q in queries.rows() {
                assert_eq!(eed.score(q).unwrap(), knn_exact(&train, q, k).unwrap()[k - 1].distance);
                assert_eq!(
                    qed.score(q).unwrap(),
                    knn_quantized(cb, codes, q, k).unwrap()[k - 1].distance
                );
            }
        }
    }

    #[test]
    fn batch_matches_scalar_and_permutes() {
        let train = random_matrix(7, 100, 8);
        let det = fit(&train, &DetectorConfig::quantized(PqConfig::new(4, 2))).unwrap();
        let test = random_matrix(8, 30, 8);
        let batch = det.score_batch(&test).unwrap();
        let seq: Vec<f32> = test.rows().map(|r| det.score(r).unwrap()).collect();
        assert_eq!(batch, seq);

        let one = Tensor::from_rows(&[test.row(0)]).unwrap();
        assert_eq!(det.score_batch(&one).unwrap(), vec![seq[0]]);

        let rev: Vec<&[f32]> = test.rows().rev().collect();
        let rev_scores = det.score_batch(&Tensor::from_rows(&rev).unwrap()).unwrap();
        assert_eq!(rev_scores, seq.iter().rev().copied().collect::<Vec<_>>());

        assert!(det.score(&[0.0; 7]).is_err());
    }

    #[test]
    fn scaling_preserves_exact_ranking() {
        let train = random_matrix(9, 100, 6);
        let test = random_matrix(10, 40, 6);
        let s = 3.0f32;
        let scaled = |t: &Tensor| t.map(|v| v * s);
        let base = fit(&train, &DetectorConfig::exact()).unwrap().score_batch(&test).unwrap();
        let big = fit(&scaled(&train), &DetectorConfig::exact())
            .unwrap()
            .score_batch(&scaled(&test))
            .unwrap();
        let order = |v: &[f32]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
            idx
        };
        assert_eq!(order(&base), order(&big));
        for (a, b) in base.iter().zip(&big) {
            assert!((b - a * s * s).abs() <= 1e-4 * b.max(1e-6));
        }
    }

    #[test]
    fn re_detector_refuses_embeddings() {
        let train = random_matrix(11, 10, 4);
        let det = fit(&train, &DetectorConfig::reconstruction()).unwrap();
        assert!(matches!(det.score(train.row(0)), Err(Error::WrongMode(_))));
    }

    #[test]
    fn score_re_by_hand() {
        let spec = ModelSpec::new(1).unwrap();
        let model = build_model(spec, &zeroed_weights(&spec)).unwrap();
        let imgs = Tensor::stack(&[
            Tensor::filled(vec![32, 32, 1], 0.5).unwrap(),
            Tensor::filled(vec![32, 32, 1], 1.0).unwrap(),
        ])
        .unwrap();
        assert_eq!(score_re(&model, &imgs).unwrap(), vec![0.0, 0.25]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("QED".parse::<ScoreMode>().unwrap(), ScoreMode::Qed);
        assert_eq!(ScoreMode::Eed.to_string(), "eed");
        assert!("knn".parse::<ScoreMode>().is_err());
    }
}
