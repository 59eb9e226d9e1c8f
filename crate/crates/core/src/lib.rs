//! Distance-based image anomaly detection on autoencoder representations.
//!
//! The pipeline: an Inception-like convolutional autoencoder maps each image
//! to a 128-d vector (global average of its bottleneck), and a test vector's
//! anomaly score is its squared distance to the nearest training vector,
//! computed through a product-quantized index or exactly. Runs are scored
//! by AUC-ROC.

pub mod cae;
pub mod detector;
pub mod error;
pub mod eval;
pub mod pq;
pub mod storage;
pub mod tensor;

pub use cae::{build_model, Model, ModelSpec, REPRESENTATION_DIM};
pub use detector::{fit, score_re, Detector, DetectorConfig, ScoreMode};
pub use error::{Error, Result};
pub use eval::{aggregate, auc_roc, sweep, EvalReport, LabeledScores, RunRecord, SweepGrid, SweepRow};
pub use pq::{
    adc_distance, build_lut, encode, fit_codebook, knn_exact, knn_quantized, reconstruct,
    DistanceLut, Neighbor, PqCodebook, PqCodes, PqConfig,
};
pub use storage::{ByteTensor, StoredTensor, WeightContainer};
pub use tensor::Tensor;
