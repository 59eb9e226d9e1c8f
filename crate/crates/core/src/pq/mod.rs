//! Product quantization: per-partition k-means codebooks, encoding, and
//! lookup-table (asymmetric) distance search.
//!
//! A `D`-dimensional vector is cut into `m` contiguous sub-vectors of width
//! `D/m`. Each sub-vector is replaced by the index of its nearest centroid
//! in that partition's codebook of `2^c_bits` entries.

mod kmeans;
mod search;

pub use kmeans::{kmeans, KMeans, KMeansParams};
pub use search::{adc_distance, build_lut, knn_exact, knn_quantized, DistanceLut, Neighbor};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_CODE_BITS: u32 = 16;

/// Squared Euclidean distance with eight interleaved accumulators.
#[inline]
pub fn sq_l2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            let t = x[l] - y[l];
            lanes[l] += t * t;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let t = x - y;
        tail += t * t;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqConfig {
    /// Number of partitions.
    pub m: usize,
    /// Bits per code; each partition has `2^c_bits` centroids.
    pub c_bits: u32,
    pub seed: u64,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl PqConfig {
    pub fn new(m: usize, c_bits: u32) -> Self {
        PqConfig {
            m,
            c_bits,
            seed: 0,
            kmeans_max_iter: 25,
            kmeans_tol: 1e-4,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn k_centroids(&self) -> usize {
        1usize << self.c_bits
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidParam("pq needs m >= 1".into()));
        }
        if !(1..=MAX_CODE_BITS).contains(&self.c_bits) {
            return Err(Error::InvalidParam(format!(
                "c_bits must be in 1..={MAX_CODE_BITS}, got {}",
                self.c_bits
            )));
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::InvalidParam("kmeans_max_iter must be positive".into()));
        }
        if self.kmeans_tol.is_nan() || self.kmeans_tol < 0.0 {
            return Err(Error::InvalidParam("kmeans_tol must be non-negative".into()));
        }
        Ok(())
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if !dim.is_multiple_of(self.m) {
            return Err(Error::InvalidParam(format!(
                "embedding dim {dim} is not divisible by m = {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// One centroid table per partition, each `2^c_bits × (D/m)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    config: PqConfig,
    dim: usize,
    tables: Vec<Vec<f32>>,
}

impl PqCodebook {
    /// Assemble a codebook from existing centroid tables.
    pub fn from_tables(config: PqConfig, dim: usize, tables: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        config.check_dim(dim)?;
        if tables.len() != config.m {
            return Err(Error::InvalidParam(format!(
                "expected {} centroid tables, got {}",
                config.m,
                tables.len()
            )));
        }
        let want = config.k_centroids() * dim / config.m;
        for (j, t) in tables.iter().enumerate() {
            if t.len() != want {
                return Err(Error::InvalidParam(format!(
                    "centroid table {j} has {} values, expected {want}",
                    t.len()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("centroid table {j}")));
            }
        }
        Ok(PqCodebook { config, dim, tables })
    }

    pub fn config(&self) -> &PqConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn k_centroids(&self) -> usize {
        self.config.k_centroids()
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.config.m
    }

    pub fn table(&self, j: usize) -> &[f32] {
        &self.tables[j]
    }

    pub fn centroid(&self, j: usize, z: usize) -> &[f32] {
        let s = self.sub_dim();
        &self.tables[j][z * s..(z + 1) * s]
    }

    fn check_vector_dim(&self, op: &'static str, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::shape(
                op,
                format!("vector has {len} dims, codebook expects {}", self.dim),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum CodeStore {
    Narrow(Vec<u8>),
    Wide(Vec<u16>),
}

/// `n × m` code matrix. Codes take one byte each when `c_bits <= 8`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PqCodes {
    n: usize,
    m: usize,
    c_bits: u32,
    store: CodeStore,
}

impl PqCodes {
    /// Build from a flat row-major code list, checking every code's range.
    pub fn from_codes(n: usize, m: usize, c_bits: u32, codes: &[u16]) -> Result<Self> {
        if !(1..=MAX_CODE_BITS).contains(&c_bits) {
            return Err(Error::InvalidParam(format!("c_bits {c_bits} out of range")));
        }
        if codes.len() != n * m {
            return Err(Error::InvalidParam(format!(
                "expected {} codes, got {}",
                n * m,
                codes.len()
            )));
        }
        let limit = 1u32 << c_bits;
        if let Some(bad) = codes.iter().find(|&&c| c as u32 >= limit) {
            return Err(Error::InvalidParam(format!(
                "code {bad} does not fit in {c_bits} bits"
            )));
        }
        let store = if c_bits <= 8 {
            CodeStore::Narrow(codes.iter().map(|&c| c as u8).collect())
        } else {
            CodeStore::Wide(codes.to_vec())
        };
        Ok(PqCodes { n, m, c_bits, store })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn c_bits(&self) -> u32 {
        self.c_bits
    }

    pub fn get(&self, i: usize, j: usize) -> u16 {
        let at = i * self.m + j;
        match &self.store {
            CodeStore::Narrow(v) => v[at] as u16,
            CodeStore::Wide(v) => v[at],
        }
    }

    pub fn row(&self, i: usize) -> Vec<u16> {
        (0..self.m).map(|j| self.get(i, j)).collect()
    }

    /// All codes, row-major.
    pub fn to_vec(&self) -> Vec<u16> {
        match &self.store {
            CodeStore::Narrow(v) => v.iter().map(|&c| c as u16).collect(),
            CodeStore::Wide(v) => v.clone(),
        }
    }

    /// Payload size in bits when packed at `c_bits` per code.
    pub fn payload_bits(&self) -> usize {
        self.n * self.m * self.c_bits as usize
    }
}

/// Train one k-means codebook per partition of the rows of `train`.
pub fn fit_codebook(train: &Tensor, cfg: &PqConfig) -> Result<PqCodebook> {
    cfg.validate()?;
    let (n, dim) = train.matrix_dims("fit_codebook")?;
    cfg.check_dim(dim)?;
    let sub = dim / cfg.m;
    let tables = (0..cfg.m)
        .into_par_iter()
        .map(|j| {
            let mut cols = Vec::with_capacity(n * sub);
            for row in train.rows() {
                cols.extend_from_slice(&row[j * sub..(j + 1) * sub]);
            }
            let part = Tensor::new(vec![n, sub], cols)?;
            let params = KMeansParams {
                k: cfg.k_centroids(),
                seed: cfg.seed.wrapping_add(j as u64),
                max_iter: cfg.kmeans_max_iter,
                tol: cfg.kmeans_tol,
            };
            Ok(kmeans(&part, &params)?.centroids.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    PqCodebook::from_tables(cfg.clone(), dim, tables)
}

fn encode_row(cb: &PqCodebook, v: &[f32], out: &mut [u16]) {
    let s = cb.sub_dim();
    for (j, code) in out.iter_mut().enumerate() {
        let (z, _) = kmeans::nearest(&v[j * s..(j + 1) * s], cb.table(j), s);
        *code = z as u16;
    }
}

/// Nearest-centroid code for every partition of every row (ties → lowest index).
pub fn encode(cb: &PqCodebook, vectors: &Tensor) -> Result<PqCodes> {
    let (n, dim) = vectors.matrix_dims("encode")?;
    cb.check_vector_dim("encode", dim)?;
    let m = cb.m();
    let mut codes = vec![0u16; n * m];
    codes
        .par_chunks_mut(m)
        .zip(vectors.data().par_chunks(dim))
        .for_each(|(out, v)| encode_row(cb, v, out));
    PqCodes::from_codes(n, m, cb.config.c_bits, &codes)
}

pub fn encode_vector(cb: &PqCodebook, v: &[f32]) -> Result<Vec<u16>> {
    cb.check_vector_dim("encode", v.len())?;
    let mut out = vec![0u16; cb.m()];
    encode_row(cb, v, &mut out);
    Ok(out)
}

/// Concatenate the selected centroid of every partition.
pub fn reconstruct(cb: &PqCodebook, code: &[u16]) -> Result<Vec<f32>> {
    if code.len() != cb.m() {
        return Err(Error::shape(
            "reconstruct",
            format!("code has {} entries, codebook has {} partitions", code.len(), cb.m()),
        ));
    }
    let mut out = Vec::with_capacity(cb.dim());
    for (j, &z) in code.iter().enumerate() {
        if z as usize >= cb.k_centroids() {
            return Err(Error::InvalidParam(format!(
                "code {z} out of range for {} centroids",
                cb.k_centroids()
            )));
        }
        out.extend_from_slice(cb.centroid(j, z as usize));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn naive_sq_l2(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
    }

    #[test]
    fn sq_l2_matches_naive() {
        let m = random_matrix(1, 2, 37);
        let got = sq_l2(m.row(0), m.row(1)) as f64;
        let want = naive_sq_l2(m.row(0), m.row(1));
        assert!((got - want).abs() <= 1e-5 * want);
    }

    #[test]
    fn partitions_of_default_config() {
        let train = random_matrix(2, 300, 128);
        let cb = fit_codebook(&train, &PqConfig::new(32, 4)).unwrap();
        assert_eq!(cb.m(), 32);
        assert_eq!(cb.sub_dim(), 4);
        assert_eq!(cb.table(31).len(), 16 * 4);
        let codes = encode(&cb, &train).unwrap();
        // 32 four-bit words per vector: 16 bytes.
        assert_eq!(codes.payload_bits() / codes.len(), 128);
    }

    #[test]
    fn single_partition_is_plain_kmeans() {
        let train = random_matrix(3, 60, 6);
        let cfg = PqConfig::new(1, 3).with_seed(11);
        let cb = fit_codebook(&train, &cfg).unwrap();
        let km = kmeans(&train, &KMeansParams::new(8, 11)).unwrap();
        assert_eq!(cb.table(0), km.centroids.data());
    }

    #[test]
    fn exact_fit_when_few_distinct_subvectors() {
        // 2^c distinct sub-vectors per partition: zero quantization error.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let rows: Vec<Vec<f32>> = (0..50).map(|_| pool[rng.random_range(0..4)].clone()).collect();
        let mut rows = rows;
        rows.extend(pool.iter().cloned());
        let train = Tensor::from_rows(&rows).unwrap();
        let cb = fit_codebook(&train, &PqConfig::new(2, 2)).unwrap();
        let codes = encode(&cb, &train).unwrap();
        for (i, row) in train.rows().enumerate() {
            assert_eq!(reconstruct(&cb, &codes.row(i)).unwrap(), row);
        }
    }

    #[test]
    fn encode_matches_exhaustive_argmin() {
        let train = random_matrix(5, 100, 12);
        let cb = fit_codebook(&train, &PqConfig::new(3, 3)).unwrap();
        let probe = random_matrix(6, 40, 12);
        let codes = encode(&cb, &probe).unwrap();
        for (i, row) in probe.rows().enumerate() {
            for j in 0..3 {
                let sub = &row[j * 4..(j + 1) * 4];
                let mut best = (0, f64::INFINITY);
                for z in 0..8 {
                    let d = naive_sq_l2(sub, cb.centroid(j, z));
                    if d < best.1 {
                        best = (z, d);
                    }
                }
                assert_eq!(codes.get(i, j) as usize, best.0);
            }
        }
    }

    #[test]
    fn reconstruction_error_is_sum_of_partition_minima() {
        let train = random_matrix(7, 80, 8);
        let cb = fit_codebook(&train, &PqConfig::new(4, 2)).unwrap();
        let v = random_matrix(8, 1, 8);
        let code = encode_vector(&cb, v.row(0)).unwrap();
        let rec = reconstruct(&cb, &code).unwrap();
        let err = naive_sq_l2(v.row(0), &rec);
        let mut want = 0.0;
        for j in 0..4 {
            let sub = &v.row(0)[j * 2..(j + 1) * 2];
            want += (0..4)
                .map(|z| naive_sq_l2(sub, cb.centroid(j, z)))
                .fold(f64::INFINITY, f64::min);
        }
        assert!((err - want).abs() < 1e-9);
    }

    #[test]
    fn error_paths() {
        let train = random_matrix(9, 10, 10);
        assert!(fit_codebook(&train, &PqConfig::new(3, 2)).is_err());
        assert!(fit_codebook(&train, &PqConfig::new(2, 0)).is_err());
        assert!(fit_codebook(&train, &PqConfig::new(2, 17)).is_err());
        let cb = fit_codebook(&train, &PqConfig::new(2, 2)).unwrap();
        assert!(encode(&cb, &random_matrix(1, 3, 8)).is_err());
        assert!(reconstruct(&cb, &[0, 4]).is_err());
        assert!(reconstruct(&cb, &[0]).is_err());
        assert!(PqCodes::from_codes(1, 2, 2, &[0, 4]).is_err());
    }

    #[test]
    fn wide_codes_round_trip() {
        let codes = PqCodes::from_codes(2, 2, 12, &[4095, 0, 17, 300]).unwrap();
        assert_eq!(codes.row(0), vec![4095, 0]);
        assert_eq!(codes.to_vec(), vec![4095, 0, 17, 300]);
    }

    #[test]
    fn fit_is_deterministic_across_thread_counts() {
        let train = random_matrix(10, 500, 16);
        let cfg = PqConfig::new(4, 4).with_seed(3);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = one.install(|| fit_codebook(&train, &cfg).unwrap());
        let b = fit_codebook(&train, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            one.install(|| encode(&a, &train).unwrap()),
            encode(&b, &train).unwrap()
        );
    }

    proptest! {
        #[test]
        fn encode_reconstruct_is_idempotent(seed in any::<u64>(), m in prop::sample::select(vec![1usize, 2, 4]), c in 1u32..5) {
            let train = random_matrix(seed, 30, 8);
            let cb = fit_codebook(&train, &PqConfig::new(m, c).with_seed(seed)).unwrap();
            let v = random_matrix(seed ^ 1, 1, 8);
            let code = encode_vector(&cb, v.row(0)).unwrap();
            let rec = reconstruct(&cb, &code).unwrap();
            prop_assert_eq!(encode_vector(&cb, &rec).unwrap(), code.clone());
            prop_assert_eq!(reconstruct(&cb, &code).unwrap(), rec);
        }
    }
}
