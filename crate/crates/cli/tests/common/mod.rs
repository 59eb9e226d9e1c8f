#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use aqade_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn aqade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aqade"))
        .args(args)
        .env_remove("AQADE_THREADS")
        .output()
        .expect("spawn aqade")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

/// `n_normal` standard normal rows followed by `n_anomaly` rows shifted by
/// `shift` in the first `shifted` coordinates.
pub fn shifted_test_set(
    rng: &mut ChaCha8Rng,
    n_normal: usize,
    n_anomaly: usize,
    d: usize,
    shifted: usize,
    shift: f32,
) -> (Tensor, Vec<u8>) {
    let mut t = gaussian(rng, n_normal + n_anomaly, d);
    let data = t.data_mut();
    for i in n_normal..n_normal + n_anomaly {
        for v in &mut data[i * d..i * d + shifted] {
            *v += shift;
        }
    }
    let mut labels = vec![0u8; n_normal];
    labels.resize(n_normal + n_anomaly, 1);
    (t, labels)
}

/// Integer-valued rows whose sub-vectors over `m` contiguous partitions
/// take at most `patterns` distinct values each, so a codebook with at
/// least that many centroids per partition reproduces them exactly.
pub fn patterned(rng: &mut ChaCha8Rng, n: usize, d: usize, m: usize, patterns: usize) -> Tensor {
    let s = d / m;
    let bank: Vec<Vec<Vec<f32>>> = (0..m)
        .map(|_| {
            (0..patterns)
                .map(|_| (0..s).map(|_| rng.random_range(-8i32..=8) as f32).collect())
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for part in &bank {
            data.extend_from_slice(&part[rng.random_range(0..patterns)]);
        }
    }
    Tensor::new(vec![n, d], data).unwrap()
}

pub fn integer_queries(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| rng.random_range(-10i32..=10) as f32).collect();
    Tensor::new(vec![n, d], data).unwrap()
}
