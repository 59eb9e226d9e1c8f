//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::sq_l2;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// Below this many points the assignment step stays on the calling thread.
const PARALLEL_MIN_POINTS: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative inertia improvement of one Lloyd step drops
    /// below this value.
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            seed,
            max_iter: 25,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeans {
    /// `k × d` centroid matrix.
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the seeding.
    pub history: Vec<f64>,
}

/// Index of the nearest centroid and its squared distance. Ties go to the
/// lowest index.
pub(crate) fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (z, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_l2(point, c);
        if d < best.1 {
            best = (z, d);
        }
    }
    best
}

fn assign(points: &[f32], dim: usize, centroids: &[f32], out: &mut [(usize, f32)]) {
    let work = |(p, slot): (&[f32], &mut (usize, f32))| *slot = nearest(p, centroids, dim);
    if out.len() >= PARALLEL_MIN_POINTS {
        points.par_chunks_exact(dim).zip(out.par_iter_mut()).for_each(work);
    } else {
        points.chunks_exact(dim).zip(out.iter_mut()).for_each(work);
    }
}

fn inertia(assigned: &[(usize, f32)]) -> f64 {
    assigned.iter().map(|&(_, d)| d as f64).sum()
}

fn seed_plus_plus(points: &[f32], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut weight: Vec<f64> = (0..n).map(|i| sq_l2(point(i), point(first)) as f64).collect();

    for chosen in 1..k {
        let total: f64 = weight.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in weight.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total weight has a positive entry")
        } else {
            // Every point already coincides with a centroid: duplicate.
            chosen % n
        };
        let c = point(pick);
        centroids.extend_from_slice(c);
        for (i, w) in weight.iter_mut().enumerate() {
            *w = w.min(sq_l2(point(i), c) as f64);
        }
    }
    centroids
}

pub fn kmeans(points: &Tensor, params: &KMeansParams) -> Result<KMeans> {
    let (n, dim) = points.matrix_dims("kmeans")?;
    if params.k == 0 {
        return Err(Error::InvalidParam("kmeans needs k >= 1".into()));
    }
    if !points.all_finite() {
        return Err(Error::NonFinite("kmeans input".into()));
    }
    if params.tol.is_nan() || params.tol < 0.0 {
        return Err(Error::InvalidParam(format!(
            "kmeans tolerance must be non-negative, got {}",
            params.tol
        )));
    }
    let k = params.k;
    let data = points.data();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = seed_plus_plus(data, n, dim, k, &mut rng);

    let mut assigned = vec![(0usize, 0.0f32); n];
    assign(data, dim, &centroids, &mut assigned);
    let mut current = inertia(&assigned);
    let mut history = vec![current];

    for _ in 0..params.max_iter {
        if current == 0.0 {
            break;
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &(z, _)) in data.chunks_exact(dim).zip(&assigned) {
            counts[z] += 1;
            for (s, &v) in sums[z * dim..(z + 1) * dim].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let mut residual: Vec<f32> = assigned.iter().map(|&(_, d)| d).collect();
        for z in 0..k {
            let dst = &mut centroids[z * dim..(z + 1) * dim];
            if counts[z] > 0 {
                let inv = counts[z] as f64;
                for (c, &s) in dst.iter_mut().zip(&sums[z * dim..(z + 1) * dim]) {
                    *c = (s / inv) as f32;
                }
            } else {
                // Re-seed an empty cluster at the worst-served point.
                let mut far = 0;
                for (i, &r) in residual.iter().enumerate() {
                    if r > residual[far] {
                        far = i;
                    }
                }
                dst.copy_from_slice(&data[far * dim..(far + 1) * dim]);
                residual[far] = 0.0;
            }
        }

        assign(data, dim, &centroids, &mut assigned);
        let next = inertia(&assigned);
        history.push(next);
        let improvement = (current - next) / current;
        current = next;
        if improvement < params.tol {
            break;
        }
    }

    Ok(KMeans {
        centroids: Tensor::new(vec![k, dim], centroids)?,
        assignments: assigned.iter().map(|&(z, _)| z).collect(),
        inertia: current,
        history,
    })
}
