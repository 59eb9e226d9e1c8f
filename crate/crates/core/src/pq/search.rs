use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{sq_l2, CodeStore, PqCodebook, PqCodes};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-query table of squared distances from each query sub-vector to every
/// centroid of its partition, stored `m × 2^c_bits` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceLut {
    m: usize,
    k: usize,
    table: Vec<f32>,
}

impl DistanceLut {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k_centroids(&self) -> usize {
        self.k
    }

    pub fn partition(&self, j: usize) -> &[f32] {
        &self.table[j * self.k..(j + 1) * self.k]
    }

    pub fn get(&self, j: usize, z: usize) -> f32 {
        self.table[j * self.k + z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f32,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps the `k` smallest neighbors seen, ordered by (distance, index).
struct TopK {
    k: usize,
    heap: BinaryHeap<Neighbor>,
    /// Distance of the current k-th best once the heap is full.
    bound: f32,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
            bound: f32::INFINITY,
        }
    }

    #[inline]
    fn push(&mut self, index: usize, distance: f32) {
        // NaN fails this test too and falls through to the ordered path.
        if distance > self.bound {
            return;
        }
        let cand = Neighbor { index, distance };
        if self.heap.len() < self.k {
            self.heap.push(cand);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if cand < *worst {
                *worst = cand;
            }
        }
        if self.heap.len() == self.k {
            if let Some(worst) = self.heap.peek() {
                self.bound = worst.distance;
            }
        }
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        self.heap.into_sorted_vec()
    }
}

pub fn build_lut(cb: &PqCodebook, query: &[f32]) -> Result<DistanceLut> {
    cb.check_vector_dim("build_lut", query.len())?;
    let (m, k, s) = (cb.m(), cb.k_centroids(), cb.sub_dim());
    let mut table = Vec::with_capacity(m * k);
    for j in 0..m {
        let q = &query[j * s..(j + 1) * s];
        table.extend(cb.table(j).chunks_exact(s).map(|c| sq_l2(q, c)));
    }
    Ok(DistanceLut { m, k, table })
}

/// Approximate squared distance: sum of the table entries picked by `code`.
pub fn adc_distance(lut: &DistanceLut, code: &[u16]) -> Result<f32> {
    if code.len() != lut.m {
        return Err(Error::shape(
            "adc_distance",
            format!("code has {} entries, table has {} partitions", code.len(), lut.m),
        ));
    }
    let mut sum = 0.0f32;
    for (j, &z) in code.iter().enumerate() {
        let z = z as usize;
        if z >= lut.k {
            return Err(Error::InvalidParam(format!(
                "code {z} out of range for {} centroids",
                lut.k
            )));
        }
        sum += lut.table[j * lut.k + z];
    }
    Ok(sum)
}

fn check_k(op: &'static str, k: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty(op));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParam(format!(
            "{op}: k = {k} must be in 1..={n}"
        )));
    }
    Ok(())
}

const SCAN_BLOCK: usize = 4;

/// Rows are summed in blocks of four independent chains; each row still adds
/// its partitions in order `0..m`, matching [`adc_distance`] bit for bit.
#[inline(always)]
fn scan_rows<P, C: Copy>(
    parts: &[P],
    codes: &[C],
    top: &mut TopK,
    get: impl Fn(&P, C) -> f32,
) {
    let m = parts.len();
    let mut blocks = codes.chunks_exact(m * SCAN_BLOCK);
    let mut base = 0;
    for block in &mut blocks {
        let (r0, rest) = block.split_at(m);
        let (r1, rest) = rest.split_at(m);
        let (r2, r3) = rest.split_at(m);
        let mut acc = [0.0f32; SCAN_BLOCK];
        for (j, part) in parts.iter().enumerate() {
            acc[0] += get(part, r0[j]);
            acc[1] += get(part, r1[j]);
            acc[2] += get(part, r2[j]);
            acc[3] += get(part, r3[j]);
        }
        for (o, &d) in acc.iter().enumerate() {
            top.push(base + o, d);
        }
        base += SCAN_BLOCK;
    }
    for (i, row) in blocks.remainder().chunks_exact(m).enumerate() {
        let mut sum = 0.0f32;
        for (part, &z) in parts.iter().zip(row) {
            sum += get(part, z);
        }
        top.push(base + i, sum);
    }
}

fn scan_codes<C: Copy + Into<usize>>(lut: &DistanceLut, codes: &[C], top: &mut TopK) {
    let parts: Vec<&[f32]> = lut.table.chunks_exact(lut.k).collect();
    scan_rows(&parts, codes, top, |p, z| p[z.into()]);
}

/// The `k` nearest encoded rows to `query` by lookup-table distance, in
/// ascending (distance, index) order. Every code is scanned.
pub fn knn_quantized(
    cb: &PqCodebook,
    codes: &PqCodes,
    query: &[f32],
    k: usize,
) -> Result<Vec<Neighbor>> {
    check_k("knn_quantized", k, codes.len())?;
    if codes.m() != cb.m() {
        return Err(Error::shape(
            "knn_quantized",
            format!("codes have {} partitions, codebook has {}", codes.m(), cb.m()),
        ));
    }
    let lut = build_lut(cb, query)?;
    let mut top = TopK::new(k);
    match &codes.store {
        CodeStore::Narrow(v) => scan_codes(&lut, v, &mut top),
        CodeStore::Wide(v) => scan_codes(&lut, v, &mut top),
    }
    Ok(top.into_sorted())
}

/// The `k` nearest rows of `database` to `query` by exact squared distance.
pub fn knn_exact(database: &Tensor, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
    let (n, dim) = database.matrix_dims("knn_exact")?;
    check_k("knn_exact", k, n)?;
    if query.len() != dim {
        return Err(Error::shape(
            "knn_exact",
            format!("query has {} dims, database has {dim}", query.len()),
        ));
    }
    let mut top = TopK::new(k);
    for (i, row) in database.rows().enumerate() {
        top.push(i, sq_l2(query, row));
    }
    Ok(top.into_sorted())
}

#[cfg(test)]
mod tests {
    use super::super::{encode, fit_codebook, reconstruct, PqConfig};
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_sq_l2(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
    }

    fn setup(seed: u64, n: usize, d: usize, m: usize, c: u32) -> (Tensor, PqCodebook, PqCodes) {
        let train = random_matrix(seed, n, d);
        let cb = fit_codebook(&train, &PqConfig::new(m, c).with_seed(seed)).unwrap();
        let codes = encode(&cb, &train).unwrap();
        (train, cb, codes)
    }

    #[test]
    fn lut_zero_at_own_centroids() {
        let (_, cb, codes) = setup(1, 64, 16, 4, 3);
        let rec = reconstruct(&cb, &codes.row(5)).unwrap();
        let lut = build_lut(&cb, &rec).unwrap();
        for (j, &z) in codes.row(5).iter().enumerate() {
            assert_eq!(lut.get(j, z as usize), 0.0);
        }
        assert!(adc_distance(&lut, &codes.row(5)).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn lut_matches_direct_distances() {
        let (_, cb, _) = setup(2, 64, 16, 4, 3);
        let q = random_matrix(3, 1, 16);
        let lut = build_lut(&cb, q.row(0)).unwrap();
        for j in 0..4 {
            for z in 0..8 {
                let want = naive_sq_l2(&q.row(0)[j * 4..(j + 1) * 4], cb.centroid(j, z));
                let got = lut.get(j, z) as f64;
                assert!((got - want).abs() <= 1e-5 * want.max(1e-6));
            }
        }
    }

    #[test]
    fn single_partition_lut_is_full_distance() {
        let (_, cb, _) = setup(4, 40, 6, 1, 2);
        let q = random_matrix(5, 1, 6);
        let lut = build_lut(&cb, q.row(0)).unwrap();
        for z in 0..4 {
            let want = naive_sq_l2(q.row(0), cb.centroid(0, z));
            assert!((lut.get(0, z) as f64 - want).abs() <= 1e-5 * want.max(1e-6));
            assert_eq!(adc_distance(&lut, &[z as u16]).unwrap(), lut.get(0, z));
        }
    }

    #[test]
    fn adc_matches_reconstruction_distance() {
        for m in [1usize, 4, 8] {
            let (_, cb, codes) = setup(6 + m as u64, 200, 64, m, 4);
            let queries = random_matrix(99, 50, 64);
            for q in queries.rows() {
                let lut = build_lut(&cb, q).unwrap();
                for i in (0..200).step_by(7) {
                    let code = codes.row(i);
                    let got = adc_distance(&lut, &code).unwrap() as f64;
                    let want = naive_sq_l2(q, &reconstruct(&cb, &code).unwrap());
                    assert!((got - want).abs() <= 1e-4 * want.max(1e-12));
                }
            }
        }
    }

    #[test]
    fn knn_quantized_hits_exact_row() {
        // Rows are centroid concatenations, so row 7 reconstructs exactly.
        let (_, cb, codes) = setup(8, 100, 8, 2, 3);
        let recs: Vec<Vec<f32>> = (0..100).map(|i| reconstruct(&cb, &codes.row(i)).unwrap()).collect();
        let db = Tensor::from_rows(&recs).unwrap();
        let db_codes = encode(&cb, &db).unwrap();
        let hits = knn_quantized(&cb, &db_codes, db.row(7), 1).unwrap();
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(db.row(hits[0].index), db.row(7));
        // First exact duplicate of row 7 wins the tie.
        let first = (0..100).find(|&i| db.row(i) == db.row(7)).unwrap();
        assert_eq!(hits[0].index, first);
    }

    #[test]
    fn knn_quantized_matches_full_sort() {
        let (_, cb, codes) = setup(9, 200, 16, 4, 2);
        let q = random_matrix(10, 1, 16);
        let lut = build_lut(&cb, q.row(0)).unwrap();
        let mut all: Vec<Neighbor> = (0..200)
            .map(|i| Neighbor {
                index: i,
                distance: adc_distance(&lut, &codes.row(i)).unwrap(),
            })
            .collect();
        all.sort();
        assert_eq!(knn_quantized(&cb, &codes, q.row(0), 200).unwrap(), all);
        assert_eq!(knn_quantized(&cb, &codes, q.row(0), 10).unwrap(), all[..10].to_vec());
    }

    #[test]
    fn knn_exact_hand_example() {
        let db = Tensor::new(vec![3, 1], vec![0.0, 3.0, 10.0]).unwrap();
        let hits = knn_exact(&db, &[4.0], 1).unwrap();
        assert_eq!(hits, vec![Neighbor { index: 1, distance: 1.0 }]);
        let member = knn_exact(&db, &[10.0], 2).unwrap();
        assert_eq!(member[0], Neighbor { index: 2, distance: 0.0 });
    }

    #[test]
    fn knn_exact_matches_loop_oracle() {
        let db = random_matrix(11, 500, 16);
        let q = random_matrix(12, 1, 16);
        let got = knn_exact(&db, q.row(0), 10).unwrap();
        let mut oracle: Vec<(f64, usize)> = db
            .rows()
            .enumerate()
            .map(|(i, r)| (naive_sq_l2(q.row(0), r), i))
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (g, o) in got.iter().zip(&oracle) {
            assert_eq!(g.index, o.1);
            assert!((g.distance as f64 - o.0).abs() <= 1e-5 * o.0);
        }
    }

    #[test]
    fn knn_exact_bit_exact_on_integer_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let db = Tensor::new(
            vec![300, 16],
            (0..300 * 16).map(|_| rng.random_range(-4i32..5) as f32).collect(),
        )
        .unwrap();
        let q: Vec<f32> = (0..16).map(|_| rng.random_range(-4i32..5) as f32).collect();
        let got = knn_exact(&db, &q, 300).unwrap();
        let mut oracle: Vec<(f32, usize)> = db
            .rows()
            .enumerate()
            .map(|(i, r)| {
                let mut s = 0.0f32;
                for d in 0..16 {
                    s += (q[d] - r[d]) * (q[d] - r[d]);
                }
                (s, i)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got: Vec<(f32, usize)> = got.iter().map(|n| (n.distance, n.index)).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn knn_errors() {
        let (train, cb, codes) = setup(14, 10, 4, 2, 1);
        assert!(knn_quantized(&cb, &codes, train.row(0), 11).is_err());
        assert!(knn_quantized(&cb, &codes, train.row(0), 0).is_err());
        assert!(knn_quantized(&cb, &codes, &[0.0; 3], 1).is_err());
        assert!(knn_exact(&train, train.row(0), 11).is_err());
        assert!(knn_exact(&train, &[0.0; 5], 1).is_err());
        let lut = build_lut(&cb, train.row(0)).unwrap();
        assert!(adc_distance(&lut, &[0]).is_err());
        assert!(adc_distance(&lut, &[0, 2]).is_err());
    }

    proptest! {
        #[test]
        fn encode_picks_partition_minimum(seed in any::<u64>()) {
            let (_, cb, _) = setup(seed, 40, 8, 4, 2);
            let q = random_matrix(seed ^ 0xff, 1, 8);
            let lut = build_lut(&cb, q.row(0)).unwrap();
            let code = super::super::encode_vector(&cb, q.row(0)).unwrap();
            for (j, &z) in code.iter().enumerate() {
                let min = lut.partition(j).iter().copied().fold(f32::INFINITY, f32::min);
                prop_assert_eq!(lut.get(j, z as usize), min);
                prop_assert!(lut.partition(j).iter().all(|&v| v >= 0.0 && v.is_finite()));
            }
        }
    }
}
