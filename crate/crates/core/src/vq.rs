//! Vector quantization of per-voxel covariance parameters.
//!
//! A covariance is stored as 7 numbers: three log-scales followed by a unit
//! quaternion `(w, x, y, z)` with `w >= 0`.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const COV_DIM: usize = 7;
pub const DEFAULT_CODEBOOK_SIZE: usize = 4096;
const MAX_ITERS: usize = 50;
const REL_TOL: f64 = 1e-6;

pub type CovRow = [f32; COV_DIM];

#[derive(Debug, Clone, PartialEq)]
pub struct CovCodebook {
    pub codewords: Vec<CovRow>,
}

impl CovCodebook {
    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.is_empty()
    }

    /// Bits per packed index: `ceil(log2 K)`, zero for a single codeword.
    pub fn index_bits(&self) -> u32 {
        index_bits(self.codewords.len())
    }
}

pub fn index_bits(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// Pack log-scales and a rotation into a row with the quaternion made unit
/// length and sign-canonical.
pub fn covariance_row(log_scales: [f32; 3], rotation: [f32; 4]) -> CovRow {
    let mut r = [0.0; COV_DIM];
    r[..3].copy_from_slice(&log_scales);
    r[3..].copy_from_slice(&rotation);
    canonicalize(&mut r);
    r
}

fn canonicalize(r: &mut CovRow) {
    let n = r[3..]
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if n == 0.0 || !n.is_finite() {
        r[3..].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        return;
    }
    let sign = if r[3] < 0.0 { -1.0 } else { 1.0 };
    for v in &mut r[3..] {
        *v = (*v as f64 / n * sign) as f32;
    }
}

#[inline]
fn dist2(a: &CovRow, b: &CovRow) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Nearest codeword, ties to the lower index.
fn nearest(row: &CovRow, codewords: &[CovRow]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in codewords.iter().enumerate() {
        let d = dist2(row, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn distinct_count(rows: &[CovRow]) -> usize {
    let mut keys: Vec<[u32; COV_DIM]> = rows.iter().map(|r| r.map(f32::to_bits)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// k-means with k-means++ seeding. `K` larger than the number of distinct rows
/// is truncated to that number.
pub fn vq_train(rows: &[CovRow], k: usize, seed: u64) -> Result<CovCodebook> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("covariance rows"));
    }
    if k == 0 {
        return Err(Error::Config("codebook size must be at least 1".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data {
            index: i,
            message: "non-finite covariance".into(),
        });
    }
    let k = k.min(distinct_count(rows));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<CovRow> = Vec::with_capacity(k);
    centers.push(rows[rng.random_range(0..rows.len())]);
    let mut d2: Vec<f64> = rows.iter().map(|r| dist2(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut t = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                pick = Some(i);
                if t < d {
                    break;
                }
                t -= d;
            }
        }
        // `k` never exceeds the distinct count, so some row has d2 > 0.
        let c = rows[pick.expect("a row away from every center")];
        centers.push(c);
        d2.par_iter_mut()
            .zip(rows.par_iter())
            .for_each(|(d, r)| *d = d.min(dist2(r, &c)));
    }

    let mut prev = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let assign: Vec<(usize, f64)> = rows.par_iter().map(|r| nearest(r, &centers)).collect();
        let inertia: f64 = assign.iter().map(|a| a.1).sum();

        let mut sums = vec![[0.0f64; COV_DIM]; k];
        let mut counts = vec![0usize; k];
        for (r, &(c, _)) in rows.iter().zip(&assign) {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(r) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut mean = [0.0f32; COV_DIM];
            for (m, s) in mean.iter_mut().zip(&sums[c]) {
                *m = (s / counts[c] as f64) as f32;
            }
            canonicalize(&mut mean);
            centers[c] = mean;
        }

        let done =
            prev.is_finite() && (prev - inertia).abs() <= REL_TOL * prev.max(f64::MIN_POSITIVE);
        prev = inertia;
        if done || inertia == 0.0 {
            break;
        }
    }
    Ok(CovCodebook { codewords: centers })
}

pub fn vq_encode(rows: &[CovRow], codebook: &CovCodebook) -> Result<Vec<u32>> {
    if codebook.is_empty() {
        return Err(Error::EmptyInput("codebook"));
    }
    Ok(rows
        .par_iter()
        .map(|r| nearest(r, &codebook.codewords).0 as u32)
        .collect())
}

pub fn vq_decode(indices: &[u32], codebook: &CovCodebook) -> Result<Vec<CovRow>> {
    indices
        .iter()
        .map(|&i| {
            codebook.codewords.get(i as usize).copied().ok_or_else(|| {
                Error::bitstream(format!("codebook index {i} >= {}", codebook.len()))
            })
        })
        .collect()
}

/// Sum of squared reconstruction errors.
pub fn vq_error(rows: &[CovRow], codebook: &CovCodebook) -> f64 {
    rows.iter().map(|r| nearest(r, &codebook.codewords).1).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_rows(seed: u64, n: usize) -> Vec<CovRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let s = [
                    rng.random_range(-5.0..-1.0),
                    rng.random_range(-5.0..-1.0),
                    rng.random_range(-5.0..-1.0),
                ];
                let q = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                covariance_row(s, q)
            })
            .collect()
    }

    fn quat_norm(r: &CovRow) -> f32 {
        r[3..].iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    #[test]
    fn index_bit_widths() {
        assert_eq!(index_bits(1), 0);
        assert_eq!(index_bits(2), 1);
        assert_eq!(index_bits(5), 3);
        assert_eq!(index_bits(4096), 12);
        assert_eq!(index_bits(4097), 13);
    }

    #[test]
    fn k1_is_renormalized_mean() {
        let rows = random_rows(1, 50);
        let cb = vq_train(&rows, 1, 0).unwrap();
        let mut mean = [0.0f64; COV_DIM];
        for r in &rows {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64 / rows.len() as f64;
            }
        }
        let mut expect = mean.map(|v| v as f32);
        canonicalize(&mut expect);
        for (a, b) in cb.codewords[0].iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
        assert_abs_diff_eq!(quat_norm(&cb.codewords[0]), 1.0, epsilon = 1e-5);
    }

    #[test]
    fn m_equals_k_is_lossless() {
        let rows = random_rows(2, 16);
        let cb = vq_train(&rows, 16, 9).unwrap();
        let idx = vq_encode(&rows, &cb).unwrap();
        assert_eq!(vq_decode(&idx, &cb).unwrap(), rows);
        assert_eq!(vq_error(&rows, &cb), 0.0);
    }

    #[test]
    fn k_truncated_to_distinct_rows() {
        let mut rows = random_rows(3, 4);
        rows.extend(rows.clone());
        let cb = vq_train(&rows, 100, 0).unwrap();
        assert_eq!(cb.len(), 4);
    }

    #[test]
    fn beats_random_subset_codebook() {
        let rows = random_rows(4, 200);
        let cb = vq_train(&rows, 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let subset = CovCodebook {
                codewords: (0..8)
                    .map(|_| rows[rng.random_range(0..rows.len())])
                    .collect(),
            };
            assert!(vq_error(&rows, &cb) <= vq_error(&rows, &subset));
        }
        assert!(cb
            .codewords
            .iter()
            .all(|c| (quat_norm(c) - 1.0).abs() < 1e-5 && c[3] >= 0.0));
    }

    #[test]
    fn codeword_maps_to_itself_and_ties_go_low() {
        let a = covariance_row([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]);
        let mut b = a;
        b[0] = 2.0;
        let cb = CovCodebook {
            codewords: vec![a, b],
        };
        let mut mid = a;
        mid[0] = 1.0;
        assert_eq!(vq_encode(&[a, b, mid], &cb).unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn encode_matches_brute_force() {
        let rows = random_rows(5, 300);
        let cb = vq_train(&rows[..100], 12, 3).unwrap();
        let idx = vq_encode(&rows, &cb).unwrap();
        for (r, &i) in rows.iter().zip(&idx) {
            let d: Vec<f64> = cb.codewords.iter().map(|c| dist2(r, c)).collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = d.iter().position(|&x| x == min).unwrap();
            assert_eq!(i as usize, first);
        }
    }

    #[test]
    fn bad_index_is_bitstream_error() {
        let cb = CovCodebook {
            codewords: random_rows(6, 3),
        };
        assert!(matches!(vq_decode(&[3], &cb), Err(Error::Bitstream(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let rows = random_rows(7, 150);
        assert_eq!(
            vq_train(&rows, 10, 4).unwrap(),
            vq_train(&rows, 10, 4).unwrap()
        );
    }

    #[test]
    fn error_non_increasing_in_k() {
        for seed in 0..4 {
            let rows = random_rows(100 + seed, 400);
            let mut last = f64::INFINITY;
            for k in [1, 2, 4, 8, 16, 32, 64] {
                let e = vq_error(&rows, &vq_train(&rows, k, seed).unwrap());
                assert!(e <= last, "seed {seed} k {k}: {e} > {last}");
                last = e;
            }
        }
    }
}
