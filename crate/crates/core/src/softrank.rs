//! Differentiable ranking by projection onto the permutahedron.
//!
//! Soft ranks of `θ` with quadratic regularization strength `ε` are the
//! Euclidean projection of `θ / ε` onto the convex hull of all permutations
//! of `(1, 2, …, n)`. After sorting `z = θ / ε` in descending order the
//! projection reduces to an isotonic regression of `z_sorted − (n, …, 1)`
//! under a non-increasing constraint, solved exactly by pool-adjacent-
//! violators. The Jacobian is block-diagonal in sorted order: identity minus
//! block averaging, scaled by `1 / ε`.
//!
//! Ranks are ascending: the smallest input receives the rank closest to 1.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SoftRankError {
    #[error("soft rank needs at least two values, got {0}")]
    TooShort(usize),
    #[error("regularization strength must be positive, got {0}")]
    BadStrength(f64),
}

/// Pool-adjacent-violators for `min ½‖v − y‖²` subject to
/// `v₁ ≥ v₂ ≥ … ≥ vₙ`. Returns the fit and the block boundaries (`start`
/// indices, with an implicit end at `n`).
pub fn isotonic_non_increasing(y: &[f64]) -> (Vec<f64>, Vec<usize>) {
    // (start, sum, count)
    let mut blocks: Vec<(usize, f64, usize)> = Vec::with_capacity(y.len());
    for (i, &v) in y.iter().enumerate() {
        blocks.push((i, v, 1));
        while blocks.len() > 1 {
            let (_, s2, c2) = blocks[blocks.len() - 1];
            let (_, s1, c1) = blocks[blocks.len() - 2];
            // violation: later block mean exceeds the earlier one
            if s2 * c1 as f64 > s1 * c2 as f64 {
                let (start, _, _) = blocks[blocks.len() - 2];
                blocks.truncate(blocks.len() - 2);
                blocks.push((start, s1 + s2, c1 + c2));
            } else {
                break;
            }
        }
    }
    let mut fit = vec![0.0; y.len()];
    let mut starts = Vec::with_capacity(blocks.len());
    for &(start, sum, count) in &blocks {
        let mean = sum / count as f64;
        fit[start..start + count].iter_mut().for_each(|v| *v = mean);
        starts.push(start);
    }
    (fit, starts)
}

/// Context needed to back-propagate through [`soft_rank_with_tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftRankTape {
    /// `order[i]` is the input index holding the i-th largest value.
    order: Vec<usize>,
    block_starts: Vec<usize>,
    strength: f64,
}

impl SoftRankTape {
    /// Vector-Jacobian product: gradient with respect to the input given the
    /// gradient with respect to the ranks.
    pub fn backward(&self, grad: &[f64]) -> Vec<f64> {
        let n = self.order.len();
        let sorted: Vec<f64> = self.order.iter().map(|&i| grad[i]).collect();
        let mut out = vec![0.0; n];
        for (b, &start) in self.block_starts.iter().enumerate() {
            let end = self.block_starts.get(b + 1).copied().unwrap_or(n);
            let mean = sorted[start..end].iter().sum::<f64>() / (end - start) as f64;
            for k in start..end {
                out[self.order[k]] = (sorted[k] - mean) / self.strength;
            }
        }
        out
    }
}

pub fn soft_rank_with_tape(values: &[f64], strength: f64) -> Result<(Vec<f64>, SoftRankTape), SoftRankError> {
    let n = values.len();
    if n < 2 {
        return Err(SoftRankError::TooShort(n));
    }
    if !(strength > 0.0) {
        return Err(SoftRankError::BadStrength(strength));
    }
    let z: Vec<f64> = values.iter().map(|v| v / strength).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let target: Vec<f64> = order.iter().enumerate().map(|(k, &i)| z[i] - (n - k) as f64).collect();
    let (fit, block_starts) = isotonic_non_increasing(&target);
    let mut ranks = vec![0.0; n];
    for (k, &i) in order.iter().enumerate() {
        ranks[i] = z[i] - fit[k];
    }
    Ok((ranks, SoftRankTape { order, block_starts, strength }))
}

/// Ascending soft ranks of `values`.
pub fn soft_rank(values: &[f64], strength: f64) -> Result<Vec<f64>, SoftRankError> {
    soft_rank_with_tape(values, strength).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pav_pools_violators() {
        let (fit, blocks) = isotonic_non_increasing(&[3.0, 1.0, 2.0, 0.0]);
        assert_eq!(fit, vec![3.0, 1.5, 1.5, 0.0]);
        assert_eq!(blocks, vec![0, 1, 3]);
        let (fit, blocks) = isotonic_non_increasing(&[1.0, 2.0, 3.0]);
        assert_eq!(fit, vec![2.0, 2.0, 2.0]);
        assert_eq!(blocks, vec![0]);
    }

    #[test]
    fn all_equal_input_gets_middle_rank() {
        let r = soft_rank(&[4.2; 7], 1.0).unwrap();
        assert!(r.iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn well_separated_input_recovers_hard_ranks() {
        let v = [0.3, -5.0, 2.0, 10.0, 7.5];
        let r = soft_rank(&v, 1e-3).unwrap();
        let hard = [2.0, 1.0, 3.0, 5.0, 4.0];
        for (a, b) in r.iter().zip(hard) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(soft_rank(&[1.0], 1.0), Err(SoftRankError::TooShort(1)));
        assert_eq!(soft_rank(&[1.0, 2.0], 0.0), Err(SoftRankError::BadStrength(0.0)));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let v = [0.4, 0.1, 0.35, 0.9, -0.2, 0.36, 0.05, 0.7, 0.69, 0.0];
        let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = |x: &[f64]| -> f64 { soft_rank(x, 0.1).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
        let (_, tape) = soft_rank_with_tape(&v, 0.1).unwrap();
        let g = tape.backward(&w);
        let h = 1e-6;
        for i in 0..v.len() {
            let mut p = v.to_vec();
            let mut m = v.to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn ranks_sum_to_triangular_number(v in proptest::collection::vec(-50.0f64..50.0, 2..40), eps in 0.01f64..10.0) {
            let r = soft_rank(&v, eps).unwrap();
            let n = v.len() as f64;
            prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9 * n * n);
        }

        #[test]
        fn ranks_preserve_order(v in proptest::collection::vec(-50.0f64..50.0, 2..30), eps in 0.01f64..10.0) {
            let r = soft_rank(&v, eps).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(r[i] <= r[j] + 1e-12);
                    }
                }
            }
        }
    }
}
