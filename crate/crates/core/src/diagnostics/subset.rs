use itertools::Itertools;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::center;
use crate::error::{LampError, Result};

/// Largest number of candidate subsets searched exhaustively.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSelection {
    pub indices: Vec<usize>,
    pub r_squared: f64,
    pub adjusted_r_squared: f64,
    /// False when the search fell back to greedy forward selection.
    pub exhaustive: bool,
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
        if acc > EXHAUSTIVE_LIMIT * 1000 {
            return u128::MAX;
        }
    }
    acc
}

struct Gram {
    g: DMatrix<f64>,
    c: Vec<f64>,
}

impl Gram {
    /// Explained sum of squares of the centred regression on `idx`, or `None`
    /// when the selected columns are (numerically) collinear.
    fn explained(&self, idx: &[usize], scratch: &mut Vec<f64>) -> Option<f64> {
        let k = idx.len();
        scratch.clear();
        scratch.resize(k * k, 0.0);
        let l = scratch.as_mut_slice();
        for i in 0..k {
            for j in 0..=i {
                let mut s = self.g[(idx[i], idx[j])];
                for m in 0..j {
                    s -= l[i * k + m] * l[j * k + m];
                }
                if i == j {
                    let diag = self.g[(idx[i], idx[i])];
                    if s <= 1e-10 * diag || s <= 0.0 {
                        return None;
                    }
                    l[i * k + i] = s.sqrt();
                } else {
                    l[i * k + j] = s / l[j * k + j];
                }
            }
        }
        // ESS = ‖L⁻¹c_S‖²
        let mut ess = 0.0;
        let mut z = vec![0.0; k];
        for i in 0..k {
            let mut s = self.c[idx[i]];
            for m in 0..i {
                s -= l[i * k + m] * z[m];
            }
            z[i] = s / l[i * k + i];
            ess += z[i] * z[i];
        }
        Some(ess)
    }
}

/// Best `k`-column subset of `x` by in-sample R² of an OLS fit with intercept.
///
/// Searches exhaustively when there are at most [`EXHAUSTIVE_LIMIT`] subsets,
/// otherwise adds columns greedily. Ties go to the lexicographically first
/// subset.
pub fn best_subset(x: &DMatrix<f64>, y: &[f64], k: usize) -> Result<SubsetSelection> {
    let (n, p) = (x.nrows(), x.ncols());
    if n != y.len() {
        return Err(LampError::param("design and response lengths differ"));
    }
    if k == 0 || k > p {
        return Err(LampError::param(format!("subset size must lie in 1..={p}, got {k}")));
    }
    if n < k + 2 {
        return Err(LampError::InsufficientData { required: k + 2, available: n, hint: None });
    }
    let (xc, yc) = center(x, y);
    let tss: f64 = yc.iter().map(|v| v * v).sum();
    let gram = Gram {
        g: xc.transpose() * &xc,
        c: (0..p).map(|j| xc.column(j).iter().zip(&yc).map(|(a, b)| a * b).sum()).collect(),
    };
    let r2 = |ess: f64| if tss > 0.0 { (ess / tss).clamp(0.0, 1.0) } else { 0.0 };
    let mut scratch = Vec::new();

    let exhaustive = binomial(p, k) <= EXHAUSTIVE_LIMIT;
    let mut best: Option<(Vec<usize>, f64)> = None;
    if exhaustive {
        for idx in (0..p).combinations(k) {
            if let Some(ess) = gram.explained(&idx, &mut scratch) {
                let v = r2(ess);
                if best.as_ref().is_none_or(|(_, b)| v > b + 1e-12) {
                    best = Some((idx, v));
                }
            }
        }
    } else {
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        let mut current = 0.0;
        for _ in 0..k {
            let mut step: Option<(usize, f64)> = None;
            for j in (0..p).filter(|j| !chosen.contains(j)) {
                let mut trial = chosen.clone();
                trial.push(j);
                if let Some(ess) = gram.explained(&trial, &mut scratch) {
                    let v = r2(ess);
                    if step.is_none_or(|(_, b)| v > b + 1e-12) {
                        step = Some((j, v));
                    }
                }
            }
            let (j, v) = step.ok_or_else(|| LampError::SingularFit { columns: chosen.clone() })?;
            chosen.push(j);
            current = v;
        }
        chosen.sort_unstable();
        best = Some((chosen, current));
    }
    let (indices, r_squared) = best.ok_or_else(|| LampError::SingularFit { columns: (0..p).collect() })?;
    let adjusted_r_squared = 1.0 - (1.0 - r_squared) * (n as f64 - 1.0) / (n - k - 1) as f64;
    Ok(SubsetSelection { indices, r_squared, adjusted_r_squared, exhaustive })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{fit_affine, RankPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_planted_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(80, 8, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..80).map(|i| 2.0 * x[(i, 2)] - 1.5 * x[(i, 5)] + rng.random_range(-0.05..0.05)).collect();
        let s = best_subset(&x, &y, 2).unwrap();
        assert_eq!(s.indices, vec![2, 5]);
        assert!(s.exhaustive);
        assert!(s.adjusted_r_squared <= s.r_squared);
    }

    #[test]
    fn r2_matches_direct_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(40, 6, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = best_subset(&x, &y, 3).unwrap();
        let cols = DMatrix::from_fn(40, 3, |i, j| x[(i, s.indices[j])]);
        let fit = fit_affine(&cols, &y, 0.0, RankPolicy::Strict).unwrap();
        assert!((fit.r_squared() - s.r_squared).abs() < 1e-9);
        // brute force maximum
        let best = (0..6)
            .combinations(3)
            .map(|idx| {
                let c = DMatrix::from_fn(40, 3, |i, j| x[(i, idx[j])]);
                fit_affine(&c, &y, 0.0, RankPolicy::Strict).unwrap().r_squared()
            })
            .fold(0.0, f64::max);
        assert!((best - s.r_squared).abs() < 1e-9);
    }

    #[test]
    fn ties_prefer_lowest_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        // columns 1 and 3 are identical copies of the response driver
        let x = DMatrix::from_fn(30, 4, |i, j| match j {
            1 | 3 => base[i],
            _ => rng.random_range(-1.0..1.0),
        });
        let y = base.clone();
        assert_eq!(best_subset(&x, &y, 1).unwrap().indices, vec![1]);
    }

    #[test]
    fn collinear_subsets_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = DMatrix::from_fn(30, 3, |i, j| match j {
            0 => a[i],
            1 => 2.0 * a[i],
            _ => rng.random_range(-1.0..1.0),
        });
        let y: Vec<f64> = (0..30).map(|i| a[i] + 0.5 * x[(i, 2)]).collect();
        let s = best_subset(&x, &y, 2).unwrap();
        assert_ne!(s.indices, vec![0, 1]);
        assert!((s.r_squared - 1.0).abs() < 1e-9);
    }

    #[test]
    fn greedy_fallback_for_large_searches() {
        assert!(binomial(60, 10) > EXHAUSTIVE_LIMIT);
        assert_eq!(binomial(45, 5), 1_221_759);
        assert_eq!(binomial(10, 3), 120);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = DMatrix::from_fn(100, 60, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..100).map(|i| x[(i, 7)] + x[(i, 40)]).collect();
        let s = best_subset(&x, &y, 10).unwrap();
        assert!(!s.exhaustive);
        assert!(s.indices.contains(&7) && s.indices.contains(&40));
    }

    #[test]
    fn rejects_bad_sizes() {
        let x = DMatrix::from_element(5, 3, 1.0);
        assert!(best_subset(&x, &[0.0; 5], 0).is_err());
        assert!(best_subset(&x, &[0.0; 5], 4).is_err());
        assert!(best_subset(&DMatrix::from_element(3, 3, 1.0), &[0.0; 3], 2).is_err());
    }
}
