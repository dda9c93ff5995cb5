//! Monte Carlo permutation tests on a difference of means.

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalyticsError;
use crate::seed;

pub const MIN_RESAMPLES: usize = 100;
const CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    pub observed_stat: f64,
    pub p_value: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `|stat| >= |observed|` with slack for summation-order rounding.
fn at_least_as_extreme(stat: f64, observed: f64) -> bool {
    stat.abs() >= observed.abs() - 1e-12 * observed.abs().max(1.0)
}

/// Count extreme resamples, splitting the work into fixed chunks that each
/// draw from their own derived generator. `draw` gets a per-chunk scratch
/// copy of `init` it may permute freely.
fn count_extreme<F>(n_resamples: usize, seed: u64, label: &str, init: &[f64], draw: F) -> usize
where
    F: Fn(&mut rand_chacha::ChaCha8Rng, &mut [f64]) -> bool + Sync,
{
    let chunks = n_resamples.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::derived_rng(seed, &format!("{label}/{c}"));
            let mut scratch = init.to_vec();
            let n = CHUNK.min(n_resamples - c * CHUNK);
            (0..n).filter(|_| draw(&mut rng, &mut scratch)).count()
        })
        .sum()
}

fn check(n_resamples: usize, samples: &[&[f64]]) -> Result<(), AnalyticsError> {
    if samples.iter().any(|s| s.is_empty()) {
        return Err(AnalyticsError::EmptySample);
    }
    if n_resamples < MIN_RESAMPLES {
        return Err(AnalyticsError::TooFewResamples(n_resamples));
    }
    Ok(())
}

/// Two-sample test: statistic `mean(a) - mean(b)`, pooled labels shuffled.
pub fn permutation_test(
    a: &[f64],
    b: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<PermutationTestResult, AnalyticsError> {
    check(n_resamples, &[a, b])?;
    let observed = mean(a) - mean(b);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let total: f64 = pooled.iter().sum();
    let (na, nb) = (a.len(), b.len());
    let extreme = count_extreme(n_resamples, seed, "two-sample", &pooled, |rng, scratch| {
        // Shuffling an already-shuffled buffer is still a uniform permutation.
        let (chosen, _) = scratch.partial_shuffle(rng, na);
        let sum_a: f64 = chosen.iter().sum();
        let stat = sum_a / na as f64 - (total - sum_a) / nb as f64;
        at_least_as_extreme(stat, observed)
    });
    Ok(PermutationTestResult {
        observed_stat: observed,
        p_value: (1 + extreme) as f64 / (1 + n_resamples) as f64,
        n_resamples,
        seed,
    })
}

/// Paired test: the two labels are swapped independently within each pair,
/// i.e. the signs of `a[i] - b[i]` are flipped at random.
pub fn paired_permutation_test(
    a: &[f64],
    b: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<PermutationTestResult, AnalyticsError> {
    check(n_resamples, &[a, b])?;
    if a.len() != b.len() {
        return Err(AnalyticsError::UnpairedSamples(a.len(), b.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = mean(&d);
    let n = d.len() as f64;
    let extreme = count_extreme(n_resamples, seed, "paired", &[], |rng, _| {
        let mut s = 0.0;
        for block in d.chunks(64) {
            let bits = rng.next_u64();
            for (i, &x) in block.iter().enumerate() {
                s += if bits >> i & 1 == 1 { x } else { -x };
            }
        }
        at_least_as_extreme(s / n, observed)
    });
    Ok(PermutationTestResult {
        observed_stat: observed,
        p_value: (1 + extreme) as f64 / (1 + n_resamples) as f64,
        n_resamples,
        seed,
    })
}

/// Exact two-sample p-value by enumerating every split of the pooled data.
/// Exponential in the sample size; intended for small samples.
pub fn exact_permutation_p(a: &[f64], b: &[f64]) -> Result<f64, AnalyticsError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalyticsError::EmptySample);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    if n > 24 {
        return Err(AnalyticsError::TooLargeForEnumeration(n));
    }
    let observed = mean(a) - mean(b);
    let total: f64 = pooled.iter().sum();
    let (na, nb) = (a.len(), b.len());
    let (mut hits, mut all) = (0usize, 0usize);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let sum_a: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| pooled[i]).sum();
        let stat = sum_a / na as f64 - (total - sum_a) / nb as f64;
        all += 1;
        if at_least_as_extreme(stat, observed) {
            hits += 1;
        }
    }
    Ok(hits as f64 / all as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_give_p_one() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = permutation_test(&a, &a, 500, 1).unwrap();
        assert_eq!(r.observed_stat, 0.0);
        assert_eq!(r.p_value, 1.0);
        let r = paired_permutation_test(&a, &a, 500, 1).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(permutation_test(&[], &[1.0], 500, 0).is_err());
        assert!(permutation_test(&[1.0], &[1.0], 99, 0).is_err());
        assert!(paired_permutation_test(&[1.0], &[1.0, 2.0], 500, 0).is_err());
    }

    #[test]
    fn swap_symmetry() {
        let a = [0.1, 0.5, 0.9, 0.3, 0.2];
        let b = [0.6, 0.8, 0.7, 0.4];
        let x = permutation_test(&a, &b, 2000, 3).unwrap();
        let y = permutation_test(&b, &a, 2000, 3).unwrap();
        assert_eq!(x.observed_stat.abs(), y.observed_stat.abs());
        assert!((x.p_value - y.p_value).abs() < 0.05);
    }

    #[test]
    fn exact_enumeration_small_case() {
        // a = {1, 2}, b = {3, 4}: splits of {1,2,3,4} into 2+2; |stat| = 2 for
        // {1,2} and {3,4}, so p = 2 / 6.
        let p = exact_permutation_p(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!((p - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let a: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..25).map(|i| (i as f64).cos()).collect();
        assert_eq!(permutation_test(&a, &b, 3000, 9).unwrap(), permutation_test(&a, &b, 3000, 9).unwrap());
    }
}
