//! Baseline valuations: leave-one-out, exact Shapley by full enumeration
//! (the oracle), and truncated Monte Carlo Shapley over random permutations.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::utility::{SubsetUtility, UtilityError};

/// Full-enumeration guard: 2^14 subsets keeps the oracle under a minute.
pub const EXACT_MAX_POINTS: usize = 14;

#[derive(Debug, Error)]
pub enum ShapleyError {
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error("exact enumeration is capped at {max} points, got {got}; use tmc_shapley")]
    ExactGuard { got: usize, max: usize },
    #[error("empty point set")]
    EmptySet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TmcConfig {
    /// Hard cap on sampled permutations; 0 means "3 * |B|".
    pub max_permutations: usize,
    pub convergence_window: usize,
    /// Absolute change threshold for every running mean over the window;
    /// non-positive disables the convergence stop.
    pub convergence_tol: f64,
    pub truncation_tol: f64,
    pub seed: u64,
}

impl Default for TmcConfig {
    fn default() -> Self {
        Self {
            max_permutations: 0,
            convergence_window: 100,
            convergence_tol: 1e-3,
            truncation_tol: 0.01,
            seed: 0,
        }
    }
}

impl TmcConfig {
    fn cap(&self, n: usize) -> usize {
        if self.max_permutations == 0 {
            3 * n
        } else {
            self.max_permutations
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShapleyResult {
    pub values: Vec<f64>,
    pub permutations_used: usize,
}

/// Leave-one-out: value[z] = U(B) − U(B \ {z}).
pub fn loo<U: SubsetUtility>(u: &U, b: &[usize]) -> Result<Vec<f64>, ShapleyError> {
    if b.is_empty() {
        return Err(ShapleyError::EmptySet);
    }
    let full = u.utility(b)?;
    let mut values = Vec::with_capacity(b.len());
    for (pos, _) in b.iter().enumerate() {
        let mut rest = b.to_vec();
        rest.remove(pos);
        values.push(full - u.utility(&rest)?);
    }
    Ok(values)
}

/// Exact Shapley values by summing weighted marginals over every subset.
pub fn exact_shapley<U: SubsetUtility>(u: &U, b: &[usize]) -> Result<Vec<f64>, ShapleyError> {
    let m = b.len();
    if m == 0 {
        return Err(ShapleyError::EmptySet);
    }
    if m > EXACT_MAX_POINTS {
        return Err(ShapleyError::ExactGuard {
            got: m,
            max: EXACT_MAX_POINTS,
        });
    }
    let n_masks = 1usize << m;
    let mut utilities = vec![0.0; n_masks];
    let mut scratch = Vec::with_capacity(m);
    for (mask, slot) in utilities.iter_mut().enumerate() {
        scratch.clear();
        for (i, &idx) in b.iter().enumerate() {
            if mask & (1 << i) != 0 {
                scratch.push(idx);
            }
        }
        *slot = u.utility(&scratch)?;
    }
    // w(s) = s! (m-1-s)! / m!
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight = |s: usize| fact[s] * fact[m - 1 - s] / fact[m];
    let mut values = vec![0.0; m];
    for (i, value) in values.iter_mut().enumerate() {
        let bit = 1usize << i;
        let mut acc = 0.0;
        for mask in 0..n_masks {
            if mask & bit != 0 {
                continue;
            }
            let s = (mask as u32).count_ones() as usize;
            acc += weight(s) * (utilities[mask | bit] - utilities[mask]);
        }
        *value = acc;
    }
    Ok(values)
}

/// Truncated Monte Carlo Shapley: scan random permutations, recording zero
/// marginals once the prefix utility is within `truncation_tol` of U(B).
pub fn tmc_shapley<U: SubsetUtility>(
    u: &U,
    b: &[usize],
    cfg: &TmcConfig,
) -> Result<ShapleyResult, ShapleyError> {
    let m = b.len();
    if m == 0 {
        return Err(ShapleyError::EmptySet);
    }
    let cap = cfg.cap(m);
    let full = u.utility(b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sums = vec![0.0f64; m];
    let mut perm: Vec<usize> = (0..m).collect();
    let mut history: VecDeque<Vec<f64>> = VecDeque::new();
    let mut used = 0usize;
    for t in 1..=cap {
        perm.shuffle(&mut rng);
        let mut prefix: Vec<usize> = Vec::with_capacity(m);
        let mut prev = u.empty_set_utility();
        let mut truncated = false;
        for &pos in &perm {
            if truncated {
                continue; // zero marginal recorded implicitly
            }
            prefix.push(b[pos]);
            let cur = u.utility(&prefix)?;
            sums[pos] += cur - prev;
            prev = cur;
            if (cur - full).abs() <= cfg.truncation_tol {
                truncated = true;
            }
        }
        used = t;
        let means: Vec<f64> = sums.iter().map(|s| s / t as f64).collect();
        if cfg.convergence_tol > 0.0 && cfg.convergence_window > 0 {
            history.push_back(means.clone());
            if history.len() > cfg.convergence_window + 1 {
                history.pop_front();
            }
            if history.len() == cfg.convergence_window + 1 {
                let old = history.front().expect("nonempty history");
                let max_change = means
                    .iter()
                    .zip(old.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                if max_change < cfg.convergence_tol {
                    break;
                }
            }
        }
    }
    let values = sums.iter().map(|s| s / used as f64).collect();
    Ok(ShapleyResult {
        values,
        permutations_used: used,
    })
}
