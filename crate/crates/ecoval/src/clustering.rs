//! Gaussian mixture fitting by EM with k-means++ initialization, plus hard
//! assignment of new points to clusters.
//!
//! Defaults follow the usual mixture setup: full covariance, tol 1e-3,
//! reg_covar 1e-6, 100 EM iterations, single init, 30 components.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("empty input")]
    EmptyInput,
    #[error("{requested} components requested for {available} points")]
    TooManyComponents { requested: usize, available: usize },
    #[error("covariance became singular and reg_covar {0} did not cure it")]
    SingularModel(f64),
    #[error("dimension mismatch: model has {expected}, input has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite input vector")]
    NonFiniteInput,
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceType {
    Full,
    Diag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Kmeans,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub n_components: usize,
    pub covariance_type: CovarianceType,
    pub tol: f64,
    pub reg_covar: f64,
    pub max_iter: usize,
    pub n_init: usize,
    pub init: InitMethod,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_components: 30,
            covariance_type: CovarianceType::Full,
            tol: 1e-3,
            reg_covar: 1e-6,
            max_iter: 100,
            n_init: 1,
            init: InitMethod::Kmeans,
            seed: 0,
        }
    }
}

/// Fitted mixture model. Covariances are stored as full d x d matrices; for
/// `Diag` the off-diagonals stay zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterModel {
    pub n_components: usize,
    pub covariance_type: CovarianceType,
    pub weights: Vec<f64>,
    pub means: Array2<f64>,
    pub covariances: Vec<Array2<f64>>,
    pub assignments: Vec<usize>,
    pub log_likelihood_trace: Vec<f64>,
    pub seed: u64,
}

impl ClusterModel {
    /// Hard-assign a point: argmax posterior responsibility (ties to the
    /// lowest cluster index) and Euclidean distance to that cluster's mean.
    pub fn assign(&self, x: ArrayView1<f64>) -> Result<(usize, f64), ClusterError> {
        let d = self.means.ncols();
        if x.len() != d {
            return Err(ClusterError::DimensionMismatch {
                expected: d,
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::NonFiniteInput);
        }
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for k in 0..self.n_components {
            let chol = cholesky(&self.covariances[k])
                .ok_or(ClusterError::SingularModel(0.0))?;
            let score = self.weights[k].ln() + log_gaussian(x, self.means.row(k), &chol);
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        let dist = euclidean(x, self.means.row(best));
        Ok((best, dist))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("model serializes")
    }
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Lower-triangular Cholesky factor, or None if the matrix is not SPD.
fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let d = a.nrows();
    let mut l: Array2<f64> = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// log N(x | mean, LL^T) via forward substitution on the Cholesky factor.
fn log_gaussian(x: ArrayView1<f64>, mean: ArrayView1<f64>, chol: &Array2<f64>) -> f64 {
    let d = x.len();
    let mut y = Array1::zeros(d);
    for i in 0..d {
        let mut v = x[i] - mean[i];
        for k in 0..i {
            v -= chol[[i, k]] * y[k];
        }
        y[i] = v / chol[[i, i]];
    }
    let quad: f64 = y.iter().map(|v| v * v).sum();
    let log_det: f64 = (0..d).map(|i| chol[[i, i]].ln()).sum::<f64>() * 2.0;
    -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

/// k-means++ seeding followed by Lloyd iterations to stationarity (max 50).
pub fn kmeans_init(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
) -> Result<Array2<f64>, ClusterError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kmeans_with_rng(points, k, &mut rng).map(|(means, _)| means)
}

fn kmeans_with_rng(
    points: ArrayView2<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Vec<usize>), ClusterError> {
    let means = kmeans_pp_seeds(points, k, rng)?;
    lloyd(points, means)
}

/// k-means++ seeding only.
fn kmeans_pp_seeds(
    points: ArrayView2<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>, ClusterError> {
    let n = points.nrows();
    let d = points.ncols();
    if n == 0 {
        return Err(ClusterError::EmptyInput);
    }
    if k > n {
        return Err(ClusterError::TooManyComponents {
            requested: k,
            available: n,
        });
    }
    let mut means = Array2::zeros((k, d));
    let first = rng.gen_range(0..n);
    means.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), means.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc >= r {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // all remaining mass at chosen centers (duplicates); pick any point
            rng.gen_range(0..n)
        };
        means.row_mut(c).assign(&points.row(pick));
        for (i, best) in d2.iter_mut().enumerate() {
            let dist = sq_dist(points.row(i), means.row(c));
            if dist < *best {
                *best = dist;
            }
        }
    }
    Ok(means)
}

fn lloyd(
    points: ArrayView2<f64>,
    mut means: Array2<f64>,
) -> Result<(Array2<f64>, Vec<usize>), ClusterError> {
    let n = points.nrows();
    let d = points.ncols();
    let k = means.nrows();
    let mut labels = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(points.row(i), means.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, d));
        for i in 0..n {
            counts[labels[i]] += 1;
            let mut row = sums.row_mut(labels[i]);
            row += &points.row(i);
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mut row = means.row_mut(c);
                row.assign(&(&sums.row(c) / count as f64));
            }
            // empty clusters keep their previous mean
        }
    }
    Ok((means, labels))
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
pub(crate) fn kmeans_inertia(points: ArrayView2<f64>, means: &Array2<f64>) -> f64 {
    (0..points.nrows())
        .map(|i| {
            (0..means.nrows())
                .map(|c| sq_dist(points.row(i), means.row(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

struct EmState {
    weights: Vec<f64>,
    means: Array2<f64>,
    covariances: Vec<Array2<f64>>,
}

/// Fit a GMM by EM from a k-means initialization.
pub fn fit_gmm(points: ArrayView2<f64>, cfg: &ClusterConfig) -> Result<ClusterModel, ClusterError> {
    if cfg.n_components == 0 {
        return Err(ClusterError::InvalidConfig("n_components must be >= 1".into()));
    }
    if cfg.n_init == 0 {
        return Err(ClusterError::InvalidConfig("n_init must be >= 1".into()));
    }
    let n = points.nrows();
    if n == 0 {
        return Err(ClusterError::EmptyInput);
    }
    if cfg.n_components > n {
        return Err(ClusterError::TooManyComponents {
            requested: cfg.n_components,
            available: n,
        });
    }
    let mut best: Option<ClusterModel> = None;
    for init_run in 0..cfg.n_init {
        let model = fit_gmm_once(points, cfg, cfg.seed.wrapping_add(init_run as u64))?;
        let ll = *model.log_likelihood_trace.last().expect("nonempty trace");
        let better = match &best {
            None => true,
            Some(b) => ll > *b.log_likelihood_trace.last().unwrap(),
        };
        if better {
            best = Some(model);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

fn fit_gmm_once(
    points: ArrayView2<f64>,
    cfg: &ClusterConfig,
    seed: u64,
) -> Result<ClusterModel, ClusterError> {
    let n = points.nrows();
    let k = cfg.n_components;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, labels) = kmeans_with_rng(points, k, &mut rng)?;
    let mut resp = Array2::<f64>::zeros((n, k));
    for (i, &c) in labels.iter().enumerate() {
        resp[[i, c]] = 1.0;
    }
    let mut state = m_step(points, &resp, cfg)?;
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iter {
        let (log_resp, ll) = e_step(points, &state, cfg)?;
        trace.push(ll);
        if (ll - prev).abs() < cfg.tol {
            break;
        }
        prev = ll;
        resp = log_resp.mapv(f64::exp);
        state = m_step(points, &resp, cfg)?;
    }
    // assignments from a final E-step so they match the returned parameters
    let (log_resp, _) = e_step(points, &state, cfg)?;
    let assignments = (0..n)
        .map(|i| {
            let row = log_resp.row(i);
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(ClusterModel {
        n_components: k,
        covariance_type: cfg.covariance_type,
        weights: state.weights,
        means: state.means,
        covariances: state.covariances,
        assignments,
        log_likelihood_trace: trace,
        seed,
    })
}

fn e_step(
    points: ArrayView2<f64>,
    state: &EmState,
    cfg: &ClusterConfig,
) -> Result<(Array2<f64>, f64), ClusterError> {
    let n = points.nrows();
    let k = state.weights.len();
    let chols: Vec<Array2<f64>> = state
        .covariances
        .iter()
        .map(|c| cholesky(c).ok_or(ClusterError::SingularModel(cfg.reg_covar)))
        .collect::<Result<_, _>>()?;
    let mut log_resp = Array2::zeros((n, k));
    let mut total = 0.0;
    for i in 0..n {
        let x = points.row(i);
        let mut row: Vec<f64> = (0..k)
            .map(|c| state.weights[c].ln() + log_gaussian(x, state.means.row(c), &chols[c]))
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        if !lse.is_finite() {
            return Err(ClusterError::SingularModel(cfg.reg_covar));
        }
        total += lse;
        for c in 0..k {
            row[c] -= lse;
            log_resp[[i, c]] = row[c];
        }
    }
    Ok((log_resp, total / n as f64))
}

fn m_step(
    points: ArrayView2<f64>,
    resp: &Array2<f64>,
    cfg: &ClusterConfig,
) -> Result<EmState, ClusterError> {
    let n = points.nrows();
    let d = points.ncols();
    let k = resp.ncols();
    let mut weights = vec![0.0; k];
    let mut means = Array2::zeros((k, d));
    let mut covariances = Vec::with_capacity(k);
    for c in 0..k {
        let nk: f64 = (0..n).map(|i| resp[[i, c]]).sum();
        weights[c] = nk / n as f64;
        let safe_nk = nk.max(f64::MIN_POSITIVE);
        for j in 0..d {
            let s: f64 = (0..n).map(|i| resp[[i, c]] * points[[i, j]]).sum();
            means[[c, j]] = s / safe_nk;
        }
        let mut cov = Array2::zeros((d, d));
        for i in 0..n {
            let r = resp[[i, c]];
            if r == 0.0 {
                continue;
            }
            match cfg.covariance_type {
                CovarianceType::Full => {
                    for a in 0..d {
                        let da = points[[i, a]] - means[[c, a]];
                        for b in 0..=a {
                            let db = points[[i, b]] - means[[c, b]];
                            cov[[a, b]] += r * da * db;
                        }
                    }
                }
                CovarianceType::Diag => {
                    for a in 0..d {
                        let da = points[[i, a]] - means[[c, a]];
                        cov[[a, a]] += r * da * da;
                    }
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                cov[[a, b]] /= safe_nk;
                cov[[b, a]] = cov[[a, b]];
            }
            cov[[a, a]] = cov[[a, a]] / safe_nk + cfg.reg_covar;
        }
        covariances.push(cov);
    }
    Ok(EmState {
        weights,
        means,
        covariances,
    })
}
