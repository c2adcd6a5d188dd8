//! Cluster-propagated valuation: leave-cluster-out values, per-member
//! initialization, curated-subset Monte Carlo Shapley, a k-NN regression
//! surrogate, the two adjustment factors, and the error-bound audit.
//!
//! The normalization algebra guarantees that within each cluster the gamma
//! columns sum to n_c, so member values always telescope back to V_c.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{ClusterError, ClusterModel};
use crate::data::{Method, ValueRecord, ValueReport};
use crate::shapley::{tmc_shapley, ShapleyError, TmcConfig};
use crate::utility::{SubsetUtility, UtilityError, UtilityEvaluator};

/// Clusters whose value predictions sum below this are treated as degenerate
/// and fall back to a unit alpha factor.
const SUM_Q_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Shapley(#[from] ShapleyError),
    #[error("surrogate needs at least k = {k} samples, got {have}")]
    SurrogateTooFewSamples { have: usize, k: usize },
    #[error("pipeline has no surrogate (variant skips the regression stage)")]
    NoSurrogate,
    #[error("no cluster values fitted")]
    Unfitted,
    #[error("audit needs exact values for all {expected} points, got {actual}")]
    AuditLengthMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAlpha,
    NoBeta,
    NoAdjustment,
}

impl Variant {
    pub fn method(&self) -> Method {
        match self {
            Variant::Full => Method::Ecoval,
            Variant::NoAlpha => Method::EcovalNoAlpha,
            Variant::NoBeta => Method::EcovalNoBeta,
            Variant::NoAdjustment => Method::EcovalNoAdjustment,
        }
    }

    fn uses_alpha(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoBeta)
    }

    fn uses_beta(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoAlpha)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EcoValConfig {
    /// Samples drawn per cluster for the curated Monte Carlo stage.
    pub per_cluster_sample: usize,
    pub variant: Variant,
    pub tmc: TmcConfig,
    pub regressor_k: usize,
    pub seed: u64,
}

impl Default for EcoValConfig {
    fn default() -> Self {
        Self {
            per_cluster_sample: 5,
            variant: Variant::Full,
            tmc: TmcConfig::default(),
            regressor_k: 5,
            seed: 0,
        }
    }
}

/// Leave-cluster-out value of one cluster over the valued set.
#[derive(Debug, Clone)]
pub struct ClusterValue {
    pub cluster_id: usize,
    pub v_c: f64,
    pub n_c: usize,
    /// Dataset indices of the members, in valued-set order.
    pub members: Vec<usize>,
}

/// Assign every point of `b` to its cluster; returns (cluster, distance) per point.
fn assign_members(
    ev: &UtilityEvaluator,
    model: &ClusterModel,
    b: &[usize],
) -> Result<Vec<(usize, f64)>, PipelineError> {
    b.iter()
        .map(|&i| model.assign(ev.data().point(i)).map_err(Into::into))
        .collect()
}

/// V_c = U(B) − U(B \ c) for every nonempty cluster.
pub fn lco_values(
    ev: &UtilityEvaluator,
    model: &ClusterModel,
    b: &[usize],
) -> Result<Vec<ClusterValue>, PipelineError> {
    let assigned = assign_members(ev, model, b)?;
    lco_from_assignments(ev, model.n_components, b, &assigned)
}

fn lco_from_assignments(
    ev: &UtilityEvaluator,
    n_components: usize,
    b: &[usize],
    assigned: &[(usize, f64)],
) -> Result<Vec<ClusterValue>, PipelineError> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_components];
    for (&idx, &(c, _)) in b.iter().zip(assigned.iter()) {
        members[c].push(idx);
    }
    let full = ev.utility(b)?;
    let mut out = Vec::new();
    for (c, m) in members.into_iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        let rest: Vec<usize> = b.iter().copied().filter(|i| !m.contains(i)).collect();
        if rest.is_empty() {
            log::warn!("cluster {c} holds every valued point; V_c falls back to U(B) - U(empty)");
        }
        let v_c = full - ev.utility(&rest)?;
        out.push(ClusterValue {
            cluster_id: c,
            v_c,
            n_c: m.len(),
            members: m,
        });
    }
    Ok(out)
}

/// Every member starts at the cluster mean V_c / n_c.
pub fn init_values(cv: &ClusterValue) -> f64 {
    cv.v_c / cv.n_c as f64
}

/// Equal-per-cluster sample for the Monte Carlo stage: min(n_s, n_c) points
/// drawn uniformly without replacement from each nonempty cluster.
pub fn curated_subset(clusters: &[ClusterValue], n_s: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Vec::new();
    for cv in clusters {
        if cv.n_c <= n_s {
            d.extend_from_slice(&cv.members);
        } else {
            d.extend(cv.members.choose_multiple(&mut rng, n_s).copied());
        }
    }
    d.sort_unstable();
    d
}

/// k-NN regressor over embeddings: predict(x) is the mean fitted value of the
/// k nearest sampled embeddings (Euclidean, index ties to the lower row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub k: usize,
    pub embeddings: Array2<f64>,
    pub targets: Vec<f64>,
}

impl SurrogateModel {
    pub fn predict(&self, x: ArrayView1<f64>) -> f64 {
        let mut dists: Vec<(f64, usize)> = (0..self.embeddings.nrows())
            .map(|i| {
                let d = self
                    .embeddings
                    .row(i)
                    .iter()
                    .zip(x.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (d, i)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let k = self.k.min(dists.len());
        dists[..k].iter().map(|&(_, i)| self.targets[i]).sum::<f64>() / k as f64
    }
}

pub fn fit_surrogate(
    ev: &UtilityEvaluator,
    d_set: &[usize],
    values: &[f64],
    k: usize,
) -> Result<SurrogateModel, PipelineError> {
    if d_set.len() < k {
        return Err(PipelineError::SurrogateTooFewSamples {
            have: d_set.len(),
            k,
        });
    }
    let data = ev.data();
    let mut embeddings = Array2::zeros((d_set.len(), data.dim()));
    for (r, &i) in d_set.iter().enumerate() {
        embeddings.row_mut(r).assign(&data.point(i));
    }
    Ok(SurrogateModel {
        k,
        embeddings,
        targets: values.to_vec(),
    })
}

fn gamma_from_sum(share: f64, sum: f64, v_c: f64, n_c: usize) -> f64 {
    (1.0 + share / sum * v_c) / (1.0 + v_c / n_c as f64)
}

/// Normalized intrinsic-value adjustment factor. Falls back to 1 when the
/// cluster's predictions sum to (nearly) zero.
pub fn gamma_alpha(q_i: f64, q_cluster: &[f64], v_c: f64, n_c: usize) -> f64 {
    let sum: f64 = q_cluster.iter().sum();
    if sum.abs() < SUM_Q_EPS {
        return 1.0;
    }
    gamma_from_sum(q_i, sum, v_c, n_c)
}

/// Normalized extrinsic-value adjustment factor from centroid distances.
/// All-zero distances (every member at the centroid) collapse to 1.
pub fn gamma_beta(d_i: f64, d_cluster: &[f64], v_c: f64, n_c: usize) -> f64 {
    let sum: f64 = d_cluster.iter().sum();
    if sum == 0.0 {
        return 1.0;
    }
    gamma_from_sum(d_i, sum, v_c, n_c)
}

/// Per-cluster state frozen at fit time; OOS valuation reuses these sums.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub v_c: f64,
    pub n_c: usize,
    pub sum_q: f64,
    pub sum_d: f64,
}

/// Everything the fitted pipeline produced, including the report.
#[derive(Debug, Clone)]
pub struct FittedValuation {
    pub model: ClusterModel,
    pub variant: Variant,
    pub clusters: Vec<ClusterSummary>,
    pub surrogate: Option<SurrogateModel>,
    pub curated: Vec<usize>,
    pub curated_values: Vec<f64>,
    pub report: ValueReport,
}

/// Run the full valuation pipeline over the points `b`.
pub fn ecoval_values(
    ev: &UtilityEvaluator,
    model: &ClusterModel,
    cfg: &EcoValConfig,
    b: &[usize],
) -> Result<FittedValuation, PipelineError> {
    let assigned = assign_members(ev, model, b)?;
    let clusters = lco_from_assignments(ev, model.n_components, b, &assigned)?;

    let (surrogate, curated, curated_values) = if cfg.variant.uses_alpha() {
        let d_set = curated_subset(&clusters, cfg.per_cluster_sample, cfg.seed);
        let tmc = tmc_shapley(ev, &d_set, &cfg.tmc)?;
        let surrogate = fit_surrogate(ev, &d_set, &tmc.values, cfg.regressor_k)?;
        (Some(surrogate), d_set, tmc.values)
    } else {
        (None, Vec::new(), Vec::new())
    };

    // per-point predicted value and centroid distance
    let q: Vec<f64> = match &surrogate {
        Some(s) => b.iter().map(|&i| s.predict(ev.data().point(i))).collect(),
        None => vec![0.0; b.len()],
    };
    let d: Vec<f64> = assigned.iter().map(|&(_, dist)| dist).collect();

    let pos_of: BTreeMap<usize, usize> = b.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let mut summaries = Vec::with_capacity(clusters.len());
    let mut per_point: BTreeMap<usize, ValueRecord> = BTreeMap::new();
    for cv in &clusters {
        let sum_q: f64 = cv.members.iter().map(|i| q[pos_of[i]]).sum();
        let sum_d: f64 = cv.members.iter().map(|i| d[pos_of[i]]).sum();
        if cfg.variant.uses_alpha() && sum_q.abs() < SUM_Q_EPS {
            log::warn!(
                "cluster {}: sum of predicted values is ~0; alpha factor falls back to 1",
                cv.cluster_id
            );
        }
        summaries.push(ClusterSummary {
            cluster_id: cv.cluster_id,
            v_c: cv.v_c,
            n_c: cv.n_c,
            sum_q,
            sum_d,
        });
        let v_i = init_values(cv);
        for &i in &cv.members {
            let p = pos_of[&i];
            let ga = if cfg.variant.uses_alpha() && sum_q.abs() >= SUM_Q_EPS {
                gamma_from_sum(q[p], sum_q, cv.v_c, cv.n_c)
            } else {
                1.0
            };
            let gb = if cfg.variant.uses_beta() && sum_d != 0.0 {
                gamma_from_sum(d[p], sum_d, cv.v_c, cv.n_c)
            } else {
                1.0
            };
            per_point.insert(
                p,
                ValueRecord {
                    id: ev.data().id(i).to_string(),
                    cluster_id: cv.cluster_id as i64,
                    v_c: cv.v_c,
                    n_c: cv.n_c,
                    v_i,
                    q_i: q[p],
                    d_i: d[p],
                    gamma_alpha: ga,
                    gamma_beta: gb,
                    value: v_i * (ga + gb - 1.0),
                },
            );
        }
    }
    let records: Vec<ValueRecord> = (0..b.len())
        .map(|p| per_point.remove(&p).expect("every point belongs to a cluster"))
        .collect();
    let mut notes = BTreeMap::new();
    notes.insert("oos_rule".to_string(), "frozen-cluster".to_string());
    notes.insert(
        "clustering_scope".to_string(),
        "train+distribution_pool".to_string(),
    );
    let report = ValueReport {
        method: cfg.variant.method(),
        seed: cfg.seed,
        ledger: ev.ledger(),
        notes,
        records,
    };
    report.validate().expect("pipeline output satisfies the report invariants");
    Ok(FittedValuation {
        model: model.clone(),
        variant: cfg.variant,
        clusters: summaries,
        surrogate,
        curated,
        curated_values,
        report,
    })
}

impl FittedValuation {
    /// Value a never-seen point against the frozen cluster state: assign it,
    /// reuse the fitted cluster's V_c, n_c, sum Q and sum d, and apply the
    /// same formula. A point landing in a cluster with no fitted members gets
    /// value 0.
    pub fn value_oos(&self, x: ArrayView1<f64>) -> Result<f64, PipelineError> {
        if self.clusters.is_empty() {
            return Err(PipelineError::Unfitted);
        }
        let (c, dist) = self.model.assign(x)?;
        let Some(cs) = self.clusters.iter().find(|s| s.cluster_id == c) else {
            log::warn!("OOS point assigned to cluster {c} with no fitted members; value 0");
            return Ok(0.0);
        };
        let v_i = cs.v_c / cs.n_c as f64;
        let ga = match (&self.surrogate, self.variant.uses_alpha()) {
            (Some(s), true) if cs.sum_q.abs() >= SUM_Q_EPS => {
                gamma_from_sum(s.predict(x), cs.sum_q, cs.v_c, cs.n_c)
            }
            _ => 1.0,
        };
        let gb = if self.variant.uses_beta() && cs.sum_d != 0.0 {
            gamma_from_sum(dist, cs.sum_d, cs.v_c, cs.n_c)
        } else {
            1.0
        };
        Ok(v_i * (ga + gb - 1.0))
    }
}

/// One bound term of the error analysis: n_c Φ̄_c δ_R / ΣQ + n_c² Φ̄_c Q_i δ_R / ΣQ².
/// Terms are taken in absolute value so the bound is nonnegative even for
/// negative cluster means or predictions.
pub fn error_bound(n_c: usize, phi_bar: f64, q_i: f64, sum_q: f64, delta_r: f64) -> f64 {
    let n = n_c as f64;
    (n * phi_bar * delta_r / sum_q).abs() + (n * n * phi_bar * q_i * delta_r / (sum_q * sum_q)).abs()
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundRecord {
    pub id: String,
    pub cluster_id: usize,
    pub observed: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorBoundAudit {
    /// Maximum surrogate error over the curated subset.
    pub delta_r: f64,
    /// Mean exact value per cluster.
    pub phi_bar: BTreeMap<usize, f64>,
    pub records: Vec<BoundRecord>,
    /// Clusters excluded because their predictions sum to ~0.
    pub excluded_clusters: Vec<usize>,
    pub slack: f64,
    /// Fraction of included points with observed <= bound + slack.
    pub satisfied_fraction: f64,
    pub max_observed: f64,
}

/// Compare fitted values against exact Shapley values and evaluate the
/// per-point error bound with the measured regression error.
pub fn audit_error_bound(
    fitted: &FittedValuation,
    ev: &UtilityEvaluator,
    b: &[usize],
    exact: &[f64],
    slack: f64,
) -> Result<ErrorBoundAudit, PipelineError> {
    if exact.len() != b.len() {
        return Err(PipelineError::AuditLengthMismatch {
            expected: b.len(),
            actual: exact.len(),
        });
    }
    let surrogate = fitted.surrogate.as_ref().ok_or(PipelineError::NoSurrogate)?;
    let delta_r = fitted
        .curated
        .iter()
        .zip(fitted.curated_values.iter())
        .map(|(&i, &t)| (surrogate.predict(ev.data().point(i)) - t).abs())
        .fold(0.0f64, f64::max);

    let pos_of: BTreeMap<usize, usize> = b.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let mut exact_by_cluster: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (p, r) in fitted.report.records.iter().enumerate() {
        exact_by_cluster
            .entry(r.cluster_id as usize)
            .or_default()
            .push(exact[p]);
    }
    let phi_bar: BTreeMap<usize, f64> = exact_by_cluster
        .iter()
        .map(|(&c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
        .collect();

    let mut records = Vec::new();
    let mut excluded = Vec::new();
    let mut satisfied = 0usize;
    let mut max_observed = 0.0f64;
    for cs in &fitted.clusters {
        if cs.sum_q.abs() < SUM_Q_EPS {
            excluded.push(cs.cluster_id);
            continue;
        }
        let pb = phi_bar[&cs.cluster_id];
        for r in fitted
            .report
            .records
            .iter()
            .filter(|r| r.cluster_id as usize == cs.cluster_id)
        {
            let p = pos_of[&ev
                .data()
                .index_of(&r.id)
                .expect("report ids come from the dataset")];
            let observed = (r.value - exact[p]).abs();
            let bound = error_bound(cs.n_c, pb, r.q_i, cs.sum_q, delta_r);
            max_observed = max_observed.max(observed);
            if observed <= bound + slack {
                satisfied += 1;
            }
            records.push(BoundRecord {
                id: r.id.clone(),
                cluster_id: cs.cluster_id,
                observed,
                bound,
            });
        }
    }
    let satisfied_fraction = if records.is_empty() {
        0.0
    } else {
        satisfied as f64 / records.len() as f64
    };
    Ok(ErrorBoundAudit {
        delta_r,
        phi_bar,
        records,
        excluded_clusters: excluded,
        slack,
        satisfied_fraction,
        max_observed,
    })
}
