//! Evaluation harness: add/remove accuracy curves, out-of-sample removal
//! curves, training-cost accounting, and rank agreement between value
//! reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, LedgerSnapshot, Method};
use crate::pipeline::{FittedValuation, PipelineError};
use crate::utility::{SubsetUtility, UtilityError, UtilityEvaluator};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("curve needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("no points to build a curve over")]
    EmptyCurve,
    #[error("rank correlation needs matching ids; `{0}` is missing from one report")]
    IdMismatch(String),
    #[error("rank correlation needs at least 2 points")]
    TooFewForRank,
}

/// Order in which points enter or leave the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Highest value first.
    Value,
    /// Uniform shuffle under the curve seed.
    Random,
}

/// One valued point feeding a curve.
#[derive(Debug, Clone)]
pub struct CurveEntry {
    pub index: usize,
    pub id: String,
    pub value: f64,
}

/// Accuracy as a function of the fraction of points removed or added.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Curve {
    pub fractions: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// U over the full base set, recorded for reference.
    pub baseline: f64,
    pub direction: Direction,
    pub method: Method,
    pub seed: u64,
}

impl Curve {
    /// Accuracy minus the full-set baseline at each fraction.
    pub fn delta(&self) -> Vec<f64> {
        self.accuracy.iter().map(|a| a - self.baseline).collect()
    }

    /// Trapezoidal area under the accuracy curve over fraction.
    pub fn area(&self) -> f64 {
        self.fractions
            .windows(2)
            .zip(self.accuracy.windows(2))
            .map(|(f, a)| (f[1] - f[0]) * (a[0] + a[1]) / 2.0)
            .sum()
    }

    /// `fraction,accuracy,delta` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), BenchError> {
        let mut w = BufWriter::new(File::create(path).map_err(DataError::from)?);
        writeln!(w, "fraction,accuracy,delta").map_err(DataError::from)?;
        for ((f, a), d) in self
            .fractions
            .iter()
            .zip(self.accuracy.iter())
            .zip(self.delta())
        {
            writeln!(w, "{f},{a},{d}").map_err(DataError::from)?;
        }
        Ok(())
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<(), BenchError> {
        let f = File::create(path).map_err(DataError::from)?;
        serde_json::to_writer_pretty(BufWriter::new(f), self).map_err(DataError::from)?;
        Ok(())
    }
}

/// Sort by descending value, index as tie-break so ordering is total.
fn value_order(entries: &[CurveEntry]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..entries.len()).collect();
    idx.sort_by(|&a, &b| {
        entries[b]
            .value
            .partial_cmp(&entries[a].value)
            .unwrap()
            .then(entries[a].id.cmp(&entries[b].id))
    });
    idx
}

fn ordering(entries: &[CurveEntry], direction: Direction, seed: u64) -> Vec<usize> {
    match direction {
        Direction::Value => value_order(entries),
        Direction::Random => {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut idx: Vec<usize> = (0..entries.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            idx
        }
    }
}

fn fractions(steps: usize) -> Result<Vec<f64>, BenchError> {
    if steps < 2 {
        return Err(BenchError::TooFewSteps(steps));
    }
    Ok((0..steps).map(|s| s as f64 / (steps - 1) as f64).collect())
}

/// Remove points from the base set in order, re-evaluating utility at each
/// fraction. Fraction 0 is the untouched base set; fraction 1 removes every
/// curve point (the remainder of the base set stays).
pub fn removal_curve(
    ev: &UtilityEvaluator,
    base: &[usize],
    entries: &[CurveEntry],
    direction: Direction,
    steps: usize,
    seed: u64,
    method: Method,
) -> Result<Curve, BenchError> {
    if entries.is_empty() {
        return Err(BenchError::EmptyCurve);
    }
    let all = fractions(steps)?;
    let order = ordering(entries, direction, seed);
    let baseline = ev.utility(base)?;
    let mut fr = Vec::with_capacity(all.len());
    let mut accuracy = Vec::with_capacity(all.len());
    for &f in &all {
        let n_remove = (f * entries.len() as f64).round() as usize;
        let gone: Vec<usize> = order[..n_remove].iter().map(|&p| entries[p].index).collect();
        let keep: Vec<usize> = base.iter().copied().filter(|i| !gone.contains(i)).collect();
        if keep.is_empty() {
            log::warn!("removal curve truncated: training set empties at fraction {f}");
            break;
        }
        fr.push(f);
        accuracy.push(ev.utility(&keep)?);
    }
    Ok(Curve {
        fractions: fr,
        accuracy,
        baseline,
        direction,
        method,
        seed,
    })
}

/// Grow the training set from empty in order. Fraction 0 is the empty set
/// (the classifier-free baseline), fraction 1 is every curve point.
pub fn addition_curve(
    ev: &UtilityEvaluator,
    entries: &[CurveEntry],
    direction: Direction,
    steps: usize,
    seed: u64,
    method: Method,
) -> Result<Curve, BenchError> {
    if entries.is_empty() {
        return Err(BenchError::EmptyCurve);
    }
    let fr = fractions(steps)?;
    let order = ordering(entries, direction, seed);
    let full: Vec<usize> = entries.iter().map(|e| e.index).collect();
    let baseline = ev.utility(&full)?;
    let mut accuracy = Vec::with_capacity(fr.len());
    for &f in &fr {
        let n_add = (f * entries.len() as f64).round() as usize;
        let have: Vec<usize> = order[..n_add].iter().map(|&p| entries[p].index).collect();
        accuracy.push(ev.utility(&have)?);
    }
    Ok(Curve {
        fractions: fr,
        accuracy,
        baseline,
        direction,
        method,
        seed,
    })
}

/// Removal curve restricted to out-of-sample points: the training set starts
/// at `base ∪ oos`, and only OOS points (valued through the frozen pipeline)
/// are ever removed.
pub fn oos_removal_curve(
    ev: &UtilityEvaluator,
    fitted: &FittedValuation,
    base: &[usize],
    oos: &[usize],
    direction: Direction,
    steps: usize,
    seed: u64,
) -> Result<Curve, BenchError> {
    if oos.is_empty() {
        return Err(BenchError::EmptyCurve);
    }
    let entries: Vec<CurveEntry> = oos
        .iter()
        .map(|&i| {
            Ok(CurveEntry {
                index: i,
                id: ev.data().id(i).to_string(),
                value: fitted.value_oos(ev.data().point(i))?,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut full: Vec<usize> = base.to_vec();
    full.extend_from_slice(oos);
    removal_curve(
        ev,
        &full,
        &entries,
        direction,
        steps,
        seed,
        fitted.variant.method(),
    )
}

/// Observed training-run counts next to the closed-form expectations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub m: usize,
    pub n_clusters: usize,
    pub curated_size: usize,
    /// Observed ledger per method tag.
    pub observed: BTreeMap<String, LedgerSnapshot>,
    /// Closed-form run counts assuming no truncation or early convergence:
    /// LOO = m + 1, EcoVal without the Monte Carlo stage = |C| + 1,
    /// TMC over the full set = 3m·m, EcoVal = |C| + 1 + 3p·p.
    pub predicted: BTreeMap<String, u64>,
    /// Observed EcoVal runs over observed full-set TMC runs.
    pub ecoval_tmc_ratio: f64,
}

pub fn cost_report(
    m: usize,
    n_clusters: usize,
    curated_size: usize,
    observed: BTreeMap<String, LedgerSnapshot>,
) -> CostReport {
    let p = curated_size as u64;
    let mu = m as u64;
    let c = n_clusters as u64;
    let mut predicted = BTreeMap::new();
    predicted.insert("loo".to_string(), mu + 1);
    predicted.insert("ecoval_no_alpha".to_string(), c + 1);
    predicted.insert("tmc".to_string(), 3 * mu * mu);
    predicted.insert("ecoval".to_string(), c + 1 + 3 * p * p);
    let ratio = match (observed.get("ecoval"), observed.get("tmc")) {
        (Some(e), Some(t)) if t.training_runs > 0 => {
            e.training_runs as f64 / t.training_runs as f64
        }
        _ => f64::NAN,
    };
    CostReport {
        m,
        n_clusters,
        curated_size,
        observed,
        predicted,
        ecoval_tmc_ratio: ratio,
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, BenchError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(BenchError::TooFewForRank);
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    Ok(pearson(&ra, &rb))
}

/// Spearman over two reports matched by point id.
pub fn spearman_by_id(
    a: &crate::data::ValueReport,
    b: &crate::data::ValueReport,
) -> Result<f64, BenchError> {
    let bv: BTreeMap<&str, f64> = b.records.iter().map(|r| (r.id.as_str(), r.value)).collect();
    let mut xs = Vec::with_capacity(a.records.len());
    let mut ys = Vec::with_capacity(a.records.len());
    for r in &a.records {
        let Some(&v) = bv.get(r.id.as_str()) else {
            return Err(BenchError::IdMismatch(r.id.clone()));
        };
        xs.push(r.value);
        ys.push(v);
    }
    if xs.len() != b.records.len() {
        let missing = b
            .records
            .iter()
            .find(|r| !a.records.iter().any(|s| s.id == r.id))
            .map(|r| r.id.clone())
            .unwrap_or_default();
        return Err(BenchError::IdMismatch(missing));
    }
    spearman(&xs, &ys)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, ValueRecord, ValueReport};
    use crate::utility::UtilitySpec;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn setup(m: usize) -> (UtilityEvaluator, Vec<usize>) {
        let ds = synth_blobs(m, 0.1, 11);
        let n_train = m * 3 / 4;
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..m).collect();
        let ev = UtilityEvaluator::new(UtilitySpec::knn(1, 2), Arc::new(ds), test).unwrap();
        (ev, train)
    }

    fn entries(ev: &UtilityEvaluator, idx: &[usize], values: &[f64]) -> Vec<CurveEntry> {
        idx.iter()
            .zip(values.iter())
            .map(|(&i, &v)| CurveEntry {
                index: i,
                id: ev.data().id(i).to_string(),
                value: v,
            })
            .collect()
    }

    #[test]
    fn removal_curve_endpoints() {
        let (ev, train) = setup(24);
        let vals: Vec<f64> = (0..train.len()).map(|i| i as f64).collect();
        let es = entries(&ev, &train, &vals);
        let c = removal_curve(&ev, &train, &es, Direction::Value, 5, 0, Method::Loo).unwrap();
        // fraction 1 would empty the training set, so the curve truncates there
        assert_eq!(c.fractions, vec![0.0, 0.25, 0.5, 0.75]);
        assert_eq!(c.accuracy.len(), 4);
        assert_eq!(c.accuracy[0], ev.utility(&train).unwrap());
        assert_eq!(c.accuracy[0], c.baseline);
        assert_eq!(c.delta()[0], 0.0);
    }

    #[test]
    fn addition_curve_endpoints() {
        let (ev, train) = setup(24);
        let vals = vec![1.0; train.len()];
        let es = entries(&ev, &train, &vals);
        let c = addition_curve(&ev, &es, Direction::Value, 3, 0, Method::Loo).unwrap();
        assert_eq!(c.accuracy[0], 0.5); // empty set
        assert_eq!(*c.accuracy.last().unwrap(), ev.utility(&train).unwrap());
        assert_eq!(*c.accuracy.last().unwrap(), c.baseline);
    }

    #[test]
    fn value_direction_removes_high_values_first() {
        let (ev, train) = setup(24);
        // give one point a huge value and check it leaves immediately
        let mut vals = vec![0.0; train.len()];
        vals[7] = 100.0;
        let es = entries(&ev, &train, &vals);
        let order = value_order(&es);
        assert_eq!(order[0], 7);
        // all-equal values fall back to id order (deterministic)
        let flat = entries(&ev, &train, &vec![1.0; train.len()]);
        let o1 = value_order(&flat);
        let o2 = value_order(&flat);
        assert_eq!(o1, o2);
        assert_eq!(o1[0], 0); // "p00000" sorts first
    }

    #[test]
    fn random_direction_is_seeded() {
        let (ev, train) = setup(24);
        let es = entries(&ev, &train, &vec![1.0; train.len()]);
        let a = removal_curve(&ev, &train, &es, Direction::Random, 4, 9, Method::Loo).unwrap();
        let b = removal_curve(&ev, &train, &es, Direction::Random, 4, 9, Method::Loo).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        let c = removal_curve(&ev, &train, &es, Direction::Random, 4, 10, Method::Loo).unwrap();
        // different seed may or may not differ in accuracy, but fractions agree
        assert_eq!(a.fractions, c.fractions);
    }

    #[test]
    fn area_is_trapezoidal() {
        let c = Curve {
            fractions: vec![0.0, 0.5, 1.0],
            accuracy: vec![1.0, 0.5, 0.0],
            baseline: 1.0,
            direction: Direction::Value,
            method: Method::Loo,
            seed: 0,
        };
        assert_relative_eq!(c.area(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn curve_csv_round_trips_textually() {
        let c = Curve {
            fractions: vec![0.0, 1.0],
            accuracy: vec![0.9, 0.4],
            baseline: 0.9,
            direction: Direction::Value,
            method: Method::Tmc,
            seed: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.csv");
        c.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "fraction,accuracy,delta\n0,0.9,0\n1,0.4,-0.5\n");
        let mp = dir.path().join("curve.json");
        c.write_manifest(&mp).unwrap();
        let back: Curve = serde_json::from_reader(File::open(&mp).unwrap()).unwrap();
        assert_eq!(back.accuracy, c.accuracy);
    }

    #[test]
    fn spearman_matches_known_cases() {
        assert_relative_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap(),
            1.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            max_relative = 1e-12
        );
        // hand-computed with average ranks:
        // a = [1,2,2,3] -> ranks [1, 2.5, 2.5, 4], b = [1,3,2,4] -> ranks [1, 3, 2, 4]
        // cov = 4.5, var_a = 4.5, var_b = 5 -> rho = 4.5 / sqrt(22.5) = 3 / sqrt(10)
        assert_relative_eq!(
            spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
            3.0 / 10.0_f64.sqrt(),
            max_relative = 1e-12
        );
        // constant vector has zero variance -> correlation reported as 0
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_by_id_aligns_and_rejects() {
        let mk = |ids: &[&str], vals: &[f64]| ValueReport {
            method: Method::Loo,
            seed: 0,
            ledger: LedgerSnapshot::default(),
            notes: BTreeMap::new(),
            records: ids
                .iter()
                .zip(vals.iter())
                .map(|(id, &v)| ValueRecord::bare(id.to_string(), v))
                .collect(),
        };
        let a = mk(&["x", "y", "z"], &[1.0, 2.0, 3.0]);
        let b = mk(&["z", "x", "y"], &[30.0, 10.0, 20.0]);
        assert_relative_eq!(spearman_by_id(&a, &b).unwrap(), 1.0, max_relative = 1e-12);
        let c = mk(&["x", "y", "w"], &[1.0, 2.0, 3.0]);
        assert!(matches!(
            spearman_by_id(&a, &c),
            Err(BenchError::IdMismatch(_))
        ));
    }

    #[test]
    fn cost_report_predictions() {
        let mut obs = BTreeMap::new();
        obs.insert(
            "ecoval".to_string(),
            LedgerSnapshot {
                training_runs: 100,
                cache_hits: 0,
            },
        );
        obs.insert(
            "tmc".to_string(),
            LedgerSnapshot {
                training_runs: 10_000,
                cache_hits: 0,
            },
        );
        let r = cost_report(200, 10, 40, obs);
        assert_eq!(r.predicted["loo"], 201);
        assert_eq!(r.predicted["ecoval_no_alpha"], 11);
        assert_eq!(r.predicted["tmc"], 120_000);
        assert_eq!(r.predicted["ecoval"], 11 + 4800);
        assert_relative_eq!(r.ecoval_tmc_ratio, 0.01, max_relative = 1e-12);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let (ev, train) = setup(16);
        let es = entries(&ev, &train, &vec![0.0; train.len()]);
        assert!(matches!(
            removal_curve(&ev, &train, &es, Direction::Value, 1, 0, Method::Loo),
            Err(BenchError::TooFewSteps(1))
        ));
        assert!(matches!(
            removal_curve(&ev, &train, &[], Direction::Value, 3, 0, Method::Loo),
            Err(BenchError::EmptyCurve)
        ));
    }
}
