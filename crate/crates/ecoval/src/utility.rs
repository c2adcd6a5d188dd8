//! The performance function U(S): train a classifier on a subset, score it on
//! the test split, and meter every training run.
//!
//! Two models are supported: k-NN (no training loop) and multinomial logistic
//! regression by full-batch gradient descent with zero initialization, so both
//! are fully deterministic for a fixed spec.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EmbeddingDataset, LedgerSnapshot};

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("index {0} out of bounds for dataset of {1} points")]
    IndexOutOfBounds(usize, usize),
    #[error("point {0} is already in the subset")]
    AlreadyInSubset(usize),
    #[error("invalid utility spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelKind {
    Knn {
        k: usize,
    },
    Logistic {
        learning_rate: f64,
        epochs: usize,
        l2: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub model: ModelKind,
    pub seed: u64,
    /// U of the empty coalition; defaults to 1/K (random-guess accuracy).
    pub empty_set_utility: f64,
}

impl UtilitySpec {
    pub fn knn(k: usize, n_classes: usize) -> Self {
        Self {
            model: ModelKind::Knn { k },
            seed: 0,
            empty_set_utility: 1.0 / n_classes as f64,
        }
    }

    pub fn validate(&self) -> Result<(), UtilityError> {
        match self.model {
            ModelKind::Knn { k } => {
                if k < 1 {
                    return Err(UtilityError::InvalidSpec("knn_k must be >= 1".into()));
                }
            }
            ModelKind::Logistic {
                learning_rate,
                epochs,
                l2,
            } => {
                if learning_rate <= 0.0 {
                    return Err(UtilityError::InvalidSpec("learning rate must be > 0".into()));
                }
                if epochs < 1 {
                    return Err(UtilityError::InvalidSpec("epochs must be >= 1".into()));
                }
                if l2 < 0.0 {
                    return Err(UtilityError::InvalidSpec("l2 must be >= 0".into()));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.empty_set_utility) {
            return Err(UtilityError::InvalidSpec(
                "empty_set_utility must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Counter of model-training invocations; the cost axis of every comparison.
#[derive(Debug, Default)]
pub struct RunLedger {
    training_runs: AtomicU64,
    cache_hits: AtomicU64,
}

impl RunLedger {
    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            training_runs: self.training_runs.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }
}

/// Anything that maps a subset of point indices to a utility in [0, 1].
pub trait SubsetUtility {
    fn utility(&self, subset: &[usize]) -> Result<f64, UtilityError>;
    fn empty_set_utility(&self) -> f64;

    /// U(S ∪ {z}) − U(S); `z` must not already be in `S`.
    fn marginal(&self, subset: &[usize], z: usize) -> Result<f64, UtilityError> {
        if subset.contains(&z) {
            return Err(UtilityError::AlreadyInSubset(z));
        }
        let mut with = subset.to_vec();
        with.push(z);
        Ok(self.utility(&with)? - self.utility(subset)?)
    }
}

pub struct UtilityEvaluator {
    spec: UtilitySpec,
    data: Arc<EmbeddingDataset>,
    test: Vec<usize>,
    cache: Mutex<HashMap<Box<[u32]>, f64>>,
    ledger: RunLedger,
}

impl UtilityEvaluator {
    pub fn new(
        spec: UtilitySpec,
        data: Arc<EmbeddingDataset>,
        test: Vec<usize>,
    ) -> Result<Self, UtilityError> {
        spec.validate()?;
        if test.is_empty() {
            return Err(UtilityError::InvalidSpec("empty test split".into()));
        }
        for &t in &test {
            if t >= data.n_points() {
                return Err(UtilityError::IndexOutOfBounds(t, data.n_points()));
            }
        }
        Ok(Self {
            spec,
            data,
            test,
            cache: Mutex::new(HashMap::new()),
            ledger: RunLedger::default(),
        })
    }

    pub fn spec(&self) -> &UtilitySpec {
        &self.spec
    }

    pub fn data(&self) -> &EmbeddingDataset {
        &self.data
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    pub fn ledger(&self) -> LedgerSnapshot {
        self.ledger.snapshot()
    }

    fn canonical(&self, subset: &[usize]) -> Result<Box<[u32]>, UtilityError> {
        let m = self.data.n_points();
        let mut s: Vec<u32> = Vec::with_capacity(subset.len());
        for &i in subset {
            if i >= m {
                return Err(UtilityError::IndexOutOfBounds(i, m));
            }
            s.push(i as u32);
        }
        s.sort_unstable();
        s.dedup();
        Ok(s.into_boxed_slice())
    }

    fn train_and_score(&self, subset: &[u32]) -> f64 {
        match self.spec.model {
            ModelKind::Knn { k } => self.knn_accuracy(subset, k),
            ModelKind::Logistic {
                learning_rate,
                epochs,
                l2,
            } => self.logistic_accuracy(subset, learning_rate, epochs, l2),
        }
    }

    fn knn_accuracy(&self, subset: &[u32], k: usize) -> f64 {
        let data = &self.data;
        let n_classes = data.n_classes();
        let mut correct = 0usize;
        for &t in &self.test {
            let tp = data.point(t);
            let mut dists: Vec<(f64, u32)> = subset
                .iter()
                .map(|&i| (sq_dist(tp, data.point(i as usize)), i))
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let kk = k.min(dists.len());
            let mut votes = vec![0usize; n_classes];
            for &(_, i) in &dists[..kk] {
                votes[data.label(i as usize)] += 1;
            }
            if argmax_lowest(&votes) == data.label(t) {
                correct += 1;
            }
        }
        correct as f64 / self.test.len() as f64
    }

    fn logistic_accuracy(&self, subset: &[u32], lr: f64, epochs: usize, l2: f64) -> f64 {
        let data = &self.data;
        let x = rows(data, subset);
        let y: Vec<usize> = subset.iter().map(|&i| data.label(i as usize)).collect();
        let (weights, _) = logistic_fit(&x, &y, data.n_classes(), lr, epochs, l2);
        let mut correct = 0usize;
        for &t in &self.test {
            if logistic_predict(&weights, data.point(t)) == data.label(t) {
                correct += 1;
            }
        }
        correct as f64 / self.test.len() as f64
    }
}

impl SubsetUtility for UtilityEvaluator {
    fn utility(&self, subset: &[usize]) -> Result<f64, UtilityError> {
        let key = self.canonical(subset)?;
        if key.is_empty() {
            return Ok(self.spec.empty_set_utility);
        }
        // lock held across training so the ledger counts each subset once
        let mut cache = self.cache.lock().expect("cache poisoned");
        if let Some(&u) = cache.get(&key) {
            self.ledger.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(u);
        }
        let u = self.train_and_score(&key);
        self.ledger.training_runs.fetch_add(1, Ordering::SeqCst);
        cache.insert(key, u);
        Ok(u)
    }

    fn empty_set_utility(&self) -> f64 {
        self.spec.empty_set_utility
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn argmax_lowest(v: &[usize]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn rows(data: &EmbeddingDataset, subset: &[u32]) -> Array2<f64> {
    let d = data.dim();
    let mut x = Array2::zeros((subset.len(), d));
    for (r, &i) in subset.iter().enumerate() {
        x.row_mut(r).assign(&data.point(i as usize));
    }
    x
}

/// Full-batch gradient descent on multinomial cross-entropy from zero weights.
/// Returns the (d+1) x K weight matrix (bias last row) and the per-epoch loss
/// trace (epochs + 1 entries, including the final loss).
pub fn logistic_fit(
    x: &Array2<f64>,
    y: &[usize],
    n_classes: usize,
    lr: f64,
    epochs: usize,
    l2: f64,
) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols();
    let mut w: Array2<f64> = Array2::zeros((d + 1, n_classes));
    let mut losses = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        let (loss, grad) = logistic_loss_grad(x, y, &w, l2);
        losses.push(loss);
        w = &w - &(grad * lr);
    }
    let (loss, _) = logistic_loss_grad(x, y, &w, l2);
    losses.push(loss);
    (w, losses)
}

fn logistic_loss_grad(
    x: &Array2<f64>,
    y: &[usize],
    w: &Array2<f64>,
    l2: f64,
) -> (f64, Array2<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let k = w.ncols();
    let mut grad: Array2<f64> = Array2::zeros(w.dim());
    let mut loss = 0.0;
    for r in 0..n {
        let xr = x.row(r);
        let mut logits: Array1<f64> = Array1::zeros(k);
        for c in 0..k {
            let mut z = w[[d, c]];
            for j in 0..d {
                z += xr[j] * w[[j, c]];
            }
            logits[c] = z;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            logits[c] = (logits[c] - max).exp();
            sum += logits[c];
        }
        loss -= (logits[y[r]] / sum).ln();
        for c in 0..k {
            let p = logits[c] / sum - if c == y[r] { 1.0 } else { 0.0 };
            for j in 0..d {
                grad[[j, c]] += p * xr[j];
            }
            grad[[d, c]] += p;
        }
    }
    loss /= n as f64;
    grad.mapv_inplace(|g| g / n as f64);
    if l2 > 0.0 {
        // penalize weights, not the bias row
        let mut sq = 0.0;
        for j in 0..d {
            for c in 0..k {
                sq += w[[j, c]] * w[[j, c]];
                grad[[j, c]] += l2 * w[[j, c]];
            }
        }
        loss += 0.5 * l2 * sq;
    }
    (loss, grad)
}

fn logistic_predict(w: &Array2<f64>, x: ArrayView1<f64>) -> usize {
    let d = x.len();
    let k = w.ncols();
    let mut best = 0;
    let mut best_z = f64::NEG_INFINITY;
    for c in 0..k {
        let mut z = w[[d, c]];
        for j in 0..d {
            z += x[j] * w[[j, c]];
        }
        if z > best_z {
            best_z = z;
            best = c;
        }
    }
    best
}
