//! Embedding datasets, stratified splits, and valuation report I/O.
//!
//! The on-disk embedding format is raw row-major little-endian `f32` with a
//! JSON metadata sidecar; everything is widened to `f64` in memory so value
//! arithmetic is reproducible.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("shape mismatch: metadata declares {expected} f32 values, file holds {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("non-finite embedding value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("label {label} at row {row} is outside the {n_classes} declared classes")]
    UnknownClass {
        row: usize,
        label: usize,
        n_classes: usize,
    },
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),
    #[error("split fractions must be nonnegative and sum to at most 1")]
    BadFractions,
    #[error("split `{0}` has a positive fraction but came out empty; dataset too small")]
    EmptySplit(&'static str),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("report invariant violated: {0}")]
    InvalidReport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Immutable matrix of point embeddings with labels and string identifiers.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    points: Array2<f64>,
    labels: Vec<usize>,
    ids: Vec<String>,
    classes: Vec<String>,
    id_index: HashMap<String, usize>,
}

impl EmbeddingDataset {
    pub fn new(
        points: Array2<f64>,
        labels: Vec<usize>,
        ids: Vec<String>,
        classes: Vec<String>,
    ) -> Result<Self, DataError> {
        let m = points.nrows();
        if labels.len() != m {
            return Err(DataError::MetadataMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                m
            )));
        }
        if ids.len() != m {
            return Err(DataError::MetadataMismatch(format!(
                "{} ids for {} rows",
                ids.len(),
                m
            )));
        }
        if classes.len() < 2 {
            return Err(DataError::TooFewClasses(classes.len()));
        }
        for ((row, col), v) in points.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFinite { row, col });
            }
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes.len() {
                return Err(DataError::UnknownClass {
                    row,
                    label,
                    n_classes: classes.len(),
                });
            }
        }
        let mut id_index = HashMap::with_capacity(m);
        for (i, id) in ids.iter().enumerate() {
            if id_index.insert(id.clone(), i).is_some() {
                return Err(DataError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            points,
            labels,
            ids,
            classes,
            id_index,
        })
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    m: usize,
    d: usize,
    classes: Vec<String>,
    labels: Vec<usize>,
    ids: Vec<String>,
}

/// Load a raw little-endian f32 embedding file plus its JSON sidecar.
pub fn load_dataset(
    embeddings_path: impl AsRef<Path>,
    meta_path: impl AsRef<Path>,
) -> Result<EmbeddingDataset, DataError> {
    let meta: Metadata = serde_json::from_reader(BufReader::new(File::open(meta_path)?))?;
    let mut bytes = Vec::new();
    File::open(embeddings_path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(DataError::ShapeMismatch {
            expected: meta.m * meta.d,
            actual: bytes.len() / 4,
        });
    }
    let n_values = bytes.len() / 4;
    if n_values != meta.m * meta.d {
        return Err(DataError::ShapeMismatch {
            expected: meta.m * meta.d,
            actual: n_values,
        });
    }
    let mut values = Vec::with_capacity(n_values);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        values.push(v as f64);
    }
    let points = Array2::from_shape_vec((meta.m, meta.d), values)
        .expect("length checked against declared shape");
    EmbeddingDataset::new(points, meta.labels, meta.ids, meta.classes)
}

/// Write a dataset in the same format `load_dataset` reads.
pub fn write_dataset(
    ds: &EmbeddingDataset,
    embeddings_path: impl AsRef<Path>,
    meta_path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(embeddings_path)?);
    for v in ds.points.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let meta = Metadata {
        m: ds.n_points(),
        d: ds.dim(),
        classes: ds.classes.clone(),
        labels: ds.labels.clone(),
        ids: ds.ids.clone(),
    };
    let mut w = BufWriter::new(File::create(meta_path)?);
    serde_json::to_writer(&mut w, &meta)?;
    w.flush()?;
    Ok(())
}

/// Pairwise-disjoint index sets over one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub distribution_pool: Vec<usize>,
    pub oos: Vec<usize>,
}

const SPLIT_NAMES: [&str; 4] = ["train", "test", "distribution_pool", "oos"];

/// Deterministic stratified split: within each class, indices are shuffled by
/// the seed and allocated to the four splits by largest-remainder rounding.
pub fn make_splits(
    ds: &EmbeddingDataset,
    fractions: [f64; 4],
    seed: u64,
) -> Result<SplitSpec, DataError> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(DataError::BadFractions);
    }
    if fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(DataError::BadFractions);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes()];
    for i in 0..ds.n_points() {
        by_class[ds.label(i)].push(i);
    }
    let mut splits: [Vec<usize>; 4] = Default::default();
    for group in by_class.iter_mut() {
        group.shuffle(&mut rng);
        let g = group.len() as f64;
        let quotas: Vec<f64> = fractions.iter().map(|f| f * g).collect();
        let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let total = (quotas.iter().sum::<f64>() + 1e-9).floor() as usize;
        let mut leftover = total.saturating_sub(alloc.iter().sum::<usize>());
        // hand out leftover seats by descending fractional part, split order on ties
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for j in order {
            if leftover == 0 {
                break;
            }
            alloc[j] += 1;
            leftover -= 1;
        }
        let mut offset = 0;
        for (j, &n) in alloc.iter().enumerate() {
            splits[j].extend_from_slice(&group[offset..offset + n]);
            offset += n;
        }
    }
    for s in splits.iter_mut() {
        s.sort_unstable();
    }
    for (j, name) in SPLIT_NAMES.iter().enumerate() {
        if fractions[j] > 0.0 && splits[j].is_empty() {
            return Err(DataError::EmptySplit(name));
        }
    }
    let [train, test, distribution_pool, oos] = splits;
    Ok(SplitSpec {
        train,
        test,
        distribution_pool,
        oos,
    })
}

/// Snapshot of the training-run ledger carried in every report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub training_runs: u64,
    pub cache_hits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ecoval,
    EcovalNoAlpha,
    EcovalNoBeta,
    EcovalNoAdjustment,
    Tmc,
    Loo,
    Exact,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Ecoval => "ecoval",
            Method::EcovalNoAlpha => "ecoval_no_alpha",
            Method::EcovalNoBeta => "ecoval_no_beta",
            Method::EcovalNoAdjustment => "ecoval_no_adjustment",
            Method::Tmc => "tmc",
            Method::Loo => "loo",
            Method::Exact => "exact",
        }
    }

    fn is_ecoval(&self) -> bool {
        matches!(
            self,
            Method::Ecoval
                | Method::EcovalNoAlpha
                | Method::EcovalNoBeta
                | Method::EcovalNoAdjustment
        )
    }
}

/// One valued point with all intermediates kept for auditability.
///
/// Baseline methods (tmc/loo/exact) have no cluster stage; they carry
/// `cluster_id = -1`, `v_i = value`, and both gammas fixed at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRecord {
    pub id: String,
    pub cluster_id: i64,
    pub v_c: f64,
    pub n_c: usize,
    pub v_i: f64,
    pub q_i: f64,
    pub d_i: f64,
    pub gamma_alpha: f64,
    pub gamma_beta: f64,
    pub value: f64,
}

impl ValueRecord {
    /// Baseline record carrying only a value.
    pub fn bare(id: String, value: f64) -> Self {
        Self {
            id,
            cluster_id: -1,
            v_c: 0.0,
            n_c: 0,
            v_i: value,
            q_i: 0.0,
            d_i: 0.0,
            gamma_alpha: 1.0,
            gamma_beta: 1.0,
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub method: Method,
    pub seed: u64,
    pub ledger: LedgerSnapshot,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
    #[serde(skip)]
    pub records: Vec<ValueRecord>,
}

pub const REPORT_COLUMNS: &str = "id,cluster_id,V_c,n_c,V_i,Q_i,d_i,gamma_alpha,gamma_beta,value";

fn close_rel(a: f64, b: f64, tol: f64) -> bool {
    let diff = (a - b).abs();
    diff <= tol * a.abs().max(b.abs()) || diff == 0.0
}

impl ValueReport {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::InvalidReport(format!("duplicate id `{}`", r.id)));
            }
            if self.method.is_ecoval() {
                let expect = r.v_i * (r.gamma_alpha + r.gamma_beta - 1.0);
                if !close_rel(r.value, expect, 1e-12) {
                    return Err(DataError::InvalidReport(format!(
                        "value {} for `{}` does not match V_i*(gamma_alpha+gamma_beta-1) = {}",
                        r.value, r.id, expect
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ReportHeader {
    method: Method,
    seed: u64,
    ledger: LedgerSnapshot,
    notes: BTreeMap<String, String>,
}

/// CSV with a `#`-prefixed JSON header line and a fixed column order.
pub fn write_report(report: &ValueReport, path: impl AsRef<Path>) -> Result<(), DataError> {
    report.validate()?;
    let header = ReportHeader {
        method: report.method,
        seed: report.seed,
        ledger: report.ledger,
        notes: report.notes.clone(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# {}", serde_json::to_string(&header)?)?;
    writeln!(w, "{REPORT_COLUMNS}")?;
    for r in &report.records {
        let mut csv = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        csv.write_record([
            r.id.as_str(),
            &r.cluster_id.to_string(),
            &r.v_c.to_string(),
            &r.n_c.to_string(),
            &r.v_i.to_string(),
            &r.q_i.to_string(),
            &r.d_i.to_string(),
            &r.gamma_alpha.to_string(),
            &r.gamma_beta.to_string(),
            &r.value.to_string(),
        ])
        .map_err(|e| DataError::MalformedReport(e.to_string()))?;
        let line = csv
            .into_inner()
            .map_err(|e| DataError::MalformedReport(e.to_string()))?;
        w.write_all(&line)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ValueReport, DataError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let json = first
        .strip_prefix('#')
        .ok_or_else(|| DataError::MalformedReport("missing `#` JSON header line".into()))?
        .trim();
    let header: ReportHeader = serde_json::from_str(json)
        .map_err(|e| DataError::MalformedReport(format!("bad JSON header: {e}")))?;
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let got: Vec<&str> = csv
            .headers()
            .map_err(|e| DataError::MalformedReport(e.to_string()))?
            .iter()
            .collect();
        let want: Vec<&str> = REPORT_COLUMNS.split(',').collect();
        if got != want {
            return Err(DataError::MalformedReport(format!(
                "expected columns `{REPORT_COLUMNS}`, got `{}`",
                got.join(",")
            )));
        }
    }
    let mut records = Vec::new();
    for row in csv.records() {
        let row = row.map_err(|e| DataError::MalformedReport(e.to_string()))?;
        if row.len() != 10 {
            return Err(DataError::MalformedReport(format!(
                "expected 10 fields, got {}",
                row.len()
            )));
        }
        let field = |i: usize| -> Result<f64, DataError> {
            row[i]
                .parse::<f64>()
                .map_err(|e| DataError::MalformedReport(format!("field {i}: {e}")))
        };
        records.push(ValueRecord {
            id: row[0].to_string(),
            cluster_id: row[1]
                .parse()
                .map_err(|e| DataError::MalformedReport(format!("cluster_id: {e}")))?,
            v_c: field(2)?,
            n_c: row[3]
                .parse()
                .map_err(|e| DataError::MalformedReport(format!("n_c: {e}")))?,
            v_i: field(4)?,
            q_i: field(5)?,
            d_i: field(6)?,
            gamma_alpha: field(7)?,
            gamma_beta: field(8)?,
            value: field(9)?,
        });
    }
    let report = ValueReport {
        method: header.method,
        seed: header.seed,
        ledger: header.ledger,
        notes: header.notes,
        records,
    };
    report.validate()?;
    Ok(report)
}

/// Desk-scale benchmark: two Gaussian blobs 20 sigma apart with an optional
/// fraction of flipped labels.
pub fn synth_blobs(m: usize, noise: f64, seed: u64) -> EmbeddingDataset {
    synth_blobs_with(m, noise, seed, 10.0, 0.5)
}

/// Blob generator with explicit center separation and per-axis sigma.
pub fn synth_blobs_with(
    m: usize,
    noise: f64,
    seed: u64,
    separation: f64,
    sigma: f64,
) -> EmbeddingDataset {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let centers = [[0.0, 0.0], [separation, 0.0]];
    let mut points = Array2::zeros((m, 2));
    let mut labels = Vec::with_capacity(m);
    let mut ids = Vec::with_capacity(m);
    for i in 0..m {
        let blob = i % 2;
        points[[i, 0]] = centers[blob][0] + normal.sample(&mut rng);
        points[[i, 1]] = centers[blob][1] + normal.sample(&mut rng);
        labels.push(blob);
        ids.push(format!("p{i:05}"));
    }
    let n_flip = (noise * m as f64).round() as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_flip) {
        labels[i] = 1 - labels[i];
    }
    EmbeddingDataset::new(points, labels, ids, vec!["a".into(), "b".into()])
        .expect("generated dataset is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tiny() -> EmbeddingDataset {
        EmbeddingDataset::new(
            array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            vec![0, 1, 0, 1],
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec!["neg".into(), "pos".into()],
        )
        .unwrap()
    }

    #[test]
    fn load_round_trips_declared_shape() {
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("e.f32");
        let meta = dir.path().join("m.json");
        write_dataset(&tiny(), &emb, &meta).unwrap();
        let ds = load_dataset(&emb, &meta).unwrap();
        assert_eq!(ds.n_points(), 4);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.n_classes(), 2);
        assert_eq!(ds.point(3)[0], 1.0);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("e.f32");
        let meta = dir.path().join("m.json");
        write_dataset(&tiny(), &emb, &meta).unwrap();
        let bad = serde_json::json!({
            "m": 5, "d": 2,
            "classes": ["neg", "pos"],
            "labels": [0, 1, 0, 1, 0],
            "ids": ["a", "b", "c", "d", "e"],
        });
        std::fs::write(&meta, bad.to_string()).unwrap();
        assert!(matches!(
            load_dataset(&emb, &meta),
            Err(DataError::ShapeMismatch { expected: 10, actual: 8 })
        ));
    }

    #[test]
    fn dataset_rejects_non_finite_and_duplicates() {
        let err = EmbeddingDataset::new(
            array![[f64::NAN, 0.0]],
            vec![0],
            vec!["a".into()],
            vec!["x".into(), "y".into()],
        )
        .unwrap_err();
        assert!(matches!(err, DataError::NonFinite { row: 0, col: 0 }));

        let err = EmbeddingDataset::new(
            array![[0.0], [1.0]],
            vec![0, 1],
            vec!["a".into(), "a".into()],
            vec!["x".into(), "y".into()],
        )
        .unwrap_err();
        assert!(matches!(err, DataError::DuplicateId(_)));

        let err = EmbeddingDataset::new(
            array![[0.0]],
            vec![7],
            vec!["a".into()],
            vec!["x".into(), "y".into()],
        )
        .unwrap_err();
        assert!(matches!(err, DataError::UnknownClass { label: 7, .. }));
    }

    #[test]
    fn splits_match_fraction_arithmetic() {
        let ds = synth_blobs(100, 0.0, 3);
        let s = make_splits(&ds, [0.2, 0.2, 0.4, 0.2], 7).unwrap();
        assert_eq!(s.train.len(), 20);
        assert_eq!(s.test.len(), 20);
        assert_eq!(s.distribution_pool.len(), 40);
        assert_eq!(s.oos.len(), 20);
        let all: HashSet<usize> = s
            .train
            .iter()
            .chain(&s.test)
            .chain(&s.distribution_pool)
            .chain(&s.oos)
            .copied()
            .collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn splits_are_deterministic() {
        let ds = synth_blobs(100, 0.1, 3);
        let a = make_splits(&ds, [0.2, 0.2, 0.4, 0.2], 7).unwrap();
        let b = make_splits(&ds, [0.2, 0.2, 0.4, 0.2], 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_reject_bad_fractions() {
        let ds = synth_blobs(10, 0.0, 3);
        assert!(matches!(
            make_splits(&ds, [0.5, 0.5, 0.1, 0.1], 7),
            Err(DataError::BadFractions)
        ));
        assert!(matches!(
            make_splits(&ds, [-0.1, 0.5, 0.1, 0.1], 7),
            Err(DataError::BadFractions)
        ));
    }

    #[test]
    fn splits_flag_forced_empty() {
        let ds = tiny();
        // 0.1 of 2 per class rounds to zero everywhere
        assert!(matches!(
            make_splits(&ds, [0.1, 0.0, 0.0, 0.0], 7),
            Err(DataError::EmptySplit("train"))
        ));
    }

    #[test]
    fn splits_stay_stratified() {
        // 60/40 class mix, splits large enough for the +-1 point contract
        let mut labels = vec![0usize; 60];
        labels.extend(vec![1usize; 40]);
        let points = Array2::from_shape_fn((100, 2), |(i, j)| (i * 2 + j) as f64);
        let ids = (0..100).map(|i| format!("i{i}")).collect();
        let ds =
            EmbeddingDataset::new(points, labels, ids, vec!["x".into(), "y".into()]).unwrap();
        let s = make_splits(&ds, [0.5, 0.3, 0.2, 0.0], 11).unwrap();
        for split in [&s.train, &s.test, &s.distribution_pool] {
            let frac0 =
                split.iter().filter(|&&i| ds.label(i) == 0).count() as f64 / split.len() as f64;
            assert!((frac0 - 0.6).abs() <= 0.01 + 1e-12, "frac0 = {frac0}");
        }
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let report = ValueReport {
            method: Method::Loo,
            seed: 5,
            ledger: LedgerSnapshot {
                training_runs: 4,
                cache_hits: 1,
            },
            notes: BTreeMap::from([("k".to_string(), "v".to_string())]),
            records: vec![
                ValueRecord::bare("a".into(), 0.25),
                ValueRecord::bare("b".into(), -0.1),
                ValueRecord::bare("c".into(), 0.0),
            ],
        };
        write_report(&report, &path).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn report_rejects_missing_value_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(
            &path,
            "# {\"method\":\"loo\",\"seed\":0,\"ledger\":{\"training_runs\":0,\"cache_hits\":0},\"notes\":{}}\n\
             id,cluster_id,V_c,n_c,V_i,Q_i,d_i,gamma_alpha,gamma_beta\na,-1,0,0,0,0,0,1,1\n",
        )
        .unwrap();
        let err = read_report(&path).unwrap_err();
        assert!(matches!(err, DataError::MalformedReport(_)), "{err}");
    }

    #[test]
    fn report_rejects_broken_value_identity() {
        let mut r = ValueRecord::bare("a".into(), 0.5);
        r.value = 0.6; // no longer v_i * (ga + gb - 1)
        let report = ValueReport {
            method: Method::Ecoval,
            seed: 0,
            ledger: LedgerSnapshot::default(),
            notes: BTreeMap::new(),
            records: vec![r],
        };
        assert!(matches!(
            report.validate(),
            Err(DataError::InvalidReport(_))
        ));
    }

    #[test]
    fn synth_is_deterministic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let a = synth_blobs(12, 0.0, 9);
        let b = synth_blobs(12, 0.0, 9);
        assert_eq!(a.points(), b.points());
        assert_eq!(a.labels(), b.labels());
        let emb = dir.path().join("e.f32");
        let meta = dir.path().join("m.json");
        write_dataset(&a, &emb, &meta).unwrap();
        let back = load_dataset(&emb, &meta).unwrap();
        assert_eq!(back.n_points(), 12);
    }

    proptest! {
        #[test]
        fn report_round_trip_holds_for_arbitrary_values(
            values in proptest::collection::vec(-1.0f64..1.0, 1..20)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.csv");
            let records = values
                .iter()
                .enumerate()
                .map(|(i, &v)| ValueRecord::bare(format!("p{i}"), v))
                .collect();
            let report = ValueReport {
                method: Method::Tmc,
                seed: 0,
                ledger: LedgerSnapshot::default(),
                notes: BTreeMap::new(),
                records,
            };
            write_report(&report, &path).unwrap();
            let back = read_report(&path).unwrap();
            for (a, b) in back.records.iter().zip(&report.records) {
                prop_assert!((a.value - b.value).abs() <= 1e-12 * b.value.abs());
            }
        }
    }
}
