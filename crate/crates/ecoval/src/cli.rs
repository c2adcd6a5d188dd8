//! Command-line front end: `value`, `curve`, `cost`, `audit`, `synth`.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime failure,
//! 2 usage/config error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{
    addition_curve, cost_report, removal_curve, CurveEntry, Direction,
};
use crate::clustering::fit_gmm;
use crate::config::{ConfigError, RunConfig};
use crate::data::{
    load_dataset, make_splits, read_report, synth_blobs, write_dataset, write_report,
    EmbeddingDataset, Method, SplitSpec, ValueRecord, ValueReport,
};
use crate::pipeline::{audit_error_bound, ecoval_values, EcoValConfig, Variant};
use crate::shapley::{exact_shapley, loo, tmc_shapley, EXACT_MAX_POINTS};
use crate::utility::UtilityEvaluator;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ecoval",
    about = "Cluster-propagated data valuation with Shapley baselines",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute point values with one method and write a report CSV.
    Value(ValueArgs),
    /// Turn an existing report into an addition or removal curve.
    Curve(CurveArgs),
    /// Compare training-run counts across methods on one dataset.
    Cost(CostArgs),
    /// Check fitted values against the exact oracle and the error bound.
    Audit(AuditArgs),
    /// Generate a synthetic benchmark dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Ecoval,
    EcovalNoAlpha,
    EcovalNoBeta,
    EcovalNoAdjustment,
    Tmc,
    Loo,
    Exact,
}

#[derive(Debug, Args)]
struct ValueArgs {
    /// Path to the run-config JSON file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CurveMode {
    Add,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    Value,
    Random,
}

#[derive(Debug, Args)]
struct CurveArgs {
    #[arg(long)]
    config: PathBuf,
    /// Report CSV produced by `value`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum)]
    mode: CurveMode,
    #[arg(long, value_enum, default_value = "value")]
    direction: DirectionArg,
    #[arg(long, default_value_t = 20)]
    steps: usize,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long)]
    config: PathBuf,
    /// Bound-satisfaction slack added on top of each bound.
    #[arg(long, default_value_t = 0.02)]
    slack: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value = "blobs")]
    preset: String,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output stem; writes `<out>.f32` and `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.into())
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Value(a) => cmd_value(a),
        Command::Curve(a) => cmd_curve(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

struct Loaded {
    cfg: RunConfig,
    data: Arc<EmbeddingDataset>,
    splits: SplitSpec,
}

fn load(config: &PathBuf) -> Result<Loaded, CliError> {
    let cfg = RunConfig::load(config)?;
    let data = load_dataset(&cfg.dataset.embeddings, &cfg.dataset.meta).map_err(runtime)?;
    let splits = make_splits(&data, cfg.splits.fractions, cfg.splits.seed).map_err(runtime)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(runtime)?;
    Ok(Loaded {
        cfg,
        data: Arc::new(data),
        splits,
    })
}

fn evaluator(l: &Loaded) -> Result<UtilityEvaluator, CliError> {
    UtilityEvaluator::new(
        l.cfg.utility.resolve(l.data.n_classes()),
        Arc::clone(&l.data),
        l.splits.test.clone(),
    )
    .map_err(runtime)
}

/// Clustering is fitted on train plus the distribution pool, matching the
/// report's `clustering_scope` note.
fn clustering_points(l: &Loaded) -> Vec<usize> {
    let mut idx = l.splits.train.clone();
    idx.extend_from_slice(&l.splits.distribution_pool);
    idx.sort_unstable();
    idx
}

fn fit_clusters(l: &Loaded) -> Result<crate::clustering::ClusterModel, CliError> {
    let idx = clustering_points(l);
    let mut cfg = l.cfg.clustering.clone();
    if cfg.n_components > idx.len() {
        log::warn!(
            "clustering: {} components requested for {} points; clamping",
            cfg.n_components,
            idx.len()
        );
        cfg.n_components = idx.len();
    }
    let points = ndarray::Array2::from_shape_fn((idx.len(), l.data.dim()), |(r, c)| {
        l.data.point(idx[r])[c]
    });
    fit_gmm(points.view(), &cfg).map_err(runtime)
}

fn bare_report(
    l: &Loaded,
    ev: &UtilityEvaluator,
    method: Method,
    seed: u64,
    values: &[f64],
) -> ValueReport {
    let records = l
        .splits
        .train
        .iter()
        .zip(values.iter())
        .map(|(&i, &v)| ValueRecord::bare(l.data.id(i).to_string(), v))
        .collect();
    ValueReport {
        method,
        seed,
        ledger: ev.ledger(),
        notes: BTreeMap::new(),
        records,
    }
}

fn ecoval_run(l: &Loaded, variant: Variant) -> Result<(UtilityEvaluator, crate::pipeline::FittedValuation), CliError> {
    let ev = evaluator(l)?;
    let model = fit_clusters(l)?;
    let cfg = EcoValConfig {
        variant,
        ..l.cfg.ecoval.clone()
    };
    let fitted = ecoval_values(&ev, &model, &cfg, &l.splits.train).map_err(runtime)?;
    Ok((ev, fitted))
}

fn cmd_value(a: ValueArgs) -> Result<(), CliError> {
    let l = load(&a.config)?;
    let b = &l.splits.train;
    let (tag, report) = match a.method {
        MethodArg::Ecoval
        | MethodArg::EcovalNoAlpha
        | MethodArg::EcovalNoBeta
        | MethodArg::EcovalNoAdjustment => {
            let variant = match a.method {
                MethodArg::Ecoval => Variant::Full,
                MethodArg::EcovalNoAlpha => Variant::NoAlpha,
                MethodArg::EcovalNoBeta => Variant::NoBeta,
                _ => Variant::NoAdjustment,
            };
            let (ev, mut fitted) = ecoval_run(&l, variant)?;
            fitted.report.ledger = ev.ledger();
            (fitted.report.method.tag(), fitted.report)
        }
        MethodArg::Tmc => {
            let ev = evaluator(&l)?;
            let r = tmc_shapley(&ev, b, &l.cfg.tmc).map_err(runtime)?;
            let mut report = bare_report(&l, &ev, Method::Tmc, l.cfg.tmc.seed, &r.values);
            report
                .notes
                .insert("permutations_used".into(), r.permutations_used.to_string());
            ("tmc", report)
        }
        MethodArg::Loo => {
            let ev = evaluator(&l)?;
            let v = loo(&ev, b).map_err(runtime)?;
            ("loo", bare_report(&l, &ev, Method::Loo, 0, &v))
        }
        MethodArg::Exact => {
            let ev = evaluator(&l)?;
            let v = exact_shapley(&ev, b).map_err(runtime)?;
            ("exact", bare_report(&l, &ev, Method::Exact, 0, &v))
        }
    };
    let path = l.cfg.output_dir.join(format!("values_{tag}.csv"));
    write_report(&report, &path).map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_curve(a: CurveArgs) -> Result<(), CliError> {
    if a.steps < 2 {
        return Err(CliError::Config(anyhow::anyhow!(
            "--steps must be at least 2, got {}",
            a.steps
        )));
    }
    let l = load(&a.config)?;
    if !a.report.exists() {
        return Err(CliError::Config(anyhow::anyhow!(
            "report not found: {}",
            a.report.display()
        )));
    }
    let report = read_report(&a.report).map_err(runtime)?;
    let ev = evaluator(&l)?;
    let entries: Vec<CurveEntry> = report
        .records
        .iter()
        .map(|r| {
            let index = l.data.index_of(&r.id).ok_or_else(|| {
                runtime(anyhow::anyhow!(
                    "report id `{}` does not exist in the dataset",
                    r.id
                ))
            })?;
            Ok(CurveEntry {
                index,
                id: r.id.clone(),
                value: r.value,
            })
        })
        .collect::<Result<_, CliError>>()?;
    let direction = match a.direction {
        DirectionArg::Value => Direction::Value,
        DirectionArg::Random => Direction::Random,
    };
    if direction == Direction::Value {
        let first = entries.first().map(|e| e.value);
        if entries.iter().all(|e| Some(e.value) == first) {
            log::warn!("all values are equal; value direction degenerates to id order");
        }
    }
    let seed = report.seed;
    let (mode_tag, curve) = match a.mode {
        CurveMode::Remove => (
            "remove",
            removal_curve(
                &ev,
                &l.splits.train,
                &entries,
                direction,
                a.steps,
                seed,
                report.method,
            )
            .map_err(runtime)?,
        ),
        CurveMode::Add => (
            "add",
            addition_curve(&ev, &entries, direction, a.steps, seed, report.method)
                .map_err(runtime)?,
        ),
    };
    let dir_tag = match direction {
        Direction::Value => "value",
        Direction::Random => "random",
    };
    let stem = format!("curve_{}_{}_{}", mode_tag, dir_tag, report.method.tag());
    let csv = l.cfg.output_dir.join(format!("{stem}.csv"));
    let manifest = l.cfg.output_dir.join(format!("{stem}.json"));
    curve.write_csv(&csv).map_err(runtime)?;
    curve.write_manifest(&manifest).map_err(runtime)?;
    println!("wrote {} and {}", csv.display(), manifest.display());
    Ok(())
}

fn cmd_cost(a: CostArgs) -> Result<(), CliError> {
    let l = load(&a.config)?;
    let b = &l.splits.train;
    let model = fit_clusters(&l)?;
    let mut observed = BTreeMap::new();

    let ev = evaluator(&l)?;
    loo(&ev, b).map_err(runtime)?;
    observed.insert("loo".to_string(), ev.ledger());

    let ev = evaluator(&l)?;
    let full_cfg = EcoValConfig {
        variant: Variant::Full,
        ..l.cfg.ecoval.clone()
    };
    let fitted = ecoval_values(&ev, &model, &full_cfg, b).map_err(runtime)?;
    let curated_size = fitted.curated.len();
    let n_clusters = fitted.clusters.len();
    observed.insert("ecoval".to_string(), ev.ledger());

    let ev = evaluator(&l)?;
    let na_cfg = EcoValConfig {
        variant: Variant::NoAlpha,
        ..l.cfg.ecoval.clone()
    };
    ecoval_values(&ev, &model, &na_cfg, b).map_err(runtime)?;
    observed.insert("ecoval_no_alpha".to_string(), ev.ledger());

    let ev = evaluator(&l)?;
    tmc_shapley(&ev, b, &l.cfg.tmc).map_err(runtime)?;
    observed.insert("tmc".to_string(), ev.ledger());

    let report = cost_report(b.len(), n_clusters, curated_size, observed);
    let path = l.cfg.output_dir.join("cost_report.json");
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(&path).map_err(runtime)?),
        &report,
    )
    .map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_audit(a: AuditArgs) -> Result<(), CliError> {
    let l = load(&a.config)?;
    let b = &l.splits.train;
    if b.len() > EXACT_MAX_POINTS {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "audit needs the exact oracle, capped at {EXACT_MAX_POINTS} points; train split has {}",
            b.len()
        )));
    }
    let (ev, fitted) = ecoval_run(&l, Variant::Full)?;
    let exact = exact_shapley(&ev, b).map_err(runtime)?;
    let audit = audit_error_bound(&fitted, &ev, b, &exact, a.slack).map_err(runtime)?;
    let path = l.cfg.output_dir.join("error_bound_audit.json");
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(&path).map_err(runtime)?),
        &audit,
    )
    .map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    if a.preset != "blobs" {
        return Err(CliError::Config(anyhow::anyhow!(
            "unknown preset `{}`; available: blobs",
            a.preset
        )));
    }
    if a.m < 4 {
        return Err(CliError::Config(anyhow::anyhow!(
            "--m must be at least 4, got {}",
            a.m
        )));
    }
    let ds = synth_blobs(a.m, a.noise, a.seed);
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(runtime)?;
        }
    }
    let emb = a.out.with_extension("f32");
    let meta = a.out.with_extension("json");
    write_dataset(&ds, &emb, &meta).map_err(runtime)?;
    println!("wrote {} and {}", emb.display(), meta.display());
    Ok(())
}
