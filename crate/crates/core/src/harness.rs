//! Multi-seed experiment driver: dense vs pruned vs pruned-with-rate-penalty.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{train_observed, Architecture, Direction, EngineError, InlModel, TrainConfig};
use crate::graph::{
    build_spt, exchange_bits, full_topology, CostWeights, GraphError, NetworkGraph, NodeId,
    TrainingTopology,
};
use crate::rng::derive_seed;
use crate::task::{generate, TaskError, TaskSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("unknown scheme {0:?} (expected dense, dijkstra or dijkstra+rate)")]
    UnknownScheme(String),
    #[error("no records to summarize")]
    NoRecords,
    #[error("lambda grid must be nonempty with values >= 0")]
    BadGrid,
    #[error("{scheme} run with seed {seed} violated edge discipline at epoch {epoch}")]
    EdgeDiscipline {
        scheme: Scheme,
        seed: u64,
        epoch: usize,
    },
    #[error("csv error on {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "dijkstra")]
    Dijkstra,
    #[serde(rename = "dijkstra+rate")]
    DijkstraRate,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Dense, Scheme::Dijkstra, Scheme::DijkstraRate];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Dense => "dense",
            Scheme::Dijkstra => "dijkstra",
            Scheme::DijkstraRate => "dijkstra+rate",
        }
    }

    /// Human label used in the Table-1 style output.
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Dense => "Dense INL",
            Scheme::Dijkstra => "Dijkstra INL",
            Scheme::DijkstraRate => "D-INL+rate",
        }
    }

    pub fn topology(
        self,
        g: &NetworkGraph,
        w: &CostWeights,
    ) -> Result<TrainingTopology, GraphError> {
        match self {
            Scheme::Dense => Ok(full_topology(g)),
            Scheme::Dijkstra | Scheme::DijkstraRate => build_spt(g, w),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "dense" => Ok(Scheme::Dense),
            "dijkstra" => Ok(Scheme::Dijkstra),
            "dijkstra+rate" | "dijkstra-rate" => Ok(Scheme::DijkstraRate),
            other => Err(HarnessError::UnknownScheme(other.to_string())),
        }
    }
}

/// Everything a run needs besides the graph, scheme and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub arch: Architecture,
    pub train: TrainConfig,
    /// Rate weight of the `dijkstra+rate` scheme; the other schemes use 0.
    pub rate_weight: f64,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            arch: Architecture::default(),
            train: TrainConfig::default(),
            rate_weight: DEFAULT_RATE_WEIGHT,
            master_seed: 0,
        }
    }
}

/// Rate weight for `dijkstra+rate` picked by the lambda sweep on the
/// reference task.
pub const DEFAULT_RATE_WEIGHT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub scheme: Scheme,
    pub seed: u64,
    pub edges: usize,
    pub params: usize,
    pub bits_per_epoch: u64,
    /// Percent.
    pub test_accuracy: f64,
    pub test_nll: f64,
    /// Nats per sample.
    pub rate: f64,
}

/// Edge-discipline audit of one training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunAudit {
    pub steps: usize,
    /// Steps whose forward and backward edge sets both equal the topology.
    pub steps_on_topology: usize,
    /// Steps with equal forward and backward scalar counts.
    pub steps_balanced: usize,
    pub epoch_bits: Vec<u64>,
    pub topology_edges: usize,
}

/// Key identifying a run's random streams. The scheme is deliberately not
/// part of it: all schemes of one seed share data, initial sensor weights and
/// gate noise.
pub fn run_key(master_seed: u64, seed: u64) -> [u64; 2] {
    [master_seed, seed]
}

/// Trains and tests one `(scheme, seed)` pair.
pub fn run_single(
    g: &NetworkGraph,
    w: &CostWeights,
    config: &ExperimentConfig,
    scheme: Scheme,
    seed: u64,
    rate_weight: f64,
) -> Result<(ExperimentRecord, RunAudit), HarnessError> {
    let key = run_key(config.master_seed, seed);
    let task = config.task.with_seed(derive_seed(&key));
    let (_, splits) = generate(&task)?;
    let topology = scheme.topology(g, w)?;
    let expected: Vec<(NodeId, NodeId)> = topology.edges().iter().map(|e| (e.from, e.to)).collect();
    let mut model = InlModel::new(topology.clone(), config.arch, &key)?;
    let train_config = TrainConfig {
        rate_weight,
        seed: derive_seed(&[key[0], key[1], 1]),
        bits_per_scalar: w.bits_per_scalar,
        ..config.train
    };

    let mut audit = RunAudit {
        topology_edges: topology.len(),
        ..RunAudit::default()
    };
    let report = train_observed(
        &mut model,
        &splits.train,
        &splits.val,
        &train_config,
        &mut |step| {
            audit.steps += 1;
            if step.trace.edges(Direction::Forward) == expected
                && step.trace.edges(Direction::Backward) == expected
            {
                audit.steps_on_topology += 1;
            }
            if step.trace.scalars(Direction::Forward) == step.trace.scalars(Direction::Backward) {
                audit.steps_balanced += 1;
            }
        },
    )?;
    audit.epoch_bits = report.epochs.iter().map(|e| e.bits).collect();

    let expected_bits = exchange_bits(&topology, w.bits_per_scalar, splits.train.len() as u64);
    if let Some(bad) = report.epochs.iter().find(|e| e.bits != expected_bits) {
        return Err(HarnessError::EdgeDiscipline {
            scheme,
            seed,
            epoch: bad.epoch,
        });
    }
    if audit.steps_on_topology != audit.steps {
        return Err(HarnessError::EdgeDiscipline {
            scheme,
            seed,
            epoch: 0,
        });
    }

    let test = model.evaluate(&splits.test)?;
    Ok((
        ExperimentRecord {
            scheme,
            seed,
            edges: topology.len(),
            params: model.count_params(),
            bits_per_epoch: expected_bits,
            test_accuracy: test.accuracy,
            test_nll: test.nll,
            rate: test.rate,
        },
        audit,
    ))
}

/// One record per `(scheme, seed)`, sorted by scheme then seed. Runs execute
/// in parallel; the output does not depend on scheduling.
pub fn run_experiment(
    g: &NetworkGraph,
    w: &CostWeights,
    config: &ExperimentConfig,
    schemes: &[Scheme],
    seeds: &[u64],
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    run_experiment_audited(g, w, config, schemes, seeds)
        .map(|runs| runs.into_iter().map(|(r, _)| r).collect())
}

pub fn run_experiment_audited(
    g: &NetworkGraph,
    w: &CostWeights,
    config: &ExperimentConfig,
    schemes: &[Scheme],
    seeds: &[u64],
) -> Result<Vec<(ExperimentRecord, RunAudit)>, HarnessError> {
    let schemes: BTreeSet<Scheme> = schemes.iter().copied().collect();
    let jobs: Vec<(Scheme, u64)> = schemes
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let mut runs = jobs
        .par_iter()
        .map(|&(scheme, seed)| {
            let lambda = match scheme {
                Scheme::DijkstraRate => config.rate_weight,
                Scheme::Dense | Scheme::Dijkstra => 0.0,
            };
            run_single(g, w, config, scheme, seed, lambda)
        })
        .collect::<Result<Vec<_>, _>>()?;
    runs.sort_by_key(|(r, _)| (r.scheme, r.seed));
    Ok(runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scheme: Scheme,
    pub seeds: usize,
    pub edges: usize,
    pub params: usize,
    pub bits_per_epoch: u64,
    pub rate_mean: f64,
    pub rate_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub nll_mean: f64,
    pub nll_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// `1 - B_dijkstra / B_dense`, when both schemes are present.
    pub exchange_reduction: Option<f64>,
    /// `(rate_dijkstra - rate_dijkstra+rate) / rate_dijkstra`, when both are present.
    pub rate_reduction: Option<f64>,
}

impl Summary {
    pub fn row(&self, scheme: Scheme) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.scheme == scheme)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn rate_reduction(rate_unregularized: f64, rate_regularized: f64) -> f64 {
    (rate_unregularized - rate_regularized) / rate_unregularized
}

/// Per-scheme mean and standard deviation plus the headline reductions.
pub fn summarize(records: &[ExperimentRecord]) -> Result<Summary, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    let mut rows = Vec::new();
    for scheme in Scheme::ALL {
        let group: Vec<&ExperimentRecord> = records.iter().filter(|r| r.scheme == scheme).collect();
        let Some(first) = group.first() else {
            continue;
        };
        let col =
            |f: fn(&ExperimentRecord) -> f64| -> Vec<f64> { group.iter().map(|r| f(r)).collect() };
        let (rate_mean, rate_std) = mean_std(&col(|r| r.rate));
        let (acc_mean, acc_std) = mean_std(&col(|r| r.test_accuracy));
        let (nll_mean, nll_std) = mean_std(&col(|r| r.test_nll));
        rows.push(SummaryRow {
            scheme,
            seeds: group.len(),
            edges: first.edges,
            params: first.params,
            bits_per_epoch: first.bits_per_epoch,
            rate_mean,
            rate_std,
            acc_mean,
            acc_std,
            nll_mean,
            nll_std,
        });
    }
    let find = |s: Scheme| rows.iter().find(|r| r.scheme == s);
    let exchange_reduction = match (
        find(Scheme::Dense),
        find(Scheme::Dijkstra).or(find(Scheme::DijkstraRate)),
    ) {
        (Some(d), Some(p)) if d.bits_per_epoch > 0 => {
            Some(1.0 - p.bits_per_epoch as f64 / d.bits_per_epoch as f64)
        }
        _ => None,
    };
    let rate_reduction = match (find(Scheme::Dijkstra), find(Scheme::DijkstraRate)) {
        (Some(a), Some(b)) => Some(rate_reduction(a.rate_mean, b.rate_mean)),
        _ => None,
    };
    Ok(Summary {
        rows,
        exchange_reduction,
        rate_reduction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub lambda: f64,
    pub rate: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub accuracy_std: f64,
}

/// Seed-averaged (rate, NLL, accuracy) of the pruned model for each rate
/// weight, sorted by rate.
pub fn sweep_lambda(
    g: &NetworkGraph,
    w: &CostWeights,
    config: &ExperimentConfig,
    grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<FrontierPoint>, HarnessError> {
    if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) || seeds.is_empty() {
        return Err(HarnessError::BadGrid);
    }
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, seed)| {
            run_single(g, w, config, Scheme::DijkstraRate, seed, grid[i]).map(|(r, _)| (i, r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut points: Vec<FrontierPoint> = grid
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let group: Vec<&ExperimentRecord> = runs
                .iter()
                .filter(|(j, _)| *j == i)
                .map(|(_, r)| r)
                .collect();
            let avg = |f: fn(&ExperimentRecord) -> f64| {
                mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (accuracy, accuracy_std) = avg(|r| r.test_accuracy);
            FrontierPoint {
                lambda,
                rate: avg(|r| r.rate).0,
                nll: avg(|r| r.test_nll).0,
                accuracy,
                accuracy_std,
            }
        })
        .collect();
    points.sort_by(|a, b| {
        a.rate
            .total_cmp(&b.rate)
            .then(a.lambda.total_cmp(&b.lambda))
    });
    Ok(points)
}

/// Smallest positive rate weight whose mean accuracy stays within one
/// standard deviation of the unpenalized run. `None` without a `lambda = 0`
/// point or without a qualifying weight.
pub fn select_rate_weight(points: &[FrontierPoint]) -> Option<f64> {
    let base = points.iter().find(|p| p.lambda == 0.0)?;
    points
        .iter()
        .filter(|p| p.lambda > 0.0 && p.accuracy >= base.accuracy - base.accuracy_std)
        .map(|p| p.lambda)
        .min_by(f64::total_cmp)
}

/// Files written by [`emit_results`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFiles {
    pub records: PathBuf,
    pub summary: PathBuf,
    pub table: PathBuf,
    pub frontier: PathBuf,
}

impl OutputFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            records: dir.join("records.csv"),
            summary: dir.join("summary.csv"),
            table: dir.join("table1.csv"),
            frontier: dir.join("frontier.csv"),
        }
    }
}

#[derive(Debug, Serialize)]
struct TableRow {
    scheme: &'static str,
    edges: usize,
    params: usize,
    mbit_per_epoch: String,
    rate: String,
    accuracy: String,
    nll: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrontierRow {
    panel: String,
    label: String,
    x: f64,
    y: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, HarnessError> {
    csv::Writer::from_path(path).map_err(|source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = if rows.is_empty() {
        let mut w = csv_writer(path)?;
        w.write_record(header).map_err(csv_err)?;
        w
    } else {
        csv_writer(path)?
    };
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

const RECORD_HEADER: [&str; 8] = [
    "scheme",
    "seed",
    "edges",
    "params",
    "bits_per_epoch",
    "test_accuracy",
    "test_nll",
    "rate",
];
const SUMMARY_HEADER: [&str; 11] = [
    "scheme",
    "seeds",
    "edges",
    "params",
    "bits_per_epoch",
    "rate_mean",
    "rate_std",
    "acc_mean",
    "acc_std",
    "nll_mean",
    "nll_std",
];
const TABLE_HEADER: [&str; 7] = [
    "scheme",
    "edges",
    "params",
    "mbit_per_epoch",
    "rate",
    "accuracy",
    "nll",
];
const FRONTIER_HEADER: [&str; 4] = ["panel", "label", "x", "y"];

/// Writes per-record, summary, Table-1 style and frontier CSVs into `dir`.
pub fn emit_results(
    records: &[ExperimentRecord],
    summary_rows: &[SummaryRow],
    frontier: &[FrontierPoint],
    dir: &Path,
) -> Result<OutputFiles, HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let files = OutputFiles::in_dir(dir);
    write_rows(&files.records, &RECORD_HEADER, records)?;
    write_rows(&files.summary, &SUMMARY_HEADER, summary_rows)?;

    let table: Vec<TableRow> = summary_rows
        .iter()
        .map(|r| TableRow {
            scheme: r.scheme.label(),
            edges: r.edges,
            params: r.params,
            mbit_per_epoch: format!("{:.3}", r.bits_per_epoch as f64 / 1e6),
            rate: format!("{:.2}±{:.2}", r.rate_mean, r.rate_std),
            accuracy: format!("{:.2}±{:.2}", r.acc_mean, r.acc_std),
            nll: format!("{:.4}±{:.4}", r.nll_mean, r.nll_std),
        })
        .collect();
    write_rows(&files.table, &TABLE_HEADER, &table)?;

    let mut points = Vec::new();
    for r in summary_rows {
        points.push(FrontierRow {
            panel: "bits_accuracy".into(),
            label: r.scheme.to_string(),
            x: r.bits_per_epoch as f64,
            y: r.acc_mean,
        });
    }
    for r in summary_rows {
        points.push(FrontierRow {
            panel: "rate_nll".into(),
            label: r.scheme.to_string(),
            x: r.rate_mean,
            y: r.nll_mean,
        });
    }
    for p in frontier {
        points.push(FrontierRow {
            panel: "rate_nll".into(),
            label: format!("lambda={}", p.lambda),
            x: p.rate,
            y: p.nll,
        });
    }
    write_rows(&files.frontier, &FRONTIER_HEADER, &points)?;
    Ok(files)
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(csv_err)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(csv_err)
}
