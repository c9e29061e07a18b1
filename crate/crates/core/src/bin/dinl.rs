//! `dinl` command-line driver.
//!
//! Usage:
//!   dinl prune [--topology FILE]
//!   dinl run   [--topology FILE] [--schemes dense,dijkstra,dijkstra+rate] [--seeds N] [--lambda X] [--out DIR]
//!   dinl sweep [--topology FILE] [--lambda-grid 0,0.001,0.01,0.1] [--seeds N] [--out DIR]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dinl::config::Config;
use dinl::graph::{
    build_spt, edge_cost, exchange_bits, exchange_gain, full_topology, paper_topology,
    parse_graph_spec, reduction_ratio, reverse_dijkstra, CostWeights, NetworkGraph,
};
use dinl::harness::{
    emit_results, run_experiment, select_rate_weight, summarize, sweep_lambda, Scheme,
};

#[derive(Debug, Parser)]
#[command(
    name = "dinl",
    about = "Shortest-path-tree pruned in-network learning simulator"
)]
struct Cli {
    /// Configuration file; defaults to the bundled config/default.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate the schemes over several seeds.
    Run(RunArgs),
    /// Trace the rate/NLL frontier of the pruned model over rate weights.
    Sweep(SweepArgs),
    /// Print the shortest-path tree, link costs and exchange gain.
    Prune(TopologyArg),
}

#[derive(Debug, Args)]
struct TopologyArg {
    /// Topology JSON file; defaults to the bundled reference topology.
    #[arg(long)]
    topology: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    topology: TopologyArg,
    /// Comma-separated schemes.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<String>>,
    /// Number of seeds (0..N).
    #[arg(long)]
    seeds: Option<u64>,
    /// Rate weight of the dijkstra+rate scheme.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    topology: TopologyArg,
    /// Comma-separated rate weights.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

type BoxError = Box<dyn std::error::Error>;

fn load_topology(arg: &TopologyArg) -> Result<(NetworkGraph, CostWeights), BoxError> {
    match &arg.topology {
        None => Ok(paper_topology()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            Ok(parse_graph_spec(&text).map_err(|e| format!("{}: {e}", path.display()))?)
        }
    }
}

fn prune(arg: &TopologyArg) -> Result<(), BoxError> {
    let (g, w) = load_topology(arg)?;
    let paths = reverse_dijkstra(&g, &w)?;
    let spt = build_spt(&g, &w)?;
    let dense = full_topology(&g);

    println!("edge      cost        in_tree");
    for e in g.edges() {
        println!(
            "{:>2} -> {:<2} {:<11.6} {}",
            e.from.index(),
            e.to.index(),
            edge_cost(&e.attr, &w),
            if spt.contains(e.from, e.to) {
                "yes"
            } else {
                ""
            }
        );
    }
    println!();
    for j in g.data_nodes() {
        let path: Vec<String> = paths
            .path(j)
            .unwrap_or_default()
            .iter()
            .map(|v| v.index().to_string())
            .collect();
        println!(
            "node {:>2}: distance {:.6} via {}",
            j.index(),
            paths.distance[j.index()],
            path.join(" -> ")
        );
    }
    let tree: Vec<String> = spt
        .edges()
        .iter()
        .map(|e| format!("({},{})", e.from.index(), e.to.index()))
        .collect();
    println!();
    println!("tree edges ({}): {}", spt.len(), tree.join(" "));
    println!("training-active edges: {}", dense.len());
    println!("reduction ratio: {:.4}", reduction_ratio(&spt, &dense)?);
    println!(
        "exchange gain G_B: {:.2}%",
        100.0 * exchange_gain(&spt, &dense)?
    );
    println!(
        "bits per epoch at q=120: dense {}  tree {}",
        exchange_bits(&dense, w.bits_per_scalar, 120),
        exchange_bits(&spt, w.bits_per_scalar, 120)
    );
    Ok(())
}

fn run(config: &Config, args: &RunArgs) -> Result<(), BoxError> {
    let (g, w) = load_topology(&args.topology)?;
    let mut config = config.clone();
    if let Some(schemes) = &args.schemes {
        config.schemes = schemes.clone();
    }
    if let Some(n) = args.seeds {
        config.seeds = n;
    }
    if let Some(l) = args.lambda {
        config.rate_weight = l;
    }
    if let Some(m) = args.master_seed {
        config.master_seed = m;
    }
    let schemes: Vec<Scheme> = config.schemes()?;
    let records = run_experiment(&g, &w, &config.experiment(), &schemes, &config.seed_list())?;
    let rows = if records.is_empty() {
        Vec::new()
    } else {
        let summary = summarize(&records)?;
        print_summary(&summary);
        summary.rows
    };
    let files = emit_results(&records, &rows, &[], &args.out)?;
    report_files(
        &files.records,
        &[&files.summary, &files.table, &files.frontier],
    );
    Ok(())
}

fn print_summary(summary: &dinl::harness::Summary) {
    println!(
        "{:<14} {:>5} {:>6} {:>8} {:>14} {:>14} {:>16}",
        "scheme", "edges", "params", "Mbit", "rate", "acc %", "nll"
    );
    for r in &summary.rows {
        println!(
            "{:<14} {:>5} {:>6} {:>8.3} {:>14} {:>14} {:>16}",
            r.scheme.label(),
            r.edges,
            r.params,
            r.bits_per_epoch as f64 / 1e6,
            format!("{:.2}±{:.2}", r.rate_mean, r.rate_std),
            format!("{:.2}±{:.2}", r.acc_mean, r.acc_std),
            format!("{:.4}±{:.4}", r.nll_mean, r.nll_std),
        );
    }
    if let Some(g) = summary.exchange_reduction {
        println!("exchange reduction: {:.2}%", 100.0 * g);
    }
    if let Some(r) = summary.rate_reduction {
        println!("rate reduction: {:.2}%", 100.0 * r);
    }
}

fn sweep(config: &Config, args: &SweepArgs) -> Result<(), BoxError> {
    let (g, w) = load_topology(&args.topology)?;
    let mut config = config.clone();
    if let Some(grid) = &args.lambda_grid {
        config.lambda_grid = grid.clone();
    }
    if let Some(n) = args.seeds {
        config.seeds = n;
    }
    if let Some(m) = args.master_seed {
        config.master_seed = m;
    }
    let points = sweep_lambda(
        &g,
        &w,
        &config.experiment(),
        &config.lambda_grid,
        &config.seed_list(),
    )?;
    println!(
        "{:>10} {:>10} {:>8} {:>14}",
        "lambda", "rate", "nll", "acc %"
    );
    for p in &points {
        println!(
            "{:>10} {:>10.3} {:>8.4} {:>14}",
            p.lambda,
            p.rate,
            p.nll,
            format!("{:.2}±{:.2}", p.accuracy, p.accuracy_std)
        );
    }
    match select_rate_weight(&points) {
        Some(l) => println!("selected rate weight: {l}"),
        None => println!("no rate weight qualifies (grid needs 0 and a positive value)"),
    }
    let files = emit_results(&[], &[], &points, &args.out)?;
    report_files(&files.frontier, &[]);
    Ok(())
}

fn report_files(first: &Path, rest: &[&Path]) {
    eprintln!("wrote {}", first.display());
    for p in rest {
        eprintln!("wrote {}", p.display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => Config::load(path),
        None => Ok(Config::default()),
    };
    let result = config
        .map_err(BoxError::from)
        .and_then(|config| match &cli.command {
            Command::Prune(arg) => prune(arg),
            Command::Run(args) => run(&config, args),
            Command::Sweep(args) => sweep(&config, args),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
