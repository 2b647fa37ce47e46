//! Batch experiment runner for the simulator: parses a JSON experiment
//! config, executes seeded trials (optionally in parallel), and writes
//! per-trial reports plus an aggregate summary. Exit code 0 means every
//! trial completed with all progress invariants intact, 1 means a usage or
//! config error, and 2 means at least one invariant violation was observed.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use icsim::channel::AdversarySpec;
use icsim::protocol_model::{chunk_protocol, ChunkedProtocol, ProtocolDescriptor};
use icsim::scheme::{Engine, RunReport, SchemeConfig, SchemeVariant, VariantTag};
use icsim::topology::Graph;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Config-facing network shapes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
enum TopologyDescriptor {
    Path { n: usize },
    Ring { n: usize },
    Star {
        n: usize,
        #[serde(default)]
        center: usize,
    },
    Complete { n: usize },
    ErdosRenyi { n: usize, p: f64, seed: u64 },
    Edges { n: usize, edges: Vec<(usize, usize)> },
}

impl TopologyDescriptor {
    fn build(&self) -> Result<Graph> {
        let graph = match *self {
            TopologyDescriptor::Path { n } => {
                if n < 2 {
                    bail!("topology.n: a path needs at least 2 parties, got {n}");
                }
                Graph::path(n)
            }
            TopologyDescriptor::Ring { n } => {
                if n < 3 {
                    bail!("topology.n: a ring needs at least 3 parties, got {n}");
                }
                Graph::ring(n)
            }
            TopologyDescriptor::Star { n, center } => {
                if n < 2 {
                    bail!("topology.n: a star needs at least 2 parties, got {n}");
                }
                if center >= n {
                    bail!("topology.center: {center} is not a party of a {n}-party star");
                }
                Graph::star(n, center)
            }
            TopologyDescriptor::Complete { n } => {
                if n < 2 {
                    bail!("topology.n: a complete graph needs at least 2 parties, got {n}");
                }
                Graph::complete(n)
            }
            TopologyDescriptor::ErdosRenyi { n, p, seed } => {
                if n < 2 {
                    bail!("topology.n: a random graph needs at least 2 parties, got {n}");
                }
                if !(0.0..=1.0).contains(&p) {
                    bail!("topology.p: edge probability must be in [0, 1], got {p}");
                }
                Graph::erdos_renyi(n, p, seed)
            }
            TopologyDescriptor::Edges { n, ref edges } => Graph::new(n, edges.clone())
                .map_err(|e| anyhow::anyhow!("topology.edges: {e}"))?,
        };
        Ok(graph)
    }
}

/// One experiment: a scheme variant over a protocol on a topology, run for a
/// number of independently seeded trials against one adversary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    variant: VariantTag,
    topology: TopologyDescriptor,
    protocol: ProtocolDescriptor,
    epsilon: f64,
    #[serde(default = "default_adversary")]
    adversary: AdversarySpec,
    trials: u64,
    #[serde(default)]
    base_seed: u64,
    /// Padding chunks appended after the content so short protocols still
    /// exercise full-length runs. None picks the minimum of one.
    #[serde(default)]
    dummy_chunks: Option<usize>,
    /// Default output directory; `--out` overrides it.
    #[serde(default)]
    output: Option<PathBuf>,
    #[serde(default)]
    record_trace: bool,
    #[serde(default)]
    keep_iteration_snapshots: bool,
}

fn default_adversary() -> AdversarySpec {
    AdversarySpec::Null
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            bail!("trials: must be at least 1");
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            bail!("epsilon: must be a finite non-negative rate, got {}", self.epsilon);
        }
        self.topology.build()?;
        Ok(())
    }

    fn build_protocol(&self) -> Result<ChunkedProtocol> {
        let graph = self.topology.build()?;
        let variant = SchemeVariant::derive(self.variant, graph.link_count());
        let base = self
            .protocol
            .build(graph)
            .map_err(|e| anyhow::anyhow!("protocol: {e}"))?;
        chunk_protocol(base, variant.k_chunk, self.dummy_chunks)
            .map_err(|e| anyhow::anyhow!("protocol: {e}"))
    }
}

#[derive(Debug, Serialize)]
struct ErrBucket {
    err: u64,
    count: u64,
}

/// Summary over all trials of one experiment.
#[derive(Debug, Serialize)]
struct AggregateReport {
    variant: VariantTag,
    epsilon: f64,
    trials: u64,
    success_rate: f64,
    mean_cc: f64,
    max_cc: u64,
    /// Mean ratio of noisy communication to the noiseless protocol's.
    mean_cc_overhead: f64,
    err_distribution: Vec<ErrBucket>,
    budget_validity_rate: f64,
    invariant_violation_count: u64,
}

fn aggregate(cfg: &ExperimentConfig, reports: &[RunReport]) -> AggregateReport {
    let trials = reports.len() as u64;
    let successes = reports.iter().filter(|r| r.correct).count() as u64;
    let cc_sum: u64 = reports.iter().map(|r| r.cc).sum();
    let max_cc = reports.iter().map(|r| r.cc).max().unwrap_or(0);
    let overhead_sum: f64 = reports
        .iter()
        .map(|r| r.cc as f64 / r.base_cc.max(1) as f64)
        .sum();
    let valid = reports.iter().filter(|r| r.budget_valid).count() as u64;
    let violation_count: u64 = reports
        .iter()
        .map(|r| r.violations.potential_growth + r.violations.link_bound)
        .sum();
    let mut buckets = std::collections::BTreeMap::new();
    for r in reports {
        *buckets.entry(r.err).or_insert(0u64) += 1;
    }
    AggregateReport {
        variant: cfg.variant,
        epsilon: cfg.epsilon,
        trials,
        success_rate: successes as f64 / trials as f64,
        mean_cc: cc_sum as f64 / trials as f64,
        max_cc,
        mean_cc_overhead: overhead_sum / trials as f64,
        err_distribution: buckets.into_iter().map(|(err, count)| ErrBucket { err, count }).collect(),
        budget_validity_rate: valid as f64 / trials as f64,
        invariant_violation_count: violation_count,
    }
}

/// Seeded adversaries draw fresh noise per trial; everything else is shared.
fn per_trial_adversary(spec: &AdversarySpec, trial_seed: u64) -> AdversarySpec {
    match spec.clone() {
        AdversarySpec::UniformRandom { seed } => {
            AdversarySpec::UniformRandom { seed: seed.wrapping_add(trial_seed) }
        }
        AdversarySpec::LinkBurst { link, first_iteration, last_iteration, seed } => {
            AdversarySpec::LinkBurst {
                link,
                first_iteration,
                last_iteration,
                seed: seed.wrapping_add(trial_seed),
            }
        }
        AdversarySpec::BotSpoof { victim, seed } => {
            AdversarySpec::BotSpoof { victim, seed: seed.wrapping_add(trial_seed) }
        }
        other => other,
    }
}

/// One trial, fully determined by the config and its seed.
fn run_trial(cfg: &ExperimentConfig, cp: &ChunkedProtocol, seed: u64, want_trace: bool) -> Result<(RunReport, Option<String>)> {
    let scfg = SchemeConfig {
        variant: cfg.variant,
        epsilon: cfg.epsilon,
        adversary: per_trial_adversary(&cfg.adversary, seed),
        trial_seed: seed,
        record_trace: cfg.record_trace || want_trace,
        keep_iteration_snapshots: cfg.keep_iteration_snapshots,
        constants: Default::default(),
    };
    let mut eng = Engine::new(cp, scfg).context("scheme setup")?;
    let report = eng.run();
    let trace = eng.trace().map(|rows| {
        let mut out = String::from("round\tdir_link\tsent\te\tobserved\n");
        for row in rows {
            out.push_str(&row.tsv());
            out.push('\n');
        }
        out
    });
    Ok((report, trace))
}

fn run_experiment(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    dump_trace: bool,
) -> Result<AggregateReport> {
    cfg.validate()?;
    let cp = cfg.build_protocol()?;
    let seeds: Vec<u64> = (0..cfg.trials).map(|t| cfg.base_seed + t).collect();
    let results: Vec<Result<(RunReport, Option<String>)>> = {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&seed| run_trial(cfg, &cp, seed, dump_trace))
            .collect()
    };
    let mut reports = Vec::with_capacity(results.len());
    let mut traces = Vec::with_capacity(results.len());
    for r in results {
        let (report, trace) = r?;
        reports.push(report);
        traces.push(trace);
    }
    let agg = aggregate(cfg, &reports);
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (seed, report) in seeds.iter().zip(&reports) {
            let path = dir.join(format!("trial_{seed}.json"));
            fs::write(&path, serde_json::to_string_pretty(report)?)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        if dump_trace {
            for (seed, trace) in seeds.iter().zip(&traces) {
                if let Some(t) = trace {
                    let path = dir.join(format!("trial_{seed}.trace.tsv"));
                    fs::write(&path, t).with_context(|| format!("writing {}", path.display()))?;
                }
            }
        }
        let path = dir.join("aggregate.json");
        fs::write(&path, serde_json::to_string_pretty(&agg)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    for (seed, report) in seeds.iter().zip(&reports) {
        if report.violations.any() {
            eprintln!(
                "invariant violation in trial {seed}: {}",
                serde_json::to_string(&report.violations)?
            );
        }
    }
    Ok(agg)
}

#[derive(Parser)]
#[command(name = "icsim", about = "Batch runner for the interactive-coding simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for trial-level parallelism (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides the config's `output` field.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-trial channel traces (TSV).
    #[arg(long)]
    dump_trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run all trials of one experiment and write reports.
    Run(RunArgs),
    /// Parse and validate a config without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the experiment once per value of a swept parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Parameter to sweep; only `epsilon` is supported.
        #[arg(long)]
        param: String,
        /// Values the parameter takes, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn install_pool(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs: must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing worker threads")?;
    }
    Ok(())
}

fn real_main() -> Result<u8> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version are ordinary exits, not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            e.print().ok();
            return Ok(code);
        }
    };
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args.config)?;
            install_pool(args.jobs)?;
            let out = args.out.or_else(|| cfg.output.clone());
            let agg = run_experiment(&cfg, out.as_deref(), args.dump_trace)?;
            println!("{}", serde_json::to_string_pretty(&agg)?);
            Ok(if agg.invariant_violation_count > 0 { 2 } else { 0 })
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!(
                "ok: variant {:?}, {} trials, epsilon {}",
                cfg.variant, cfg.trials, cfg.epsilon
            );
            Ok(0)
        }
        Command::Sweep { run, param, values } => {
            if param != "epsilon" {
                bail!("--param: only `epsilon` can be swept, got {param:?}");
            }
            if values.is_empty() {
                bail!("--values: at least one value is required");
            }
            let base = load_config(&run.config)?;
            install_pool(run.jobs)?;
            let out = run.out.or_else(|| base.output.clone());
            let mut worst = 0u8;
            for &eps in &values {
                let mut cfg = base.clone();
                cfg.epsilon = eps;
                cfg.validate()?;
                let point_dir = out.as_ref().map(|d| d.join(format!("epsilon-{eps}")));
                let agg = run_experiment(&cfg, point_dir.as_deref(), run.dump_trace)?;
                println!("{}", serde_json::to_string_pretty(&agg)?);
                if agg.invariant_violation_count > 0 {
                    worst = 2;
                }
            }
            Ok(worst)
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
