//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when a workload is unschedulable or a check
//! fails, 2 on bad input.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::builder;
use crate::format::{self, SynthesisMetrics, Workload};
use crate::model::{self, FlowId, Slot, Topology, DEFAULT_ACTIVE_CAP, DEFAULT_CHANNELS, DEFAULT_SERVICE_CAP};
use crate::simulator::{self, LinkModel, LinkProcess, RunConfig, DEFAULT_WINDOW};
use crate::synthesizer::{
    self, CapacitySearch, FlowTemplate, SynthesisConfig, SynthesisError, SynthesisTiming, DEFAULT_SLOT_MS,
};
use crate::verifier::{self, SuiteConfig, DEFAULT_SEED};
use crate::workload::{self, WorkloadKind};

#[derive(Debug, Parser)]
#[command(
    name = "recorp",
    version,
    about = "Synthesize and check pull policies for TDMA mesh networks"
)]
pub struct Cli {
    /// Optional TOML file with defaults for the numeric flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a policy for a workload.
    Synthesize(SynthesizeArgs),
    /// Replay a policy against stochastic links.
    Simulate(SimulateArgs),
    /// Smallest schedulable base period and the resulting packet rate.
    Capacity(CapacityArgs),
    /// Largest number of flows that stays schedulable.
    Maxflows(MaxflowsArgs),
    /// Run the property suite.
    Verify(VerifyArgs),
    /// Generate a workload file.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthesisFlags {
    /// Link-quality threshold.
    #[arg(long)]
    pub m: Option<f64>,
    #[arg(long)]
    pub service_cap: Option<usize>,
    #[arg(long)]
    pub active_cap: Option<usize>,
    /// Overrides the topology's channel count.
    #[arg(long)]
    pub channels: Option<u16>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub workload: PathBuf,
    #[command(flatten)]
    pub synth: SynthesisFlags,
    /// Policy output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics output; stderr when absent.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Writes every slot's constraint system and solution.
    #[arg(long)]
    pub dump_lp: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub workload: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    /// `constant:Q`, `uniform` (from m to 1), `uniform:LO:HI`, `below:Q` or
    /// `trace:FILE`.
    #[arg(long, default_value = "uniform")]
    pub links: String,
    #[arg(long)]
    pub hyperperiods: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Window width in hyperperiods.
    #[arg(long)]
    pub window: Option<u64>,
    /// Statistics output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-window PDR series as `window,pdr`; the minimum over flows unless
    /// `--flow` is given.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub flow: Option<u32>,
    /// Sweeps constant link quality over 0.50..=1.00 instead and writes
    /// `q,min_pdr`.
    #[arg(long)]
    pub sweep: bool,
}

#[derive(Debug, Args)]
pub struct CapacityArgs {
    /// Flows whose periods are multiples of the smallest one; the multiple is
    /// kept as the rate class.
    #[arg(long)]
    pub workload: PathBuf,
    #[command(flatten)]
    pub synth: SynthesisFlags,
    #[arg(long, default_value_t = 1)]
    pub min_base: Slot,
    #[arg(long, default_value_t = 1000)]
    pub max_base: Slot,
    #[arg(long, default_value_t = 1)]
    pub step: Slot,
    #[arg(long)]
    pub slot_ms: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MaxflowsArgs {
    /// Uses prefixes of this workload's flow list; a star otherwise.
    #[arg(long)]
    pub workload: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthesisFlags,
    /// Star flow period and deadline.
    #[arg(long, default_value_t = 100)]
    pub period: Slot,
    #[arg(long, default_value_t = 0.99)]
    pub reliability: f64,
    #[arg(long, default_value_t = 500)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fewer trials per check.
    #[arg(long)]
    pub quick: bool,
    /// Machine-readable reports.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// `col`, `dis`, `mix` or `rtb`.
    #[arg(long, default_value = "mix")]
    pub kind: String,
    #[arg(long)]
    pub count: usize,
    /// `star:N`, `mesh:N:DEGREE`, `washu`, `indriya`, or a workload file
    /// whose topology is reused.
    #[arg(long, default_value = "washu")]
    pub topology: String,
    #[arg(long, default_value_t = 100)]
    pub base_period: Slot,
    #[arg(long, default_value_t = 0.99)]
    pub reliability: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Values a `--config` file may set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub m: Option<f64>,
    pub service_cap: Option<usize>,
    pub active_cap: Option<usize>,
    pub channels: Option<u16>,
    pub seed: Option<u64>,
    pub hyperperiods: Option<u64>,
    pub window: Option<u64>,
    pub slot_ms: Option<f64>,
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Unschedulable(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Unschedulable(_) | CliError::Failed(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(s) | CliError::Unschedulable(s) | CliError::Failed(s) => s,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for CliError {}

fn input<E: std::fmt::Display>(ctx: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", ctx.display()))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(input(path))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_workload(path: &Path) -> Result<Workload, CliError> {
    format::parse_workload(&read(path)?).map_err(input(path))
}

impl SynthesisFlags {
    fn resolve(&self, cfg: &ConfigFile) -> SynthesisConfig {
        SynthesisConfig {
            m: self.m.or(cfg.m).unwrap_or(0.7),
            service_cap: self.service_cap.or(cfg.service_cap).unwrap_or(DEFAULT_SERVICE_CAP),
            active_cap: self.active_cap.or(cfg.active_cap).unwrap_or(DEFAULT_ACTIVE_CAP),
            channels: self.channels.or(cfg.channels),
        }
    }
}

fn synthesis_failure(e: SynthesisError) -> CliError {
    match e {
        SynthesisError::Unschedulable(_) => CliError::Unschedulable(e.to_string()),
        SynthesisError::Evaluator(_) => CliError::Failed(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

/// Parses arguments and runs the command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => toml::from_str::<ConfigFile>(&read(p)?).map_err(input(p))?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Synthesize(a) => synthesize(a, &cfg),
        Command::Simulate(a) => simulate(a, &cfg),
        Command::Capacity(a) => capacity(a, &cfg),
        Command::Maxflows(a) => maxflows(a, &cfg),
        Command::Verify(a) => verify(a, &cfg),
        Command::Generate(a) => generate(a, &cfg),
    }
}

fn synthesize(a: SynthesizeArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    let w = load_workload(&a.workload)?;
    let config = a.synth.resolve(cfg);
    let mut lp = String::new();
    let started = Instant::now();
    let result = synthesizer::synthesize_traced(&w.topology, &w.flows, &config, |t, p, s| {
        if a.dump_lp.is_some() {
            let _ = writeln!(lp, "\\ slot {t}\n{}", builder::lp_listing(p, s));
        }
    });
    if let Some(p) = &a.dump_lp {
        write(p, &lp)?;
    }
    let metrics = match &result {
        Ok(s) => SynthesisMetrics::from_synthesis(s, &w.flows),
        Err(SynthesisError::Unschedulable(u)) => {
            let hp = model::hyperperiod(&w.flows).unwrap_or(0);
            let timing = SynthesisTiming {
                total: started.elapsed(),
                ..Default::default()
            };
            SynthesisMetrics::unschedulable(u.clone(), hp, timing)
        }
        Err(_) => return Err(synthesis_failure(result.unwrap_err())),
    };
    match &a.metrics {
        Some(p) => write(p, &metrics.to_json())?,
        None => eprintln!("{}", metrics.to_json()),
    }
    let s = result.map_err(synthesis_failure)?;
    let violations = model::validate_policy(&s.policy, &w.topology, &w.flows);
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(CliError::Failed(lines.join("\n")));
    }
    emit(
        a.out.as_deref(),
        &format::write_policy(&s.policy).map_err(|e| CliError::Failed(e.to_string()))?,
    )
}

/// Parses a `--links` specification.
pub fn parse_links(spec: &str, m: f64) -> Result<LinkProcess, CliError> {
    let bad = || CliError::Input(format!("bad link model {spec:?}"));
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = spec.splitn(3, ':').collect();
    let model = match parts.as_slice() {
        ["constant", q] => LinkModel::Constant(num(q)?),
        ["below", q] => LinkModel::BelowThreshold(num(q)?),
        ["uniform"] => LinkModel::Uniform { lo: m, hi: 1.0 },
        ["uniform", lo, hi] => LinkModel::Uniform {
            lo: num(lo)?,
            hi: num(hi)?,
        },
        ["trace", rest @ ..] => {
            let path = PathBuf::from(rest.join(":"));
            LinkModel::Trace(format::parse_trace(&read(&path)?).map_err(input(&path))?)
        }
        _ => return Err(bad()),
    };
    Ok(LinkProcess::uniform(model))
}

fn simulate(a: SimulateArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    let w = load_workload(&a.workload)?;
    let policy = format::parse_policy(&read(&a.policy)?).map_err(input(&a.policy))?;
    let violations = model::validate_policy(&policy, &w.topology, &w.flows);
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(CliError::Failed(format!(
            "policy is not well-formed:\n{}",
            lines.join("\n")
        )));
    }
    let run = RunConfig {
        hyperperiods: a.hyperperiods.or(cfg.hyperperiods).unwrap_or(10_000),
        seed: a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED),
        window: a.window.or(cfg.window).unwrap_or(DEFAULT_WINDOW),
    };
    let sim_err = |e: simulator::SimError| CliError::Input(e.to_string());
    if a.sweep {
        let grid = simulator::default_quality_grid();
        let series = simulator::degradation_sweep(&policy, &w.flows, &grid, &run).map_err(sim_err)?;
        return emit(a.out.as_deref(), &format::csv_series(("q", "min_pdr"), &series));
    }
    let links = parse_links(&a.links, policy.header.m)?;
    let stats = simulator::run(&policy, &w.flows, &links, &run).map_err(sim_err)?;
    if let Some(p) = &a.csv {
        let series = match a.flow {
            Some(f) => stats.window_series(FlowId(f)),
            None => {
                let n = stats.flows.iter().map(|f| f.windows.len()).max().unwrap_or(0);
                (0..n)
                    .map(|i| {
                        let min = stats.flows.iter().map(|f| f.windows[i]).fold(1.0, f64::min);
                        (i as f64, min)
                    })
                    .collect()
            }
        };
        write(p, &format::csv_series(("window", "pdr"), &series))?;
    }
    emit(
        a.out.as_deref(),
        &(serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n"),
    )?;
    if stats.runtime_conflicts > 0 {
        return Err(CliError::Failed(format!(
            "{} run-time conflicts",
            stats.runtime_conflicts
        )));
    }
    Ok(())
}

fn templates_of(w: &Workload) -> Vec<FlowTemplate> {
    fn gcd(a: u32, b: u32) -> u32 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let base = w.flows.iter().map(|f| f.period).fold(0, gcd).max(1);
    w.flows
        .iter()
        .map(|f| FlowTemplate {
            path: f.path.clone(),
            class: f.period / base,
            reliability: f.reliability,
        })
        .collect()
}

fn capacity(a: CapacityArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    let w = load_workload(&a.workload)?;
    let search = CapacitySearch {
        min_base: a.min_base,
        max_base: a.max_base,
        step: a.step,
        slot_ms: a.slot_ms.or(cfg.slot_ms).unwrap_or(DEFAULT_SLOT_MS),
    };
    let r =
        synthesizer::capacity_search(&w.topology, &templates_of(&w), &a.synth.resolve(cfg), &search).map_err(|e| {
            match e {
                synthesizer::SearchError::NoSchedulablePeriod { .. } => CliError::Unschedulable(e.to_string()),
                synthesizer::SearchError::Synthesis(s) => synthesis_failure(s),
            }
        })?;
    println!("{}", serde_json::to_string_pretty(&r).expect("result serialize"));
    Ok(())
}

#[derive(Serialize)]
struct MaxflowsReport {
    max_flows: usize,
    m: f64,
    service_cap: usize,
    active_cap: usize,
}

fn maxflows(a: MaxflowsArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    let config = a.synth.resolve(cfg);
    let n = match &a.workload {
        Some(p) => {
            let w = load_workload(p)?;
            let limit = a.limit.min(w.flows.len());
            synthesizer::max_flows_search::<SynthesisError>(
                |n| Ok((w.topology.clone(), w.flows[..n].to_vec())),
                &config,
                limit,
            )
        }
        None => synthesizer::max_flows_search::<SynthesisError>(
            |n| Ok(workload::star_workload(n as u32, a.period, a.reliability)?),
            &config,
            a.limit,
        ),
    }
    .map_err(synthesis_failure)?;
    let report = MaxflowsReport {
        max_flows: n,
        m: config.m,
        service_cap: config.service_cap,
        active_cap: config.active_cap,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serialize"));
    Ok(())
}

fn verify(a: VerifyArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    let mut suite = SuiteConfig {
        seed: a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED),
        ..Default::default()
    };
    if a.quick {
        suite.order_width = 6;
        suite.random_trials = 100;
        suite.domination_trials = 500;
    }
    let reports = verifier::run_suite(&suite);
    print!("{}", verifier::summary_table(&reports));
    if let Some(p) = &a.json {
        write(p, &serde_json::to_string_pretty(&reports).expect("reports serialize"))?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} checks failed")));
    }
    Ok(())
}

/// Parses a `--topology` specification.
pub fn parse_topology(spec: &str, seed: u64) -> Result<Topology, CliError> {
    let bad = || CliError::Input(format!("bad topology {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let model_err = |e: model::ModelError| CliError::Input(e.to_string());
    match parts.as_slice() {
        ["washu"] => Ok(workload::washu_like(seed)),
        ["indriya"] => Ok(workload::indriya_like(seed)),
        ["star", n] => Topology::star(n.parse().map_err(|_| bad())?, DEFAULT_CHANNELS).map_err(model_err),
        ["mesh", n, d] => workload::random_mesh(
            n.parse().map_err(|_| bad())?,
            d.parse().map_err(|_| bad())?,
            DEFAULT_CHANNELS,
            seed,
        )
        .map_err(model_err),
        _ => Ok(load_workload(Path::new(spec))?.topology),
    }
}

fn generate(a: GenerateArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    let seed = a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let kind: WorkloadKind = a
        .kind
        .parse()
        .map_err(|e: workload::WorkloadError| CliError::Input(e.to_string()))?;
    let topology = parse_topology(&a.topology, seed)?;
    let flows = workload::generate_workload(&topology, kind, a.count, a.base_period, a.reliability, seed)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let w = Workload { topology, flows };
    emit(
        a.out.as_deref(),
        &format::write_workload(&w).map_err(|e| CliError::Failed(e.to_string()))?,
    )
}
