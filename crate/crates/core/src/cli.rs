//! Experiment runner behind the `cdcsde` binary.
//!
//! Every command reads an optional TOML config (all fields default), applies
//! command-line overrides, runs each method on each seed and writes:
//!
//! - `runs/<label>-seed<s>.jsonl`: the event log of one run,
//! - `manifest.json`: config, drift truth and log file per run,
//! - `metrics.csv`: one row per run,
//! - `summary.csv` / `summary.txt`: rows averaged over seeds.
//!
//! `report <dir>` rebuilds the summary from the logs and manifest alone.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluation::{
    average_metrics, compute_metrics, format_table, run_method, write_metrics_csv, MetricSet,
};
use crate::serving::{
    read_events_jsonl, write_events_jsonl, Method, RunReport, ServingConfig,
};
use crate::signals::N_SIGNALS;
use crate::stream::{
    generate, CompositeSpec, Generator, LagKind, LagPolicy, PoolPair, Scenario, StreamSpec,
    SyntheticPools,
};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Signal subsets, e.g. `["q1", "q6"]`.
    pub subsets: Vec<Vec<String>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        // Signals added one at a time.
        let subsets = (1..=N_SIGNALS)
            .map(|n| (1..=n).map(|i| format!("q{i}")).collect())
            .collect();
        Self { subsets }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LagSweepConfig {
    pub policies: Vec<LagPolicy>,
}

impl Default for LagSweepConfig {
    fn default() -> Self {
        let mut policies: Vec<LagPolicy> = [2.0, 4.0, 10.0]
            .into_iter()
            .map(|s| LagPolicy::exponential(s, 0))
            .collect();
        policies.extend([2, 4, 10].map(LagPolicy::fixed));
        Self { policies }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamSpec,
    pub lag: LagPolicy,
    pub methods: Vec<Method>,
    /// Each seed shifts the stream, lag and model seeds.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Measure density signals on embeddings; follows the stream type when
    /// absent.
    pub unstructured: Option<bool>,
    pub serving: ServingConfig,
    pub ablation: AblationConfig,
    pub lag_sweep: LagSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stream: StreamSpec::new(Generator::Sea, 0),
            lag: LagPolicy::exponential(4.0, 0),
            methods: vec![Method::Cdcsde, Method::Ddm, Method::Ph, Method::Ewma],
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("runs"),
            unstructured: None,
            serving: ServingConfig::default(),
            ablation: AblationConfig::default(),
            lag_sweep: LagSweepConfig::default(),
        }
    }
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Config(String),
    /// Exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_file(field: &str, path: &Path) -> Result<(), CliError> {
    if path.as_os_str().is_empty() {
        return Err(config_err(format!("{field}: path is empty")));
    }
    if !path.is_file() {
        return Err(config_err(format!("{field}: no such file: {}", path.display())));
    }
    Ok(())
}

pub fn parse_signal(name: &str) -> Option<usize> {
    let idx: usize = name.trim().strip_prefix('q')?.parse().ok()?;
    (1..=N_SIGNALS).contains(&idx).then(|| idx - 1)
}

fn subset_mask(subset: &[String]) -> Result<[bool; N_SIGNALS], CliError> {
    if subset.is_empty() {
        return Err(config_err("ablation.subsets: empty subset"));
    }
    let mut mask = [false; N_SIGNALS];
    for name in subset {
        let i = parse_signal(name)
            .ok_or_else(|| config_err(format!("ablation.subsets: unknown signal `{name}`")))?;
        mask[i] = true;
    }
    Ok(mask)
}

fn subset_label(mask: &[bool; N_SIGNALS]) -> String {
    if mask.iter().all(|&b| b) {
        return "all".into();
    }
    (0..N_SIGNALS)
        .filter(|&i| mask[i])
        .map(|i| format!("q{}", i + 1))
        .collect::<Vec<_>>()
        .join("+")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |field: &str, e: Error| config_err(format!("{field}: {e}"));
        match &self.stream.generator {
            Generator::Csv { path } => check_file("stream.generator.path", path)?,
            Generator::Composite(CompositeSpec {
                pools: PoolPair::Csv { base, drift },
                ..
            }) => {
                check_file("stream.generator.pools.base", base)?;
                check_file("stream.generator.pools.drift", drift)?;
            }
            _ => {}
        }
        self.stream.validate().map_err(|e| wrap("stream", e))?;
        self.lag.validate().map_err(|e| wrap("lag", e))?;
        self.serving.validate().map_err(|e| wrap("serving", e))?;
        if self.methods.is_empty() {
            return Err(config_err("methods: at least one method is required"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds: at least one seed is required"));
        }
        for subset in &self.ablation.subsets {
            subset_mask(subset)?;
        }
        for p in &self.lag_sweep.policies {
            p.validate().map_err(|e| wrap("lag_sweep.policies", e))?;
        }
        Ok(())
    }

    fn unstructured(&self) -> bool {
        self.unstructured
            .unwrap_or_else(|| self.stream.generator.is_unstructured())
    }
}

/// One run of the grid: a method under a (possibly modified) config.
#[derive(Debug, Clone)]
struct Job {
    label: String,
    method: Method,
    serving: ServingConfig,
    lag: LagPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub label: String,
    pub method: Method,
    pub seed: u64,
    /// Relative to the output directory.
    pub log: PathBuf,
    pub drift_truth: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunEntry>,
}

fn seeded_lag(lag: &LagPolicy, seed: u64) -> LagPolicy {
    LagPolicy {
        kind: lag.kind,
        seed: lag.seed.wrapping_add(seed.wrapping_mul(0x9E37_79B9)),
    }
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '+' { c } else { '_' })
        .collect()
}

/// Summary rows: runs grouped by label in first-seen order.
fn summarise(runs: &[(RunEntry, MetricSet)]) -> Vec<(String, MetricSet)> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<String, Vec<MetricSet>> = BTreeMap::new();
    for (entry, m) in runs {
        if !groups.contains_key(&entry.label) {
            order.push(entry.label.clone());
        }
        groups.entry(entry.label.clone()).or_default().push(m.clone());
    }
    order
        .into_iter()
        .map(|label| {
            let avg = average_metrics(&groups[&label]).expect("non-empty group");
            (label, avg)
        })
        .collect()
}

fn write_outputs(
    dir: &Path,
    runs: &[(RunEntry, MetricSet)],
) -> anyhow::Result<Vec<(String, MetricSet)>> {
    let per_run: Vec<(String, MetricSet)> = runs
        .iter()
        .map(|(e, m)| (format!("{}-seed{}", e.label, e.seed), m.clone()))
        .collect();
    write_metrics_csv(File::create(dir.join("metrics.csv"))?, &per_run)?;
    let summary = summarise(runs);
    write_metrics_csv(File::create(dir.join("summary.csv"))?, &summary)?;
    fs::write(dir.join("summary.txt"), format_table(&summary))?;
    Ok(summary)
}

fn execute(
    cfg: &ExperimentConfig,
    command: &str,
    jobs: &[Job],
) -> Result<Vec<(String, MetricSet)>, CliError> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir.join("runs"))
        .with_context(|| format!("creating {}", dir.display()))?;
    let unstructured = cfg.unstructured();
    let work: Vec<(u64, &Job)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| jobs.iter().map(move |j| (s, j)))
        .collect();
    let results: Vec<anyhow::Result<(RunEntry, MetricSet)>> = work
        .par_iter()
        .map(|&(seed, job)| {
            let mut spec = cfg.stream.clone();
            spec.seed = spec.seed.wrapping_add(seed);
            let stream = generate(&spec)?;
            let report = run_method(
                &stream,
                &seeded_lag(&job.lag, seed),
                job.method,
                &job.serving,
                seed,
                unstructured,
            )
            .with_context(|| format!("{} seed {seed}", job.label))?;
            let metrics = compute_metrics(&report, &stream.drift_truth)?;
            let log = PathBuf::from("runs").join(format!("{}-seed{seed}.jsonl", file_stem(&job.label)));
            let mut out = BufWriter::new(File::create(dir.join(&log))?);
            write_events_jsonl(&mut out, &report.events)?;
            Ok((
                RunEntry {
                    label: job.label.clone(),
                    method: job.method,
                    seed,
                    log,
                    drift_truth: stream.drift_truth.clone(),
                },
                metrics,
            ))
        })
        .collect();
    let runs = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    let manifest = Manifest {
        command: command.to_string(),
        config: cfg.clone(),
        runs: runs.iter().map(|(e, _)| e.clone()).collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?,
    )
    .map_err(anyhow::Error::from)?;
    Ok(write_outputs(dir, &runs)?)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<(String, MetricSet)>, CliError> {
    cfg.validate()?;
    let jobs: Vec<Job> = cfg
        .methods
        .iter()
        .map(|&m| Job {
            label: m.name().to_string(),
            method: m,
            serving: cfg.serving.clone(),
            lag: cfg.lag,
        })
        .collect();
    execute(cfg, "run", &jobs)
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<(String, MetricSet)>, CliError> {
    cfg.validate()?;
    if cfg.ablation.subsets.is_empty() {
        return Err(config_err("ablation.subsets: at least one subset is required"));
    }
    let jobs = cfg
        .ablation
        .subsets
        .iter()
        .map(|subset| {
            let mask = subset_mask(subset)?;
            let mut serving = cfg.serving.clone();
            serving.signals = mask;
            Ok(Job {
                label: subset_label(&mask),
                method: Method::Cdcsde,
                serving,
                lag: cfg.lag,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    execute(cfg, "ablate", &jobs)
}

pub fn lag_sweep(cfg: &ExperimentConfig) -> Result<Vec<(String, MetricSet)>, CliError> {
    cfg.validate()?;
    if cfg.lag_sweep.policies.is_empty() {
        return Err(config_err("lag_sweep.policies: at least one policy is required"));
    }
    let jobs: Vec<Job> = cfg
        .lag_sweep
        .policies
        .iter()
        .flat_map(|p| {
            cfg.methods.iter().map(move |&m| Job {
                label: format!("{} {}", p.label(), m.name()),
                method: m,
                serving: cfg.serving.clone(),
                lag: *p,
            })
        })
        .collect();
    execute(cfg, "lag-sweep", &jobs)
}

/// Recomputes the summary of an output directory from its event logs.
pub fn report(dir: &Path) -> Result<Vec<(String, MetricSet)>, CliError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
    let mut runs = Vec::with_capacity(manifest.runs.len());
    for entry in manifest.runs {
        let path = dir.join(&entry.log);
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let events = read_events_jsonl(BufReader::new(file))
            .with_context(|| format!("reading {}", path.display()))?;
        let rebuilt = RunReport::from_events(entry.method.name(), &events)
            .map_err(anyhow::Error::from)?;
        let metrics = compute_metrics(&rebuilt, &entry.drift_truth).map_err(anyhow::Error::from)?;
        runs.push((entry, metrics));
    }
    Ok(write_outputs(dir, &runs)?)
}

#[derive(Debug, Parser)]
#[command(name = "cdcsde", version, about = "Drift detection with lagged labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run each method on each seed.
    Run(CommonArgs),
    /// Run the ensemble with subsets of its signals.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Semicolon-separated subsets, e.g. `q1;q1,q6;all`.
        #[arg(long)]
        subsets: Option<String>,
    },
    /// Run the methods under several lag policies.
    LagSweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated policies, e.g. `exp:2,exp:10,fixed:4`.
        #[arg(long)]
        policies: Option<String>,
    },
    /// Rebuild the summary of an output directory from its logs.
    Report { dir: PathBuf },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML experiment config; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// sea, sine2, gaussian, sudden, sudden-gradual, grad-increase,
    /// grad-plateau, grad-decrease or csv:<path>.
    #[arg(long)]
    pub stream: Option<String>,
    /// Comma-separated: cdcsde, ddm, ph, ewma.
    #[arg(long)]
    pub method: Option<String>,
    /// Comma-separated integers.
    #[arg(long)]
    pub seeds: Option<String>,
    /// `exp:<scale>` or `fixed:<lag>`.
    #[arg(long)]
    pub lag: Option<String>,
    /// Total samples in the stream.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_stream(name: &str) -> Result<Generator, CliError> {
    let composite = |s| Generator::Composite(CompositeSpec::synthetic(s, SyntheticPools::default()));
    Ok(match name {
        "sea" => Generator::Sea,
        "sine2" => Generator::Sine2,
        "gaussian" => Generator::stationary_gaussian(),
        "sudden" => composite(Scenario::Sudden),
        "sudden-gradual" => composite(Scenario::SuddenGradual),
        "grad-increase" => composite(Scenario::GradIncrease),
        "grad-plateau" => composite(Scenario::GradPlateau),
        "grad-decrease" => composite(Scenario::GradDecrease),
        other => match other.strip_prefix("csv:") {
            Some(path) => Generator::Csv { path: path.into() },
            None => return Err(config_err(format!("--stream: unknown stream `{other}`"))),
        },
    })
}

pub fn parse_lag(text: &str) -> Result<LagPolicy, CliError> {
    let bad = || config_err(format!("lag policy `{text}`: expected exp:<scale> or fixed:<lag>"));
    let (kind, value) = text.trim().split_once(':').ok_or_else(bad)?;
    let kind = match kind {
        "exp" => LagKind::Exponential {
            scale: value.parse().map_err(|_| bad())?,
        },
        "fixed" => LagKind::Fixed {
            lag: value.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    Ok(LagPolicy { kind, seed: 0 })
}

fn parse_list<T>(
    field: &str,
    text: &str,
    f: impl Fn(&str) -> Option<T>,
) -> Result<Vec<T>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| f(s.trim()).ok_or_else(|| config_err(format!("{field}: cannot parse `{s}`"))))
        .collect()
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_err(format!("--config {}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &args.stream {
        cfg.stream.generator = parse_stream(s)?;
    }
    if let Some(m) = &args.method {
        cfg.methods = parse_list("--method", m, Method::parse)?;
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_list("--seeds", s, |v| v.parse().ok())?;
    }
    if let Some(l) = &args.lag {
        cfg.lag = parse_lag(l)?;
    }
    if let Some(n) = args.samples {
        cfg.stream.total_samples = Some(n);
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

/// Runs a parsed command and returns the summary table.
pub fn dispatch(cli: Cli) -> Result<String, CliError> {
    let summary = match cli.command {
        Command::Run(common) => run_experiment(&load_config(&common)?)?,
        Command::Ablate { common, subsets } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = subsets {
                cfg.ablation.subsets = s
                    .split(';')
                    .map(|part| match part.trim() {
                        "all" => (1..=N_SIGNALS).map(|i| format!("q{i}")).collect(),
                        p => p.split(',').map(|x| x.trim().to_string()).collect(),
                    })
                    .collect();
            }
            ablate(&cfg)?
        }
        Command::LagSweep { common, policies } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = policies {
                cfg.lag_sweep.policies = parse_list("--policies", &p, |s| parse_lag(s).ok())?;
            }
            lag_sweep(&cfg)?
        }
        Command::Report { dir } => report(&dir)?,
    };
    Ok(format_table(&summary))
}
