//! Command-line front end. `run_command` parses arguments, executes one
//! subcommand and returns the process exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::layout::{max_speed_for_distance, min_negotiation_distance, min_negotiation_length};
use crate::metrics::{self, capacity_sweep, capacity_threshold, Capacity};
use crate::protocol::Network;
use crate::queueing::{self, MG1Params};
use crate::simulator::{self, Method, ScenarioConfig, SimError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config { .. } | SimError::Parse(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<metrics::MetricsError> for CliError {
    fn from(e: metrics::MetricsError) -> Self {
        match e {
            metrics::MetricsError::Sim(s) => s.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "moveover", version, about = "Non-stop intersection negotiation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write per-vehicle records and a summary.
    Run(RunArgs),
    /// Capacity sweep over arrival rates.
    Sweep(SweepArgs),
    /// Controller queueing analysis over an arrival-rate grid.
    AnalyzeQueue(QueueArgs),
    /// Negotiation distance and length versus zone speed.
    ZoneDesign(ZoneArgs),
    /// Parse and check scenario configs without running them.
    ValidateConfig(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub network: Option<Network>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output directory; the summary goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated arrival rates, veh/s per direction, increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    pub densities: Vec<f64>,
    /// Seeds per density, counted up from `--seed` (or the config seed).
    #[arg(long, default_value_t = 3)]
    pub replications: u64,
    /// Density at which the priority method sets the travel-time threshold.
    #[arg(long, default_value_t = 0.05)]
    pub reference_density: f64,
}

#[derive(Debug, Args)]
pub struct QueueArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated negotiation arrival rates, 1/s.
    #[arg(long, value_delimiter = ',')]
    pub densities: Option<Vec<f64>>,
    /// Restrict to one network.
    #[arg(long)]
    pub network: Option<Network>,
}

#[derive(Debug, Args)]
pub struct ZoneArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Braking deceleration, m/s^2.
    #[arg(long, default_value_t = 4.5)]
    pub decel: f64,
    /// Comma-separated maximum negotiation durations, s.
    #[arg(long, value_delimiter = ',', default_values_t = [0.03, 0.06, 0.18, 0.4])]
    pub t_neg: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub config: Vec<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(stdout) => {
            print!("{stdout}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command. Returns what should go to stdout.
pub fn execute(cmd: &Command) -> Result<String, CliError> {
    match cmd {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::AnalyzeQueue(a) => analyze_queue(a),
        Command::ZoneDesign(a) => zone_design(a),
        Command::ValidateConfig(a) => validate(a),
    }
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    ScenarioConfig::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn scenario(a: &ScenarioArgs) -> Result<ScenarioConfig, CliError> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(n) = a.network {
        cfg.network = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(dir: &Path, files: &[(&str, &str)]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn run(a: &RunArgs) -> Result<String, CliError> {
    let cfg = scenario(&a.scenario)?;
    let v_min = cfg.vehicle_params()?.v_min;
    let result = simulator::run(&cfg)?;
    let summary = metrics::summarize(&result, v_min);
    let json = metrics::summary_json(&summary)?;
    let Some(dir) = &a.out else {
        return Ok(json + "\n");
    };
    let csv = metrics::records_csv(&result.records);
    let mut files = vec![("records.csv", csv.as_str()), ("summary.json", json.as_str())];
    let events;
    if cfg.record_events {
        events = serde_json::to_string(&result.events).map_err(|e| CliError::Runtime(e.to_string()))?;
        files.push(("events.json", events.as_str()));
    }
    write_out(dir, &files)?;
    Ok(String::new())
}

fn sweep(a: &SweepArgs) -> Result<String, CliError> {
    let cfg = scenario(&a.scenario)?;
    if a.replications == 0 {
        return Err(CliError::Config("--replications must be at least 1".into()));
    }
    if a.densities.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
        return Err(CliError::Config("--densities must be non-negative".into()));
    }
    let seeds: Vec<u64> = (0..a.replications).map(|i| cfg.seed + i).collect();
    let threshold = capacity_threshold(&cfg, a.reference_density, &seeds)?;
    let result = capacity_sweep(&cfg, &a.densities, &seeds, threshold).map_err(|e| match e {
        metrics::MetricsError::EmptyGrid | metrics::MetricsError::UnsortedGrid => CliError::Config(e.to_string()),
        other => other.into(),
    })?;
    let mut csv = String::from("density,p90,mean,sustainable,backup_activations\n");
    for p in &result.points {
        let _ = writeln!(
            csv,
            "{},{:.3},{:.3},{},{}",
            p.density, p.p90, p.mean, p.sustainable, p.backup_activations
        );
    }
    let capacity = match result.capacity {
        Capacity::Density(d) => d.to_string(),
        Capacity::BelowGridMinimum => "below grid".to_string(),
    };
    let mut text = format!(
        "{} {} {}: threshold {:.3} s, capacity {capacity}",
        cfg.layout, cfg.method, cfg.network, result.threshold
    );
    if !result.monotone {
        text.push_str(" (non-monotone)");
    }
    text.push('\n');
    let Some(dir) = &a.out else {
        return Ok(text + &csv);
    };
    let json = serde_json::to_string_pretty(&result).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_out(dir, &[("capacity.csv", &csv), ("capacity.json", &json)])?;
    Ok(text)
}

/// Default negotiation arrival-rate grid, 1/s.
fn default_lambdas() -> Vec<f64> {
    (1..=40).map(|i| i as f64 * 0.25).collect()
}

fn analyze_queue(a: &QueueArgs) -> Result<String, CliError> {
    let lambdas = a.densities.clone().unwrap_or_else(default_lambdas);
    if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(CliError::Config("--densities must be non-negative".into()));
    }
    let networks: Vec<Network> = match a.network {
        Some(n) => vec![n],
        None => vec![Network::FiveG, Network::FourG],
    };
    let mut csv = String::from("network,messages,lambda,rho,W_q,T_neg\n");
    for net in networks {
        let d = net.delay_model();
        let (d_min, d_max) = (d.d_min_ms / 1000.0, d.d_max_ms / 1000.0);
        for messages in [4u32, 8] {
            let base = MG1Params {
                lambda_a: 0.0,
                n_uniforms: messages - 2,
                d_min,
                d_max,
                t_x: 0.5 * (d_min + d_max),
            };
            let rows = queueing::sweep(&base, &lambdas).map_err(|e| CliError::Config(e.to_string()))?;
            for line in queueing::sweep_csv(&rows).lines().skip(1) {
                let _ = writeln!(csv, "{net},{messages},{line}");
            }
        }
    }
    match &a.out {
        Some(dir) => {
            write_out(dir, &[("queue.csv", &csv)])?;
            Ok(String::new())
        }
        None => Ok(csv),
    }
}

fn zone_design(a: &ZoneArgs) -> Result<String, CliError> {
    if a.t_neg.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(CliError::Config("--t-neg must be non-negative".into()));
    }
    let mut csv = String::from("v_kmh,v_ms,d_neg");
    for t in &a.t_neg {
        let _ = write!(csv, ",l_neg_{t}");
    }
    csv.push('\n');
    for kmh in (10..=90).step_by(5) {
        let v = crate::kmh(kmh as f64);
        let d = min_negotiation_distance(v, a.decel).map_err(|e| CliError::Config(e.to_string()))?;
        let _ = write!(csv, "{kmh},{v:.4},{d:.4}");
        for &t in &a.t_neg {
            let _ = write!(csv, ",{:.4}", min_negotiation_length(v, t));
        }
        csv.push('\n');
    }
    // Inverse check row for a 10 m stopping distance.
    let v10 = max_speed_for_distance(10.0, a.decel).map_err(|e| CliError::Config(e.to_string()))?;
    let note = format!("# distance 10 m allows at most {:.2} km/h\n", v10 * 3.6);
    match &a.out {
        Some(dir) => {
            write_out(dir, &[("zone_design.csv", &csv)])?;
            Ok(note)
        }
        None => Ok(csv + &note),
    }
}

fn validate(a: &ValidateArgs) -> Result<String, CliError> {
    let mut out = String::new();
    for path in &a.config {
        let cfg = load_config(path)?;
        let _ = writeln!(
            out,
            "{}: ok ({} {} {})",
            path.display(),
            cfg.layout,
            cfg.method,
            cfg.network
        );
    }
    Ok(out)
}
