//! Experiment runner behind the `cco-transitions` binary.

pub mod config;
pub mod output;

mod commands;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, OutputSection, Overrides};
use output::{sha256_hex, Artifacts, RunManifest, StageRecord};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "CCO_OUTPUT_DIR";

#[derive(Debug)]
pub enum Failure {
    /// Exit code 2.
    Config(String),
    /// Exit code 1.
    Runtime { stage: String, error: anyhow::Error },
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime { .. } => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(msg) => write!(f, "config error: {msg}"),
            Failure::Runtime { stage, error } => write!(f, "stage `{stage}` failed: {error:#}"),
        }
    }
}

impl std::error::Error for Failure {}

#[derive(Debug, Parser)]
#[command(name = "cco-transitions", version, about = "Energy-transition densities of driven Hamiltonian systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Equilibria of the bracket `{H, Λ}`.
    Seed(RunArgs),
    /// Closed compound orbits.
    Cco(RunArgs),
    /// Classical background density.
    DensityClassical(RunArgs),
    /// Oscillatory family terms.
    DensitySc(RunArgs),
    /// Background plus oscillatory terms.
    DensityTotal(RunArgs),
    /// Brute-force quantum density for one degree of freedom.
    Oracle(RunArgs),
    /// Cell-wise difference of two density matrices on the same grid.
    Compare(CompareArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Seed(_) => "seed",
            Command::Cco(_) => "cco",
            Command::DensityClassical(_) => "density-classical",
            Command::DensitySc(_) => "density-sc",
            Command::DensityTotal(_) => "density-total",
            Command::Oracle(_) => "oracle",
            Command::Compare(_) => "compare",
        }
    }
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String>
where
    T::Err: fmt::Display,
{
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let one = |p: &str| p.parse::<T>().map_err(|e| format!("`{p}`: {e}"));
    match parts.as_slice() {
        [a, b] => Ok((one(a)?, one(b)?)),
        _ => Err(format!("expected two comma-separated values, got `{s}`")),
    }
}

fn parse_bins(s: &str) -> Result<(usize, usize), String> {
    if s.contains(',') {
        parse_pair(s)
    } else {
        let n = s.parse::<usize>().map_err(|e| e.to_string())?;
        Ok((n, n))
    }
}

#[derive(Debug, Clone, Args, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub hbar: Option<f64>,
    #[arg(long)]
    pub samples: Option<u64>,
    /// `lo,hi`.
    #[arg(long = "E-range", value_parser = parse_pair::<f64>, allow_hyphen_values = true)]
    pub e_range: Option<(f64, f64)>,
    /// `lo,hi`.
    #[arg(long = "Ep-range", value_parser = parse_pair::<f64>, allow_hyphen_values = true)]
    pub e_prime_range: Option<(f64, f64)>,
    /// `n` or `nE,nE′`.
    #[arg(long, value_parser = parse_bins)]
    pub bins: Option<(usize, usize)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub basis: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            tau: self.tau,
            epsilon: self.epsilon,
            hbar: self.hbar,
            samples: self.samples,
            e_range: self.e_range,
            e_prime_range: self.e_prime_range,
            bins: self.bins,
            seed: self.seed,
            basis: self.basis,
            steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, Args, Default)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub left: Option<PathBuf>,
    #[arg(long)]
    pub right: Option<PathBuf>,
}

/// Per-stage timing and diagnostics.
#[derive(Default)]
pub(crate) struct Stages {
    records: Vec<StageRecord>,
}

pub(crate) type Diagnostics = BTreeMap<String, serde_json::Value>;

impl Stages {
    pub(crate) fn run<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Diagnostics) -> anyhow::Result<T>,
    ) -> Result<T, Failure> {
        log::info!("stage {name}");
        let start = Instant::now();
        let mut diagnostics = Diagnostics::new();
        let out = f(&mut diagnostics).map_err(|error| Failure::Runtime {
            stage: name.to_string(),
            error,
        })?;
        self.records.push(StageRecord {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
            diagnostics,
        });
        Ok(out)
    }
}

/// Loaded configuration of one invocation.
pub(crate) struct Context {
    pub cfg: ExperimentConfig,
    pub source: String,
    pub path: PathBuf,
}

fn load(args: &RunArgs) -> Result<Context, Failure> {
    let path = args
        .config
        .clone()
        .ok_or_else(|| Failure::Config("--config is required".into()))?;
    let (mut cfg, source) = ExperimentConfig::load(&path)?;
    cfg.apply(&args.overrides());
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output.directory = PathBuf::from(dir);
    }
    cfg.validate(&source, &path)?;
    Ok(Context { cfg, source, path })
}

/// Runs one subcommand and returns its manifest.
pub fn run(command: &Command) -> Result<RunManifest, Failure> {
    let start = Instant::now();
    let mut stages = Stages::default();
    let (ctx, output) = match command {
        Command::Compare(a) if a.run.config.is_none() => {
            let mut output = OutputSection::default();
            if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
                output.directory = PathBuf::from(dir);
            }
            (None, output)
        }
        Command::Compare(a) => {
            let ctx = load(&a.run)?;
            let output = ctx.cfg.output.clone();
            (Some(ctx), output)
        }
        Command::Seed(a)
        | Command::Cco(a)
        | Command::DensityClassical(a)
        | Command::DensitySc(a)
        | Command::DensityTotal(a)
        | Command::Oracle(a) => {
            let ctx = load(a)?;
            let output = ctx.cfg.output.clone();
            (Some(ctx), output)
        }
    };
    let mut artifacts = stages.run("setup", |_| Artifacts::new(&output))?;
    let rng_seeds = match command {
        Command::Compare(a) => {
            commands::compare(ctx.as_ref(), a, &mut stages, &mut artifacts)?;
            Vec::new()
        }
        _ => {
            let ctx = ctx.as_ref().expect("loaded above");
            commands::dispatch(command, ctx, &mut stages, &mut artifacts)?
        }
    };
    let (config_path, config_sha256, effective) = match &ctx {
        Some(c) => (
            Some(c.path.display().to_string()),
            Some(sha256_hex(c.source.as_bytes())),
            Some(sha256_hex(
                serde_json::to_string(&c.cfg).unwrap_or_default().as_bytes(),
            )),
        ),
        None => (None, None, None),
    };
    let manifest = RunManifest {
        tool: "cco-transitions".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: command.name().into(),
        config_path,
        config_sha256,
        effective_config_sha256: effective,
        rng_seeds,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        stages: stages.records,
        outputs: Vec::new(),
    };
    artifacts.finish(manifest).map_err(|error| Failure::Runtime {
        stage: "output".into(),
        error,
    })
}
