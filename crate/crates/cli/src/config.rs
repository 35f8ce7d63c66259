//! Experiment configuration read from TOML, plus command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cco_core::density::{
    MonteCarloConfig, ScConfig, SectionFamilyConfig, SmoothedSectionConfig, TransitionGrid,
};
use cco_core::dynamics::IntegratorConfig;
use cco_core::oracle::OracleConfig;
use cco_core::HamiltonianSystem;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    /// Replaces the integrator settings of every stage when present.
    #[serde(default)]
    pub integrator: Option<IntegratorConfig>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Builtin name or polynomial expression.
    pub inner: String,
    pub driving: String,
    #[serde(default = "one")]
    pub dof: usize,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClassicalMethod {
    /// Monte Carlo histogram.
    #[default]
    Mc,
    /// Exact cell averages from the section.
    Section,
    /// Lorentzian-smoothed section integral at the grid points.
    SmoothedSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub tau: f64,
    pub epsilon: f64,
    pub hbar: f64,
    pub e_range: (f64, f64),
    pub e_prime_range: (f64, f64),
    /// Points of the `(E, E′)` grid.
    pub bins: (usize, usize),
    pub seed: u64,
    pub samples: u64,
    pub threads: usize,
    pub classical: ClassicalMethod,
    /// Phase-space box for Monte Carlo; `±5` on every coordinate when absent.
    pub sampling_box: Option<Vec<(f64, f64)>>,
    /// Energy window of the smoothed backgrounds; grid extent `±10ε` when absent.
    pub smoothing_window: Option<(f64, f64)>,
    /// Integration steps of the oracle propagator.
    pub steps: usize,
    pub seeds: SeedSection,
    pub cco: CcoSection,
    pub monte_carlo: MonteCarloConfig,
    pub smoothed_section: SmoothedSectionConfig,
    pub families: SectionFamilyConfig,
    pub sc: ScConfig,
    pub oracle: OracleConfig,
    pub compare: CompareSection,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            tau: 1.0,
            epsilon: 0.1,
            hbar: 0.1,
            e_range: (0.5, 2.5),
            e_prime_range: (0.5, 2.5),
            bins: (40, 40),
            seed: 1,
            samples: 100_000,
            threads: 0,
            classical: ClassicalMethod::Mc,
            sampling_box: None,
            smoothing_window: None,
            steps: 200,
            seeds: SeedSection::default(),
            cco: CcoSection::default(),
            monte_carlo: MonteCarloConfig::default(),
            smoothed_section: SmoothedSectionConfig::default(),
            families: SectionFamilyConfig::default(),
            sc: ScConfig::default(),
            oracle: OracleConfig::default(),
            compare: CompareSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    /// Newton start; a grid scan of `scan_box` is used when absent.
    pub guess: Option<Vec<f64>>,
    pub scan_box: Option<Vec<(f64, f64)>>,
    pub scan_grid: usize,
    pub tol: f64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self {
            guess: None,
            scan_box: None,
            scan_grid: 6,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CcoSection {
    /// `(t, t′, τ)` of orbits to close from `guess`. Empty means section
    /// families over the grid (one degree of freedom only).
    pub times: Vec<(f64, f64, f64)>,
    /// Start of every closure; the seed found from the origin when absent.
    pub guess: Option<Vec<f64>>,
    pub closure_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub left: Option<PathBuf>,
    pub right: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
    Gnuplot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
    /// Initial energies of the line cuts; the nearest grid row is used.
    pub cuts: Vec<f64>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("output"),
            formats: vec![Format::Csv, Format::Json, Format::Gnuplot],
            cuts: Vec::new(),
        }
    }
}

impl OutputSection {
    pub fn wants(&self, format: Format) -> bool {
        self.formats.contains(&format)
    }
}

/// Physical parameters of a run, written next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: ExperimentConfig,
    pub inner_expression: String,
    pub driving_expression: String,
    pub grid: TransitionGrid,
}

/// Command-line values that replace configuration entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub tau: Option<f64>,
    pub epsilon: Option<f64>,
    pub hbar: Option<f64>,
    pub samples: Option<u64>,
    pub e_range: Option<(f64, f64)>,
    pub e_prime_range: Option<(f64, f64)>,
    pub bins: Option<(usize, usize)>,
    pub seed: Option<u64>,
    pub basis: Option<usize>,
    pub steps: Option<usize>,
}

/// `line:column` (1-based) of a byte offset.
fn location(source: &str, offset: usize) -> (usize, usize) {
    let before = &source[..offset.min(source.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Line of the first `key = ...` assignment, for errors found after parsing.
fn key_location(source: &str, key: &str) -> Option<(usize, usize)> {
    source.lines().enumerate().find_map(|(i, line)| {
        let trimmed = line.trim_start();
        let rest = trimmed.strip_prefix(key)?;
        rest.trim_start()
            .starts_with('=')
            .then(|| (i + 1, line.len() - trimmed.len() + 1))
    })
}

impl ExperimentConfig {
    pub fn parse(source: &str, path: &Path) -> Result<Self, Failure> {
        toml::from_str(source).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| location(source, s.start));
            Failure::Config(format!(
                "{}:{line}:{column}: {}",
                path.display(),
                e.message().trim()
            ))
        })
    }

    pub fn load(path: &Path) -> Result<(Self, String), Failure> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&source, path)?;
        Ok((cfg, source))
    }

    pub fn apply(&mut self, o: &Overrides) {
        let r = &mut self.run;
        macro_rules! set {
            ($field:ident => $target:expr) => {
                if let Some(v) = o.$field {
                    $target = v;
                }
            };
        }
        set!(tau => r.tau);
        set!(epsilon => r.epsilon);
        set!(hbar => r.hbar);
        set!(samples => r.samples);
        set!(e_range => r.e_range);
        set!(e_prime_range => r.e_prime_range);
        set!(bins => r.bins);
        set!(seed => r.seed);
        set!(basis => r.oracle.basis.size);
        set!(steps => r.steps);
    }

    /// Checks that do not need the systems; `source` locates the offending key.
    pub fn validate(&self, source: &str, path: &Path) -> Result<(), Failure> {
        let at = |key: &str, msg: String| {
            let (line, column) = key_location(source, key).unwrap_or((1, 1));
            Failure::Config(format!("{}:{line}:{column}: {msg}", path.display()))
        };
        let r = &self.run;
        if self.system.dof == 0 {
            return Err(at("dof", "dof must be at least 1".into()));
        }
        if r.bins.0 == 0 || r.bins.1 == 0 {
            return Err(at("bins", "bins must be positive".into()));
        }
        for (key, (lo, hi)) in [("e_range", r.e_range), ("e_prime_range", r.e_prime_range)] {
            if !(lo.is_finite() && hi.is_finite()) || (hi <= lo && !(hi == lo && self.single(key))) {
                return Err(at(key, format!("{key} ({lo}, {hi}) must be increasing")));
            }
        }
        for (key, v) in [("epsilon", r.epsilon), ("hbar", r.hbar)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(at(key, format!("{key} must be positive, got {v}")));
            }
        }
        if !r.tau.is_finite() {
            return Err(at("tau", "tau must be finite".into()));
        }
        if r.samples == 0 {
            return Err(at("samples", "samples must be positive".into()));
        }
        if r.steps == 0 {
            return Err(at("steps", "steps must be positive".into()));
        }
        let dim = 2 * self.system.dof;
        if let Some(b) = &r.sampling_box {
            if b.len() != dim {
                return Err(at("sampling_box", format!("sampling_box needs {dim} ranges")));
            }
        }
        Ok(())
    }

    fn single(&self, key: &str) -> bool {
        match key {
            "e_range" => self.run.bins.0 == 1,
            _ => self.run.bins.1 == 1,
        }
    }

    /// Builds both Hamiltonians; failures point at the `inner` or `driving` key.
    pub fn systems(
        &self,
        source: &str,
        path: &Path,
    ) -> Result<(HamiltonianSystem, HamiltonianSystem), Failure> {
        let s = &self.system;
        let build = |key: &str, text: &str| {
            HamiltonianSystem::resolve(text, s.dof, &s.params).map_err(|e| {
                let (line, column) = key_location(source, key).unwrap_or((1, 1));
                Failure::Config(format!("{}:{line}:{column}: {key}: {e}", path.display()))
            })
        };
        Ok((build("inner", &s.inner)?, build("driving", &s.driving)?))
    }

    pub fn grid(&self) -> Result<TransitionGrid, Failure> {
        let r = &self.run;
        TransitionGrid::uniform(
            r.e_range,
            r.bins.0,
            r.e_prime_range,
            r.bins.1,
            r.tau,
            r.epsilon,
            r.hbar,
        )
        .map_err(|e| Failure::Config(e.to_string()))
    }

    pub fn smoothing_window(&self) -> (f64, f64) {
        let r = &self.run;
        r.smoothing_window.unwrap_or_else(|| {
            let margin = 10.0 * r.epsilon;
            (
                r.e_range.0.min(r.e_prime_range.0) - margin,
                r.e_range.1.max(r.e_prime_range.1) + margin,
            )
        })
    }

    pub fn monte_carlo(&self) -> MonteCarloConfig {
        let r = &self.run;
        let mut mc = r.monte_carlo.clone();
        mc.samples = r.samples;
        mc.seed = r.seed;
        mc.threads = r.threads;
        if let Some(i) = &self.integrator {
            mc.integrator = i.without_states();
        }
        mc
    }

    pub fn smoothed_section(&self) -> SmoothedSectionConfig {
        let mut c = self.run.smoothed_section.clone();
        if let Some(i) = &self.integrator {
            c.section.integrator = i.without_states();
        }
        c
    }

    pub fn section_families(&self) -> SectionFamilyConfig {
        let mut c = self.run.families.clone();
        if let Some(i) = &self.integrator {
            c.section.integrator = i.without_states();
        }
        c
    }
}
