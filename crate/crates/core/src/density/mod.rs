//! Transition densities `P(E, E′ | τ, ε)`: the classical background, the
//! anticaustic boundary, and the oscillatory sum over compound-orbit families.

mod anticaustic;
mod classical;
mod sc;
mod section;
mod shell;

use serde::{Deserialize, Serialize};

use crate::cco::CcoError;
use crate::dynamics::DynamicsError;
use crate::hamiltonians::HamiltonianError;

pub use anticaustic::{find_anticaustic, polish_anticaustic, Anticaustic, AnticausticConfig};
pub use classical::{
    classical_density_mc, ClassicalDensity, DrivingDirection, MonteCarloConfig, SamplingBox,
};
pub use sc::{
    calibrate_sigma, sc_density, section_families, total_density, CellStatus, DensityDiagnostics,
    FamilyCell, FamilyGrid, FamilySigma, OscillatoryTerm, ScConfig, SectionFamily,
    SectionFamilyConfig, SigmaCalibration, TransitionDensity,
};
pub use section::{
    classical_density_section, classical_density_smoothed_section, section_bin_masses, section_points,
    SectionConfig, SectionPoint, SectionSide, SectionValue, SmoothedSectionConfig,
};
pub use shell::{closed_orbit_period, shell_components, Shell};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DensityError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Cco(#[from] CcoError),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("operation needs one degree of freedom, system has {dof}")]
    NotOneDof { dof: usize },
    #[error("no shell component with energy {energy} crosses p = 0 inside the scan range")]
    ShellNotFound { energy: f64 },
    #[error("orbit from {x:?} did not close within t = {t_max}")]
    ShellNotClosed { x: Vec<f64>, t_max: f64 },
    #[error("no tangency found in the bracket [{lo}, {hi}]")]
    AnticausticNotFound { lo: f64, hi: f64 },
    #[error("tangency is degenerate: {0}")]
    DegenerateAnticaustic(String),
    #[error("grids of the two matrices differ")]
    GridMismatch,
}

/// Energy grids and smoothing parameters of a transition density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionGrid {
    /// Initial energies (rows).
    pub e_values: Vec<f64>,
    /// Final energies (columns).
    pub e_prime_values: Vec<f64>,
    pub tau: f64,
    /// Lorentzian half-width.
    pub epsilon: f64,
    pub hbar: f64,
}

impl TransitionGrid {
    pub fn new(
        e_values: Vec<f64>,
        e_prime_values: Vec<f64>,
        tau: f64,
        epsilon: f64,
        hbar: f64,
    ) -> Result<Self, DensityError> {
        let g = Self {
            e_values,
            e_prime_values,
            tau,
            epsilon,
            hbar,
        };
        g.validate()?;
        Ok(g)
    }

    /// `n` equally spaced points on each closed range.
    pub fn uniform(
        e_range: (f64, f64),
        n_e: usize,
        e_prime_range: (f64, f64),
        n_e_prime: usize,
        tau: f64,
        epsilon: f64,
        hbar: f64,
    ) -> Result<Self, DensityError> {
        Self::new(
            linspace(e_range.0, e_range.1, n_e),
            linspace(e_prime_range.0, e_prime_range.1, n_e_prime),
            tau,
            epsilon,
            hbar,
        )
    }

    pub fn validate(&self) -> Result<(), DensityError> {
        if !(self.epsilon > 0.0) {
            return Err(DensityError::InvalidGrid("epsilon must be positive".into()));
        }
        if !(self.hbar > 0.0) {
            return Err(DensityError::InvalidGrid("hbar must be positive".into()));
        }
        if !self.tau.is_finite() {
            return Err(DensityError::InvalidGrid("tau must be finite".into()));
        }
        for (name, v) in [("E", &self.e_values), ("E'", &self.e_prime_values)] {
            if v.is_empty() {
                return Err(DensityError::InvalidGrid(format!("{name} grid is empty")));
            }
            if v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| w[1] <= w[0]) {
                return Err(DensityError::InvalidGrid(format!(
                    "{name} grid must be finite and strictly increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.e_values.len(), self.e_prime_values.len())
    }

    /// Cell edges around the `E` grid points: midpoints inside, half spacings at the ends.
    pub fn e_edges(&self) -> Vec<f64> {
        cell_edges(&self.e_values)
    }

    pub fn e_prime_edges(&self) -> Vec<f64> {
        cell_edges(&self.e_prime_values)
    }
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub(crate) fn cell_edges(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![values[0] - 0.5, values[0] + 0.5];
    }
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(values[0] - 0.5 * (values[1] - values[0]));
    for w in values.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(values[n - 1] + 0.5 * (values[n - 1] - values[n - 2]));
    edges
}

/// `δ_ε(x) = ε / (π (ε² + x²))`.
pub fn lorentzian(epsilon: f64, x: f64) -> f64 {
    epsilon / (std::f64::consts::PI * (epsilon * epsilon + x * x))
}

/// Matrix over an `(E, E′)` grid: row `i` is `E_i`, column `j` is `E′_j`.
pub type Matrix = nalgebra::DMatrix<f64>;

#[cfg(test)]
mod tests;
