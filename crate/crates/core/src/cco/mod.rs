//! Closed compound orbits: four flow segments `Λ:+τ`, `H:+t′`, `Λ:−τ`, `H:−t`
//! joined end to start, their closure, action, stability and continuation.

mod action;
mod continuation;
mod energy;
mod thin;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate, integrate_from, DynamicsError, IntegratorConfig, TrajectorySegment};
use crate::hamiltonians::{HamiltonianSystem, PhaseSpacePoint};
use crate::seeds::{Seed, SeedError};

pub use action::{driven_segment_action_check, DrivenSegmentCheck};
pub use continuation::{continue_family, ParameterPath, StepControl};
pub use energy::{
    energy_jacobian, family_jacobian, tabulate_branch, target_energies, BranchCell, BranchTable,
};
pub use thin::{grow_thin_t_family, grow_thin_tau_family, thin_t_residual, thin_tau_residual};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CcoError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Seed(#[from] SeedError),
    #[error("near bifurcation: |det(M − I)| = {det:e}")]
    NearBifurcation { det: f64 },
    #[error("closure failed after {iterations} iterations, residual {residual:e}")]
    ClosureFailed { iterations: usize, residual: f64 },
    #[error("seed is degenerate and cannot grow a family")]
    DegenerateSeed,
    #[error("defining equations hold on a continuum of points (self-commuting flows)")]
    DegenerateContinuum,
    #[error("thin-family Newton failed at parameter {parameter}: residual {residual:e}")]
    ThinFamilyFailed { parameter: f64, residual: f64 },
    #[error("energy Jacobian singular (det = {det:e}): caustic in energy")]
    CausticInEnergy { det: f64 },
    #[error("energy targeting failed: residual {residual:e}")]
    EnergyTargetFailed { residual: f64 },
    #[error("family has no members")]
    EmptyFamily,
}

/// Durations `(t, t′, τ)` of a compound orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcoTimes {
    pub t: f64,
    pub t_prime: f64,
    pub tau: f64,
}

impl CcoTimes {
    pub fn new(t: f64, t_prime: f64, tau: f64) -> Self {
        Self { t, t_prime, tau }
    }

    pub fn lerp(&self, other: &CcoTimes, s: f64) -> CcoTimes {
        CcoTimes {
            t: self.t + s * (other.t - self.t),
            t_prime: self.t_prime + s * (other.t_prime - self.t_prime),
            tau: self.tau + s * (other.tau - self.tau),
        }
    }

    pub fn distance(&self, other: &CcoTimes) -> f64 {
        ((self.t - other.t).powi(2)
            + (self.t_prime - other.t_prime).powi(2)
            + (self.tau - other.tau).powi(2))
        .sqrt()
    }

    pub fn is_thin_tau(&self) -> bool {
        self.t == 0.0 && self.t_prime == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcoConfig {
    pub integrator: IntegratorConfig,
    pub closure_tol: f64,
    pub max_newton: usize,
    /// Closure refuses to proceed when `|det(𝐌 − I)|` falls below this.
    pub singular_threshold: f64,
}

impl Default for CcoConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig {
                record_states: false,
                ..IntegratorConfig::with_tol(1e-12)
            },
            closure_tol: 1e-10,
            max_newton: 40,
            singular_threshold: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundOrbit {
    pub x_start: PhaseSpacePoint,
    pub times: CcoTimes,
    /// `x̃₁` (Λ, +τ), `x̃₂` (H, +t′), `x̃₃` (Λ, −τ), `x̃₄` (H, −t).
    pub segments: [TrajectorySegment; 4],
    pub closure_residual: f64,
    /// `𝕊(t, t′|τ)`: sum of the segment actions `∫ p·dq − K dt`.
    pub action_total: f64,
    /// `𝕊(E, E′|τ) = 𝕊(t, t′|τ) + E′t′ − Et`, the loop area minus the two driving-time integrals.
    pub action_stationary: f64,
    pub monodromy_compound: DMatrix<f64>,
    pub energy: f64,
    pub energy_prime: f64,
    pub winding: (i32, i32),
    pub maslov_sigma: i32,
}

impl CompoundOrbit {
    pub fn end_point(&self) -> &PhaseSpacePoint {
        &self.segments[3].end
    }

    /// `det(I − 𝐌)`.
    pub fn det_i_minus_m(&self) -> f64 {
        let d = self.monodromy_compound.nrows();
        (DMatrix::<f64>::identity(d, d) - &self.monodromy_compound).determinant()
    }

    /// `M(−t)·Γ(−τ)·M(t′)·Γ(τ)` from the stored segment monodromies.
    pub fn monodromy_product(&self) -> DMatrix<f64> {
        &self.segments[3].monodromy
            * &self.segments[2].monodromy
            * &self.segments[1].monodromy
            * &self.segments[0].monodromy
    }

    /// Largest energy variation of `H` along either inner segment.
    pub fn inner_energy_drift(&self) -> f64 {
        let a = (self.segments[1].energy_end - self.segments[1].energy_start).abs();
        let b = (self.segments[3].energy_end - self.segments[3].energy_start).abs();
        a.max(b)
    }

    /// Integrals `∫Λ dτ` along `x̃₁` and `x̃₃` (signed durations).
    pub fn driving_time_integrals(&self) -> (f64, f64) {
        (
            self.segments[0].energy_time_integral(),
            self.segments[2].energy_time_integral(),
        )
    }

    /// Closed-loop area `∮ p·dq`.
    pub fn loop_area(&self) -> f64 {
        self.segments.iter().map(|s| s.pdq).sum()
    }
}

/// Family edge or sheet a [`CCOFamily`] was grown along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyParameterization {
    TEdge,
    TauEdge,
    InteriorSheet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bifurcation {
    pub member: usize,
    pub det_before: f64,
    pub det_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CCOFamily {
    pub seed: Seed,
    pub inner: HamiltonianSystem,
    pub driving: HamiltonianSystem,
    pub config: CcoConfig,
    pub members: Vec<CompoundOrbit>,
    pub parameterization: FamilyParameterization,
    pub bifurcations: Vec<Bifurcation>,
    /// Reason growth stopped short of the requested range.
    pub truncated: Option<String>,
}

impl CCOFamily {
    pub fn last(&self) -> Option<&CompoundOrbit> {
        self.members.last()
    }
}

/// Integrates the four legs from `x` without closing.
pub fn build_orbit(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    times: CcoTimes,
    cfg: &IntegratorConfig,
) -> Result<CompoundOrbit, CcoError> {
    let s1 = integrate(driving, x, 0.0, times.tau, cfg)?;
    let s2 = integrate(inner, &s1.end, 0.0, times.t_prime, cfg)?;
    let s3 = integrate(driving, &s2.end, times.tau, 0.0, cfg)?;
    let s4 = integrate(inner, &s3.end, 0.0, -times.t, cfg)?;
    let closure_residual = s4.end.distance(x);
    let action_total = s1.action + s2.action + s3.action + s4.action;
    let energy = s4.energy_start;
    let energy_prime = s2.energy_start;
    let action_stationary = action_total + energy_prime * times.t_prime - energy * times.t;
    let monodromy_compound = &s4.monodromy * &s3.monodromy * &s2.monodromy * &s1.monodromy;
    Ok(CompoundOrbit {
        x_start: x.clone(),
        times,
        segments: [s1, s2, s3, s4],
        closure_residual,
        action_total,
        action_stationary,
        monodromy_compound,
        energy,
        energy_prime,
        winding: (0, 0),
        maslov_sigma: 0,
    })
}

/// Compound monodromy carried continuously through the four legs, with no matrix products.
pub fn compound_monodromy_carried(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    times: CcoTimes,
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>, CcoError> {
    let d = x.dim();
    let m = DMatrix::identity(d, d);
    let s1 = integrate_from(driving, x, &m, 0.0, times.tau, cfg)?;
    let s2 = integrate_from(inner, &s1.end, &s1.monodromy, 0.0, times.t_prime, cfg)?;
    let s3 = integrate_from(driving, &s2.end, &s2.monodromy, times.tau, 0.0, cfg)?;
    let s4 = integrate_from(inner, &s3.end, &s3.monodromy, 0.0, -times.t, cfg)?;
    Ok(s4.monodromy)
}

/// Newton on the closure map `F(x) = Φ_H^{−t}∘Φ_Λ^{−τ}∘Φ_H^{t′}∘Φ_Λ^{τ}(x) − x`
/// with Jacobian `𝐌 − I`.
pub fn close_cco(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    guess: &PhaseSpacePoint,
    times: CcoTimes,
    cfg: &CcoConfig,
) -> Result<CompoundOrbit, CcoError> {
    let d = guess.dim();
    let id = DMatrix::<f64>::identity(d, d);
    let mut orbit = build_orbit(inner, driving, guess, times, &cfg.integrator)?;
    for iteration in 0..cfg.max_newton {
        if orbit.closure_residual < cfg.closure_tol {
            return Ok(orbit);
        }
        let jac = &orbit.monodromy_compound - &id;
        let det = jac.determinant();
        if det.abs() < cfg.singular_threshold {
            return Err(CcoError::NearBifurcation { det });
        }
        let f = orbit.segments[3].end.to_vector() - orbit.x_start.to_vector();
        let Some(step) = jac.lu().solve(&f) else {
            return Err(CcoError::NearBifurcation { det });
        };
        let mut lambda = 1.0;
        let mut next = None;
        for _ in 0..12 {
            let trial = PhaseSpacePoint::from_vector(&(orbit.x_start.to_vector() - lambda * &step));
            match build_orbit(inner, driving, &trial, times, &cfg.integrator) {
                Ok(o) if o.closure_residual < orbit.closure_residual => {
                    next = Some(o);
                    break;
                }
                _ => lambda *= 0.5,
            }
        }
        match next {
            Some(o) => orbit = o,
            None => {
                return Err(CcoError::ClosureFailed {
                    iterations: iteration + 1,
                    residual: orbit.closure_residual,
                })
            }
        }
    }
    if orbit.closure_residual < cfg.closure_tol {
        Ok(orbit)
    } else {
        Err(CcoError::ClosureFailed {
            iterations: cfg.max_newton,
            residual: orbit.closure_residual,
        })
    }
}

#[cfg(test)]
mod tests;
