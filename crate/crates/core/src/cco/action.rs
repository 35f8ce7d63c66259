//! Driven-segment action identity: the image of the last inner leg under
//! forward driving carries `∮ p·dq` equal to the leg's own area plus the two
//! driving-segment actions.

use serde::{Deserialize, Serialize};

use super::{CcoConfig, CcoError, CompoundOrbit};
use crate::dynamics::{flow_point, integrate};
use crate::hamiltonians::{HamiltonianSystem, PhaseSpacePoint};
use crate::quadrature::composite_gl5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivenSegmentCheck {
    /// `∫ p·dq` along `Φ_Λ^{0→τ}(x̃₄)`, by quadrature.
    pub image_pdq: f64,
    /// `∫ p·dq (x̃₄) + S(x̃₁) + S(x̃₃)`.
    pub rhs: f64,
    pub discrepancy: f64,
    pub pdq_x4: f64,
    pub pc_x1: f64,
    pub pc_x3: f64,
}

/// Integrates `p·dq` along the driven image of the last inner leg and compares
/// it with the segment sum. The image velocity is `Γ(τ)·ẋ_H`, evaluated at
/// composite five-point Gauss–Legendre nodes in the inner time.
pub fn driven_segment_action_check(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    orbit: &CompoundOrbit,
    cfg: &CcoConfig,
) -> Result<DrivenSegmentCheck, CcoError> {
    let leg = &orbit.segments[3];
    let tau = orbit.times.tau;
    let span = leg.t_end - leg.t_start;
    let panels = ((span.abs() / 0.05).ceil() as usize).max(8);
    let n = inner.dof();
    let sym = inner.symplectic();
    let integrator = cfg.integrator.without_states();
    let mut image_pdq = 0.0;
    for (s, weight) in composite_gl5(leg.t_start, leg.t_end, panels) {
        let x = flow_point(inner, leg.start.as_slice(), leg.t_start, s, &integrator)?;
        let v = sym.apply(&inner.gradient(&x, s));
        let image = integrate(driving, &PhaseSpacePoint::new(x), 0.0, tau, &integrator)?;
        let dy = &image.monodromy * v;
        let p = image.end.p();
        let f: f64 = (0..n).map(|i| p[i] * dy[n + i]).sum();
        image_pdq += weight * f;
    }
    let pdq_x4 = leg.pdq;
    let pc_x1 = orbit.segments[0].action;
    let pc_x3 = orbit.segments[2].action;
    let rhs = pdq_x4 + pc_x1 + pc_x3;
    Ok(DrivenSegmentCheck {
        image_pdq,
        rhs,
        discrepancy: (image_pdq - rhs).abs(),
        pdq_x4,
        pc_x1,
        pc_x3,
    })
}
