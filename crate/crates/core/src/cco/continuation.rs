//! Predictor–corrector continuation of a family along a ray in `(t, t′, τ)`.

use serde::{Deserialize, Serialize};

use super::thin::solve_thin_tau;
use super::{
    build_orbit, close_cco, Bifurcation, CCOFamily, CcoError, CcoTimes, CompoundOrbit,
    FamilyParameterization,
};
use crate::hamiltonians::PhaseSpacePoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterPath {
    pub from: CcoTimes,
    pub to: CcoTimes,
}

/// Step sizes measured as Euclidean distance in `(t, t′, τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepControl {
    pub initial: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            initial: 0.05,
            min: 1e-6,
            max: 0.2,
        }
    }
}

fn correct(
    family: &CCOFamily,
    guess: &PhaseSpacePoint,
    times: CcoTimes,
) -> Result<CompoundOrbit, CcoError> {
    let (inner, driving, cfg) = (&family.inner, &family.driving, &family.config);
    if times.is_thin_tau() {
        let x = solve_thin_tau(inner, driving, guess, times.tau, cfg)?;
        build_orbit(inner, driving, &x, times, &cfg.integrator)
    } else {
        close_cco(inner, driving, guess, times, cfg)
    }
}

/// Continues `family` from its last member along `path`, appending members.
///
/// Step halving on corrector failure; growth by 1.5 after success. A sign
/// change of `det(I − 𝐌)` between neighbours is logged as a bifurcation and
/// increments the integer phase index of later members. If the step falls
/// below `control.min` the family is returned with `truncated` set.
pub fn continue_family(
    family: &CCOFamily,
    path: &ParameterPath,
    control: &StepControl,
) -> Result<CCOFamily, CcoError> {
    let mut out = family.clone();
    let start = family.last().ok_or(CcoError::EmptyFamily)?.clone();
    if !(path.from.is_thin_tau() && path.to.is_thin_tau()) {
        out.parameterization = FamilyParameterization::InteriorSheet;
    }
    let length = path.from.distance(&path.to);
    let mut track: Vec<(f64, PhaseSpacePoint)> = Vec::new();
    let first = if start.times.distance(&path.from) > 1e-12 {
        let mut o = correct(&out, &start.x_start, path.from)?;
        o.maslov_sigma = start.maslov_sigma;
        out.members.push(o.clone());
        o
    } else {
        start
    };
    track.push((0.0, first.x_start.clone()));
    if length == 0.0 {
        return Ok(out);
    }
    let mut s = 0.0;
    let mut h = control.initial.min(control.max);
    while s < 1.0 {
        let ds = (h / length).min(1.0 - s);
        let s_next = s + ds;
        let times = path.from.lerp(&path.to, s_next);
        let guess = match track.len() {
            1 => track[0].1.clone(),
            n => {
                let (s0, x0) = &track[n - 2];
                let (s1, x1) = &track[n - 1];
                let w = (s_next - s1) / (s1 - s0);
                PhaseSpacePoint::from_vector(&(x1.to_vector() + w * (x1.to_vector() - x0.to_vector())))
            }
        };
        match correct(&out, &guess, times) {
            Ok(mut orbit) => {
                let prev = out.members.last().expect("nonempty");
                orbit.maslov_sigma = prev.maslov_sigma;
                orbit.winding = prev.winding;
                if !times.is_thin_tau() && !prev.times.is_thin_tau() {
                    let (a, b) = (prev.det_i_minus_m(), orbit.det_i_minus_m());
                    if a * b < 0.0 {
                        out.bifurcations.push(Bifurcation {
                            member: out.members.len(),
                            det_before: a,
                            det_after: b,
                        });
                        orbit.maslov_sigma += 1;
                        log::info!(
                            "det(I - M) changes sign between {:?} and {:?}",
                            prev.times,
                            times
                        );
                    }
                }
                track.push((s_next, orbit.x_start.clone()));
                out.members.push(orbit);
                s = s_next;
                h = (h * 1.5).min(control.max);
            }
            Err(e) => {
                h *= 0.5;
                if h < control.min {
                    out.truncated = Some(format!("continuation stalled at {times:?}: {e}"));
                    return Ok(out);
                }
            }
        }
    }
    Ok(out)
}
