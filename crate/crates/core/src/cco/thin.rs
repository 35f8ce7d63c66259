//! Thin edges of a compound-orbit family, grown from a seed.

use nalgebra::{DMatrix, DVector};

use super::{build_orbit, CCOFamily, CcoConfig, CcoError, CcoTimes, FamilyParameterization};
use crate::dynamics::integrate;
use crate::hamiltonians::{HamiltonianSystem, PhaseSpacePoint};
use crate::seeds::{Seed, StabilityClass};

fn velocity(sys: &HamiltonianSystem, x: &[f64], t: f64) -> DVector<f64> {
    sys.symplectic().apply(&sys.gradient(x, t))
}

/// `ẋ_Λ(x̃(x,t)) − M(x,t)·ẋ_Λ(x)` for the inner flow over `t`.
pub fn thin_t_residual(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    t: f64,
    cfg: &CcoConfig,
) -> Result<DVector<f64>, CcoError> {
    let seg = integrate(inner, x, 0.0, t, &cfg.integrator)?;
    let v0 = velocity(driving, x.as_slice(), 0.0);
    let v1 = velocity(driving, seg.end.as_slice(), 0.0);
    Ok(v1 - &seg.monodromy * v0)
}

/// `ẋ_H(x̃(x,τ)) − Γ(x|τ)·ẋ_H(x)` for the driving flow over `[0, τ]`.
pub fn thin_tau_residual(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    tau: f64,
    cfg: &CcoConfig,
) -> Result<DVector<f64>, CcoError> {
    let seg = integrate(driving, x, 0.0, tau, &cfg.integrator)?;
    let v0 = velocity(inner, x.as_slice(), 0.0);
    let v1 = velocity(inner, seg.end.as_slice(), 0.0);
    Ok(v1 - &seg.monodromy * v0)
}

pub(crate) enum NewtonFailure {
    Singular,
    Diverged(f64),
    Error(CcoError),
    /// Corrector landed further from the predictor than the trust radius.
    Jump(f64),
}

/// Newton with a central-difference Jacobian. Converged when the step is
/// below `1e-12·(1+‖x‖)` or the residual is below `abs_tol`.
pub(crate) fn newton_fd(
    f: impl Fn(&PhaseSpacePoint) -> Result<DVector<f64>, CcoError>,
    x0: &PhaseSpacePoint,
    abs_tol: f64,
    max_iter: usize,
) -> Result<(PhaseSpacePoint, f64), NewtonFailure> {
    let d = x0.dim();
    let mut x = x0.clone();
    let mut fx = f(&x).map_err(NewtonFailure::Error)?;
    for _ in 0..max_iter {
        let res = fx.norm();
        if res < abs_tol {
            return Ok((x, res));
        }
        let norm = x.to_vector().norm();
        let h = 1e-6 * (1.0 + norm);
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_mut_slice()[j] += h;
            xm.as_mut_slice()[j] -= h;
            let fp = f(&xp).map_err(NewtonFailure::Error)?;
            let fm = f(&xm).map_err(NewtonFailure::Error)?;
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        let sv = jac.clone().singular_values();
        if sv.max() == 0.0 || sv.min() < 1e-10 * sv.max() {
            return Err(NewtonFailure::Singular);
        }
        let Some(step) = jac.lu().solve(&fx) else {
            return Err(NewtonFailure::Singular);
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..10 {
            let trial = PhaseSpacePoint::from_vector(&(x.to_vector() - lambda * &step));
            if let Ok(ft) = f(&trial) {
                if ft.norm() < res || lambda * step.norm() < 1e-12 * (1.0 + norm) {
                    x = trial;
                    fx = ft;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(NewtonFailure::Diverged(res));
        }
        if lambda * step.norm() < 1e-12 * (1.0 + norm) {
            return Ok((x, fx.norm()));
        }
    }
    let res = fx.norm();
    if res < abs_tol.max(1e-9) {
        Ok((x, res))
    } else {
        Err(NewtonFailure::Diverged(res))
    }
}

/// Largest accepted predictor–corrector distance, relative to `1 + ‖x‖`.
const TRUST: f64 = 0.25;

#[derive(Clone, Copy)]
enum Edge {
    T,
    Tau,
}

fn check_seed(seed: &Seed) -> Result<(), CcoError> {
    if seed.stability_class == StabilityClass::Degenerate {
        Err(CcoError::DegenerateSeed)
    } else {
        Ok(())
    }
}

/// Geometric start `1e-5, 2e-5, …` up to `step`, then uniform to `max`.
fn ladder(max: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut r = 1e-5f64.min(max);
    while r < step && r < max {
        out.push(r);
        r *= 2.0;
    }
    let mut r = step.min(max);
    loop {
        out.push(r);
        if r >= max {
            break;
        }
        r = (r + step).min(max);
    }
    out
}

fn grow(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    seed: &Seed,
    max: f64,
    step: f64,
    cfg: &CcoConfig,
    edge: Edge,
) -> Result<CCOFamily, CcoError> {
    check_seed(seed)?;
    let residual = |x: &PhaseSpacePoint, s: f64| match edge {
        Edge::T => thin_t_residual(inner, driving, x, s, cfg),
        Edge::Tau => thin_tau_residual(inner, driving, x, s, cfg),
    };
    let times = |s: f64| match edge {
        Edge::T => CcoTimes::new(s, s, 0.0),
        Edge::Tau => CcoTimes::new(0.0, 0.0, s),
    };
    let mut family = CCOFamily {
        seed: seed.clone(),
        inner: inner.clone(),
        driving: driving.clone(),
        config: cfg.clone(),
        members: Vec::new(),
        parameterization: match edge {
            Edge::T => FamilyParameterization::TEdge,
            Edge::Tau => FamilyParameterization::TauEdge,
        },
        bifurcations: Vec::new(),
        truncated: None,
    };
    let mut history: Vec<(f64, PhaseSpacePoint)> = vec![(0.0, seed.point.clone())];
    let rungs = ladder(max, step);
    for &target in &rungs {
        let mut reached = history.last().map(|h| h.0).unwrap_or(0.0);
        let mut sub = target - reached;
        let mut halvings = 0;
        while reached < target {
            let s = (reached + sub).min(target);
            let guess = predict(&history, s);
            let solved = newton_fd(|x| residual(x, s), &guess, 1e-12, 40).and_then(|(x, r)| {
                let last = &history.last().expect("history is nonempty").1;
                let jump = x.distance(&guess);
                if history.len() >= 2 && jump > TRUST * (1.0 + last.to_vector().norm()) {
                    Err(NewtonFailure::Jump(jump))
                } else {
                    Ok((x, r))
                }
            });
            match solved {
                Ok((x, _)) => {
                    if family.members.is_empty() {
                        check_continuum(&residual, &x, s)?;
                    }
                    history.push((s, x));
                    reached = s;
                }
                Err(NewtonFailure::Error(e)) if family.members.is_empty() => return Err(e),
                Err(failure) => {
                    if halvings < 4 {
                        halvings += 1;
                        sub *= 0.5;
                        continue;
                    }
                    if family.members.is_empty() {
                        if matches!(failure, NewtonFailure::Singular) {
                            let r = residual(&guess, s)?;
                            if r.norm() < 1e-10 {
                                return Err(CcoError::DegenerateContinuum);
                            }
                        }
                        let res = match failure {
                            NewtonFailure::Diverged(r) | NewtonFailure::Jump(r) => r,
                            _ => f64::NAN,
                        };
                        return Err(CcoError::ThinFamilyFailed {
                            parameter: s,
                            residual: res,
                        });
                    }
                    family.truncated = Some(match failure {
                        NewtonFailure::Singular => {
                            format!("singular Jacobian near parameter {s:.6}: truncated")
                        }
                        NewtonFailure::Diverged(r) => {
                            format!("Newton diverged at parameter {s:.6} (residual {r:.3e})")
                        }
                        NewtonFailure::Error(e) => format!("{e} at parameter {s:.6}"),
                        NewtonFailure::Jump(j) => {
                            format!("family escapes near parameter {s:.6} (corrector jump {j:.3e})")
                        }
                    });
                    return Ok(family);
                }
            }
        }
        let x = history.last().expect("history is nonempty").1.clone();
        family
            .members
            .push(build_orbit(inner, driving, &x, times(target), &cfg.integrator)?);
    }
    Ok(family)
}

fn predict(history: &[(f64, PhaseSpacePoint)], s: f64) -> PhaseSpacePoint {
    let n = history.len();
    if n < 2 {
        return history[n - 1].1.clone();
    }
    let (s0, x0) = &history[n - 2];
    let (s1, x1) = &history[n - 1];
    if s1 == s0 {
        return x1.clone();
    }
    let w = (s - s1) / (s1 - s0);
    PhaseSpacePoint::from_vector(&(x1.to_vector() + w * (x1.to_vector() - x0.to_vector())))
}

/// A vanishing residual Jacobian at the first rung marks a continuum of solutions.
fn check_continuum(
    residual: &impl Fn(&PhaseSpacePoint, f64) -> Result<DVector<f64>, CcoError>,
    x: &PhaseSpacePoint,
    s: f64,
) -> Result<(), CcoError> {
    let h = 1e-4 * (1.0 + x.to_vector().norm());
    let mut max = 0.0f64;
    for j in 0..x.dim() {
        let mut xp = x.clone();
        xp.as_mut_slice()[j] += h;
        max = max.max(residual(&xp, s)?.amax());
    }
    if max < 1e-10 * s.max(1e-12) {
        Err(CcoError::DegenerateContinuum)
    } else {
        Ok(())
    }
}

/// Solves `ẋ_Λ(x̃(x,t)) = M(x,t)·ẋ_Λ(x)` on a ladder `t ∈ (0, t_max]`, starting at the seed.
pub fn grow_thin_t_family(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    seed: &Seed,
    t_max: f64,
    step: f64,
    cfg: &CcoConfig,
) -> Result<CCOFamily, CcoError> {
    grow(inner, driving, seed, t_max, step, cfg, Edge::T)
}

/// Solves `ẋ_H(x̃(x,τ)) = Γ(x|τ)·ẋ_H(x)` on a ladder `τ ∈ (0, τ_max]`, starting at the seed.
pub fn grow_thin_tau_family(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    seed: &Seed,
    tau_max: f64,
    step: f64,
    cfg: &CcoConfig,
) -> Result<CCOFamily, CcoError> {
    grow(inner, driving, seed, tau_max, step, cfg, Edge::Tau)
}

/// One thin-τ solve at `tau` from `guess`.
pub(crate) fn solve_thin_tau(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    guess: &PhaseSpacePoint,
    tau: f64,
    cfg: &CcoConfig,
) -> Result<PhaseSpacePoint, CcoError> {
    match newton_fd(
        |x| thin_tau_residual(inner, driving, x, tau, cfg),
        guess,
        1e-12,
        40,
    ) {
        Ok((x, _)) => Ok(x),
        Err(NewtonFailure::Error(e)) => Err(e),
        Err(NewtonFailure::Singular) => Err(CcoError::ThinFamilyFailed {
            parameter: tau,
            residual: f64::NAN,
        }),
        Err(NewtonFailure::Diverged(r) | NewtonFailure::Jump(r)) => Err(CcoError::ThinFamilyFailed {
            parameter: tau,
            residual: r,
        }),
    }
}
