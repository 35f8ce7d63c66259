//! Tangency of the driven `E`-shell with the `E′`-shell.
//!
//! The tangency point `x` on `H = E′` and driving time `τ` solve
//!
//! ```text
//! H(x) = E′,   H(y) = E,   ∇H(x) = λ Γ̄ᵀ ∇H(y),   y = Φ^{τ→0}(x),
//! ```
//!
//! where `Γ̄` is the stability matrix of the backward driving segment, so that
//! `Γ̄ᵀ ∇H(y)` is the gradient of the driven Hamiltonian `H∘Φ^{τ→0}` at `x`.
//! Newton runs over `(x, τ, λ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::section::driven_energies;
use super::shell::shell_components;
use super::{DensityError, SectionConfig, SectionSide};
use crate::dynamics::{integrate, IntegratorConfig};
use crate::hamiltonians::{HamiltonianSystem, PhaseSpacePoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnticausticConfig {
    pub integrator: IntegratorConfig,
    pub section: SectionConfig,
    /// Driving times sampled across the bracket when looking for contact.
    pub scan_points: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub fd_step: f64,
    /// Spread of the driven energies over the shell below which the shells coincide.
    pub coincidence_tol: f64,
}

impl Default for AnticausticConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig::with_tol(1e-12).without_states(),
            section: SectionConfig::default(),
            scan_points: 64,
            newton_tol: 1e-11,
            max_newton: 50,
            fd_step: 1e-6,
            coincidence_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anticaustic {
    pub tau: f64,
    /// Tangency point on the `E′`-shell.
    pub x: PhaseSpacePoint,
    /// Its backward image on the `E`-shell.
    pub preimage: PhaseSpacePoint,
    /// Ratio of the two gradients at the tangency point.
    pub lambda: f64,
    /// Max norm of the defining equations.
    pub strong_residual: f64,
    /// `|ẋ_H(x) ∧ ẋ_G(x)|` with `G = H∘Φ^{τ→0}`.
    pub wedge_residual: f64,
    pub iterations: usize,
}

struct Eval {
    residual: DVector<f64>,
    preimage: Vec<f64>,
    wedge: f64,
}

fn evaluate(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    e: f64,
    e_prime: f64,
    z: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<Eval, DensityError> {
    let d = inner.dim();
    let x: Vec<f64> = z.rows(0, d).iter().copied().collect();
    let tau = z[d];
    let lambda = z[d + 1];
    let seg = integrate(driving, &PhaseSpacePoint::new(x.clone()), tau, 0.0, cfg)?;
    let y = seg.end.as_slice();
    let grad_x = inner.gradient(&x, 0.0);
    let grad_g = seg.monodromy.transpose() * inner.gradient(y, 0.0);
    let mut residual = DVector::zeros(d + 2);
    residual[0] = inner.value(&x, 0.0) - e_prime;
    residual[1] = inner.value(y, 0.0) - e;
    for i in 0..d {
        residual[2 + i] = grad_x[i] - lambda * grad_g[i];
    }
    let sym = inner.symplectic();
    let wedge = sym.wedge(sym.apply(&grad_x).as_slice(), sym.apply(&grad_g).as_slice());
    Ok(Eval {
        residual,
        preimage: y.to_vec(),
        wedge,
    })
}

/// Newton over `(x, τ, λ)` from a guess, with a central-difference Jacobian.
pub fn polish_anticaustic(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    e: f64,
    e_prime: f64,
    x_guess: &PhaseSpacePoint,
    tau_guess: f64,
    cfg: &AnticausticConfig,
) -> Result<Anticaustic, DensityError> {
    let d = inner.dim();
    let integ = cfg.integrator.without_states();
    let mut z = DVector::zeros(d + 2);
    z.rows_mut(0, d).copy_from(&x_guess.to_vector());
    z[d] = tau_guess;
    let y = crate::dynamics::flow_point(driving, x_guess.as_slice(), tau_guess, 0.0, &integ)?;
    let gx = inner.gradient(x_guess.as_slice(), 0.0);
    let seg = integrate(driving, x_guess, tau_guess, 0.0, &integ)?;
    let gg = seg.monodromy.transpose() * inner.gradient(&y, 0.0);
    z[d + 1] = gx.dot(&gg) / gg.norm_squared().max(f64::MIN_POSITIVE);

    let mut eval = evaluate(inner, driving, e, e_prime, &z, &integ)?;
    for iteration in 0..cfg.max_newton {
        let norm = eval.residual.amax();
        if norm < cfg.newton_tol {
            return Ok(finish(d, &z, eval, iteration));
        }
        let mut jac = DMatrix::zeros(d + 2, d + 2);
        for k in 0..d + 2 {
            let h = cfg.fd_step * (1.0 + z[k].abs());
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let rp = evaluate(inner, driving, e, e_prime, &zp, &integ)?.residual;
            let rm = evaluate(inner, driving, e, e_prime, &zm, &integ)?.residual;
            jac.set_column(k, &((rp - rm) / (2.0 * h)));
        }
        let Some(step) = jac.clone().lu().solve(&eval.residual) else {
            return Err(DensityError::DegenerateAnticaustic(
                "singular Jacobian of the tangency equations".into(),
            ));
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let trial = &z - lambda * &step;
            if let Ok(next) = evaluate(inner, driving, e, e_prime, &trial, &integ) {
                if next.residual.amax() < norm {
                    z = trial;
                    eval = next;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if eval.residual.amax() < 1e3 * cfg.newton_tol {
        return Ok(finish(d, &z, eval, cfg.max_newton));
    }
    Err(DensityError::DegenerateAnticaustic(format!(
        "tangency Newton stalled at residual {:e}",
        eval.residual.amax()
    )))
}

fn finish(d: usize, z: &DVector<f64>, eval: Eval, iterations: usize) -> Anticaustic {
    Anticaustic {
        tau: z[d],
        x: PhaseSpacePoint::new(z.rows(0, d).iter().copied().collect()),
        preimage: PhaseSpacePoint::new(eval.preimage),
        lambda: z[d + 1],
        strong_residual: eval.residual.amax(),
        wedge_residual: eval.wedge.abs(),
        iterations,
    }
}

struct Contact {
    /// Crossings of `H = E′` by the driven `E`-shell, summed over components.
    crossings: usize,
    /// Sample at the local extremum of the driven energy closest to `E′`.
    nearest: PhaseSpacePoint,
    /// Distance of `E′` from that extremum.
    gap: f64,
    /// Largest spread of the driven energy over a component.
    spread: f64,
}

/// Contact state of the driven `E`-shell with the `E′`-shell at `τ`.
fn contact(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    e: f64,
    e_prime: f64,
    tau: f64,
    cfg: &AnticausticConfig,
) -> Result<Contact, DensityError> {
    let integ = cfg.section.integrator.without_states();
    let shells = shell_components(inner, e, cfg.section.q_range, cfg.section.shell_samples, &integ)?;
    let mut out: Option<Contact> = None;
    let mut crossings = 0;
    let mut spread = 0.0f64;
    for shell in &shells {
        let values = driven_energies(inner, driving, shell, tau, SectionSide::E, &integ)?;
        let n = values.len();
        let (vmin, vmax) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        spread = spread.max(vmax - vmin);
        for k in 0..n {
            let (prev, cur, next) = (values[(k + n - 1) % n], values[k], values[(k + 1) % n]);
            if (cur < e_prime) != (next < e_prime) {
                crossings += 1;
            }
            let extremum = (cur >= prev && cur > next) || (cur <= prev && cur < next);
            let gap = (cur - e_prime).abs();
            if extremum && out.as_ref().is_none_or(|c| gap < c.gap) {
                out = Some(Contact {
                    crossings: 0,
                    nearest: shell.samples[k].clone(),
                    gap,
                    spread: 0.0,
                });
            }
        }
        if out.is_none() {
            out = Some(Contact {
                crossings: 0,
                nearest: shell.samples[0].clone(),
                gap: (values[0] - e_prime).abs(),
                spread: 0.0,
            });
        }
    }
    let mut c = out.expect("shell_components returns at least one shell");
    c.crossings = crossings;
    c.spread = spread;
    Ok(c)
}

/// Driving time in `tau_bracket` of the first tangency of the driven `E`-shell
/// with the `E′`-shell, with the tangency point. One degree of freedom.
///
/// A tangency shows up as a change in the number of crossings of the sampled
/// shells: the onset of contact, or a pair of section points born or lost
/// while the shells already intersect. The change is bisected and the
/// tangency equations are then solved by Newton. Coinciding shells (as for
/// `E = E′` at `τ → 0`) are refused.
pub fn find_anticaustic(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    e: f64,
    e_prime: f64,
    tau_bracket: (f64, f64),
    cfg: &AnticausticConfig,
) -> Result<Anticaustic, DensityError> {
    if inner.dof() != 1 {
        return Err(DensityError::NotOneDof { dof: inner.dof() });
    }
    let (lo, hi) = tau_bracket;
    let n = cfg.scan_points.max(2);
    let mut prev: Option<(f64, usize)> = None;
    let mut onset = None;
    for i in 0..=n {
        let tau = lo + (hi - lo) * i as f64 / n as f64;
        let c = contact(inner, driving, e, e_prime, tau, cfg)?;
        if c.spread < cfg.coincidence_tol && c.gap < cfg.coincidence_tol {
            return Err(DensityError::DegenerateAnticaustic(format!(
                "driven shell coincides with the target shell at tau = {tau} (energy spread {:e})",
                c.spread
            )));
        }
        if let Some((t0, n0)) = prev {
            if n0 != c.crossings {
                onset = Some((t0, n0, tau));
                break;
            }
        }
        prev = Some((tau, c.crossings));
    }
    let Some((mut a, na, mut b)) = onset else {
        return Err(DensityError::AnticausticNotFound { lo, hi });
    };
    for _ in 0..40 {
        let m = 0.5 * (a + b);
        if contact(inner, driving, e, e_prime, m, cfg)?.crossings == na {
            a = m;
        } else {
            b = m;
        }
        if (b - a).abs() < 1e-7 * (1.0 + a.abs()) {
            break;
        }
    }
    let tau0 = 0.5 * (a + b);
    let x_e = contact(inner, driving, e, e_prime, tau0, cfg)?.nearest;
    let integ = cfg.integrator.without_states();
    let x0 = PhaseSpacePoint::new(crate::dynamics::flow_point(
        driving,
        x_e.as_slice(),
        0.0,
        tau0,
        &integ,
    )?);
    let result = polish_anticaustic(inner, driving, e, e_prime, &x0, tau0, cfg)?;
    let (lo_t, hi_t) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    if !(result.tau >= lo_t - 1e-9 && result.tau <= hi_t + 1e-9) {
        return Err(DensityError::AnticausticNotFound { lo, hi });
    }
    Ok(result)
}
