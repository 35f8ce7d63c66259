//! Flow integration with simultaneous monodromy and action accumulation.
//!
//! The joint state is `[x, M (column-major), ∫p·q̇ dt, ∫K dt]`. Durations may
//! be negative; a segment from `t0` to `t1 < t0` is the inverse of the flow
//! from `t1` to `t0`, which is how backward driving is realised.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::hamiltonians::{HamiltonianError, HamiltonianSystem, PhaseSpacePoint};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("step budget of {max_steps} exhausted at t = {t_reached} (target {t_target})")]
    StepsExhausted {
        max_steps: usize,
        t_reached: f64,
        t_target: f64,
        x: Vec<f64>,
    },
    #[error("trajectory blew up at t = {t}")]
    BlowUp { t: f64, x: Vec<f64> },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("implicit stage iteration did not converge at t = {t}")]
    ImplicitStage { t: f64 },
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorMethod {
    /// Dormand–Prince 5(4) with embedded error control.
    #[default]
    AdaptiveRk,
    /// Two-stage Gauss–Legendre collocation with fixed step `max_step`.
    FixedStepSymplectic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: IntegratorMethod,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    pub max_steps: usize,
    /// Keep the `(time, point)` list of accepted steps.
    pub record_states: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: IntegratorMethod::AdaptiveRk,
            abs_tol: 1e-11,
            rel_tol: 1e-11,
            max_step: 0.5,
            max_steps: 1_000_000,
            record_states: true,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            abs_tol: tol,
            rel_tol: tol,
            ..Self::default()
        }
    }

    pub fn without_states(&self) -> Self {
        Self {
            record_states: false,
            ..self.clone()
        }
    }

    /// The larger of the two tolerances, used to scale invariant checks.
    pub fn tolerance(&self) -> f64 {
        self.abs_tol.max(self.rel_tol)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(DynamicsError::Config("tolerances must be positive".into()));
        }
        if !(self.max_step > 0.0) || !self.max_step.is_finite() {
            return Err(DynamicsError::Config("max_step must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(DynamicsError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// A flow segment with its accumulated action and monodromy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub generator: String,
    pub t_start: f64,
    pub t_end: f64,
    pub start: PhaseSpacePoint,
    pub end: PhaseSpacePoint,
    pub states: Vec<(f64, PhaseSpacePoint)>,
    /// `∫ p·dq − K dt`.
    pub action: f64,
    /// `∫ p·dq` alone.
    pub pdq: f64,
    pub monodromy: DMatrix<f64>,
    pub energy_start: f64,
    pub energy_end: f64,
    pub steps: usize,
}

impl TrajectorySegment {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn dof(&self) -> usize {
        self.start.dof()
    }

    /// `∫ K dt` along the segment.
    pub fn energy_time_integral(&self) -> f64 {
        self.pdq - self.action
    }

    /// Cubic Hermite resampling of the stored states onto `n ≥ 2` uniform times.
    pub fn resample_uniform(
        &self,
        sys: &HamiltonianSystem,
        n: usize,
    ) -> Vec<(f64, PhaseSpacePoint)> {
        assert!(n >= 2, "need at least two samples");
        if self.states.len() < 2 {
            return Vec::new();
        }
        let dim = self.start.dim();
        let sym = sys.symplectic();
        let mut out = Vec::with_capacity(n);
        let mut k = 0;
        let mut f0 = vec![0.0; dim];
        let mut f1 = vec![0.0; dim];
        let mut g = vec![0.0; dim];
        for i in 0..n {
            let t = self.t_start + (self.t_end - self.t_start) * i as f64 / (n - 1) as f64;
            let forward = self.t_end >= self.t_start;
            while k + 2 < self.states.len() {
                let next = self.states[k + 1].0;
                if (forward && next < t) || (!forward && next > t) {
                    k += 1;
                } else {
                    break;
                }
            }
            let (ta, xa) = &self.states[k];
            let (tb, xb) = &self.states[k + 1];
            let h = tb - ta;
            let s = if h == 0.0 { 0.0 } else { (t - ta) / h };
            sys.eval_into(xa.as_slice(), *ta, Some(&mut g), None);
            sym.apply_into(&g, &mut f0);
            sys.eval_into(xb.as_slice(), *tb, Some(&mut g), None);
            sym.apply_into(&g, &mut f1);
            let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
            let h10 = s.powi(3) - 2.0 * s * s + s;
            let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
            let h11 = s.powi(3) - s * s;
            let coords = (0..dim)
                .map(|j| {
                    h00 * xa.as_slice()[j]
                        + h10 * h * f0[j]
                        + h01 * xb.as_slice()[j]
                        + h11 * h * f1[j]
                })
                .collect();
            out.push((t, PhaseSpacePoint::new(coords)));
        }
        out
    }
}

trait Rhs {
    fn dim(&self) -> usize;
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]);
}

struct StateRhs<'a> {
    sys: &'a HamiltonianSystem,
    grad: Vec<f64>,
}

impl Rhs for StateRhs<'_> {
    fn dim(&self) -> usize {
        self.sys.dim()
    }

    #[inline]
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.sys.dof();
        self.sys.eval_into(y, t, Some(&mut self.grad), None);
        for i in 0..n {
            dy[i] = -self.grad[n + i];
            dy[n + i] = self.grad[i];
        }
    }
}

struct JointRhs<'a> {
    sys: &'a HamiltonianSystem,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

impl Rhs for JointRhs<'_> {
    fn dim(&self) -> usize {
        let d = self.sys.dim();
        d + d * d + 2
    }

    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.sys.dof();
        let d = 2 * n;
        let k = self
            .sys
            .eval_into(&y[..d], t, Some(&mut self.grad), Some(&mut self.hess));
        for i in 0..n {
            dy[i] = -self.grad[n + i];
            dy[n + i] = self.grad[i];
        }
        // dM = J (Hess M), column by column.
        let m = &y[d..d + d * d];
        for c in 0..d {
            let col = &m[c * d..(c + 1) * d];
            let out = &mut dy[d + c * d..d + (c + 1) * d];
            for r in 0..n {
                let mut sp = 0.0;
                let mut sq = 0.0;
                let hp = &self.hess[r * d..(r + 1) * d];
                let hq = &self.hess[(n + r) * d..(n + r + 1) * d];
                for j in 0..d {
                    sp += hp[j] * col[j];
                    sq += hq[j] * col[j];
                }
                out[r] = -sq;
                out[n + r] = sp;
            }
        }
        let mut pdq = 0.0;
        for i in 0..n {
            pdq += y[i] * self.grad[i];
        }
        dy[d + d * d] = pdq;
        dy[d + d * d + 1] = k;
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Workspace {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    ynew: Vec<f64>,
}

impl Workspace {
    fn new(dim: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
            ynew: vec![0.0; dim],
        }
    }
}

fn error_norm(y: &[f64], ynew: &[f64], err: &[f64], cfg: &IntegratorConfig) -> f64 {
    let mut acc = 0.0;
    for i in 0..y.len() {
        let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(ynew[i].abs());
        let r = err[i] / sc;
        acc += r * r;
    }
    (acc / y.len() as f64).sqrt()
}

/// Dormand–Prince integration of `y` from `t0` to `t1`; `on_step` sees each accepted state.
fn integrate_dp5<R: Rhs>(
    rhs: &mut R,
    y: &mut [f64],
    t0: f64,
    t1: f64,
    state_len: usize,
    cfg: &IntegratorConfig,
    mut on_step: impl FnMut(f64, &[f64]),
) -> Result<usize, DynamicsError> {
    let dim = rhs.dim();
    let mut w = Workspace::new(dim);
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(0);
    }
    let dir = span.signum();
    let mut t = t0;
    rhs.eval(t, y, &mut w.k[0]);

    // Initial step heuristic.
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..dim {
        let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs();
        d0 += (y[i] / sc).powi(2);
        d1 += (w.k[0][i] / sc).powi(2);
    }
    let (d0, d1) = ((d0 / dim as f64).sqrt(), (d1 / dim as f64).sqrt());
    let mut h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h = h.min(cfg.max_step).min(span.abs());

    let mut steps = 0usize;
    let mut fsal_valid = true;
    loop {
        let remaining = t1 - t;
        if remaining * dir <= 0.0 {
            break;
        }
        if steps >= cfg.max_steps {
            return Err(DynamicsError::StepsExhausted {
                max_steps: cfg.max_steps,
                t_reached: t,
                t_target: t1,
                x: y[..state_len].to_vec(),
            });
        }
        let mut last = false;
        if h >= remaining.abs() {
            h = remaining.abs();
            last = true;
        }
        if h < 1e-14 * (1.0 + t.abs()) && !last {
            return Err(DynamicsError::StepUnderflow { t });
        }
        let hs = dir * h;
        if !fsal_valid {
            rhs.eval(t, y, &mut w.k[0]);
            fsal_valid = true;
        }
        {
            let [k1, k2, k3, k4, k5, k6, k7] = &mut w.k;
            let tmp = &mut w.tmp;
            for i in 0..dim {
                tmp[i] = y[i] + hs * A21 * k1[i];
            }
            rhs.eval(t + C2 * hs, tmp, k2);
            for i in 0..dim {
                tmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
            }
            rhs.eval(t + C3 * hs, tmp, k3);
            for i in 0..dim {
                tmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            rhs.eval(t + C4 * hs, tmp, k4);
            for i in 0..dim {
                tmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            rhs.eval(t + C5 * hs, tmp, k5);
            for i in 0..dim {
                tmp[i] = y[i]
                    + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            rhs.eval(t + hs, tmp, k6);
            for i in 0..dim {
                w.ynew[i] = y[i]
                    + hs * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            }
            rhs.eval(t + hs, &w.ynew, k7);
            for i in 0..dim {
                tmp[i] = hs
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                        + E7 * k7[i]);
            }
        }
        if !w.ynew.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::BlowUp {
                t: t + hs,
                x: y[..state_len].to_vec(),
            });
        }
        let err = error_norm(y, &w.ynew, &w.tmp, cfg);
        steps += 1;
        if err <= 1.0 {
            t = if last { t1 } else { t + hs };
            y.copy_from_slice(&w.ynew);
            w.k.swap(0, 6);
            on_step(t, y);
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = (h * fac).min(cfg.max_step);
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
        }
    }
    Ok(steps)
}

const GL_A11: f64 = 0.25;
const GL_A12: f64 = 0.25 - 0.288_675_134_594_812_9;
const GL_A21: f64 = 0.25 + 0.288_675_134_594_812_9;
const GL_A22: f64 = 0.25;
const GL_C1: f64 = 0.5 - 0.288_675_134_594_812_9;
const GL_C2: f64 = 0.5 + 0.288_675_134_594_812_9;

/// Fixed-step two-stage Gauss–Legendre; stages by fixed-point iteration.
fn integrate_gl4<R: Rhs>(
    rhs: &mut R,
    y: &mut [f64],
    t0: f64,
    t1: f64,
    state_len: usize,
    cfg: &IntegratorConfig,
    mut on_step: impl FnMut(f64, &[f64]),
) -> Result<usize, DynamicsError> {
    let dim = rhs.dim();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(0);
    }
    let nsteps = (span.abs() / cfg.max_step).ceil().max(1.0) as usize;
    if nsteps > cfg.max_steps {
        return Err(DynamicsError::StepsExhausted {
            max_steps: cfg.max_steps,
            t_reached: t0,
            t_target: t1,
            x: y[..state_len].to_vec(),
        });
    }
    let h = span / nsteps as f64;
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut n1 = vec![0.0; dim];
    let mut n2 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for step in 0..nsteps {
        let t = t0 + h * step as f64;
        rhs.eval(t, y, &mut k1);
        k2.copy_from_slice(&k1);
        let mut converged = false;
        for _ in 0..100 {
            for i in 0..dim {
                tmp[i] = y[i] + h * (GL_A11 * k1[i] + GL_A12 * k2[i]);
            }
            rhs.eval(t + GL_C1 * h, &tmp, &mut n1);
            for i in 0..dim {
                tmp[i] = y[i] + h * (GL_A21 * k1[i] + GL_A22 * k2[i]);
            }
            rhs.eval(t + GL_C2 * h, &tmp, &mut n2);
            let mut delta: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for i in 0..dim {
                delta = delta.max((n1[i] - k1[i]).abs()).max((n2[i] - k2[i]).abs());
                scale = scale.max(n1[i].abs()).max(n2[i].abs());
            }
            std::mem::swap(&mut k1, &mut n1);
            std::mem::swap(&mut k2, &mut n2);
            if delta <= 1e-15 * (1.0 + scale) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(DynamicsError::ImplicitStage { t });
        }
        for i in 0..dim {
            y[i] += 0.5 * h * (k1[i] + k2[i]);
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::BlowUp {
                t: t + h,
                x: y[..state_len].to_vec(),
            });
        }
        let tn = if step + 1 == nsteps { t1 } else { t + h };
        on_step(tn, y);
    }
    Ok(nsteps)
}

fn run<R: Rhs>(
    rhs: &mut R,
    y: &mut [f64],
    t0: f64,
    t1: f64,
    state_len: usize,
    cfg: &IntegratorConfig,
    on_step: impl FnMut(f64, &[f64]),
) -> Result<usize, DynamicsError> {
    match cfg.method {
        IntegratorMethod::AdaptiveRk => integrate_dp5(rhs, y, t0, t1, state_len, cfg, on_step),
        IntegratorMethod::FixedStepSymplectic => {
            integrate_gl4(rhs, y, t0, t1, state_len, cfg, on_step)
        }
    }
}

fn check_point(sys: &HamiltonianSystem, x0: &PhaseSpacePoint) -> Result<(), DynamicsError> {
    if x0.dim() != sys.dim() {
        return Err(HamiltonianError::DimensionMismatch {
            expected: sys.dim(),
            found: x0.dim(),
        }
        .into());
    }
    if !x0.is_finite() {
        return Err(DynamicsError::BlowUp {
            t: 0.0,
            x: x0.as_slice().to_vec(),
        });
    }
    Ok(())
}

/// Integrates the flow of `sys` from `(x0, t0)` to time `t1`, with monodromy and action.
pub fn integrate(
    sys: &HamiltonianSystem,
    x0: &PhaseSpacePoint,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<TrajectorySegment, DynamicsError> {
    let id = DMatrix::identity(sys.dim(), sys.dim());
    integrate_from(sys, x0, &id, t0, t1, cfg)
}

/// As [`integrate`], with the variational equation started from `m0` instead of the identity.
pub fn integrate_from(
    sys: &HamiltonianSystem,
    x0: &PhaseSpacePoint,
    m0: &DMatrix<f64>,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<TrajectorySegment, DynamicsError> {
    cfg.validate()?;
    check_point(sys, x0)?;
    let d = sys.dim();
    assert_eq!(m0.shape(), (d, d), "initial monodromy must be 2N x 2N");
    let mut rhs = JointRhs {
        sys,
        grad: vec![0.0; d],
        hess: vec![0.0; d * d],
    };
    let mut y = vec![0.0; rhs.dim()];
    y[..d].copy_from_slice(x0.as_slice());
    y[d..d + d * d].copy_from_slice(m0.as_slice());
    let mut states = Vec::new();
    if cfg.record_states {
        states.push((t0, x0.clone()));
    }
    let record = cfg.record_states;
    let steps = run(&mut rhs, &mut y, t0, t1, d, cfg, |t, y| {
        if record {
            states.push((t, PhaseSpacePoint::new(y[..d].to_vec())));
        }
    })?;
    let end = PhaseSpacePoint::new(y[..d].to_vec());
    let pdq = y[d + d * d];
    let kdt = y[d + d * d + 1];
    Ok(TrajectorySegment {
        generator: sys.name().to_string(),
        t_start: t0,
        t_end: t1,
        energy_start: sys.value(x0.as_slice(), t0),
        energy_end: sys.value(end.as_slice(), t1),
        start: x0.clone(),
        end,
        states,
        action: pdq - kdt,
        pdq,
        monodromy: DMatrix::from_column_slice(d, d, &y[d..d + d * d]),
        steps,
    })
}

/// Endpoint only, without monodromy or action.
pub fn flow_point(
    sys: &HamiltonianSystem,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>, DynamicsError> {
    let d = sys.dim();
    let mut rhs = StateRhs {
        sys,
        grad: vec![0.0; d],
    };
    let mut y = x0.to_vec();
    run(&mut rhs, &mut y, t0, t1, d, cfg, |_, _| {})?;
    Ok(y)
}

/// `M · v`.
pub fn transport_velocity(seg: &TrajectorySegment, v: &DVector<f64>) -> DVector<f64> {
    assert_eq!(v.len(), seg.monodromy.nrows(), "velocity length must be 2N");
    &seg.monodromy * v
}

/// The driven image `x̃(x, −τ)`: the inverse of forward driving over `[0, τ]`.
pub fn drive_backward(
    driving: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    tau: f64,
    cfg: &IntegratorConfig,
) -> Result<TrajectorySegment, DynamicsError> {
    integrate(driving, x, tau, 0.0, cfg)
}

/// `(H(x) − E′, H(x̃(x, −τ)) − E)`.
pub fn section_residual(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    tau: f64,
    e: f64,
    e_prime: f64,
    cfg: &IntegratorConfig,
) -> Result<(f64, f64), DynamicsError> {
    check_point(inner, x)?;
    let back = flow_point(driving, x.as_slice(), tau, 0.0, cfg)?;
    Ok((
        inner.value(x.as_slice(), 0.0) - e_prime,
        inner.value(&back, 0.0) - e,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonians::{builtin, hamiltonian_vector_field, SymplecticForm};
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn sys(name: &str, kv: &[(&str, f64)]) -> HamiltonianSystem {
        let p: BTreeMap<String, f64> = kv.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        builtin(name, &p).unwrap()
    }

    #[test]
    fn unit_oscillator_full_period() {
        let h = sys("harmonic", &[]);
        let cfg = IntegratorConfig::with_tol(1e-12);
        let seg = integrate(&h, &PhaseSpacePoint::pq(0.0, 1.0), 0.0, 2.0 * PI, &cfg).unwrap();
        assert!(seg.end.distance(&PhaseSpacePoint::pq(0.0, 1.0)) < 1e-9);
        let id = DMatrix::<f64>::identity(2, 2);
        assert!((&seg.monodromy - id).amax() < 1e-9);
        assert!((seg.energy_start - 0.5).abs() < 1e-15);
        assert!((seg.energy_end - 0.5).abs() < 1e-10);
        // Loop area 2πE = π minus E·2π = π.
        assert!((seg.pdq - PI).abs() < 1e-9);
        assert!(seg.action.abs() < 1e-9);
    }

    #[test]
    fn duffing_energy_drift() {
        let d = sys("duffing", &[]);
        let x0 = PhaseSpacePoint::pq(0.0, 1.0);
        let seg = integrate(&d, &x0, 0.0, 5.0, &IntegratorConfig::with_tol(1e-12)).unwrap();
        assert!((seg.energy_end - seg.energy_start).abs() < 1e-8);
        let loose = integrate(&d, &x0, 0.0, 5.0, &IntegratorConfig::with_tol(1e-10)).unwrap();
        assert!(loose.end.distance(&seg.end) < 1e-7);
    }

    #[test]
    fn fixed_step_agrees_with_adaptive() {
        let d = sys("duffing", &[]);
        let x0 = PhaseSpacePoint::pq(0.2, 0.9);
        let a = integrate(&d, &x0, 0.0, 3.0, &IntegratorConfig::with_tol(1e-12)).unwrap();
        let cfg = IntegratorConfig {
            method: IntegratorMethod::FixedStepSymplectic,
            max_step: 0.005,
            ..IntegratorConfig::default()
        };
        let b = integrate(&d, &x0, 0.0, 3.0, &cfg).unwrap();
        assert!(a.end.distance(&b.end) < 1e-9);
        assert!((a.action - b.action).abs() < 1e-9);
        assert!((&a.monodromy - &b.monodromy).amax() < 1e-8);
        let sym = SymplecticForm::new(1);
        assert!(sym.symplecticity_defect(&b.monodromy) < 1e-12);
    }

    #[test]
    fn negative_duration_inverts_forward_flow() {
        let l = sys("perturbed", &[("eta", 0.3), ("omega", 2.0)]);
        let cfg = IntegratorConfig::with_tol(1e-12);
        let x0 = PhaseSpacePoint::pq(0.4, -0.3);
        let fwd = integrate(&l, &x0, 0.0, 1.7, &cfg).unwrap();
        let back = drive_backward(&l, &fwd.end, 1.7, &cfg).unwrap();
        assert!(back.end.distance(&x0) < 1e-10);
        assert!((fwd.action + back.action).abs() < 1e-10);
        let prod = &back.monodromy * &fwd.monodromy;
        assert!((prod - DMatrix::<f64>::identity(2, 2)).amax() < 1e-9);
        assert!(back.states.windows(2).all(|w| w[1].0 < w[0].0));
        assert!(fwd.states.windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn tangent_flow_identity() {
        for name in ["duffing", "double_well", "displaced_duffing"] {
            let s = sys(name, &[]);
            let x0 = PhaseSpacePoint::pq(0.3, 0.8);
            let seg = integrate(&s, &x0, 0.0, 2.3, &IntegratorConfig::with_tol(1e-12)).unwrap();
            let v0 = hamiltonian_vector_field(&s, &x0, 0.0).unwrap();
            let v1 = hamiltonian_vector_field(&s, &seg.end, 0.0).unwrap();
            assert!((transport_velocity(&seg, &v0) - v1).amax() < 1e-8, "{name}");
        }
    }

    #[test]
    fn full_period_transport_is_identity() {
        let h = sys("harmonic", &[]);
        let seg = integrate(
            &h,
            &PhaseSpacePoint::pq(0.7, 0.1),
            0.0,
            2.0 * PI,
            &IntegratorConfig::with_tol(1e-12),
        )
        .unwrap();
        let v = DVector::from_vec(vec![0.3, -1.2]);
        assert!((transport_velocity(&seg, &v) - v).amax() < 1e-9);
    }

    #[test]
    fn driven_transport_matches_difference_quotient() {
        let h = sys("harmonic", &[("a", 0.5)]);
        let l = sys("displaced", &[("a", 0.5), ("b", 1.0)]);
        let cfg = IntegratorConfig::with_tol(1e-13);
        let x = PhaseSpacePoint::pq(0.4, 1.3);
        let v = hamiltonian_vector_field(&h, &x, 0.0).unwrap();
        let seg = integrate(&l, &x, 0.0, 1.1, &cfg).unwrap();
        let eps = 1e-6;
        let xp: Vec<f64> = x.as_slice().iter().zip(v.iter()).map(|(a, b)| a + eps * b).collect();
        let xm: Vec<f64> = x.as_slice().iter().zip(v.iter()).map(|(a, b)| a - eps * b).collect();
        let fp = flow_point(&l, &xp, 0.0, 1.1, &cfg).unwrap();
        let fm = flow_point(&l, &xm, 0.0, 1.1, &cfg).unwrap();
        let fd = DVector::from_iterator(2, (0..2).map(|i| (fp[i] - fm[i]) / (2.0 * eps)));
        assert!((transport_velocity(&seg, &v) - fd).amax() < 1e-7);
    }

    #[test]
    fn action_is_additive() {
        let l = sys("perturbed", &[("eta", 0.4)]);
        let cfg = IntegratorConfig::with_tol(1e-11);
        let x0 = PhaseSpacePoint::pq(0.1, 0.6);
        let a = integrate(&l, &x0, 0.0, 1.2, &cfg).unwrap();
        let b = integrate(&l, &a.end, 1.2, 3.1, &cfg).unwrap();
        let c = integrate(&l, &x0, 0.0, 3.1, &cfg).unwrap();
        assert!((a.action + b.action - c.action).abs() < 1e-10);
        assert!(b.end.distance(&c.end) < 1e-10);
    }

    #[test]
    fn random_segments_stay_symplectic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = IntegratorConfig::with_tol(1e-10).without_states();
        for name in crate::hamiltonians::builtin_names() {
            let s = sys(name, &[]);
            let sym = s.symplectic();
            for _ in 0..10 {
                let x: Vec<f64> = (0..s.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let dur = rng.gen_range(-3.0..3.0);
                let seg = integrate(&s, &PhaseSpacePoint::new(x), 0.0, dur, &cfg).unwrap();
                assert!(sym.symplecticity_defect(&seg.monodromy) < 1e-7, "{name}");
                if !s.is_time_dependent() {
                    assert!((seg.energy_end - seg.energy_start).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn section_residual_cases() {
        let h = sys("harmonic", &[("a", 0.5)]);
        let l = sys("displaced", &[("a", 0.5), ("b", 1.0)]);
        let cfg = IntegratorConfig::with_tol(1e-12);
        let x = PhaseSpacePoint::pq(0.6, 0.8);
        let e = h.value(x.as_slice(), 0.0);
        let (r1, r2) = section_residual(&h, &l, &x, 0.0, e, e, &cfg).unwrap();
        assert!(r1.abs() < 1e-15 && r2.abs() < 1e-15);
        let tau = 0.9;
        let w = 0.5f64.sqrt();
        let (p, q) = (0.6, 0.8 - 1.0);
        let (c, s) = ((w * tau).cos(), (w * tau).sin());
        // ṗ = −(q − b), q̇ = a p; running backward by τ:
        let pb = p * c + q * s / w;
        let qb = q * c - w * p * s + 1.0;
        let back_e = (pb * pb + 0.5 * qb * qb) / 2.0;
        let (r1, r2) = section_residual(&h, &l, &x, tau, 0.1, 0.2, &cfg).unwrap();
        assert!((r1 - (e - 0.2)).abs() < 1e-14);
        assert!((r2 - (back_e - 0.1)).abs() < 1e-10, "{r2} vs {}", back_e - 0.1);
        let (r1, r2) = section_residual(&h, &l, &x, tau, back_e + 0.3, e + 0.3, &cfg).unwrap();
        assert!(r1 < 0.0 && r2 < 0.0);
    }

    #[test]
    fn resampling_hits_endpoints() {
        let d = sys("duffing", &[]);
        let seg = integrate(
            &d,
            &PhaseSpacePoint::pq(0.0, 1.0),
            0.0,
            -2.0,
            &IntegratorConfig::with_tol(1e-10),
        )
        .unwrap();
        let pts = seg.resample_uniform(&d, 21);
        assert_eq!(pts.len(), 21);
        assert!(pts[0].1.distance(&seg.start) < 1e-12);
        assert!(pts[20].1.distance(&seg.end) < 1e-12);
        for (_, x) in &pts {
            assert!((d.value(x.as_slice(), 0.0) - 0.25).abs() < 1e-5);
        }
    }
}
