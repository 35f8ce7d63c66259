//! Closed energy shells of one-degree-of-freedom systems, sampled uniformly in time.

use serde::{Deserialize, Serialize};

use super::DensityError;
use crate::dynamics::{flow_point, DynamicsError, IntegratorConfig};
use crate::hamiltonians::{HamiltonianSystem, PhaseSpacePoint};

/// One closed component of `H = E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shell {
    pub energy: f64,
    pub period: f64,
    /// Points at times `k·period/n`, `k = 0..n`.
    pub samples: Vec<PhaseSpacePoint>,
}

impl Shell {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.period / self.samples.len() as f64
    }

    pub fn start(&self) -> &PhaseSpacePoint {
        &self.samples[0]
    }

    /// The point at time `t` (taken modulo the period), flowed from the nearest earlier sample.
    pub fn point_at(
        &self,
        inner: &HamiltonianSystem,
        t: f64,
        cfg: &IntegratorConfig,
    ) -> Result<Vec<f64>, DynamicsError> {
        let t = t.rem_euclid(self.period);
        let k = ((t / self.dt()).floor() as usize).min(self.samples.len() - 1);
        let s = t - k as f64 * self.dt();
        if s == 0.0 {
            return Ok(self.samples[k].as_slice().to_vec());
        }
        flow_point(inner, self.samples[k].as_slice(), 0.0, s, cfg)
    }
}

fn velocity(inner: &HamiltonianSystem, x: &[f64]) -> Vec<f64> {
    inner
        .symplectic()
        .apply(&inner.gradient(x, 0.0))
        .iter()
        .copied()
        .collect()
}

fn dot_offset(x: &[f64], x0: &[f64], v0: &[f64]) -> f64 {
    x.iter().zip(x0).zip(v0).map(|((a, b), v)| (a - b) * v).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Return time of the orbit through `x0` to the hyperplane through `x0` normal to `ẋ(x0)`.
///
/// Coarse steps of `0.05` detect the upward crossing near `x0`, which is then
/// refined by safeguarded secant iteration. The closure `‖x(T) − x0‖` is checked.
pub fn closed_orbit_period(
    inner: &HamiltonianSystem,
    x0: &PhaseSpacePoint,
    t_max: f64,
    cfg: &IntegratorConfig,
) -> Result<f64, DensityError> {
    if inner.is_time_dependent() {
        return Err(DensityError::Config(
            "energy shells need a time-independent inner Hamiltonian".into(),
        ));
    }
    let h = 0.05;
    let x0s = x0.as_slice();
    let v0 = velocity(inner, x0s);
    let speed = v0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if speed == 0.0 {
        return Err(DensityError::ShellNotClosed {
            x: x0s.to_vec(),
            t_max: 0.0,
        });
    }
    let mut t = 0.0;
    let mut x = x0s.to_vec();
    let mut f = 0.0;
    let mut max_dist = 0.0f64;
    while t < t_max {
        let xn = flow_point(inner, &x, 0.0, h, cfg)?;
        let fn_ = dot_offset(&xn, x0s, &v0);
        let d = dist(&xn, x0s);
        max_dist = max_dist.max(d);
        if max_dist > 4.0 * h * speed && f < 0.0 && fn_ >= 0.0 && d < 0.25 * max_dist {
            let s = refine_crossing(|s| {
                let y = flow_point(inner, &x, 0.0, s, cfg)?;
                Ok(dot_offset(&y, x0s, &v0))
            }, f, fn_, h)?;
            let period = t + s;
            let back = flow_point(inner, x0s, 0.0, period, cfg)?;
            let scale = 1.0 + x0s.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if dist(&back, x0s) < 1e-6 * scale {
                return Ok(period);
            }
        }
        x = xn;
        f = fn_;
        t += h;
    }
    Err(DensityError::ShellNotClosed {
        x: x0s.to_vec(),
        t_max,
    })
}

/// Root of `g` on `[0, h]` with `g(0) = f0 < 0 ≤ g(h) = f1`, Illinois variant of regula falsi.
pub(crate) fn refine_crossing(
    g: impl Fn(f64) -> Result<f64, DynamicsError>,
    f0: f64,
    f1: f64,
    h: f64,
) -> Result<f64, DynamicsError> {
    let (mut a, mut b) = (0.0, h);
    let (mut fa, mut fb) = (f0, f1);
    let mut side = 0;
    for _ in 0..100 {
        let c = (a * fb - b * fa) / (fb - fa);
        if !(c > a && c < b) || (b - a) < 1e-14 * (1.0 + h) {
            return Ok(0.5 * (a + b));
        }
        let fc = g(c)?;
        if fc == 0.0 {
            return Ok(c);
        }
        if (fc < 0.0) == (fa < 0.0) {
            a = c;
            fa = fc;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = c;
            fb = fc;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
        if (b - a).abs() < 1e-14 * (1.0 + h) {
            break;
        }
    }
    Ok(if fa.abs() < fb.abs() { a } else { b })
}

/// All closed components of `H = energy` crossing the line `p = 0` for `q` in `q_range`,
/// each sampled at `n_samples` uniform times.
pub fn shell_components(
    inner: &HamiltonianSystem,
    energy: f64,
    q_range: (f64, f64),
    n_samples: usize,
    cfg: &IntegratorConfig,
) -> Result<Vec<Shell>, DensityError> {
    if inner.dof() != 1 {
        return Err(DensityError::NotOneDof { dof: inner.dof() });
    }
    let n_samples = n_samples.max(16);
    let cfg = cfg.without_states();
    let f = |q: f64| inner.value(&[0.0, q], 0.0) - energy;
    let n_scan = 2000;
    let mut roots = Vec::new();
    let (lo, hi) = q_range;
    let mut qa = lo;
    let mut fa = f(qa);
    for i in 1..=n_scan {
        let qb = lo + (hi - lo) * i as f64 / n_scan as f64;
        let fb = f(qb);
        if fa == 0.0 {
            roots.push(qa);
        } else if fa * fb < 0.0 {
            let (mut a, mut b, mut fa2) = (qa, qb, fa);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                let fm = f(m);
                if (fm < 0.0) == (fa2 < 0.0) {
                    a = m;
                    fa2 = fm;
                } else {
                    b = m;
                }
                if b - a < 1e-15 * (1.0 + m.abs()) {
                    break;
                }
            }
            roots.push(0.5 * (a + b));
        }
        qa = qb;
        fa = fb;
    }
    let mut shells: Vec<Shell> = Vec::new();
    for q in roots {
        let x0 = PhaseSpacePoint::pq(0.0, q);
        if shells.iter().any(|s| on_shell(s, x0.as_slice())) {
            continue;
        }
        let t_max = 1e4;
        let period = closed_orbit_period(inner, &x0, t_max, &cfg)?;
        let dt = period / n_samples as f64;
        let mut samples = Vec::with_capacity(n_samples);
        let mut x = x0.as_slice().to_vec();
        for _ in 0..n_samples {
            samples.push(PhaseSpacePoint::new(x.clone()));
            x = flow_point(inner, &x, 0.0, dt, &cfg)?;
        }
        shells.push(Shell {
            energy,
            period,
            samples,
        });
    }
    if shells.is_empty() {
        return Err(DensityError::ShellNotFound { energy });
    }
    Ok(shells)
}

/// A point of the same energy lies on `shell` when it is within one chord of a sample.
fn on_shell(shell: &Shell, x: &[f64]) -> bool {
    let n = shell.samples.len();
    let chord = (0..n)
        .map(|k| dist(shell.samples[k].as_slice(), shell.samples[(k + 1) % n].as_slice()))
        .fold(0.0, f64::max);
    shell
        .samples
        .iter()
        .any(|s| dist(s.as_slice(), x) <= 1.5 * chord)
}
