//! Section form of the classical density for one degree of freedom: a sum of
//! inverse brackets over the points where a driven shell crosses a static one.

use serde::{Deserialize, Serialize};

use super::shell::{refine_crossing, shell_components, Shell};
use super::{DensityError, Matrix, TransitionGrid};
use crate::dynamics::{flow_point, integrate, DynamicsError, IntegratorConfig};
use crate::hamiltonians::{HamiltonianSystem, PhaseSpacePoint};
use crate::quadrature::composite_gl5;

/// Which shell the section points are located on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SectionSide {
    /// Points of `H = E` whose forward image `Φ^{0→τ}` lies on `H = E′`.
    #[default]
    E,
    /// Points of `H = E′` whose backward image `Φ^{τ→0}` lies on `H = E`.
    EPrime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SectionConfig {
    pub integrator: IntegratorConfig,
    /// Uniform time samples per shell used to bracket crossings.
    pub shell_samples: usize,
    /// `q` interval scanned along `p = 0` for shell components.
    pub q_range: (f64, f64),
    /// `|bracket|` below this flags a tangency.
    pub tangency_threshold: f64,
    /// Panels of the five-point rule per bin in the shell energy.
    pub bin_panels: usize,
}

impl Default for SectionConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig::with_tol(1e-11).without_states(),
            shell_samples: 256,
            q_range: (-10.0, 10.0),
            tangency_threshold: 1e-6,
            bin_panels: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionPoint {
    /// Point on the shell of the chosen side.
    pub x: PhaseSpacePoint,
    /// Its driven image on the other shell.
    pub image: PhaseSpacePoint,
    pub component: usize,
    /// Time along the shell component from its sample origin.
    pub shell_time: f64,
    /// `ẋ(image) ∧ [Γ·ẋ(x)]`.
    pub bracket: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionValue {
    pub value: f64,
    pub points: Vec<SectionPoint>,
    /// Section point with the smallest bracket, when that bracket is below the tangency threshold.
    pub divergent: Option<PhaseSpacePoint>,
}

fn drive(
    driving: &HamiltonianSystem,
    x: &[f64],
    tau: f64,
    side: SectionSide,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>, DynamicsError> {
    match side {
        SectionSide::E => flow_point(driving, x, 0.0, tau, cfg),
        SectionSide::EPrime => flow_point(driving, x, tau, 0.0, cfg),
    }
}

/// `H` of the driven image at each shell sample.
pub(super) fn driven_energies(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    shell: &Shell,
    tau: f64,
    side: SectionSide,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>, DynamicsError> {
    shell
        .samples
        .iter()
        .map(|x| Ok(inner.value(&drive(driving, x.as_slice(), tau, side, cfg)?, 0.0)))
        .collect()
}

/// Times along `shell` where the driven energy crosses `level`, one per bracketing sample interval.
pub(super) fn crossing_times(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    shell: &Shell,
    values: &[f64],
    level: f64,
    tau: f64,
    side: SectionSide,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>, DynamicsError> {
    let n = values.len();
    let dt = shell.dt();
    let mut out = Vec::new();
    for k in 0..n {
        let (a, b) = (values[k] - level, values[(k + 1) % n] - level);
        if (a < 0.0) == (b < 0.0) {
            continue;
        }
        let sign = if a < 0.0 { 1.0 } else { -1.0 };
        let base = shell.samples[k].as_slice();
        let g = |s: f64| -> Result<f64, DynamicsError> {
            let x = flow_point(inner, base, 0.0, s, cfg)?;
            Ok(sign * (inner.value(&drive(driving, &x, tau, side, cfg)?, 0.0) - level))
        };
        let s = refine_crossing(g, sign * a, sign * b, dt)?;
        out.push(k as f64 * dt + s);
    }
    Ok(out)
}

fn wedge_bracket(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    tau: f64,
    side: SectionSide,
    cfg: &IntegratorConfig,
) -> Result<(PhaseSpacePoint, f64), DynamicsError> {
    let seg = match side {
        SectionSide::E => integrate(driving, x, 0.0, tau, cfg)?,
        SectionSide::EPrime => integrate(driving, x, tau, 0.0, cfg)?,
    };
    let sym = inner.symplectic();
    let v0 = sym.apply(&inner.gradient(x.as_slice(), 0.0));
    let v1 = sym.apply(&inner.gradient(seg.end.as_slice(), 0.0));
    let transported = &seg.monodromy * v0;
    let w = sym.wedge(v1.as_slice(), transported.as_slice());
    Ok((seg.end, w))
}

/// All section points for `(E, E′, τ)` on the chosen side.
pub fn section_points(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    e: f64,
    e_prime: f64,
    tau: f64,
    side: SectionSide,
    cfg: &SectionConfig,
) -> Result<Vec<SectionPoint>, DensityError> {
    let (shell_energy, level) = match side {
        SectionSide::E => (e, e_prime),
        SectionSide::EPrime => (e_prime, e),
    };
    let integ = cfg.integrator.without_states();
    let shells = shell_components(inner, shell_energy, cfg.q_range, cfg.shell_samples, &integ)?;
    let mut points = Vec::new();
    for (component, shell) in shells.iter().enumerate() {
        let values = driven_energies(inner, driving, shell, tau, side, &integ)?;
        for t in crossing_times(inner, driving, shell, &values, level, tau, side, &integ)? {
            let x = PhaseSpacePoint::new(shell.point_at(inner, t, &integ)?);
            let (image, bracket) = wedge_bracket(inner, driving, &x, tau, side, &integ)?;
            points.push(SectionPoint {
                x,
                image,
                component,
                shell_time: t,
                bracket,
            });
        }
    }
    Ok(points)
}

/// `P₀₀(E, E′|τ) = (2πħ)^{-1} Σ |ẋ(x̃) ∧ Γ·ẋ(x)|^{-1}` over the section points.
///
/// Zero when the shells do not intersect. A tangency is flagged, not hidden:
/// the finite sum is still returned together with the offending point.
pub fn classical_density_section(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    e: f64,
    e_prime: f64,
    tau: f64,
    hbar: f64,
    side: SectionSide,
    cfg: &SectionConfig,
) -> Result<SectionValue, DensityError> {
    if inner.dof() != 1 {
        return Err(DensityError::NotOneDof { dof: inner.dof() });
    }
    let points = section_points(inner, driving, e, e_prime, tau, side, cfg)?;
    let norm = 2.0 * std::f64::consts::PI * hbar;
    let value = points.iter().map(|p| 1.0 / p.bracket.abs()).sum::<f64>() / norm;
    let divergent = points
        .iter()
        .min_by(|a, b| a.bracket.abs().total_cmp(&b.bracket.abs()))
        .filter(|p| p.bracket.abs() < cfg.tangency_threshold)
        .map(|p| p.x.clone());
    Ok(SectionValue {
        value,
        points,
        divergent,
    })
}

/// Time spent by `shell` where the driven energy lies below `level`.
fn sublevel_time(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    shell: &Shell,
    values: &[f64],
    level: f64,
    tau: f64,
    cfg: &IntegratorConfig,
) -> Result<f64, DynamicsError> {
    let crossings = crossing_times(inner, driving, shell, values, level, tau, SectionSide::E, cfg)?;
    if crossings.is_empty() {
        return Ok(if values[0] < level { shell.period } else { 0.0 });
    }
    let dt = shell.dt();
    let n = values.len();
    let mut total = 0.0;
    for (i, &t0) in crossings.iter().enumerate() {
        let t1 = if i + 1 < crossings.len() {
            crossings[i + 1]
        } else {
            crossings[0] + shell.period
        };
        let k = ((t0 / dt).floor() as usize + 1) % n;
        if values[k] < level {
            total += t1 - t0;
        }
    }
    Ok(total)
}

/// Cell averages of `P₀₀` over the grid cells, integrated exactly in `E′`
/// (time fractions of each `E`-shell) and by Gauss–Legendre in `E`.
pub fn section_bin_masses(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    grid: &TransitionGrid,
    cfg: &SectionConfig,
) -> Result<Matrix, DensityError> {
    if inner.dof() != 1 {
        return Err(DensityError::NotOneDof { dof: inner.dof() });
    }
    let integ = cfg.integrator.without_states();
    let e_edges = grid.e_edges();
    let p_edges = grid.e_prime_edges();
    let (ne, np) = grid.shape();
    let norm = 2.0 * std::f64::consts::PI * grid.hbar;
    let mut out = Matrix::zeros(ne, np);
    for i in 0..ne {
        let (lo, hi) = (e_edges[i], e_edges[i + 1]);
        for (e, w) in composite_gl5(lo, hi, cfg.bin_panels) {
            let shells = match shell_components(inner, e, cfg.q_range, cfg.shell_samples, &integ) {
                Ok(s) => s,
                Err(DensityError::ShellNotFound { .. }) => continue,
                Err(err) => return Err(err),
            };
            for shell in &shells {
                let values = driven_energies(inner, driving, shell, grid.tau, SectionSide::E, &integ)?;
                let below: Vec<f64> = p_edges
                    .iter()
                    .map(|&c| sublevel_time(inner, driving, shell, &values, c, grid.tau, &integ))
                    .collect::<Result<_, _>>()?;
                for j in 0..np {
                    out[(i, j)] += w * (below[j + 1] - below[j]);
                }
            }
        }
        for j in 0..np {
            out[(i, j)] /= norm * (hi - lo) * (p_edges[j + 1] - p_edges[j]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothedSectionConfig {
    pub section: SectionConfig,
    /// Width of the `E` bins near the grid energies, in units of `ε`.
    pub resolution: f64,
}

impl Default for SmoothedSectionConfig {
    fn default() -> Self {
        Self {
            section: SectionConfig {
                shell_samples: 2048,
                ..SectionConfig::default()
            },
            resolution: 0.05,
        }
    }
}

/// `∫_lo^hi L_ε(x − c) dx`.
fn lorentzian_mass(epsilon: f64, c: f64, lo: f64, hi: f64) -> f64 {
    (((hi - c) / epsilon).atan() - ((lo - c) / epsilon).atan()) / std::f64::consts::PI
}

/// `Σ_k ∫ L_ε(c − f(s)) ds` over the sample intervals of a periodic profile
/// `f`, linear between samples spaced `dt`, for every target `c`. Only the
/// part of `f` inside `window` contributes.
pub(super) fn smoothed_profile(
    values: &[f64],
    dt: f64,
    window: (f64, f64),
    epsilon: f64,
    targets: &[f64],
    out: &mut [f64],
) {
    let n = values.len();
    let (lo, hi) = window;
    for k in 0..n {
        let (a, b) = (values[k], values[(k + 1) % n]);
        let (u, v) = if a <= b { (a, b) } else { (b, a) };
        if v < lo || u > hi {
            continue;
        }
        if v - u <= 1e-12 * (1.0 + u.abs()) {
            for (o, &c) in out.iter_mut().zip(targets) {
                *o += dt * super::lorentzian(epsilon, c - u);
            }
            continue;
        }
        let (u0, v0) = (u.max(lo), v.min(hi));
        let rate = dt / (v - u);
        for (o, &c) in out.iter_mut().zip(targets) {
            *o += rate * lorentzian_mass(epsilon, c, u0, v0);
        }
    }
}

/// Bin edges over `[lo, hi]` with width `resolution·max(ε, d)`, where `d` is
/// the distance to the nearest of `centres`.
pub(super) fn adaptive_edges(lo: f64, hi: f64, centres: &[f64], epsilon: f64, resolution: f64) -> Vec<f64> {
    let mut edges = vec![lo];
    let mut x = lo;
    while x < hi {
        let d = centres.iter().map(|c| (x - c).abs()).fold(f64::INFINITY, f64::min);
        let step = resolution * epsilon.max(d);
        x = if x + 1.5 * step >= hi { hi } else { x + step };
        edges.push(x);
    }
    edges
}

/// Lorentzian-smoothed classical density evaluated at the grid points, from
/// the section form. Deterministic: both energies are integrated over
/// `window`. Along each `E`-shell the driven energy is taken linear between
/// samples and the `E′` kernel is integrated exactly; the `E` integral uses
/// bins of width `resolution·ε` near the grid energies, widening away from them.
pub fn classical_density_smoothed_section(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    grid: &TransitionGrid,
    window: (f64, f64),
    cfg: &SmoothedSectionConfig,
) -> Result<Matrix, DensityError> {
    if inner.dof() != 1 {
        return Err(DensityError::NotOneDof { dof: inner.dof() });
    }
    grid.validate()?;
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(DensityError::InvalidGrid(format!("smoothing window ({lo}, {hi}) is empty")));
    }
    if !(cfg.resolution.is_finite() && cfg.resolution > 0.0) {
        return Err(DensityError::InvalidGrid("fine resolution must be positive".into()));
    }
    let eps = grid.epsilon;
    let centres: Vec<f64> = grid.e_values.iter().chain(&grid.e_prime_values).copied().collect();
    let e_edges = adaptive_edges(lo, hi, &centres, eps, cfg.resolution);
    let integ = cfg.section.integrator.without_states();
    let (ne, np) = grid.shape();
    let mut out = Matrix::zeros(ne, np);
    let mut row = vec![0.0; np];
    for w in e_edges.windows(2) {
        let e = 0.5 * (w[0] + w[1]);
        let shells = match shell_components(inner, e, cfg.section.q_range, cfg.section.shell_samples, &integ) {
            Ok(s) => s,
            Err(DensityError::ShellNotFound { .. }) => continue,
            Err(err) => return Err(err),
        };
        row.iter_mut().for_each(|v| *v = 0.0);
        for shell in &shells {
            let values = driven_energies(inner, driving, shell, grid.tau, SectionSide::E, &integ)?;
            smoothed_profile(&values, shell.dt(), window, eps, &grid.e_prime_values, &mut row);
        }
        for i in 0..ne {
            let k = lorentzian_mass(eps, grid.e_values[i], w[0], w[1]);
            for j in 0..np {
                out[(i, j)] += k * row[j];
            }
        }
    }
    Ok(out / (2.0 * std::f64::consts::PI * grid.hbar))
}
