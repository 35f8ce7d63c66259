//! Oscillatory transition density from compound-orbit families and its sum
//! with the classical background.
//!
//! Each family `(k, k′)` contributes, cell by cell,
//!
//! ```text
//! s·(2^N/πħ)·e^{−ε(|t|+|t′|)/ħ}·|det ∂(t,t′)/∂(E,E′)|^{1/2}·|det(I−𝐌)|^{−1/2}·cos(𝕊/ħ + φ + σ)
//! ```
//!
//! with `s` the amplitude scale, `φ` the cell phase index (a quarter turn for
//! each negative determinant) and `σ` a constant per family.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::anticaustic::Anticaustic;
use super::section::{crossing_times, driven_energies};
use super::shell::{shell_components, Shell};
use super::{DensityError, Matrix, SectionConfig, SectionSide, TransitionGrid};
use crate::cco::BranchTable;
use crate::dynamics::{integrate, IntegratorConfig};
use crate::hamiltonians::{HamiltonianSystem, PhaseSpacePoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SectionFamilyConfig {
    pub section: SectionConfig,
    /// Step of the centred energy differences.
    pub energy_step: f64,
    /// Windings are enumerated while `ε(|t|+|t′|) ≤ cutoff·ħ`.
    pub cutoff: f64,
    pub max_winding: i32,
    /// Cells with a section bracket below this are masked as near-anticaustic.
    pub anticaustic_bracket: f64,
}

impl Default for SectionFamilyConfig {
    fn default() -> Self {
        Self {
            section: SectionConfig::default(),
            energy_step: 1e-5,
            cutoff: 20.0,
            max_winding: 200,
            anticaustic_bracket: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Resolved,
    /// The shells do not intersect.
    NoSection,
    NearAnticaustic,
    /// Section topology other than one pair of points on one component each.
    Unsupported,
    Failed,
}

/// One family member at one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCell {
    pub t: f64,
    pub t_prime: f64,
    /// Stationary action `𝕊(E, E′|τ)`.
    pub action: f64,
    pub det_i_minus_m: f64,
    /// `det ∂(t, t′)/∂(E, E′)`.
    pub jacobian_det: f64,
    pub closure_residual: f64,
    pub x_start: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionFamily {
    /// Extra windings `(k, k′)` of the two inner legs.
    pub winding: (i32, i32),
    /// Row-major in `E`.
    pub cells: Vec<Option<FamilyCell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyGrid {
    pub grid: TransitionGrid,
    pub dof: usize,
    pub families: Vec<SectionFamily>,
    pub status: Vec<CellStatus>,
    pub messages: Vec<String>,
}

impl FamilyGrid {
    pub fn family(&self, winding: (i32, i32)) -> Option<&SectionFamily> {
        self.families.iter().find(|f| f.winding == winding)
    }

    /// Energy-targeted branches from continuation, one family each.
    pub fn from_branches(grid: &TransitionGrid, dof: usize, tables: &[BranchTable]) -> Self {
        let (ne, np) = grid.shape();
        let mut status = vec![CellStatus::NoSection; ne * np];
        let families = tables
            .iter()
            .map(|table| {
                let cells = (0..ne * np)
                    .map(|idx| {
                        let (i, j) = (idx / np, idx % np);
                        let cell = find_cell(table, grid.e_values[i], grid.e_prime_values[j])?;
                        status[idx] = CellStatus::Resolved;
                        Some(FamilyCell {
                            t: cell.t,
                            t_prime: cell.t_prime,
                            action: cell.action,
                            det_i_minus_m: cell.det_i_minus_m,
                            jacobian_det: 1.0 / cell.energy_jacobian_det,
                            closure_residual: 0.0,
                            x_start: cell.x_start.clone(),
                        })
                    })
                    .collect();
                SectionFamily {
                    winding: table.winding,
                    cells,
                }
            })
            .collect();
        Self {
            grid: grid.clone(),
            dof,
            families,
            status,
            messages: Vec::new(),
        }
    }
}

fn find_cell(table: &BranchTable, e: f64, ep: f64) -> Option<&crate::cco::BranchCell> {
    let i = table.e_values.iter().position(|v| (v - e).abs() < 1e-12)?;
    let j = table.e_prime_values.iter().position(|v| (v - ep).abs() < 1e-12)?;
    table.get(i, j)
}

struct SideData {
    shells: Vec<Shell>,
    values: Vec<Vec<f64>>,
}

fn side_data(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    energy: f64,
    tau: f64,
    side: SectionSide,
    cfg: &SectionConfig,
) -> Result<Option<SideData>, DensityError> {
    let integ = cfg.integrator.without_states();
    let shells = match shell_components(inner, energy, cfg.q_range, cfg.shell_samples, &integ) {
        Ok(s) => s,
        Err(DensityError::ShellNotFound { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let values = shells
        .iter()
        .map(|s| driven_energies(inner, driving, s, tau, side, &integ))
        .collect::<Result<_, _>>()?;
    Ok(Some(SideData { shells, values }))
}

struct Crossing {
    component: usize,
    time: f64,
    x: Vec<f64>,
}

fn crossings(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    data: &SideData,
    level: f64,
    tau: f64,
    side: SectionSide,
    integ: &IntegratorConfig,
) -> Result<Vec<Crossing>, DensityError> {
    let mut out = Vec::new();
    for (component, (shell, values)) in data.shells.iter().zip(&data.values).enumerate() {
        for time in crossing_times(inner, driving, shell, values, level, tau, side, integ)? {
            let x = shell.point_at(inner, time, integ)?;
            out.push(Crossing { component, time, x });
        }
    }
    Ok(out)
}

struct Geometry {
    a1: Vec<f64>,
    t0: f64,
    tp0: f64,
    period: f64,
    period_prime: f64,
}

enum Outcome {
    Resolved(Geometry),
    NoSection,
    NearAnticaustic,
    Unsupported(String),
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Section points `a₁, a₂` on the `E`-shell, ordered by the sign of their
/// bracket, their images `b₁, b₂`, and the inner times `a₁ → a₂`, `b₁ → b₂`.
#[allow(clippy::too_many_arguments)]
fn geometry(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    de: &SideData,
    dp: &SideData,
    e_prime: f64,
    e: f64,
    tau: f64,
    cfg: &SectionFamilyConfig,
) -> Result<Outcome, DensityError> {
    let integ = cfg.section.integrator.without_states();
    let a = crossings(inner, driving, de, e_prime, tau, SectionSide::E, &integ)?;
    if a.is_empty() {
        return Ok(Outcome::NoSection);
    }
    let b = crossings(inner, driving, dp, e, tau, SectionSide::EPrime, &integ)?;
    if a.len() != 2 || b.len() != 2 {
        return Ok(Outcome::Unsupported(format!(
            "{} points on the E-shell and {} on the E'-shell",
            a.len(),
            b.len()
        )));
    }
    if a[0].component != a[1].component || b[0].component != b[1].component {
        return Ok(Outcome::Unsupported("section points on different components".into()));
    }
    let sym = inner.symplectic();
    let mut brackets = [0.0; 2];
    let mut images = [Vec::new(), Vec::new()];
    for k in 0..2 {
        let seg = integrate(driving, &PhaseSpacePoint::new(a[k].x.clone()), 0.0, tau, &integ)?;
        let v0 = sym.apply(&inner.gradient(&a[k].x, 0.0));
        let v1 = sym.apply(&inner.gradient(seg.end.as_slice(), 0.0));
        brackets[k] = sym.wedge(v1.as_slice(), (&seg.monodromy * v0).as_slice());
        images[k] = seg.end.into_vec();
    }
    if (brackets[0] > 0.0) == (brackets[1] > 0.0) {
        return Ok(Outcome::Unsupported("section brackets share a sign".into()));
    }
    if brackets[0].abs().min(brackets[1].abs()) < cfg.anticaustic_bracket {
        return Ok(Outcome::NearAnticaustic);
    }
    let (plus, minus) = if brackets[0] > 0.0 { (0, 1) } else { (1, 0) };
    let (bp, bm) = if dist(&images[plus], &b[0].x) <= dist(&images[plus], &b[1].x) {
        (0, 1)
    } else {
        (1, 0)
    };
    let scale = 1.0 + images[plus].iter().map(|v| v.abs()).fold(0.0, f64::max);
    if dist(&images[plus], &b[bp].x) > 1e-6 * scale || dist(&images[minus], &b[bm].x) > 1e-6 * scale {
        return Ok(Outcome::Unsupported("driven images do not match the E'-section".into()));
    }
    let period = de.shells[a[plus].component].period;
    let period_prime = dp.shells[b[bp].component].period;
    Ok(Outcome::Resolved(Geometry {
        a1: a[plus].x.clone(),
        t0: (a[minus].time - a[plus].time).rem_euclid(period),
        tp0: (b[bm].time - b[bp].time).rem_euclid(period_prime),
        period,
        period_prime,
    }))
}

fn wrap_near(v: f64, base: f64, period: f64) -> f64 {
    v + ((base - v) / period).round() * period
}

/// Legs of the zero-winding orbit and the loop monodromies at its corners.
struct Pieces {
    e: f64,
    e_prime: f64,
    action_base: f64,
    m1: DMatrix<f64>,
    m2: DMatrix<f64>,
    m3: DMatrix<f64>,
    m4: DMatrix<f64>,
    loop_e: DMatrix<f64>,
    loop_e_inv: DMatrix<f64>,
    loop_e_action: f64,
    loop_p: DMatrix<f64>,
    loop_p_inv: DMatrix<f64>,
    loop_p_action: f64,
    closure: f64,
}

fn pieces(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    g: &Geometry,
    tau: f64,
    integ: &IntegratorConfig,
) -> Result<Pieces, DensityError> {
    let x = PhaseSpacePoint::new(g.a1.clone());
    let s1 = integrate(driving, &x, 0.0, tau, integ)?;
    let s2 = integrate(inner, &s1.end, 0.0, g.tp0, integ)?;
    let s3 = integrate(driving, &s2.end, tau, 0.0, integ)?;
    let s4 = integrate(inner, &s3.end, 0.0, -g.t0, integ)?;
    let lp = integrate(inner, &s2.end, 0.0, g.period_prime, integ)?;
    let le = integrate(inner, &s4.end, 0.0, g.period, integ)?;
    let inverse = |m: &DMatrix<f64>| {
        m.clone()
            .try_inverse()
            .ok_or_else(|| DensityError::Config("singular loop monodromy".into()))
    };
    Ok(Pieces {
        e: s4.energy_start,
        e_prime: s2.energy_start,
        action_base: s1.action + s2.action + s3.action + s4.action,
        closure: s4.end.distance(&x),
        loop_e_inv: inverse(&le.monodromy)?,
        loop_p_inv: inverse(&lp.monodromy)?,
        loop_e: le.monodromy,
        loop_e_action: le.action,
        loop_p: lp.monodromy,
        loop_p_action: lp.action,
        m1: s1.monodromy,
        m2: s2.monodromy,
        m3: s3.monodromy,
        m4: s4.monodromy,
    })
}

fn power(m: &DMatrix<f64>, inv: &DMatrix<f64>, k: i32) -> DMatrix<f64> {
    let base = if k >= 0 { m } else { inv };
    let mut out = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..k.unsigned_abs() {
        out = base * out;
    }
    out
}

impl Pieces {
    /// Stationary action and `det(I − 𝐌)` with `k` extra backward loops on the
    /// `E`-leg and `k′` extra forward loops on the `E′`-leg.
    fn winding(&self, k: i32, kp: i32, t: f64, tp: f64) -> (f64, f64) {
        let m4 = power(&self.loop_e_inv, &self.loop_e, k) * &self.m4;
        let m2 = power(&self.loop_p, &self.loop_p_inv, kp) * &self.m2;
        let m = m4 * &self.m3 * m2 * &self.m1;
        let d = m.nrows();
        let det = (DMatrix::<f64>::identity(d, d) - m).determinant();
        let total = self.action_base - k as f64 * self.loop_e_action + kp as f64 * self.loop_p_action;
        (total + self.e_prime * tp - self.e * t, det)
    }
}

/// Compound-orbit families over the grid for one degree of freedom, built
/// directly from the section: for each cell the two section points fix the
/// orbit, and every winding `(k, k′)` inside the damping cutoff is a family.
///
/// Only the pair of distinct section points forms a family. The
/// single-point classes wind on one periodic orbit and are left out.
pub fn section_families(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    grid: &TransitionGrid,
    cfg: &SectionFamilyConfig,
) -> Result<FamilyGrid, DensityError> {
    if inner.dof() != 1 {
        return Err(DensityError::NotOneDof { dof: inner.dof() });
    }
    grid.validate()?;
    let tau = grid.tau;
    let h = cfg.energy_step;
    let integ = cfg.section.integrator.without_states();
    let side = |energy: f64, s: SectionSide| side_data(inner, driving, energy, tau, s, &cfg.section);
    let mut de = Vec::new();
    for &e in &grid.e_values {
        de.push([side(e, SectionSide::E)?, side(e - h, SectionSide::E)?, side(e + h, SectionSide::E)?]);
    }
    let mut dp = Vec::new();
    for &ep in &grid.e_prime_values {
        dp.push([
            side(ep, SectionSide::EPrime)?,
            side(ep - h, SectionSide::EPrime)?,
            side(ep + h, SectionSide::EPrime)?,
        ]);
    }
    let (ne, np) = grid.shape();
    let reach = cfg.cutoff * grid.hbar / grid.epsilon;
    let mut status = vec![CellStatus::NoSection; ne * np];
    let mut messages = Vec::new();
    let mut families: Vec<SectionFamily> = Vec::new();
    for i in 0..ne {
        for j in 0..np {
            let idx = i * np + j;
            let (e, ep) = (grid.e_values[i], grid.e_prime_values[j]);
            let [Some(d0), Some(dm), Some(dpl)] = &de[i] else { continue };
            let [Some(p0), Some(pm), Some(ppl)] = &dp[j] else { continue };
            let base = match geometry(inner, driving, d0, p0, ep, e, tau, cfg)? {
                Outcome::Resolved(g) => g,
                Outcome::NoSection => continue,
                Outcome::NearAnticaustic => {
                    status[idx] = CellStatus::NearAnticaustic;
                    continue;
                }
                Outcome::Unsupported(msg) => {
                    status[idx] = CellStatus::Unsupported;
                    messages.push(format!("cell ({e}, {ep}): {msg}"));
                    continue;
                }
            };
            let neighbours = [
                geometry(inner, driving, dpl, p0, ep, e + h, tau, cfg)?,
                geometry(inner, driving, dm, p0, ep, e - h, tau, cfg)?,
                geometry(inner, driving, d0, ppl, ep + h, e, tau, cfg)?,
                geometry(inner, driving, d0, pm, ep - h, e, tau, cfg)?,
            ];
            let resolved: Vec<&Geometry> = neighbours
                .iter()
                .filter_map(|o| match o {
                    Outcome::Resolved(g) => Some(g),
                    _ => None,
                })
                .collect();
            if resolved.len() != 4 {
                status[idx] = CellStatus::NearAnticaustic;
                continue;
            }
            let [ge_p, ge_m, gp_p, gp_m] = [resolved[0], resolved[1], resolved[2], resolved[3]];
            let t0_de = (wrap_near(ge_p.t0, base.t0, ge_p.period) - wrap_near(ge_m.t0, base.t0, ge_m.period)) / (2.0 * h);
            let t0_dp = (wrap_near(gp_p.t0, base.t0, gp_p.period) - wrap_near(gp_m.t0, base.t0, gp_m.period)) / (2.0 * h);
            let tp0_de = (wrap_near(ge_p.tp0, base.tp0, ge_p.period_prime)
                - wrap_near(ge_m.tp0, base.tp0, ge_m.period_prime))
                / (2.0 * h);
            let tp0_dp = (wrap_near(gp_p.tp0, base.tp0, gp_p.period_prime)
                - wrap_near(gp_m.tp0, base.tp0, gp_m.period_prime))
                / (2.0 * h);
            let period_de = (ge_p.period - ge_m.period) / (2.0 * h);
            let period_dp = (gp_p.period_prime - gp_m.period_prime) / (2.0 * h);

            let legs = match pieces(inner, driving, &base, tau, &integ) {
                Ok(p) => p,
                Err(err) => {
                    status[idx] = CellStatus::Failed;
                    messages.push(format!("cell ({e}, {ep}): {err}"));
                    continue;
                }
            };
            status[idx] = CellStatus::Resolved;
            let k_lo = (((-reach - base.t0) / base.period).ceil() as i32).max(-cfg.max_winding);
            let k_hi = (((reach - base.t0) / base.period).floor() as i32).min(cfg.max_winding);
            for k in k_lo..=k_hi {
                let t = base.t0 + k as f64 * base.period;
                let rest = reach - t.abs();
                let kp_lo = (((-rest - base.tp0) / base.period_prime).ceil() as i32).max(-cfg.max_winding);
                let kp_hi = (((rest - base.tp0) / base.period_prime).floor() as i32).min(cfg.max_winding);
                for kp in kp_lo..=kp_hi {
                    let tp = base.tp0 + kp as f64 * base.period_prime;
                    let (action, det) = legs.winding(k, kp, t, tp);
                    let jac = (t0_de + k as f64 * period_de) * (tp0_dp + kp as f64 * period_dp)
                        - t0_dp * tp0_de;
                    let cell = FamilyCell {
                        t,
                        t_prime: tp,
                        action,
                        det_i_minus_m: det,
                        jacobian_det: jac,
                        closure_residual: legs.closure,
                        x_start: base.a1.clone(),
                    };
                    let pos = match families.iter().position(|f| f.winding == (k, kp)) {
                        Some(p) => p,
                        None => {
                            families.push(SectionFamily {
                                winding: (k, kp),
                                cells: vec![None; ne * np],
                            });
                            families.len() - 1
                        }
                    };
                    families[pos].cells[idx] = Some(cell);
                }
            }
        }
    }
    families.sort_by_key(|f| f.winding);
    Ok(FamilyGrid {
        grid: grid.clone(),
        dof: inner.dof(),
        families,
        status,
        messages,
    })
}

/// Constant phase of one family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilySigma {
    pub winding: (i32, i32),
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScConfig {
    /// Factor on the prefactor `2^N/(πħ)`; `None` means `2^{-N}`.
    pub amplitude_scale: Option<f64>,
    /// Terms with `ε(|t|+|t′|) > cutoff·ħ` are dropped.
    pub cutoff: f64,
    /// Cells with `|det(I − 𝐌)|` below this are masked.
    pub caustic_threshold: f64,
    pub sigma: Vec<FamilySigma>,
    pub default_sigma: f64,
}

impl Default for ScConfig {
    fn default() -> Self {
        Self {
            amplitude_scale: None,
            cutoff: 20.0,
            caustic_threshold: 1e-6,
            sigma: Vec::new(),
            default_sigma: 0.0,
        }
    }
}

impl ScConfig {
    pub fn sigma_for(&self, winding: (i32, i32)) -> f64 {
        self.sigma
            .iter()
            .find(|s| s.winding == winding)
            .map_or(self.default_sigma, |s| s.sigma)
    }

    pub fn scale(&self, dof: usize) -> f64 {
        self.amplitude_scale.unwrap_or(0.5f64.powi(dof as i32))
    }
}

/// Contribution of one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillatoryTerm {
    pub winding: (i32, i32),
    pub sigma: f64,
    /// Damped amplitude, zero where the family is absent, cut off or masked.
    pub amplitude: Matrix,
    /// `𝕊/ħ` plus the cell phase index, without `σ`.
    pub phase: Matrix,
    pub values: Matrix,
    /// Caustic or near-anticaustic cells, row-major.
    pub mask: Vec<bool>,
}

impl OscillatoryTerm {
    pub fn with_sigma(&self, sigma: f64) -> OscillatoryTerm {
        let values = self.amplitude.zip_map(&self.phase, |a, p| a * (p + sigma).cos());
        OscillatoryTerm {
            sigma,
            values,
            ..self.clone()
        }
    }

    pub fn masked_cells(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Evaluates every family on its grid.
pub fn sc_density(families: &FamilyGrid, cfg: &ScConfig) -> Result<Vec<OscillatoryTerm>, DensityError> {
    let grid = &families.grid;
    grid.validate()?;
    let (ne, np) = grid.shape();
    let prefactor = cfg.scale(families.dof) * 2f64.powi(families.dof as i32) / (PI * grid.hbar);
    let mut out = Vec::new();
    for family in &families.families {
        if family.cells.len() != ne * np {
            return Err(DensityError::GridMismatch);
        }
        let mut amplitude = Matrix::zeros(ne, np);
        let mut phase = Matrix::zeros(ne, np);
        let mut mask = vec![false; ne * np];
        let mut any = false;
        for (idx, cell) in family.cells.iter().enumerate() {
            let (i, j) = (idx / np, idx % np);
            if families.status[idx] == CellStatus::NearAnticaustic {
                mask[idx] = true;
                continue;
            }
            let Some(c) = cell else { continue };
            let length = c.t.abs() + c.t_prime.abs();
            if grid.epsilon * length > cfg.cutoff * grid.hbar {
                continue;
            }
            if c.det_i_minus_m.abs() < cfg.caustic_threshold {
                mask[idx] = true;
                continue;
            }
            any = true;
            amplitude[(i, j)] = prefactor
                * (-grid.epsilon * length / grid.hbar).exp()
                * c.jacobian_det.abs().sqrt()
                / c.det_i_minus_m.abs().sqrt();
            let index = (c.det_i_minus_m < 0.0) as u8 + (c.jacobian_det < 0.0) as u8;
            phase[(i, j)] = c.action / grid.hbar + 0.5 * PI * index as f64;
        }
        if !any {
            continue;
        }
        let sigma = cfg.sigma_for(family.winding);
        let values = amplitude.zip_map(&phase, |a, p| a * (p + sigma).cos());
        out.push(OscillatoryTerm {
            winding: family.winding,
            sigma,
            amplitude,
            phase,
            values,
            mask,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaCalibration {
    pub sigmas: Vec<FamilySigma>,
    /// L² distance of the classical background alone from the target.
    pub l2_classical: f64,
    /// With every `σ` at its starting value.
    pub l2_initial: f64,
    pub l2_calibrated: f64,
    pub sweeps: usize,
}

impl SigmaCalibration {
    pub fn apply(&self, terms: &[OscillatoryTerm]) -> Vec<OscillatoryTerm> {
        terms
            .iter()
            .map(|t| {
                let s = self
                    .sigmas
                    .iter()
                    .find(|s| s.winding == t.winding)
                    .map_or(t.sigma, |s| s.sigma);
                t.with_sigma(s)
            })
            .collect()
    }
}

/// Picks one `σ ∈ {mπ/4}` per family by coordinate descent on the L²
/// distance between `classical + Σ terms` and `target` over the given rows.
/// Families whose amplitude on those rows is below `1e-3` of the largest keep
/// their current `σ`.
pub fn calibrate_sigma(
    terms: &[OscillatoryTerm],
    classical: &Matrix,
    target: &Matrix,
    rows: &[usize],
) -> Result<SigmaCalibration, DensityError> {
    if classical.shape() != target.shape() || terms.iter().any(|t| t.values.shape() != target.shape()) {
        return Err(DensityError::GridMismatch);
    }
    let np = target.ncols();
    let cells: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&i| (0..np).map(move |j| (i, j)))
        .filter(|&(i, j)| i < target.nrows() && !terms.iter().any(|t| t.mask[i * np + j]))
        .collect();
    let mut sigmas: Vec<f64> = terms.iter().map(|t| t.sigma).collect();
    let term_value = |t: &OscillatoryTerm, s: f64, (i, j): (usize, usize)| {
        t.amplitude[(i, j)] * (t.phase[(i, j)] + s).cos()
    };
    let mut residual: Vec<f64> = cells
        .iter()
        .map(|&c| {
            let osc: f64 = terms.iter().zip(&sigmas).map(|(t, s)| term_value(t, *s, c)).sum();
            classical[c] + osc - target[c]
        })
        .collect();
    let l2 = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let l2_initial = l2(&residual);
    let l2_classical = l2(&cells.iter().map(|&c| classical[c] - target[c]).collect::<Vec<_>>());
    let peak: Vec<f64> = terms
        .iter()
        .map(|t| cells.iter().map(|&c| t.amplitude[c]).fold(0.0, f64::max))
        .collect();
    let top = peak.iter().copied().fold(0.0, f64::max);
    let mut sweeps = 0;
    for _ in 0..8 {
        sweeps += 1;
        let mut changed = false;
        for (f, t) in terms.iter().enumerate() {
            if peak[f] < 1e-3 * top || peak[f] == 0.0 {
                continue;
            }
            let current: Vec<f64> = cells.iter().map(|&c| term_value(t, sigmas[f], c)).collect();
            let mut best = (l2(&residual), sigmas[f]);
            for m in 0..8 {
                let s = m as f64 * PI / 4.0;
                let trial: f64 = cells
                    .iter()
                    .zip(&residual)
                    .zip(&current)
                    .map(|((&c, r), v)| (r - v + term_value(t, s, c)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if trial < best.0 * (1.0 - 1e-12) {
                    best = (trial, s);
                }
            }
            if best.1 != sigmas[f] {
                for ((&c, r), v) in cells.iter().zip(residual.iter_mut()).zip(&current) {
                    *r += term_value(t, best.1, c) - v;
                }
                sigmas[f] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(SigmaCalibration {
        sigmas: terms
            .iter()
            .zip(&sigmas)
            .map(|(t, s)| FamilySigma {
                winding: t.winding,
                sigma: *s,
            })
            .collect(),
        l2_classical,
        l2_initial,
        l2_calibrated: l2(&residual),
        sweeps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DensityDiagnostics {
    /// Cells where the total is negative.
    pub negative_cells: Vec<(usize, usize)>,
    pub most_negative: f64,
    pub masked_cells: usize,
    pub samples: Option<u64>,
    pub sigma: Vec<FamilySigma>,
    pub anticaustics: Vec<Anticaustic>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDensity {
    pub grid: TransitionGrid,
    pub classical: Matrix,
    pub classical_error: Matrix,
    pub oscillatory: Vec<OscillatoryTerm>,
    pub total: Matrix,
    /// Union of the family masks, row-major.
    pub mask: Vec<bool>,
    pub diagnostics: DensityDiagnostics,
}

/// Classical background plus every oscillatory term. Negative totals are
/// recorded, not clipped.
pub fn total_density(
    grid: &TransitionGrid,
    classical: Matrix,
    classical_error: Matrix,
    oscillatory: Vec<OscillatoryTerm>,
) -> Result<TransitionDensity, DensityError> {
    let shape = grid.shape();
    if classical.shape() != shape
        || classical_error.shape() != shape
        || oscillatory.iter().any(|t| t.values.shape() != shape)
    {
        return Err(DensityError::GridMismatch);
    }
    if classical.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(DensityError::Config(
            "classical background must be finite and non-negative".into(),
        ));
    }
    let mut total = classical.clone();
    let mut mask = vec![false; shape.0 * shape.1];
    for t in &oscillatory {
        total += &t.values;
        for (m, tm) in mask.iter_mut().zip(&t.mask) {
            *m |= tm;
        }
    }
    let mut diagnostics = DensityDiagnostics {
        masked_cells: mask.iter().filter(|m| **m).count(),
        sigma: oscillatory
            .iter()
            .map(|t| FamilySigma {
                winding: t.winding,
                sigma: t.sigma,
            })
            .collect(),
        ..Default::default()
    };
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            if total[(i, j)] < 0.0 {
                diagnostics.negative_cells.push((i, j));
                diagnostics.most_negative = diagnostics.most_negative.min(total[(i, j)]);
            }
        }
    }
    if !diagnostics.negative_cells.is_empty() {
        log::info!(
            "{} cells with negative total density (min {:e})",
            diagnostics.negative_cells.len(),
            diagnostics.most_negative
        );
    }
    Ok(TransitionDensity {
        grid: grid.clone(),
        classical,
        classical_error,
        oscillatory,
        total,
        mask,
        diagnostics,
    })
}
