//! Energies of compound orbits as functions of the inner times, and
//! energy-targeted orbits tabulated over an `(E, E′)` grid.

use std::collections::VecDeque;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::{close_cco, CCOFamily, CcoConfig, CcoError, CcoTimes, CompoundOrbit};
use crate::hamiltonians::HamiltonianSystem;

/// Central-difference `∂(E, E′)/∂(t, t′)` at fixed `τ`, closing neighbouring orbits.
pub fn energy_jacobian(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    orbit: &CompoundOrbit,
    h: f64,
    cfg: &CcoConfig,
) -> Result<Matrix2<f64>, CcoError> {
    let mut jac = Matrix2::zeros();
    for (col, (dt, dtp)) in [(h, 0.0), (0.0, h)].into_iter().enumerate() {
        let shift = |sign: f64| CcoTimes {
            t: orbit.times.t + sign * dt,
            t_prime: orbit.times.t_prime + sign * dtp,
            tau: orbit.times.tau,
        };
        let p = close_cco(inner, driving, &orbit.x_start, shift(1.0), cfg)?;
        let m = close_cco(inner, driving, &orbit.x_start, shift(-1.0), cfg)?;
        jac[(0, col)] = (p.energy - m.energy) / (2.0 * h);
        jac[(1, col)] = (p.energy_prime - m.energy_prime) / (2.0 * h);
    }
    Ok(jac)
}

/// `∂(t, t′)/∂(E, E′)` at member `index`, the inverse of [`energy_jacobian`].
pub fn family_jacobian(family: &CCOFamily, index: usize) -> Result<Matrix2<f64>, CcoError> {
    let orbit = family.members.get(index).ok_or(CcoError::EmptyFamily)?;
    let j = energy_jacobian(&family.inner, &family.driving, orbit, 1e-4, &family.config)?;
    let det = j.determinant();
    if det.abs() < 1e-12 {
        return Err(CcoError::CausticInEnergy { det });
    }
    j.try_inverse().ok_or(CcoError::CausticInEnergy { det })
}

/// Newton over `(t, t′)` at fixed `τ` for the orbit with energies `(e, e_prime)`.
/// Returns the orbit and the last energy Jacobian.
pub fn target_energies(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    orbit: &CompoundOrbit,
    e: f64,
    e_prime: f64,
    cfg: &CcoConfig,
) -> Result<(CompoundOrbit, Matrix2<f64>), CcoError> {
    let target = Vector2::new(e, e_prime);
    let mut current = orbit.clone();
    let residual = |o: &CompoundOrbit| target - Vector2::new(o.energy, o.energy_prime);
    let mut r = residual(&current);
    for _ in 0..40 {
        let j = energy_jacobian(inner, driving, &current, 1e-4, cfg)?;
        if r.amax() < 1e-11 {
            return Ok((current, j));
        }
        let det = j.determinant();
        if det.abs() < 1e-12 {
            return Err(CcoError::CausticInEnergy { det });
        }
        let step = j.try_inverse().ok_or(CcoError::CausticInEnergy { det })? * r;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let times = CcoTimes {
                t: current.times.t + lambda * step[0],
                t_prime: current.times.t_prime + lambda * step[1],
                tau: current.times.tau,
            };
            if let Ok(mut next) = close_cco(inner, driving, &current.x_start, times, cfg) {
                let rn = residual(&next);
                if rn.norm() < r.norm() {
                    next.winding = current.winding;
                    next.maslov_sigma = current.maslov_sigma;
                    current = next;
                    r = rn;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
        if r.amax() < 1e-11 {
            if lambda == 1.0 && step.amax() < 1e-6 {
                return Ok((current, j));
            }
            let j = energy_jacobian(inner, driving, &current, 1e-4, cfg)?;
            return Ok((current, j));
        }
    }
    Err(CcoError::EnergyTargetFailed { residual: r.amax() })
}

/// One energy-targeted compound orbit of a branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCell {
    pub t: f64,
    pub t_prime: f64,
    /// Stationary action `𝕊(E, E′|τ)`.
    pub action: f64,
    pub det_i_minus_m: f64,
    /// `det ∂(E, E′)/∂(t, t′)`.
    pub energy_jacobian_det: f64,
    /// Signed count of `det(I − 𝐌)` sign changes relative to the branch origin.
    pub caustic_count: i32,
    pub x_start: Vec<f64>,
}

/// Energy-targeted orbits of one branch over an `(E, E′)` grid, row-major in `E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchTable {
    pub e_values: Vec<f64>,
    pub e_prime_values: Vec<f64>,
    pub tau: f64,
    pub winding: (i32, i32),
    pub cells: Vec<Option<BranchCell>>,
}

impl BranchTable {
    pub fn get(&self, i: usize, j: usize) -> Option<&BranchCell> {
        self.cells[i * self.e_prime_values.len() + j].as_ref()
    }

    pub fn populated(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// Flood fill over the grid from the cell nearest to `start`, warm-starting
/// each cell from the neighbour that reached it. A failed cell may be retried
/// from up to three different neighbours before it is left empty.
pub fn tabulate_branch(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    start: &CompoundOrbit,
    e_values: &[f64],
    e_prime_values: &[f64],
    cfg: &CcoConfig,
) -> BranchTable {
    let (ne, np) = (e_values.len(), e_prime_values.len());
    let mut cells: Vec<Option<BranchCell>> = vec![None; ne * np];
    let mut orbits: Vec<Option<CompoundOrbit>> = vec![None; ne * np];
    let mut visited = vec![false; ne * np];
    let mut attempts = vec![0u8; ne * np];
    let nearest = |values: &[f64], v: f64| {
        values
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    let (i0, j0) = (
        nearest(e_values, start.energy),
        nearest(e_prime_values, start.energy_prime),
    );
    let origin_sign = start.det_i_minus_m().signum();
    let mut queue: VecDeque<(usize, usize, Option<usize>)> = VecDeque::new();
    queue.push_back((i0, j0, None));
    visited[i0 * np + j0] = true;
    while let Some((i, j, from)) = queue.pop_front() {
        let (warm, base_count, base_sign) = match from {
            None => (start.clone(), 0, origin_sign),
            Some(k) => {
                let o = orbits[k].clone().expect("sources are solved");
                let c = cells[k].as_ref().expect("sources are solved").caustic_count;
                let s = o.det_i_minus_m().signum();
                (o, c, s)
            }
        };
        let idx = i * np + j;
        let Ok((orbit, jac)) =
            target_energies(inner, driving, &warm, e_values[i], e_prime_values[j], cfg)
        else {
            attempts[idx] += 1;
            visited[idx] = attempts[idx] >= 3;
            continue;
        };
        let det = orbit.det_i_minus_m();
        let caustic_count = if det.signum() == base_sign {
            base_count
        } else if base_sign > 0.0 {
            base_count + 1
        } else {
            base_count - 1
        };
        cells[idx] = Some(BranchCell {
            t: orbit.times.t,
            t_prime: orbit.times.t_prime,
            action: orbit.action_stationary,
            det_i_minus_m: det,
            energy_jacobian_det: jac.determinant(),
            caustic_count,
            x_start: orbit.x_start.as_slice().to_vec(),
        });
        orbits[idx] = Some(orbit);
        let neighbours = [
            (i.wrapping_sub(1), j),
            (i + 1, j),
            (i, j.wrapping_sub(1)),
            (i, j + 1),
        ];
        for (a, b) in neighbours {
            if a < ne && b < np && !visited[a * np + b] {
                visited[a * np + b] = true;
                queue.push_back((a, b, Some(idx)));
            }
        }
    }
    BranchTable {
        e_values: e_values.to_vec(),
        e_prime_values: e_prime_values.to_vec(),
        tau: start.times.tau,
        winding: start.winding,
        cells,
    }
}
