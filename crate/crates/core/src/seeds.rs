//! Seeds of compound-orbit families: equilibria of the bracket `C(x) = {H, Λ(·|0)}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow_point, DynamicsError, IntegratorConfig};
use crate::hamiltonians::{
    poisson_bracket, poisson_bracket_gradient, HamiltonianError, HamiltonianSystem,
    PhaseSpacePoint, Polynomial,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SeedError {
    #[error("seed not found after {iterations} iterations, last residual {residual:e}")]
    NotFound { iterations: usize, residual: f64 },
    #[error("degenerate seed near {x:?}: bracket Hessian is singular, try a perturbed guess")]
    Degenerate { x: Vec<f64> },
    #[error("box has {found} bounds, expected {expected}")]
    BadBox { expected: usize, found: usize },
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityClass {
    EllipticLike,
    HyperbolicLike,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub point: PhaseSpacePoint,
    pub bracket_value: f64,
    pub energy_inner: f64,
    pub stability_class: StabilityClass,
    pub residual: f64,
    /// Eigenvalues `(re, im)` of `J · Hess C`.
    pub eigenvalues: Vec<(f64, f64)>,
}

const MAX_NEWTON: usize = 60;
const CLASS_THRESHOLD: f64 = 1e-8;

fn residual(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    x: &[f64],
) -> Result<DVector<f64>, SeedError> {
    Ok(poisson_bracket_gradient(
        inner,
        driving,
        &PhaseSpacePoint::new(x.to_vec()),
        0.0,
    )?)
}

/// Hessian of `C` by central differences of its analytic gradient.
pub fn bracket_hessian(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    x: &PhaseSpacePoint,
) -> Result<DMatrix<f64>, SeedError> {
    let d = x.dim();
    let norm = x.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-5 * (1.0 + norm);
    let mut jac = DMatrix::zeros(d, d);
    let mut xp = x.as_slice().to_vec();
    for j in 0..d {
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = residual(inner, driving, &xp)?;
        xp[j] = orig - h;
        let fm = residual(inner, driving, &xp)?;
        xp[j] = orig;
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok((&jac + jac.transpose()) * 0.5)
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    max == 0.0 || min <= 1e-12 * max.max(1.0)
}

fn classify(hess_c: &DMatrix<f64>, dof: usize) -> (StabilityClass, Vec<(f64, f64)>) {
    let j = crate::hamiltonians::SymplecticForm::new(dof).matrix();
    let ev = (j * hess_c).complex_eigenvalues();
    let mut eigen: Vec<(f64, f64)> = ev.iter().map(|c| (c.re, c.im)).collect();
    eigen.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let class = if eigen.iter().any(|(re, im)| re.hypot(*im) < CLASS_THRESHOLD) {
        StabilityClass::Degenerate
    } else if eigen.iter().all(|(re, _)| re.abs() < CLASS_THRESHOLD) {
        StabilityClass::EllipticLike
    } else {
        StabilityClass::HyperbolicLike
    };
    (class, eigen)
}

/// Newton iteration on `∇C(x) = 0` from `guess`.
pub fn find_seed(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    guess: &PhaseSpacePoint,
    tol: f64,
) -> Result<Seed, SeedError> {
    let mut x = guess.clone();
    let mut f = residual(inner, driving, x.as_slice())?;
    let mut res = f.norm();
    for iteration in 0..=MAX_NEWTON {
        let hess = bracket_hessian(inner, driving, &x)?;
        if is_singular(&hess) {
            return Err(SeedError::Degenerate {
                x: x.as_slice().to_vec(),
            });
        }
        if res < tol {
            let (stability_class, eigenvalues) = classify(&hess, x.dof());
            return Ok(Seed {
                bracket_value: poisson_bracket(inner, driving, &x, 0.0)?,
                energy_inner: inner.value(x.as_slice(), 0.0),
                stability_class,
                residual: res,
                eigenvalues,
                point: x,
            });
        }
        if iteration == MAX_NEWTON {
            break;
        }
        let step = match hess.clone().lu().solve(&f) {
            Some(s) => s,
            None => {
                return Err(SeedError::Degenerate {
                    x: x.as_slice().to_vec(),
                })
            }
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let trial: Vec<f64> = x
                .as_slice()
                .iter()
                .zip(step.iter())
                .map(|(a, s)| a - lambda * s)
                .collect();
            let ft = residual(inner, driving, &trial)?;
            let rt = ft.norm();
            if rt.is_finite() && (rt < res || rt < tol) {
                x = PhaseSpacePoint::new(trial);
                f = ft;
                res = rt;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(SeedError::NotFound {
                iterations: iteration + 1,
                residual: res,
            });
        }
    }
    Err(SeedError::NotFound {
        iterations: MAX_NEWTON,
        residual: res,
    })
}

/// Runs [`find_seed`] from every node of a uniform grid and deduplicates.
///
/// `bounds` holds one `(lo, hi)` pair per coordinate.
pub fn seed_scan(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    bounds: &[(f64, f64)],
    grid: usize,
    tol: f64,
) -> Result<Vec<Seed>, SeedError> {
    let d = inner.dim();
    if bounds.len() != d {
        return Err(SeedError::BadBox {
            expected: d,
            found: bounds.len(),
        });
    }
    let grid = grid.max(1);
    let diameter = bounds
        .iter()
        .map(|(lo, hi)| (hi - lo).powi(2))
        .sum::<f64>()
        .sqrt();
    let radius = 1e-6 * diameter;
    let node = |axis: usize, i: usize| {
        let (lo, hi) = bounds[axis];
        if grid == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (grid - 1) as f64
        }
    };
    let total = grid.pow(d as u32);
    let mut seeds: Vec<Seed> = Vec::new();
    for flat in 0..total {
        let mut idx = flat;
        let coords: Vec<f64> = (0..d)
            .map(|axis| {
                let i = idx % grid;
                idx /= grid;
                node(axis, i)
            })
            .collect();
        let Ok(seed) = find_seed(inner, driving, &PhaseSpacePoint::new(coords), tol) else {
            continue;
        };
        let inside = seed
            .point
            .as_slice()
            .iter()
            .zip(bounds)
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi);
        if inside && !seeds.iter().any(|s| s.point.distance(&seed.point) <= radius) {
            seeds.push(seed);
        }
    }
    seeds.sort_by(|a, b| {
        a.point
            .as_slice()
            .partial_cmp(b.point.as_slice())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(seeds)
}

/// `‖Φ_Λ^{dτ}∘Φ_H^{dt}(x) − Φ_H^{dt}∘Φ_Λ^{dτ}(x)‖`, driving started at `τ = 0`.
pub fn commutator_defect(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    dt: f64,
    dtau: f64,
    cfg: &IntegratorConfig,
) -> Result<f64, SeedError> {
    let a = flow_point(inner, x.as_slice(), 0.0, dt, cfg)?;
    let a = flow_point(driving, &a, 0.0, dtau, cfg)?;
    let b = flow_point(driving, x.as_slice(), 0.0, dtau, cfg)?;
    let b = flow_point(inner, &b, 0.0, dt, cfg)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt())
}

fn quadratic_polynomial(
    x0: &[f64],
    value: f64,
    grad: &DVector<f64>,
    hess: &DMatrix<f64>,
) -> Polynomial {
    let d = x0.len();
    let shifted: Vec<Polynomial> = (0..d)
        .map(|i| Polynomial::coordinate(d, i).add(&Polynomial::constant(d, -x0[i])))
        .collect();
    let mut poly = Polynomial::constant(d, value);
    for i in 0..d {
        poly = poly.add(&shifted[i].scale(grad[i]));
        for j in 0..d {
            let prod = shifted[i].mul(&shifted[j]).expect("constant coefficients");
            poly = poly.add(&prod.scale(0.5 * hess[(i, j)]));
        }
    }
    poly
}

/// Local quadratic models `(H₀, Λ₀)` about `x0`, with the driving model
/// replaced by its nearest (least-squares) quadratic commuting exactly with `H₀`.
///
/// With `H₀ = h + g·δ + ½δ·Aδ` and `Λ₀ = l + k·δ + ½δ·Bδ`, the bracket
/// vanishes identically iff `gᵀJᵀk = 0`, `AJᵀk = BJᵀg` and `AJᵀB = BJᵀA`.
/// These are linear in `(k, B)`; the minimum-norm correction is applied.
pub fn commuting_local_pair(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    x0: &PhaseSpacePoint,
) -> (HamiltonianSystem, HamiltonianSystem) {
    let d = x0.dim();
    let n = x0.dof();
    let xs = x0.as_slice();
    let g = inner.gradient(xs, 0.0);
    let a = inner.hessian(xs, 0.0);
    let k = driving.gradient(xs, 0.0);
    let b = driving.hessian(xs, 0.0);
    let w = crate::hamiltonians::SymplecticForm::new(n).matrix().transpose();

    // Unknowns: k (d entries) then the upper triangle of B.
    let tri: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    let nu = d + tri.len();
    let basis_b = |m: usize| {
        let (i, j) = tri[m];
        let mut e = DMatrix::zeros(d, d);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        e
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    // gᵀ W k = 0
    let gw = g.transpose() * &w;
    let mut r = vec![0.0; nu];
    r[..d].copy_from_slice(gw.as_slice());
    rows.push(r);
    // A W k − B W g = 0
    let aw = &a * &w;
    let wg = &w * &g;
    for row in 0..d {
        let mut r = vec![0.0; nu];
        for c in 0..d {
            r[c] = aw[(row, c)];
        }
        for m in 0..tri.len() {
            r[d + m] = -(basis_b(m) * &wg)[row];
        }
        rows.push(r);
    }
    // A W B − B W A = 0 (symmetric), upper triangle.
    let wa = &w * &a;
    for &(i, j) in &tri {
        let mut r = vec![0.0; nu];
        for m in 0..tri.len() {
            let e = basis_b(m);
            let v = &aw * &e - &e * &wa;
            r[d + m] = v[(i, j)];
        }
        rows.push(r);
    }
    let cm = DMatrix::from_fn(rows.len(), nu, |i, j| rows[i][j]);
    let mut u0 = DVector::zeros(nu);
    for i in 0..d {
        u0[i] = k[i];
    }
    for (m, &(i, j)) in tri.iter().enumerate() {
        u0[d + m] = b[(i, j)];
    }
    let residual = &cm * &u0;
    let pinv = cm
        .clone()
        .pseudo_inverse(1e-12)
        .expect("pseudo-inverse of constraint matrix");
    let u = &u0 - pinv * residual;
    let mut k2 = DVector::zeros(d);
    for i in 0..d {
        k2[i] = u[i];
    }
    let mut b2 = DMatrix::zeros(d, d);
    for (m, &(i, j)) in tri.iter().enumerate() {
        b2[(i, j)] = u[d + m];
        b2[(j, i)] = u[d + m];
    }
    let h0 = quadratic_polynomial(xs, inner.value(xs, 0.0), &g, &a);
    let l0 = quadratic_polynomial(xs, driving.value(xs, 0.0), &k2, &b2);
    (
        HamiltonianSystem::from_polynomial(format!("{}_local", inner.name()), n, h0),
        HamiltonianSystem::from_polynomial(format!("{}_local", driving.name()), n, l0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonians::builtin;
    use std::collections::BTreeMap;

    fn sys(name: &str, kv: &[(&str, f64)]) -> HamiltonianSystem {
        let p: BTreeMap<String, f64> = kv.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        builtin(name, &p).unwrap()
    }

    fn pair(a: f64, b: f64) -> (HamiltonianSystem, HamiltonianSystem) {
        (
            sys("harmonic", &[("a", a)]),
            sys("displaced", &[("a", a), ("b", b)]),
        )
    }

    #[test]
    fn worked_pair_seed_grid() {
        for &a in &[0.3, 0.5, 2.0] {
            for &b in &[0.5, 1.0, 2.0] {
                let (h, l) = pair(a, b);
                let s = find_seed(&h, &l, &PhaseSpacePoint::pq(0.3, 0.1), 1e-12).unwrap();
                let q0 = b / (1.0 - a * a);
                assert!(s.point.as_slice()[0].abs() < 1e-10);
                assert!((s.point.as_slice()[1] - q0).abs() < 1e-10);
                assert_eq!(s.stability_class, StabilityClass::HyperbolicLike);
                assert!(s.bracket_value.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn self_driving_is_degenerate() {
        let (h, _) = pair(0.5, 1.0);
        assert!(matches!(
            find_seed(&h, &h, &PhaseSpacePoint::pq(0.2, 0.4), 1e-10),
            Err(SeedError::Degenerate { .. })
        ));
    }

    fn grid_scan_minima(
        inner: &HamiltonianSystem,
        driving: &HamiltonianSystem,
        lo: f64,
        hi: f64,
        n: usize,
    ) -> Vec<(f64, f64)> {
        let step = (hi - lo) / (n - 1) as f64;
        let val = |i: usize, j: usize| {
            let x = PhaseSpacePoint::pq(lo + i as f64 * step, lo + j as f64 * step);
            poisson_bracket_gradient(inner, driving, &x, 0.0).unwrap().norm()
        };
        let mut out = Vec::new();
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let v = val(i, j);
                let is_min = (-1i32..=1).all(|di| {
                    (-1i32..=1).all(|dj| {
                        (di == 0 && dj == 0)
                            || v < val((i as i32 + di) as usize, (j as i32 + dj) as usize)
                    })
                });
                if is_min && v < 0.05 {
                    out.push((lo + i as f64 * step, lo + j as f64 * step));
                }
            }
        }
        out
    }

    #[test]
    fn duffing_pair_matches_grid_scan() {
        let h = sys("duffing", &[]);
        let l = sys("displaced", &[("a", 0.5), ("b", 1.0)]);
        let seeds = seed_scan(&h, &l, &[(-2.0, 2.0), (-2.0, 2.0)], 9, 1e-11).unwrap();
        let minima = grid_scan_minima(&h, &l, -2.0, 2.0, 801);
        assert_eq!(seeds.len(), minima.len(), "{seeds:?} vs {minima:?}");
        for s in &seeds {
            assert!(s.residual < 1e-10);
            let near = minima.iter().any(|(p, q)| {
                (p - s.point.as_slice()[0]).abs() < 0.01 && (q - s.point.as_slice()[1]).abs() < 0.01
            });
            assert!(near, "{s:?}");
        }
    }

    #[test]
    fn worked_pair_scan_finds_single_seed() {
        let (h, l) = pair(0.5, 1.0);
        let seeds = seed_scan(&h, &l, &[(-1.0, 1.0), (0.0, 2.0)], 5, 1e-12).unwrap();
        assert_eq!(seeds.len(), 1);
        assert!((seeds[0].point.as_slice()[1] - 4.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn symmetric_double_well_seeds_pair_up() {
        let h = sys("double_well", &[]);
        let l = sys("squeeze", &[]);
        let seeds = seed_scan(&h, &l, &[(-2.0, 2.0), (-2.0, 2.0)], 9, 1e-11).unwrap();
        assert!(seeds.len() >= 2);
        for s in &seeds {
            let x = s.point.as_slice();
            let mirror = PhaseSpacePoint::pq(x[0], -x[1]);
            assert!(
                seeds.iter().any(|o| o.point.distance(&mirror) < 1e-8),
                "{s:?} has no mirror partner"
            );
        }
    }

    #[test]
    fn self_commutation_has_no_defect() {
        let d = sys("duffing", &[]);
        let cfg = IntegratorConfig::with_tol(1e-12);
        for &(p, q) in &[(0.1, 0.5), (-0.7, 1.2)] {
            let defect =
                commutator_defect(&d, &d, &PhaseSpacePoint::pq(p, q), 0.4, 0.7, &cfg).unwrap();
            assert!(defect < 1e-10);
        }
    }

    #[test]
    fn taylor_pair_commutes_locally() {
        let (h, l) = (sys("duffing", &[]), sys("displaced", &[("a", 0.5), ("b", 1.0)]));
        let seed = seed_scan(&h, &l, &[(-2.0, 2.0), (-2.0, 2.0)], 7, 1e-11).unwrap();
        let x0 = &seed[0].point;
        let h0 = h.local_quadratic(x0.as_slice(), 0.0);
        let l0 = l.local_quadratic(x0.as_slice(), 0.0);
        let g = poisson_bracket_gradient(&h0, &l0, x0, 0.0).unwrap();
        assert!(g.amax() < 1e-9);
    }

    #[test]
    fn commuting_local_pair_is_exact() {
        let cfg = IntegratorConfig::with_tol(1e-12);
        let cases = [
            (pair(0.5, 1.0), PhaseSpacePoint::pq(0.0, 4.0 / 3.0)),
            (
                (sys("duffing", &[]), sys("displaced", &[("a", 0.5), ("b", 1.0)])),
                PhaseSpacePoint::pq(0.2, 0.9),
            ),
        ];
        for ((h, l), x0) in cases {
            let (h0, l0) = commuting_local_pair(&h, &l, &x0);
            for &(p, q) in &[(0.0, 0.0), (1.3, -0.4), (-2.0, 3.0), (0.5, 0.5)] {
                let c = poisson_bracket(&h0, &l0, &PhaseSpacePoint::pq(p, q), 0.0).unwrap();
                assert!(c.abs() < 1e-10, "bracket {c}");
            }
            let defect = commutator_defect(&h0, &l0, &x0, 0.5, 0.5, &cfg).unwrap();
            assert!(defect < 1e-10, "defect {defect}");
            assert!((h0.value(x0.as_slice(), 0.0) - h.value(x0.as_slice(), 0.0)).abs() < 1e-14);
        }
    }

    fn fitted_exponent(
        h: &HamiltonianSystem,
        l: &HamiltonianSystem,
        x: &PhaseSpacePoint,
    ) -> (f64, Vec<(f64, f64)>) {
        let cfg = IntegratorConfig::with_tol(1e-14);
        let ladder: Vec<(f64, f64)> = (0..6)
            .map(|k| {
                let dt = 0.2 / f64::powi(2.0, k);
                (dt, commutator_defect(h, l, x, dt, dt, &cfg).unwrap())
            })
            .collect();
        let n = ladder.len() as f64;
        let (sx, sy, sxx, sxy) = ladder.iter().fold((0.0, 0.0, 0.0, 0.0), |acc, (dt, d)| {
            let (u, v) = (dt.ln(), d.ln());
            (acc.0 + u, acc.1 + v, acc.2 + u * u, acc.3 + u * v)
        });
        ((n * sxy - sx * sy) / (n * sxx - sx * sx), ladder)
    }

    #[test]
    fn defect_scaling_exponents() {
        let (h, l) = pair(0.5, 1.0);
        let (slope, _) = fitted_exponent(&h, &l, &PhaseSpacePoint::pq(0.0, 4.0 / 3.0));
        assert!((2.7..=3.3).contains(&slope), "seed exponent {slope}");
        let x = PhaseSpacePoint::pq(0.4, 0.3);
        let (slope, ladder) = fitted_exponent(&h, &l, &x);
        assert!((1.8..=2.2).contains(&slope), "generic exponent {slope}");
        let ratio: Vec<f64> = ladder.iter().map(|(dt, d)| d / (dt * dt)).collect();
        let k = ratio.len() - 1;
        let extrapolated = 2.0 * ratio[k] - ratio[k - 1];
        let target = poisson_bracket_gradient(&h, &l, &x, 0.0).unwrap().norm();
        assert!((extrapolated - target).abs() < 0.01 * target, "{extrapolated} vs {target}");
    }
}
