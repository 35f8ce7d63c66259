use std::collections::BTreeMap;
use std::f64::consts::PI;

use proptest::prelude::*;

use super::section::{adaptive_edges, smoothed_profile};
use super::*;
use crate::cco::{build_orbit, energy_jacobian, CcoConfig, CcoTimes};
use crate::dynamics::IntegratorConfig;
use crate::hamiltonians::{builtin, HamiltonianSystem, PhaseSpacePoint};

const A: f64 = 0.5;

fn pair() -> (HamiltonianSystem, HamiltonianSystem) {
    let mut p = BTreeMap::new();
    p.insert("a".to_string(), A);
    p.insert("b".to_string(), 1.0);
    (builtin("harmonic", &p).unwrap(), builtin("displaced", &p).unwrap())
}

fn period() -> f64 {
    2.0 * PI / A.sqrt()
}

fn sampling_box() -> SamplingBox {
    SamplingBox(vec![(-4.5, 4.5), (-5.5, 5.5)])
}

fn mc_grid() -> TransitionGrid {
    TransitionGrid::uniform((0.8, 2.0), 6, (0.5, 2.5), 8, 1.0, 0.1, 0.1).unwrap()
}

fn mc(grid: &TransitionGrid, samples: u64, seed: u64, direction: DrivingDirection) -> ClassicalDensity {
    let (h, l) = pair();
    let cfg = MonteCarloConfig {
        samples,
        seed,
        direction,
        smooth: false,
        ..Default::default()
    };
    classical_density_mc(&h, &l, grid, &sampling_box(), &cfg).unwrap()
}

/// Sum of squared z-scores and the largest one over cells where either side is populated.
fn chi2(a: &Matrix, ea: &Matrix, b: &Matrix, eb: &Matrix) -> (f64, f64, usize) {
    let mut sum = 0.0;
    let mut worst = 0.0f64;
    let mut n = 0;
    for k in 0..a.len() {
        let err = (ea[k].powi(2) + eb[k].powi(2)).sqrt();
        if err == 0.0 {
            continue;
        }
        let z = (a[k] - b[k]) / err;
        sum += z * z;
        worst = worst.max(z.abs());
        n += 1;
    }
    (sum, worst, n)
}

#[test]
fn monte_carlo_matches_section_bin_masses() {
    let (h, l) = pair();
    let grid = mc_grid();
    let d = mc(&grid, 400_000, 11, DrivingDirection::Forward);
    let exact = section_bin_masses(&h, &l, &grid, &SectionConfig::default()).unwrap();
    let zero = Matrix::zeros(exact.nrows(), exact.ncols());
    let (sum, worst, n) = chi2(&d.binned, &d.binned_error, &exact, &zero);
    assert!(n > 20);
    assert!(sum / (n as f64) < 1.6, "chi2/n = {}", sum / n as f64);
    assert!(worst < 4.5, "max |z| = {worst}");
    assert_eq!(d.failures, 0);
}

#[test]
fn forward_and_backward_sampling_agree() {
    let grid = mc_grid();
    let f = mc(&grid, 300_000, 5, DrivingDirection::Forward);
    let b = mc(&grid, 300_000, 6, DrivingDirection::Backward);
    let (sum, worst, n) = chi2(&f.binned, &f.binned_error, &b.binned, &b.binned_error);
    assert!(sum / (n as f64) < 1.6, "chi2/n = {}", sum / n as f64);
    assert!(worst < 4.5, "max |z| = {worst}");
}

#[test]
fn monte_carlo_is_deterministic_across_thread_counts() {
    let (h, l) = pair();
    let grid = mc_grid();
    let run = |threads| {
        let cfg = MonteCarloConfig {
            samples: 50_000,
            seed: 9,
            threads,
            chunk: 1000,
            ..Default::default()
        };
        classical_density_mc(&h, &l, &grid, &sampling_box(), &cfg).unwrap()
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one.counts, three.counts);
    assert_eq!(one.binned, three.binned);
    assert_eq!(one.smoothed, three.smoothed);
    assert_ne!(one.counts, mc(&grid, 50_000, 10, DrivingDirection::Forward).counts);
}

#[test]
fn standard_error_halves_with_four_times_the_samples() {
    let grid = mc_grid();
    let small = mc(&grid, 100_000, 1, DrivingDirection::Forward);
    let large = mc(&grid, 400_000, 2, DrivingDirection::Forward);
    let mut ratios: Vec<f64> = (0..small.binned.len())
        .filter(|&k| small.counts[k] > 100.0)
        .map(|k| large.binned_error[k] / small.binned_error[k])
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    assert!((median - 0.5).abs() < 0.03, "median ratio {median}");
}

#[test]
fn bin_masses_integrate_to_the_period() {
    let (h, l) = pair();
    let grid = TransitionGrid::uniform((0.8, 1.6), 3, (0.0, 12.0), 121, 1.0, 0.1, 0.1).unwrap();
    let m = section_bin_masses(&h, &l, &grid, &SectionConfig::default()).unwrap();
    let edges = grid.e_prime_edges();
    for i in 0..3 {
        let total: f64 = (0..121).map(|j| m[(i, j)] * (edges[j + 1] - edges[j])).sum();
        let expected = period() / (2.0 * PI * grid.hbar);
        assert!((total / expected - 1.0).abs() < 1e-7, "{total} vs {expected}");
    }
}

#[test]
fn section_value_is_the_same_from_either_shell() {
    let (h, l) = pair();
    let cfg = SectionConfig::default();
    for (e, ep) in [(1.0, 1.7), (1.3, 0.7), (0.9, 2.2)] {
        let a = classical_density_section(&h, &l, e, ep, 1.0, 0.1, SectionSide::E, &cfg).unwrap();
        let b = classical_density_section(&h, &l, e, ep, 1.0, 0.1, SectionSide::EPrime, &cfg).unwrap();
        assert_eq!(a.points.len(), b.points.len());
        assert!(a.value > 0.0);
        assert!((a.value / b.value - 1.0).abs() < 1e-8, "{} vs {}", a.value, b.value);
    }
}

#[test]
fn smoothed_section_reduces_to_the_diagonal_without_driving() {
    let (h, l) = pair();
    let (eps, hbar, top) = (0.1, 0.1, 12.0);
    let vals = vec![0.9, 1.0, 1.15, 1.4];
    let grid = TransitionGrid::new(vals.clone(), vals.clone(), 1e-7, eps, hbar).unwrap();
    let got = classical_density_smoothed_section(&h, &l, &grid, (0.0, top), &SmoothedSectionConfig::default()).unwrap();
    for (i, &e) in vals.iter().enumerate() {
        for (j, &ep) in vals.iter().enumerate() {
            let overlap: f64 = crate::quadrature::composite_gl5(0.0, top, 4000)
                .into_iter()
                .map(|(x, w)| w * lorentzian(eps, e - x) * lorentzian(eps, ep - x))
                .sum();
            let expected = period() * overlap / (2.0 * PI * hbar);
            assert!((got[(i, j)] / expected - 1.0).abs() < 3e-4, "({e}, {ep}): {} vs {expected}", got[(i, j)]);
        }
    }
}

#[test]
fn smoothed_section_converges_in_resolution() {
    let (h, l) = pair();
    let grid = TransitionGrid::uniform((0.9, 2.0), 4, (0.6, 2.4), 7, 1.0, 0.2, 0.1).unwrap();
    let run = |resolution| {
        let cfg = SmoothedSectionConfig {
            resolution,
            ..Default::default()
        };
        classical_density_smoothed_section(&h, &l, &grid, (0.0, 5.0), &cfg).unwrap()
    };
    let coarse = run(0.1);
    let fine = run(0.05);
    assert!((&coarse - &fine).amax() < 2e-3 * fine.amax());
}

#[test]
fn smoothed_section_agrees_with_smoothed_monte_carlo() {
    let (h, l) = pair();
    let grid = TransitionGrid::uniform((1.0, 1.8), 3, (0.8, 2.2), 5, 1.0, 0.15, 0.1).unwrap();
    let cfg = MonteCarloConfig {
        samples: 400_000,
        seed: 21,
        smoothing_window: Some((0.0, 4.0)),
        ..Default::default()
    };
    let d = classical_density_mc(&h, &l, &grid, &sampling_box(), &cfg).unwrap();
    let exact = classical_density_smoothed_section(&h, &l, &grid, (0.0, 4.0), &SmoothedSectionConfig::default()).unwrap();
    let zero = Matrix::zeros(3, 5);
    let (sum, worst, n) = chi2(&d.smoothed, &d.smoothed_error, &exact, &zero);
    assert_eq!(n, 15);
    assert!(sum / 15.0 < 2.0, "chi2/n = {}", sum / 15.0);
    assert!(worst < 4.0, "max |z| = {worst}");
}

#[test]
fn smoothed_section_rejects_bad_windows() {
    let (h, l) = pair();
    let grid = mc_grid();
    let cfg = SmoothedSectionConfig::default();
    assert!(classical_density_smoothed_section(&h, &l, &grid, (2.0, 1.0), &cfg).is_err());
    let bad = SmoothedSectionConfig {
        resolution: 0.0,
        ..cfg
    };
    assert!(classical_density_smoothed_section(&h, &l, &grid, (0.0, 1.0), &bad).is_err());
}

fn anticaustic(e: f64, ep: f64) -> Anticaustic {
    let (h, l) = pair();
    find_anticaustic(&h, &l, e, ep, (1e-3, 3.0), &AnticausticConfig::default()).unwrap()
}

#[test]
fn anticaustic_solves_the_tangency_equations() {
    let (h, l) = pair();
    for (e, ep) in [(1.0, 1.8), (1.5, 0.9)] {
        let a = anticaustic(e, ep);
        assert!(a.strong_residual < 1e-10);
        assert!(a.wedge_residual < 1e-8);
        assert!(a.tau > 1e-3 && a.tau < 3.0);
        assert!((h.value(a.x.as_slice(), 0.0) - ep).abs() < 1e-10);
        assert!((h.value(a.preimage.as_slice(), 0.0) - e).abs() < 1e-10);
        let again = polish_anticaustic(&h, &l, e, ep, &a.x, a.tau, &AnticausticConfig::default()).unwrap();
        assert!((again.tau - a.tau).abs() < 1e-10);
    }
}

#[test]
fn no_section_before_contact_and_a_closing_pair_after() {
    let (h, l) = pair();
    let (e, ep) = (1.0, 1.8);
    let a = anticaustic(e, ep);
    let cfg = SectionConfig::default();
    let at = |tau: f64| section_points(&h, &l, e, ep, tau, SectionSide::E, &cfg).unwrap();
    for s in [0.2, 0.6, 0.95] {
        assert!(at(s * a.tau).is_empty());
        let v = classical_density_section(&h, &l, e, ep, s * a.tau, 0.1, SectionSide::E, &cfg).unwrap();
        assert_eq!(v.value, 0.0);
    }
    let gap = |d: f64| {
        let p = at(a.tau + d);
        assert_eq!(p.len(), 2);
        let x = p[0].x.to_vector() - p[1].x.to_vector();
        x.norm()
    };
    let (g1, g2) = (gap(1e-2), gap(1e-4));
    assert!(g2 < g1);
    let ratio = g2 / g1;
    assert!((ratio - 0.1).abs() < 0.02, "gap ratio {ratio}");
    let value = |d: f64| classical_density_section(&h, &l, e, ep, a.tau + d, 0.1, SectionSide::E, &cfg).unwrap().value;
    let growth = value(1e-4) / value(1e-2);
    assert!((growth - 10.0).abs() < 2.0, "growth {growth}");
}

#[test]
fn coinciding_shells_are_refused() {
    let (h, l) = pair();
    let r = find_anticaustic(&h, &l, 1.0, 1.0, (0.0, 1.0), &AnticausticConfig::default());
    assert!(matches!(r, Err(DensityError::DegenerateAnticaustic(_))), "{r:?}");
}

fn sc_grid(epsilon: f64) -> TransitionGrid {
    TransitionGrid::new(vec![1.0, 1.05], linspace(1.6, 2.4, 9), 1.0, epsilon, 0.05).unwrap()
}

fn families(epsilon: f64) -> FamilyGrid {
    let (h, l) = pair();
    section_families(&h, &l, &sc_grid(epsilon), &SectionFamilyConfig::default()).unwrap()
}

#[test]
fn family_cells_are_closed_compound_orbits() {
    let (h, l) = pair();
    let fam = families(0.03);
    let integ = IntegratorConfig::with_tol(1e-11).without_states();
    let np = fam.grid.e_prime_values.len();
    let mut checked = 0;
    for winding in [(-1, -1), (0, -1), (-1, 0), (1, 1), (0, 0)] {
        let f = fam.family(winding).unwrap();
        for (idx, cell) in f.cells.iter().enumerate().step_by(3) {
            let Some(c) = cell else { continue };
            let (e, ep) = (fam.grid.e_values[idx / np], fam.grid.e_prime_values[idx % np]);
            let x = PhaseSpacePoint::new(c.x_start.clone());
            let orbit = build_orbit(&h, &l, &x, CcoTimes::new(c.t, c.t_prime, 1.0), &integ).unwrap();
            assert!(orbit.closure_residual < 1e-7, "{}", orbit.closure_residual);
            assert!((orbit.energy - e).abs() < 1e-8);
            assert!((orbit.energy_prime - ep).abs() < 1e-8);
            assert!((orbit.action_stationary - c.action).abs() < 1e-7 * (1.0 + c.action.abs()));
            assert!((orbit.det_i_minus_m() - c.det_i_minus_m).abs() < 1e-6 * (1.0 + c.det_i_minus_m.abs()));
            checked += 1;
        }
    }
    assert!(checked >= 10);
}

#[test]
fn family_jacobian_inverts_the_closed_orbit_energy_jacobian() {
    let (h, l) = pair();
    let fam = families(0.03);
    let integ = IntegratorConfig::with_tol(1e-11).without_states();
    let c = fam.family((-1, -1)).unwrap().cells[4].clone().unwrap();
    let x = PhaseSpacePoint::new(c.x_start.clone());
    let orbit = build_orbit(&h, &l, &x, CcoTimes::new(c.t, c.t_prime, 1.0), &integ).unwrap();
    let j = energy_jacobian(&h, &l, &orbit, 1e-5, &CcoConfig::default()).unwrap();
    assert!((c.jacobian_det * j.determinant() - 1.0).abs() < 1e-4);
}

#[test]
fn windings_stay_inside_the_damping_cutoff() {
    let fam = families(0.03);
    let reach = SectionFamilyConfig::default().cutoff * 0.05 / 0.03;
    for f in &fam.families {
        for c in f.cells.iter().flatten() {
            assert!(c.t.abs() + c.t_prime.abs() <= reach + 1e-9);
        }
    }
    let wide = families(0.06);
    assert!(wide.families.len() < fam.families.len());
}

#[test]
fn large_smoothing_leaves_no_oscillation() {
    let fam = families(50.0);
    let terms = sc_density(&fam, &ScConfig::default()).unwrap();
    assert!(terms.is_empty());
}

#[test]
fn amplitudes_decay_with_smoothing() {
    let narrow = sc_density(&families(0.03), &ScConfig::default()).unwrap();
    let wide = sc_density(&families(0.04), &ScConfig::default()).unwrap();
    let pick = |terms: &[OscillatoryTerm]| terms.iter().find(|t| t.winding == (-1, -1)).unwrap().amplitude[(0, 4)];
    let fam = families(0.03);
    let c = fam.family((-1, -1)).unwrap().cells[4].clone().unwrap();
    let expected = (-0.01 * (c.t.abs() + c.t_prime.abs()) / 0.05).exp();
    assert!((pick(&wide) / pick(&narrow) / expected - 1.0).abs() < 1e-9);
}

#[test]
fn amplitude_scale_multiplies_every_term() {
    let fam = families(0.03);
    let base = sc_density(&fam, &ScConfig::default()).unwrap();
    let cfg = ScConfig {
        amplitude_scale: Some(1.0),
        ..Default::default()
    };
    let doubled = sc_density(&fam, &cfg).unwrap();
    for (a, b) in base.iter().zip(&doubled) {
        assert!((&b.values - &a.values * 2.0).amax() < 1e-12 * (1.0 + a.values.amax()));
    }
}

#[test]
fn total_without_families_is_the_background() {
    let grid = sc_grid(0.03);
    let classical = Matrix::from_fn(2, 9, |i, j| 1.0 + (i + j) as f64);
    let err = Matrix::from_element(2, 9, 0.1);
    let d = total_density(&grid, classical.clone(), err, Vec::new()).unwrap();
    assert_eq!(d.total, classical);
    assert!(d.mask.iter().all(|m| !m));
    assert!(d.diagnostics.negative_cells.is_empty());
}

#[test]
fn total_rejects_negative_background() {
    let grid = sc_grid(0.03);
    let classical = Matrix::from_element(2, 9, -1.0);
    assert!(total_density(&grid, classical, Matrix::zeros(2, 9), Vec::new()).is_err());
    assert!(matches!(
        total_density(&grid, Matrix::zeros(3, 9), Matrix::zeros(3, 9), Vec::new()),
        Err(DensityError::GridMismatch)
    ));
}

#[test]
fn caustic_masks_reach_the_total() {
    let fam = families(0.03);
    let cfg = ScConfig {
        caustic_threshold: 1e12,
        ..Default::default()
    };
    let terms = sc_density(&fam, &cfg).unwrap();
    assert!(terms.is_empty());
    let base = sc_density(&fam, &ScConfig::default()).unwrap();
    let mut masked = base[0].clone();
    masked.mask[3] = true;
    masked.mask[12] = true;
    let d = total_density(&fam.grid, Matrix::from_element(2, 9, 50.0), Matrix::zeros(2, 9), vec![masked, base[1].clone()]).unwrap();
    assert!(d.mask[3] && d.mask[12]);
    assert_eq!(d.diagnostics.masked_cells, 2);
    assert_eq!(d.diagnostics.sigma.len(), 2);
}

#[test]
fn sigma_is_periodic() {
    let terms = sc_density(&families(0.03), &ScConfig::default()).unwrap();
    let t = &terms[0];
    let shifted = t.with_sigma(t.sigma + 2.0 * PI);
    assert!((&shifted.values - &t.values).amax() < 1e-9 * (1.0 + t.values.amax()));
}

fn synthetic_term(winding: (i32, i32), amp: &[f64], phase: &[f64]) -> OscillatoryTerm {
    let n = amp.len();
    let amplitude = Matrix::from_row_slice(1, n, amp);
    let phase = Matrix::from_row_slice(1, n, phase);
    OscillatoryTerm {
        winding,
        sigma: 0.0,
        values: amplitude.zip_map(&phase, |a, p| a * p.cos()),
        amplitude,
        phase,
        mask: vec![false; n],
    }
}

#[test]
fn calibration_recovers_a_planted_phase() {
    let n = 40;
    let phase: Vec<f64> = (0..n).map(|k| 0.37 * k as f64).collect();
    let amp = vec![1.0; n];
    let t = synthetic_term((0, 0), &amp, &phase);
    let classical = Matrix::from_element(1, n, 3.0);
    let planted = t.with_sigma(3.0 * PI / 4.0);
    let target = &classical + &planted.values;
    let cal = calibrate_sigma(&[t], &classical, &target, &[0]).unwrap();
    assert!((cal.sigmas[0].sigma - 3.0 * PI / 4.0).abs() < 1e-12);
    assert!(cal.l2_calibrated < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn calibration_never_worsens_the_fit(
        amp in prop::collection::vec(0.0f64..2.0, 12),
        ph1 in prop::collection::vec(-10.0f64..10.0, 12),
        ph2 in prop::collection::vec(-10.0f64..10.0, 12),
        target in prop::collection::vec(-3.0f64..3.0, 12),
    ) {
        let terms = [synthetic_term((0, 0), &amp, &ph1), synthetic_term((1, 0), &amp, &ph2)];
        let classical = Matrix::zeros(1, 12);
        let target = Matrix::from_row_slice(1, 12, &target);
        let cal = calibrate_sigma(&terms, &classical, &target, &[0]).unwrap();
        prop_assert!(cal.l2_calibrated <= cal.l2_initial + 1e-12);
        let applied = cal.apply(&terms);
        let total = applied.iter().fold(classical.clone(), |acc, t| acc + &t.values);
        prop_assert!(((&total - &target).norm() - cal.l2_calibrated).abs() < 1e-9);
    }

    #[test]
    fn profile_smoothing_matches_quadrature(
        values in prop::collection::vec(0.0f64..5.0, 3..40),
        dt in 0.01f64..1.0,
        eps in 0.05f64..0.5,
        c in -0.5f64..5.5,
    ) {
        let window = (0.5, 4.5);
        let mut got = [0.0];
        smoothed_profile(&values, dt, window, eps, &[c], &mut got);
        let n = values.len();
        let mut expected = 0.0;
        for k in 0..n {
            let (a, b) = (values[k], values[(k + 1) % n]);
            expected += crate::quadrature::composite_gl5(0.0, 1.0, 400)
                .into_iter()
                .map(|(s, w)| {
                    let y = a + (b - a) * s;
                    if (window.0..=window.1).contains(&y) { w * dt * lorentzian(eps, c - y) } else { 0.0 }
                })
                .sum::<f64>();
        }
        prop_assert!((got[0] - expected).abs() < 1e-3 * (1.0 + expected), "{} vs {}", got[0], expected);
    }

    #[test]
    fn adaptive_edges_tile_the_window(
        lo in -2.0f64..2.0,
        span in 0.1f64..10.0,
        centres in prop::collection::vec(-3.0f64..12.0, 1..5),
        eps in 0.01f64..0.5,
    ) {
        let hi = lo + span;
        let edges = adaptive_edges(lo, hi, &centres, eps, 0.1);
        prop_assert_eq!(edges[0], lo);
        prop_assert_eq!(*edges.last().unwrap(), hi);
        prop_assert!(edges.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn lorentzian_is_normalized(eps in 0.01f64..1.0, c in -1.0f64..1.0) {
        let mass: f64 = crate::quadrature::composite_gl5(c - 2000.0 * eps, c + 2000.0 * eps, 4000)
            .into_iter()
            .map(|(x, w)| w * lorentzian(eps, x - c))
            .sum();
        prop_assert!((mass - 1.0).abs() < 1e-3);
    }
}
