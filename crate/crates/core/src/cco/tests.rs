use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::*;
use crate::hamiltonians::builtin;
use crate::seeds::{find_seed, seed_scan, StabilityClass};

fn sys(name: &str, kv: &[(&str, f64)]) -> HamiltonianSystem {
    let p: BTreeMap<String, f64> = kv.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    builtin(name, &p).unwrap()
}

fn harmonic_pair() -> (HamiltonianSystem, HamiltonianSystem, Seed) {
    let h = sys("harmonic", &[("a", 0.5)]);
    let l = sys("displaced", &[("a", 0.5), ("b", 1.0)]);
    let s = find_seed(&h, &l, &PhaseSpacePoint::pq(0.1, 1.0), 1e-12).unwrap();
    (h, l, s)
}

fn duffing_pair() -> (HamiltonianSystem, HamiltonianSystem, Seed) {
    let h = sys("duffing", &[]);
    let l = sys("displaced", &[("a", 0.5), ("b", 1.0)]);
    let seeds = seed_scan(&h, &l, &[(-2.0, 2.0), (-2.0, 2.0)], 7, 1e-11).unwrap();
    let s = seeds
        .into_iter()
        .find(|s| s.stability_class != StabilityClass::Degenerate)
        .unwrap();
    (h, l, s)
}

#[test]
fn closes_near_seed_for_both_pairs() {
    let cfg = CcoConfig::default();
    for (h, l, seed) in [harmonic_pair(), duffing_pair()] {
        let times = CcoTimes::new(0.3, 0.3, 0.4);
        let o = close_cco(&h, &l, &seed.point, times, &cfg).unwrap();
        assert!(o.closure_residual < 1e-9, "{}", o.closure_residual);
        assert!(o.inner_energy_drift() < 1e-9);
        assert!((o.energy - h.value(o.x_start.as_slice(), 0.0)).abs() < 1e-9);
    }
}

#[test]
fn action_is_stable_under_tighter_reintegration() {
    let (h, l, seed) = duffing_pair();
    let cfg = CcoConfig::default();
    let o = close_cco(&h, &l, &seed.point, CcoTimes::new(0.7, 0.5, 0.6), &cfg).unwrap();
    let tight = IntegratorConfig::with_tol(1e-13).without_states();
    let r = build_orbit(&h, &l, &o.x_start, o.times, &tight).unwrap();
    assert!((r.action_total - o.action_total).abs() < 1e-9);
    assert!((r.action_stationary - o.action_stationary).abs() < 1e-9);
}

#[test]
fn stationary_action_is_loop_area_minus_driving_integrals() {
    let (h, l, seed) = duffing_pair();
    let o = close_cco(&h, &l, &seed.point, CcoTimes::new(0.7, 0.5, 0.6), &CcoConfig::default())
        .unwrap();
    let (k1, k3) = o.driving_time_integrals();
    let area = o.loop_area();
    assert!((o.action_stationary - (area - k1 - k3)).abs() < 1e-9);
}

#[test]
fn monodromy_routes_agree() {
    let (h, l, seed) = duffing_pair();
    let cfg = CcoConfig::default();
    let o = close_cco(&h, &l, &seed.point, CcoTimes::new(0.9, 0.4, 0.5), &cfg).unwrap();
    let product = o.monodromy_product();
    let carried = compound_monodromy_carried(&h, &l, &o.x_start, o.times, &cfg.integrator).unwrap();
    assert!((&product - &carried).amax() < 1e-9);
    let eps = 1e-6;
    let d = o.x_start.dim();
    let mut fd = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = o.x_start.clone();
        let mut xm = o.x_start.clone();
        xp.as_mut_slice()[j] += eps;
        xm.as_mut_slice()[j] -= eps;
        let ep = build_orbit(&h, &l, &xp, o.times, &cfg.integrator).unwrap();
        let em = build_orbit(&h, &l, &xm, o.times, &cfg.integrator).unwrap();
        fd.set_column(j, &((ep.end_point().to_vector() - em.end_point().to_vector()) / (2.0 * eps)));
    }
    assert!((&product - &fd).amax() < 1e-6, "{product} vs {fd}");
    let sym = h.symplectic();
    assert!(sym.symplecticity_defect(&product) < 1e-9);
}

#[test]
fn thin_t_family_starts_at_seed_and_truncates_at_half_period() {
    let (h, l, seed) = harmonic_pair();
    let period = 2.0 * PI / 0.5f64.sqrt();
    let cfg = CcoConfig::default();
    let fam = grow_thin_t_family(&h, &l, &seed, period, 0.25, &cfg).unwrap();
    assert_eq!(fam.parameterization, FamilyParameterization::TEdge);
    let first = &fam.members[0];
    assert!(first.x_start.distance(&seed.point) < 1e-4);
    for m in &fam.members {
        assert!(m.times.t == m.times.t_prime && m.times.tau == 0.0);
        let r = thin_t_residual(&h, &l, &m.x_start, m.times.t, &cfg).unwrap();
        assert!(r.amax() < 1e-9);
    }
    assert!(fam.truncated.is_some(), "{:?}", fam.truncated);
    let last = fam.last().unwrap().times.t;
    assert!(last < 0.5 * period && last > 0.5 * period - 0.5, "{last}");
}

#[test]
fn thin_tau_members_have_identity_monodromy() {
    let (h, l, seed) = duffing_pair();
    let cfg = CcoConfig::default();
    let fam = grow_thin_tau_family(&h, &l, &seed, 1.0, 0.25, &cfg).unwrap();
    assert_eq!(fam.parameterization, FamilyParameterization::TauEdge);
    assert!(fam.truncated.is_none());
    assert!((fam.last().unwrap().times.tau - 1.0).abs() < 1e-15);
    assert!(fam.members[0].x_start.distance(&seed.point) < 1e-4);
    let d = seed.point.dim();
    for m in &fam.members {
        assert!((&m.monodromy_compound - DMatrix::<f64>::identity(d, d)).amax() < 1e-9);
        assert!(m.closure_residual < 1e-9);
        let r = thin_tau_residual(&h, &l, &m.x_start, m.times.tau, &cfg).unwrap();
        assert!(r.amax() < 1e-9);
    }
}

#[test]
fn self_driving_continuum_is_refused() {
    let h = sys("harmonic", &[("a", 0.5)]);
    let seed = Seed {
        point: PhaseSpacePoint::pq(0.3, 0.2),
        bracket_value: 0.0,
        energy_inner: h.value(&[0.3, 0.2], 0.0),
        stability_class: StabilityClass::HyperbolicLike,
        residual: 0.0,
        eigenvalues: vec![],
    };
    let err = grow_thin_tau_family(&h, &h, &seed, 1.0, 0.25, &CcoConfig::default()).unwrap_err();
    assert_eq!(err, CcoError::DegenerateContinuum);
    let degenerate = Seed {
        stability_class: StabilityClass::Degenerate,
        ..seed
    };
    let l = sys("displaced", &[("a", 0.5), ("b", 1.0)]);
    let err = grow_thin_t_family(&h, &l, &degenerate, 1.0, 0.25, &CcoConfig::default())
        .unwrap_err();
    assert_eq!(err, CcoError::DegenerateSeed);
}

#[test]
fn continuation_reproduces_thin_tau_edge() {
    let (h, l, seed) = duffing_pair();
    let cfg = CcoConfig::default();
    let grown = grow_thin_tau_family(&h, &l, &seed, 1.0, 0.1, &cfg).unwrap();
    let mut start = grown.clone();
    let first_tau = 0.1;
    start.members.retain(|m| (m.times.tau - first_tau).abs() < 1e-12);
    assert_eq!(start.members.len(), 1);
    let path = ParameterPath {
        from: CcoTimes::new(0.0, 0.0, first_tau),
        to: CcoTimes::new(0.0, 0.0, 1.0),
    };
    let cont = continue_family(&start, &path, &StepControl::default()).unwrap();
    assert!(cont.truncated.is_none());
    let a = cont.last().unwrap();
    let b = grown.last().unwrap();
    assert!((a.times.tau - 1.0).abs() < 1e-12);
    assert!(a.x_start.distance(&b.x_start) < 1e-8);
}

#[test]
fn continuation_into_the_interior_keeps_closure() {
    let (h, l, seed) = duffing_pair();
    let cfg = CcoConfig::default();
    let o = close_cco(&h, &l, &seed.point, CcoTimes::new(0.3, 0.3, 0.4), &cfg).unwrap();
    let fam = CCOFamily {
        seed: seed.clone(),
        inner: h.clone(),
        driving: l.clone(),
        config: cfg.clone(),
        members: vec![o.clone()],
        parameterization: FamilyParameterization::InteriorSheet,
        bifurcations: vec![],
        truncated: None,
    };
    let path = ParameterPath {
        from: o.times,
        to: CcoTimes::new(0.8, 0.6, 0.7),
    };
    let cont = continue_family(&fam, &path, &StepControl::default()).unwrap();
    assert!(cont.members.len() > 2);
    for m in &cont.members {
        assert!(m.closure_residual < 1e-9);
    }
    for b in &cont.bifurcations {
        assert!(b.det_before * b.det_after < 0.0);
    }
}

#[test]
fn action_derivatives_are_energies() {
    let (h, l, seed) = duffing_pair();
    let cfg = CcoConfig::default();
    let times = CcoTimes::new(0.8, 0.6, 0.5);
    let o = close_cco(&h, &l, &seed.point, times, &cfg).unwrap();
    let eps = 1e-4;
    let at = |t: CcoTimes| close_cco(&h, &l, &o.x_start, t, &cfg).unwrap();
    let dt = (at(CcoTimes::new(times.t + eps, times.t_prime, times.tau)).action_total
        - at(CcoTimes::new(times.t - eps, times.t_prime, times.tau)).action_total)
        / (2.0 * eps);
    let dtp = (at(CcoTimes::new(times.t, times.t_prime + eps, times.tau)).action_total
        - at(CcoTimes::new(times.t, times.t_prime - eps, times.tau)).action_total)
        / (2.0 * eps);
    assert!((dt - o.energy).abs() < 1e-6, "{dt} vs E = {}", o.energy);
    assert!((dtp + o.energy_prime).abs() < 1e-6, "{dtp} vs E' = {}", o.energy_prime);
}

#[test]
fn inverse_energy_jacobian_is_an_action_hessian() {
    let (h, l, seed) = duffing_pair();
    let cfg = CcoConfig::default();
    let o = close_cco(&h, &l, &seed.point, CcoTimes::new(0.8, 0.6, 0.5), &cfg).unwrap();
    let fam = CCOFamily {
        seed,
        inner: h,
        driving: l,
        config: cfg,
        members: vec![o],
        parameterization: FamilyParameterization::InteriorSheet,
        bifurcations: vec![],
        truncated: None,
    };
    let inv = family_jacobian(&fam, 0).unwrap();
    // t′ = ∂𝕊/∂E′ and −t = ∂𝕊/∂E, so ∂t′/∂E = −∂t/∂E′.
    let scale = inv.amax();
    assert!((inv[(1, 0)] + inv[(0, 1)]).abs() < 1e-5 * scale, "{inv}");
}

#[test]
fn energy_targeting_hits_requested_energies() {
    let (h, l, seed) = duffing_pair();
    let cfg = CcoConfig::default();
    let o = close_cco(&h, &l, &seed.point, CcoTimes::new(0.8, 0.6, 0.5), &cfg).unwrap();
    let (e, ep) = (o.energy + 0.01, o.energy_prime - 0.01);
    let (t, _) = target_energies(&h, &l, &o, e, ep, &cfg).unwrap();
    assert!((t.energy - e).abs() < 1e-10);
    assert!((t.energy_prime - ep).abs() < 1e-10);
    assert!(t.closure_residual < 1e-9);
}

#[test]
fn driven_image_area_matches_segment_sum() {
    let (h, l, seed) = duffing_pair();
    let cfg = CcoConfig::default();
    for times in [
        CcoTimes::new(0.8, 0.6, 0.5),
        CcoTimes::new(1.2, 0.3, 0.9),
        CcoTimes::new(0.7, 0.7, 0.0),
    ] {
        let o = close_cco(&h, &l, &seed.point, times, &cfg).unwrap();
        let c = driven_segment_action_check(&h, &l, &o, &cfg).unwrap();
        assert!(c.discrepancy < 1e-8, "{times:?}: {c:?}");
        if times.tau == 0.0 {
            assert_eq!(c.pc_x1, 0.0);
            assert_eq!(c.pc_x3, 0.0);
        }
    }
}

#[test]
fn closure_is_deterministic() {
    let (h, l, seed) = duffing_pair();
    let cfg = CcoConfig::default();
    let times = CcoTimes::new(0.8, 0.6, 0.5);
    let a = close_cco(&h, &l, &seed.point, times, &cfg).unwrap();
    let b = close_cco(&h, &l, &seed.point, times, &cfg).unwrap();
    assert_eq!(a, b);
}
