//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use cco_core::density::TransitionGrid;
use cco_core::HamiltonianSystem;

/// Harmonic inner Hamiltonian and its displaced driving, `a = 0.5`, `b = 1`.
pub fn harmonic_pair() -> (HamiltonianSystem, HamiltonianSystem) {
    let params: BTreeMap<String, f64> = [("a".to_string(), 0.5), ("b".to_string(), 1.0)].into();
    let inner = HamiltonianSystem::resolve("harmonic", 1, &params).expect("builtin");
    let driving = HamiltonianSystem::resolve("displaced", 1, &params).expect("builtin");
    (inner, driving)
}

pub fn small_grid(hbar: f64, epsilon: f64) -> TransitionGrid {
    TransitionGrid::uniform((0.9, 1.1), 3, (1.6, 2.4), 9, 1.0, epsilon, hbar).expect("valid grid")
}
