//! Quantum reference for one degree of freedom: Weyl-ordered operators in a
//! truncated harmonic-oscillator basis, time-ordered propagation of the
//! driving, exact transition probabilities and their Lorentzian smearing.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::density::{lorentzian, DensityError, Matrix, TransitionGrid};
use crate::hamiltonians::{HamiltonianSystem, Polynomial, TimeFactor};

pub type ComplexMatrix = DMatrix<Complex64>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("quantum reference needs one degree of freedom, system has {dof}")]
    NotOneDof { dof: usize },
    #[error("inner Hamiltonian must not depend on time")]
    TimeDependentInner,
    #[error("basis too small: level {level} moved by {defect:e} between basis sizes {small} and {large}")]
    BasisTooSmall {
        level: usize,
        defect: f64,
        small: usize,
        large: usize,
    },
    #[error("operator is not Hermitian: defect {0:e}")]
    NotHermitian(f64),
    #[error("step size too large: unitarity defect {unitarity:e}, step-halving change {richardson:e}")]
    StepSize { unitarity: f64, richardson: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Harmonic-oscillator eigenbasis with frequency `omega` centred at `(p, q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub size: usize,
    pub omega: f64,
    pub center_q: f64,
    pub center_p: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            size: 128,
            omega: 1.0,
            center_q: 0.0,
            center_p: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub basis: BasisConfig,
    /// Levels above this energy are not used; `None` uses the lowest quarter of the basis.
    pub level_cutoff: Option<f64>,
    /// Allowed change of the used levels between the basis and its half.
    pub convergence_tol: f64,
    pub check_convergence: bool,
    pub unitarity_tol: f64,
    pub richardson_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            basis: BasisConfig::default(),
            level_cutoff: None,
            convergence_tol: 1e-8,
            check_convergence: true,
            unitarity_tol: 1e-9,
            richardson_tol: 1e-7,
        }
    }
}

/// Matrices of the inner and driving operators with the spectrum of the inner one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumModel {
    pub hbar: f64,
    pub basis: BasisConfig,
    pub h_matrix: ComplexMatrix,
    /// Driving operator as `Σ f(τ)·Λ_f`.
    pub driving_terms: Vec<(TimeFactor, ComplexMatrix)>,
    /// Ascending.
    pub energies: Vec<f64>,
    /// Columns are the eigenvectors of `energies`.
    pub eigenvectors: ComplexMatrix,
    /// Number of levels used for transition densities.
    pub levels_used: usize,
    /// Largest change of a used level against the half basis, when checked.
    pub convergence_defect: Option<f64>,
}

impl QuantumModel {
    pub fn size(&self) -> usize {
        self.basis.size
    }

    pub fn driving_at(&self, tau: f64) -> ComplexMatrix {
        let n = self.size();
        let mut out = ComplexMatrix::zeros(n, n);
        for (f, m) in &self.driving_terms {
            out += m * Complex64::new(f.eval(tau), 0.0);
        }
        out
    }

    pub fn is_driving_time_dependent(&self) -> bool {
        self.driving_terms.iter().any(|(f, _)| !f.is_constant())
    }

    /// Mean spacing of the used levels.
    pub fn mean_spacing(&self) -> f64 {
        let k = self.levels_used.max(2);
        (self.energies[k - 1] - self.energies[0]) / (k - 1) as f64
    }
}

/// `(q̂, p̂)` in the first `n` basis states.
fn ladder_operators(n: usize, hbar: f64, basis: &BasisConfig) -> (ComplexMatrix, ComplexMatrix) {
    let s = (hbar / (2.0 * basis.omega)).sqrt();
    let r = (hbar * basis.omega / 2.0).sqrt();
    let mut q = ComplexMatrix::zeros(n, n);
    let mut p = ComplexMatrix::zeros(n, n);
    for k in 0..n {
        q[(k, k)] = Complex64::new(basis.center_q, 0.0);
        p[(k, k)] = Complex64::new(basis.center_p, 0.0);
    }
    for k in 1..n {
        let a = (k as f64).sqrt();
        q[(k - 1, k)] += Complex64::new(s * a, 0.0);
        q[(k, k - 1)] += Complex64::new(s * a, 0.0);
        p[(k, k - 1)] += Complex64::new(0.0, r * a);
        p[(k - 1, k)] += Complex64::new(0.0, -r * a);
    }
    (q, p)
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn matrix_power(m: &ComplexMatrix, k: u32) -> ComplexMatrix {
    let mut out = ComplexMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// Weyl-ordered matrix of a time-independent polynomial in `(p, q)`:
/// `p^m q^n ↦ 2^{−n} Σ_k C(n,k) q̂^k p̂^m q̂^{n−k}`, built in a basis padded
/// by the degree so the retained block is exact.
pub fn weyl_matrix(poly: &Polynomial, hbar: f64, basis: &BasisConfig) -> Result<ComplexMatrix, OracleError> {
    if poly.dim() != 2 {
        return Err(OracleError::NotOneDof { dof: poly.dim() / 2 });
    }
    let n = basis.size;
    let pad = n + poly.degree() as usize + 1;
    let (q, p) = ladder_operators(pad, hbar, basis);
    let max_m = poly.terms().iter().map(|t| t.powers[0]).max().unwrap_or(0);
    let max_n = poly.terms().iter().map(|t| t.powers[1]).max().unwrap_or(0);
    let p_pow: Vec<ComplexMatrix> = (0..=max_m).map(|k| matrix_power(&p, k)).collect();
    let q_pow: Vec<ComplexMatrix> = (0..=max_n).map(|k| matrix_power(&q, k)).collect();
    let mut out = ComplexMatrix::zeros(pad, pad);
    for term in poly.terms() {
        if !term.time.is_constant() {
            return Err(OracleError::Invalid("time factor inside a static operator".into()));
        }
        let (m, nq) = (term.powers[0], term.powers[1]);
        let mut sym = ComplexMatrix::zeros(pad, pad);
        for k in 0..=nq {
            let w = binomial(nq, k);
            sym += (&q_pow[k as usize] * &p_pow[m as usize] * &q_pow[(nq - k) as usize]) * Complex64::new(w, 0.0);
        }
        out += sym * Complex64::new(term.coeff / 2f64.powi(nq as i32), 0.0);
    }
    Ok(out.view((0, 0), (n, n)).into_owned())
}

fn hermiticity_defect(m: &ComplexMatrix) -> f64 {
    (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn sorted_eigen(h: &ComplexMatrix) -> (Vec<f64>, ComplexMatrix) {
    let eig = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = ComplexMatrix::from_columns(
        &order.iter().map(|&k| eig.eigenvectors.column(k)).collect::<Vec<_>>(),
    );
    (values, vectors)
}

fn used_levels(energies: &[f64], cfg: &OracleConfig) -> usize {
    match cfg.level_cutoff {
        Some(c) => energies.iter().take_while(|e| **e <= c).count(),
        None => (energies.len() / 4).max(1),
    }
}

/// Operator matrices and the inner spectrum.
pub fn build_model(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    hbar: f64,
    cfg: &OracleConfig,
) -> Result<QuantumModel, OracleError> {
    for sys in [inner, driving] {
        if sys.dof() != 1 {
            return Err(OracleError::NotOneDof { dof: sys.dof() });
        }
    }
    if inner.is_time_dependent() {
        return Err(OracleError::TimeDependentInner);
    }
    if !(hbar > 0.0) || cfg.basis.size < 4 || !(cfg.basis.omega > 0.0) {
        return Err(OracleError::Invalid(
            "hbar and basis frequency must be positive, basis size at least 4".into(),
        ));
    }
    let h_matrix = weyl_matrix(inner.polynomial(), hbar, &cfg.basis)?;
    let defect = hermiticity_defect(&h_matrix);
    if defect > 1e-12 * (1.0 + h_matrix.iter().map(|z| z.norm()).fold(0.0, f64::max)) {
        return Err(OracleError::NotHermitian(defect));
    }
    let driving_terms = driving
        .polynomial()
        .split_by_time()
        .into_iter()
        .map(|(f, poly)| Ok((f, weyl_matrix(&poly, hbar, &cfg.basis)?)))
        .collect::<Result<Vec<_>, OracleError>>()?;
    let (energies, eigenvectors) = sorted_eigen(&h_matrix);
    let levels_used = used_levels(&energies, cfg);
    if levels_used == 0 {
        return Err(OracleError::Invalid("no level below the level cutoff".into()));
    }
    let mut convergence_defect = None;
    if cfg.check_convergence {
        let small = BasisConfig {
            size: cfg.basis.size / 2,
            ..cfg.basis.clone()
        };
        if levels_used > small.size {
            return Err(OracleError::BasisTooSmall {
                level: small.size,
                defect: f64::INFINITY,
                small: small.size,
                large: cfg.basis.size,
            });
        }
        let (coarse, _) = sorted_eigen(&weyl_matrix(inner.polynomial(), hbar, &small)?);
        let mut worst = 0.0f64;
        for k in 0..levels_used {
            let d = (coarse[k] - energies[k]).abs();
            worst = worst.max(d);
            if d > cfg.convergence_tol * (1.0 + energies[k].abs()) {
                return Err(OracleError::BasisTooSmall {
                    level: k,
                    defect: d,
                    small: small.size,
                    large: cfg.basis.size,
                });
            }
        }
        convergence_defect = Some(worst);
    }
    Ok(QuantumModel {
        hbar,
        basis: cfg.basis.clone(),
        h_matrix,
        driving_terms,
        energies,
        eigenvectors,
        levels_used,
        convergence_defect,
    })
}

/// `exp(−i G dt/ħ)` for Hermitian `G` through its spectral decomposition.
pub fn hermitian_exponential(generator: &ComplexMatrix, dt: f64, hbar: f64) -> ComplexMatrix {
    let eig = SymmetricEigen::new(generator.clone());
    let phases = eig
        .eigenvalues
        .map(|l| Complex64::from_polar(1.0, -l * dt / hbar));
    let v = &eig.eigenvectors;
    let scaled = ComplexMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * phases[j]);
    scaled * v.adjoint()
}

/// `exp(−i G dt/ħ)` by scaling and squaring with a Padé approximant.
pub fn pade_exponential(generator: &ComplexMatrix, dt: f64, hbar: f64) -> ComplexMatrix {
    (generator * Complex64::new(0.0, -dt / hbar)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    pub tau: f64,
    pub steps: usize,
    pub u: ComplexMatrix,
    /// `max |U†U − I|`.
    pub unitarity_defect: f64,
    /// `max |U_steps − U_{2·steps}|`; absent for a time-independent driving.
    pub richardson_defect: Option<f64>,
}

fn midpoint_product(model: &QuantumModel, tau: f64, steps: usize) -> ComplexMatrix {
    let n = model.size();
    let dt = tau / steps as f64;
    let mut u = ComplexMatrix::identity(n, n);
    for s in 0..steps {
        let mid = (s as f64 + 0.5) * dt;
        u = hermitian_exponential(&model.driving_at(mid), dt, model.hbar) * u;
    }
    u
}

fn max_abs(m: &ComplexMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Time-ordered `Û(τ) = Π exp(−iΛ̂(τ_mid)Δτ/ħ)` over `steps` midpoint steps.
///
/// A time-independent driving is exponentiated once, which equals the
/// product of identical steps. Otherwise the product is recomputed with half
/// the step and the change is checked.
pub fn propagate(
    model: &QuantumModel,
    tau: f64,
    steps: usize,
    cfg: &OracleConfig,
) -> Result<Propagator, OracleError> {
    if steps == 0 || !tau.is_finite() {
        return Err(OracleError::Invalid("steps must be positive and tau finite".into()));
    }
    let n = model.size();
    let (u, richardson) = if model.is_driving_time_dependent() {
        let coarse = midpoint_product(model, tau, steps);
        let fine = midpoint_product(model, tau, 2 * steps);
        let change = max_abs(&(&fine - &coarse));
        (fine, Some(change))
    } else {
        (hermitian_exponential(&model.driving_at(0.0), tau, model.hbar), None)
    };
    let unitarity = max_abs(&(u.adjoint() * &u - ComplexMatrix::identity(n, n)));
    if unitarity > cfg.unitarity_tol || richardson.is_some_and(|r| r > cfg.richardson_tol) {
        return Err(OracleError::StepSize {
            unitarity,
            richardson: richardson.unwrap_or(0.0),
        });
    }
    Ok(Propagator {
        tau,
        steps: if richardson.is_some() { 2 * steps } else { steps },
        u,
        unitarity_defect: unitarity,
        richardson_defect: richardson,
    })
}

/// `P_kl = |⟨k|Û|l⟩|²` in the eigenbasis of the inner operator, from `l` to `k`.
pub fn transition_probabilities(model: &QuantumModel, u: &ComplexMatrix) -> Matrix {
    let v = &model.eigenvectors;
    let in_basis = v.adjoint() * u * v;
    in_basis.map(|z| z.norm_sqr())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmearedDensity {
    pub grid: TransitionGrid,
    pub values: Matrix,
    /// Bound on the contribution of the levels that were not used.
    pub tail_bound: Matrix,
    pub levels_used: usize,
    pub mean_spacing: f64,
    pub warnings: Vec<String>,
}

/// `Σ_{kl} δ_ε(E′ − E_k) δ_ε(E − E_l) P_kl` over the used levels.
pub fn smeared_density(
    model: &QuantumModel,
    probabilities: &Matrix,
    grid: &TransitionGrid,
) -> Result<SmearedDensity, OracleError> {
    grid.validate()?;
    let n = model.size();
    if probabilities.shape() != (n, n) {
        return Err(OracleError::Invalid("probability matrix does not match the basis".into()));
    }
    let k_used = model.levels_used;
    let eps = grid.epsilon;
    let levels = &model.energies[..k_used];
    let a = Matrix::from_fn(grid.e_values.len(), k_used, |i, l| lorentzian(eps, grid.e_values[i] - levels[l]));
    let b = Matrix::from_fn(grid.e_prime_values.len(), k_used, |j, k| {
        lorentzian(eps, grid.e_prime_values[j] - levels[k])
    });
    let block = probabilities.view((0, 0), (k_used, k_used));
    let values = &a * block.transpose() * b.transpose();

    let spacing = model.mean_spacing();
    let last = model.energies[k_used - 1];
    // Lorentzian weight of the unused levels, the ones beyond the basis counted at the last spacing.
    let tail = |x: f64| -> f64 {
        let explicit: f64 = model.energies[k_used..].iter().map(|e| lorentzian(eps, x - e)).sum();
        let top = *model.energies.last().unwrap();
        let beyond = (0.5 - ((top - x) / eps).atan() / PI) / spacing;
        explicit + beyond
    };
    let tail_e: Vec<f64> = grid.e_values.iter().map(|&x| tail(x)).collect();
    let tail_p: Vec<f64> = grid.e_prime_values.iter().map(|&x| tail(x)).collect();
    let peak = 1.0 / (PI * eps);
    let tail_bound = Matrix::from_fn(grid.e_values.len(), grid.e_prime_values.len(), |i, j| {
        peak * (tail_e[i] + tail_p[j])
    });
    let mut warnings = Vec::new();
    if eps < spacing {
        warnings.push(format!(
            "epsilon {eps:e} is below the mean level spacing {spacing:e}: single-level regime"
        ));
    }
    let grid_top = grid
        .e_values
        .last()
        .unwrap()
        .max(*grid.e_prime_values.last().unwrap());
    if grid_top > last {
        warnings.push(format!(
            "grid reaches {grid_top} above the highest used level {last}"
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(SmearedDensity {
        grid: grid.clone(),
        values,
        tail_bound,
        levels_used: k_used,
        mean_spacing: spacing,
        warnings,
    })
}
