//! Evaluatable Hamiltonians, the symplectic structure, and Poisson brackets.
//!
//! Coordinates are ordered `x = (p₁..p_N, q₁..q_N)`. Hamilton's equations
//! read `ẋ = J ∇K` with `J = [[0, −I], [I, 0]]`, and the Poisson bracket is
//! `{a, b} = Σᵢ ∂a/∂pᵢ ∂b/∂qᵢ − ∂a/∂qᵢ ∂b/∂pᵢ`, which coincides with the
//! wedge `ẋ_a ∧ ẋ_b` of the two Hamiltonian vector fields.

mod builtins;
pub mod expr;
pub mod polynomial;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use builtins::{builtin, builtin_names};
pub use expr::{parse_polynomial, ParseError};
pub use polynomial::{Polynomial, Term, TimeFactor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HamiltonianError {
    #[error("dimension mismatch: expected {expected} coordinates, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite {what} at x = {x:?}")]
    NonFinite { what: &'static str, x: Vec<f64> },
    #[error("cannot parse Hamiltonian `{source_text}`: {error}")]
    Parse {
        source_text: String,
        error: ParseError,
    },
    #[error("unknown builtin Hamiltonian `{0}`")]
    UnknownBuiltin(String),
    #[error("degree of freedom count must be positive")]
    ZeroDof,
}

/// A point `x = (p, q)` of the 2N-dimensional phase space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseSpacePoint(Vec<f64>);

impl PhaseSpacePoint {
    pub fn new(coords: Vec<f64>) -> Self {
        assert!(coords.len() % 2 == 0, "phase-space points have even length");
        Self(coords)
    }

    /// One-degree-of-freedom convenience constructor.
    pub fn pq(p: f64, q: f64) -> Self {
        Self(vec![p, q])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self::new(v.iter().copied().collect())
    }

    pub fn dof(&self) -> usize {
        self.0.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn p(&self) -> &[f64] {
        &self.0[..self.dof()]
    }

    pub fn q(&self) -> &[f64] {
        &self.0[self.dof()..]
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &PhaseSpacePoint) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for PhaseSpacePoint {
    fn from(v: Vec<f64>) -> Self {
        Self::new(v)
    }
}

/// The canonical symplectic matrix `J = [[0, −I], [I, 0]]` for N degrees of freedom.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SymplecticForm {
    dof: usize,
}

impl SymplecticForm {
    pub fn new(dof: usize) -> Self {
        Self { dof }
    }

    pub fn dim(&self) -> usize {
        2 * self.dof
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dof;
        let mut j = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            j[(i, n + i)] = -1.0;
            j[(n + i, i)] = 1.0;
        }
        j
    }

    /// `J v` written into `out`.
    #[inline]
    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dof;
        for i in 0..n {
            out[i] = -v[n + i];
            out[n + i] = v[i];
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        self.apply_into(v.as_slice(), out.as_mut_slice());
        out
    }

    /// Symplectic area `u ∧ v = Σ u_p v_q − u_q v_p`.
    #[inline]
    pub fn wedge(&self, u: &[f64], v: &[f64]) -> f64 {
        let n = self.dof;
        (0..n).map(|i| u[i] * v[n + i] - u[n + i] * v[i]).sum()
    }

    /// `max |Mᵀ J M − J|`.
    pub fn symplecticity_defect(&self, m: &DMatrix<f64>) -> f64 {
        let j = self.matrix();
        (m.transpose() * &j * m - j).amax()
    }
}

/// An immutable polynomial Hamiltonian `K(x, t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSystem {
    name: String,
    dof: usize,
    expression: String,
    poly: Polynomial,
}

impl HamiltonianSystem {
    pub fn from_polynomial(name: impl Into<String>, dof: usize, poly: Polynomial) -> Self {
        assert_eq!(poly.dim(), 2 * dof, "polynomial dimension must be 2N");
        Self {
            name: name.into(),
            dof,
            expression: String::new(),
            poly,
        }
    }

    /// Parse a user expression; see [`expr`] for the grammar.
    pub fn from_expression(
        name: impl Into<String>,
        expression: &str,
        dof: usize,
        params: &BTreeMap<String, f64>,
    ) -> Result<Self, HamiltonianError> {
        if dof == 0 {
            return Err(HamiltonianError::ZeroDof);
        }
        let poly =
            parse_polynomial(expression, dof, params).map_err(|error| HamiltonianError::Parse {
                source_text: expression.to_string(),
                error,
            })?;
        let mut sys = Self::from_polynomial(name, dof, poly);
        sys.expression = expression.to_string();
        Ok(sys)
    }

    /// A builtin name, or otherwise an expression.
    pub fn resolve(
        spec: &str,
        dof: usize,
        params: &BTreeMap<String, f64>,
    ) -> Result<Self, HamiltonianError> {
        match builtin(spec.trim(), params) {
            Ok(sys) => {
                if sys.dof != dof {
                    return Err(HamiltonianError::DimensionMismatch {
                        expected: 2 * dof,
                        found: 2 * sys.dof,
                    });
                }
                Ok(sys)
            }
            Err(HamiltonianError::UnknownBuiltin(_)) => {
                Self::from_expression(spec.trim(), spec, dof, params)
            }
            Err(e) => Err(e),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn expression(&self) -> &str {
        &self.expression
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn dim(&self) -> usize {
        2 * self.dof
    }

    pub fn polynomial(&self) -> &Polynomial {
        &self.poly
    }

    pub fn symplectic(&self) -> SymplecticForm {
        SymplecticForm::new(self.dof)
    }

    pub fn is_time_dependent(&self) -> bool {
        self.poly.is_time_dependent()
    }

    pub(crate) fn with_expression(mut self, expression: impl Into<String>) -> Self {
        self.expression = expression.into();
        self
    }

    #[inline]
    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        self.poly.value(x, t)
    }

    /// Value with gradient and row-major Hessian written in place.
    #[inline]
    pub fn eval_into(
        &self,
        x: &[f64],
        t: f64,
        grad: Option<&mut [f64]>,
        hess: Option<&mut [f64]>,
    ) -> f64 {
        self.poly.eval_into(x, t, grad, hess)
    }

    pub fn gradient(&self, x: &[f64], t: f64) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        self.poly.eval_into(x, t, Some(g.as_mut_slice()), None);
        g
    }

    pub fn hessian(&self, x: &[f64], t: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = vec![0.0; n * n];
        self.poly.eval_into(x, t, None, Some(&mut h));
        DMatrix::from_row_slice(n, n, &h)
    }

    /// The same system frozen at time `t`.
    pub fn frozen_at(&self, t: f64) -> HamiltonianSystem {
        if !self.is_time_dependent() {
            return self.clone();
        }
        let mut poly = Polynomial::zero(self.dim());
        for (factor, part) in self.poly.split_by_time() {
            poly = poly.add(&part.scale(factor.eval(t)));
        }
        HamiltonianSystem::from_polynomial(format!("{}@{t}", self.name), self.dof, poly)
    }

    /// Second-order Taylor model about `x0` at time `t`.
    pub fn local_quadratic(&self, x0: &[f64], t: f64) -> HamiltonianSystem {
        let n = self.dim();
        let v0 = self.value(x0, t);
        let g = self.gradient(x0, t);
        let h = self.hessian(x0, t);
        let shifted: Vec<Polynomial> = (0..n)
            .map(|i| Polynomial::coordinate(n, i).add(&Polynomial::constant(n, -x0[i])))
            .collect();
        let mut poly = Polynomial::constant(n, v0);
        for i in 0..n {
            poly = poly.add(&shifted[i].scale(g[i]));
            for j in 0..n {
                let prod = shifted[i].mul(&shifted[j]).expect("constant coefficients");
                poly = poly.add(&prod.scale(0.5 * h[(i, j)]));
            }
        }
        HamiltonianSystem::from_polynomial(format!("{}_quadratic", self.name), self.dof, poly)
    }
}

fn check_dim(sys: &HamiltonianSystem, x: &[f64]) -> Result<(), HamiltonianError> {
    if x.len() != sys.dim() {
        return Err(HamiltonianError::DimensionMismatch {
            expected: sys.dim(),
            found: x.len(),
        });
    }
    Ok(())
}

fn finite(v: &DVector<f64>, what: &'static str, x: &[f64]) -> Result<(), HamiltonianError> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(HamiltonianError::NonFinite {
            what,
            x: x.to_vec(),
        })
    }
}

/// `ẋ = J ∇K(x, t)`.
pub fn hamiltonian_vector_field(
    sys: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    time: f64,
) -> Result<DVector<f64>, HamiltonianError> {
    check_dim(sys, x.as_slice())?;
    let g = sys.gradient(x.as_slice(), time);
    finite(&g, "gradient", x.as_slice())?;
    Ok(sys.symplectic().apply(&g))
}

/// `{a, b}` evaluated at `x`, both systems at the same `time`.
pub fn poisson_bracket(
    a: &HamiltonianSystem,
    b: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    time: f64,
) -> Result<f64, HamiltonianError> {
    check_dim(a, x.as_slice())?;
    check_dim(b, x.as_slice())?;
    let ga = a.gradient(x.as_slice(), time);
    let gb = b.gradient(x.as_slice(), time);
    finite(&ga, "gradient", x.as_slice())?;
    finite(&gb, "gradient", x.as_slice())?;
    let n = a.dof();
    Ok((0..n).map(|i| ga[i] * gb[n + i] - ga[n + i] * gb[i]).sum())
}

/// Gradient of the bracket `C = {a, b}` from second derivatives:
/// `∇C = H_a W ∇b − H_b W ∇a` with `W = Jᵀ`.
pub fn poisson_bracket_gradient(
    a: &HamiltonianSystem,
    b: &HamiltonianSystem,
    x: &PhaseSpacePoint,
    time: f64,
) -> Result<DVector<f64>, HamiltonianError> {
    check_dim(a, x.as_slice())?;
    check_dim(b, x.as_slice())?;
    let xs = x.as_slice();
    let ga = a.gradient(xs, time);
    let gb = b.gradient(xs, time);
    let ha = a.hessian(xs, time);
    let hb = b.hessian(xs, time);
    let w = a.symplectic().matrix().transpose();
    let out = &ha * (&w * &gb) - &hb * (&w * &ga);
    finite(&out, "bracket gradient", xs)?;
    Ok(out)
}
