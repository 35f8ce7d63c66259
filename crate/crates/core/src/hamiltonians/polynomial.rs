//! Time-separable polynomials in the phase-space coordinates.
//!
//! Every Hamiltonian handled by the crate is a finite sum of terms
//! `c · f(t) · p₁^k₁ ⋯ q_N^k_{2N}` where `f` is one of a small set of time
//! factors. This keeps analytic gradients and Hessians exact and gives the
//! quantum oracle a direct route to Weyl-ordered operators.

use serde::{Deserialize, Serialize};

/// Separable time dependence of a single term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeFactor {
    One,
    Sin { omega: f64 },
    Cos { omega: f64 },
}

impl TimeFactor {
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TimeFactor::One => 1.0,
            TimeFactor::Sin { omega } => (omega * t).sin(),
            TimeFactor::Cos { omega } => (omega * t).cos(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TimeFactor::One)
    }

    fn same_as(&self, other: &TimeFactor) -> bool {
        match (self, other) {
            (TimeFactor::One, TimeFactor::One) => true,
            (TimeFactor::Sin { omega: a }, TimeFactor::Sin { omega: b }) => a == b,
            (TimeFactor::Cos { omega: a }, TimeFactor::Cos { omega: b }) => a == b,
            _ => false,
        }
    }
}

/// One monomial term. `powers` has length `2N`, ordered `(p₁..p_N, q₁..q_N)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coeff: f64,
    pub time: TimeFactor,
    pub powers: Vec<u32>,
}

impl Term {
    pub fn degree(&self) -> u32 {
        self.powers.iter().sum()
    }
}

/// Product of two time-dependent factors is not separable in the supported
/// form; the parser reports this as an error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonSeparable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    dim: usize,
    terms: Vec<Term>,
    max_power: u32,
}

impl Polynomial {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: Vec::new(),
            max_power: 0,
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        let mut poly = Self::zero(dim);
        poly.push(Term {
            coeff: c,
            time: TimeFactor::One,
            powers: vec![0; dim],
        });
        poly
    }

    /// The coordinate `x_index` (p's first, then q's).
    pub fn coordinate(dim: usize, index: usize) -> Self {
        let mut powers = vec![0; dim];
        powers[index] = 1;
        let mut poly = Self::zero(dim);
        poly.push(Term {
            coeff: 1.0,
            time: TimeFactor::One,
            powers,
        });
        poly
    }

    pub fn time_factor(dim: usize, factor: TimeFactor) -> Self {
        let mut poly = Self::zero(dim);
        poly.push(Term {
            coeff: 1.0,
            time: factor,
            powers: vec![0; dim],
        });
        poly
    }

    pub fn from_terms(dim: usize, terms: Vec<Term>) -> Self {
        let mut poly = Self::zero(dim);
        for term in terms {
            assert_eq!(term.powers.len(), dim, "term dimension mismatch");
            poly.push(term);
        }
        poly
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(Term::degree).max().unwrap_or(0)
    }

    pub fn is_time_dependent(&self) -> bool {
        self.terms.iter().any(|t| !t.time.is_constant())
    }

    /// Constant value if the polynomial has no coordinate or time dependence.
    pub fn as_constant(&self) -> Option<f64> {
        if self
            .terms
            .iter()
            .all(|t| t.degree() == 0 && t.time.is_constant())
        {
            Some(self.terms.iter().map(|t| t.coeff).sum())
        } else {
            None
        }
    }

    fn push(&mut self, term: Term) {
        if term.coeff == 0.0 {
            return;
        }
        if let Some(existing) = self
            .terms
            .iter_mut()
            .find(|t| t.powers == term.powers && t.time.same_as(&term.time))
        {
            existing.coeff += term.coeff;
        } else {
            self.max_power = self
                .max_power
                .max(term.powers.iter().copied().max().unwrap_or(0));
            self.terms.push(term);
        }
        self.terms.retain(|t| t.coeff != 0.0);
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for term in &other.terms {
            out.push(term.clone());
        }
        out
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.dim);
        for term in &self.terms {
            out.push(Term {
                coeff: term.coeff * s,
                ..term.clone()
            });
        }
        out
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial, NonSeparable> {
        let mut out = Polynomial::zero(self.dim);
        for a in &self.terms {
            for b in &other.terms {
                let time = match (a.time, b.time) {
                    (TimeFactor::One, f) | (f, TimeFactor::One) => f,
                    _ => return Err(NonSeparable),
                };
                let powers = a.powers.iter().zip(&b.powers).map(|(x, y)| x + y).collect();
                out.push(Term {
                    coeff: a.coeff * b.coeff,
                    time,
                    powers,
                });
            }
        }
        Ok(out)
    }

    pub fn pow(&self, n: u32) -> Result<Polynomial, NonSeparable> {
        let mut out = Polynomial::constant(self.dim, 1.0);
        for _ in 0..n {
            out = out.mul(self)?;
        }
        Ok(out)
    }

    /// Terms with the given time factor, with that factor stripped.
    pub fn split_by_time(&self) -> Vec<(TimeFactor, Polynomial)> {
        let mut groups: Vec<(TimeFactor, Polynomial)> = Vec::new();
        for term in &self.terms {
            let stripped = Term {
                time: TimeFactor::One,
                ..term.clone()
            };
            match groups.iter_mut().find(|(f, _)| f.same_as(&term.time)) {
                Some((_, poly)) => poly.push(stripped),
                None => {
                    let mut poly = Polynomial::zero(self.dim);
                    poly.push(stripped);
                    groups.push((term.time, poly));
                }
            }
        }
        groups
    }

    /// Value, and optionally gradient and row-major Hessian, in one pass.
    pub fn eval_into(
        &self,
        x: &[f64],
        t: f64,
        mut grad: Option<&mut [f64]>,
        mut hess: Option<&mut [f64]>,
    ) -> f64 {
        let n = self.dim;
        debug_assert_eq!(x.len(), n);
        let stride = self.max_power as usize + 1;
        // powers table: pw[i * stride + k] = x_i^k
        let mut table = [0.0f64; 64];
        let mut heap;
        let pw: &mut [f64] = if n * stride <= table.len() {
            &mut table[..n * stride]
        } else {
            heap = vec![0.0; n * stride];
            &mut heap
        };
        for i in 0..n {
            pw[i * stride] = 1.0;
            for k in 1..stride {
                pw[i * stride + k] = pw[i * stride + k - 1] * x[i];
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(h) = hess.as_deref_mut() {
            h.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut value = 0.0;
        for term in &self.terms {
            let c = term.coeff * term.time.eval(t);
            let k = &term.powers;
            let mono: f64 = (0..n).map(|i| pw[i * stride + k[i] as usize]).product();
            value += c * mono;
            if let Some(g) = grad.as_deref_mut() {
                for j in 0..n {
                    if k[j] == 0 {
                        continue;
                    }
                    let mut d = c * k[j] as f64;
                    for i in 0..n {
                        let e = if i == j { k[i] - 1 } else { k[i] };
                        d *= pw[i * stride + e as usize];
                    }
                    g[j] += d;
                }
            }
            if let Some(h) = hess.as_deref_mut() {
                for j in 0..n {
                    if k[j] == 0 {
                        continue;
                    }
                    for l in j..n {
                        if k[l] == 0 || (l == j && k[j] < 2) {
                            continue;
                        }
                        let mut d = c;
                        if l == j {
                            d *= (k[j] * (k[j] - 1)) as f64;
                        } else {
                            d *= (k[j] * k[l]) as f64;
                        }
                        for i in 0..n {
                            let mut e = k[i];
                            if i == j {
                                e -= 1;
                            }
                            if i == l {
                                e -= 1;
                            }
                            d *= pw[i * stride + e as usize];
                        }
                        h[j * n + l] += d;
                        if l != j {
                            h[l * n + j] += d;
                        }
                    }
                }
            }
        }
        value
    }

    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        self.eval_into(x, t, None, None)
    }

    /// Exact partial derivative with respect to coordinate `index`.
    pub fn derivative(&self, index: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.dim);
        for term in &self.terms {
            let k = term.powers[index];
            if k == 0 {
                continue;
            }
            let mut powers = term.powers.clone();
            powers[index] -= 1;
            out.push(Term {
                coeff: term.coeff * k as f64,
                time: term.time,
                powers,
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xq(dim: usize, i: usize) -> Polynomial {
        Polynomial::coordinate(dim, i)
    }

    #[test]
    fn product_and_power_expand() {
        // (p + q)^2 = p^2 + 2pq + q^2
        let s = xq(2, 0).add(&xq(2, 1));
        let sq = s.pow(2).unwrap();
        assert_eq!(sq.terms().len(), 3);
        assert!((sq.value(&[1.5, -0.5], 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_time_factors_rejected() {
        let a = Polynomial::time_factor(2, TimeFactor::Sin { omega: 1.0 });
        let b = Polynomial::time_factor(2, TimeFactor::Cos { omega: 1.0 });
        assert_eq!(a.mul(&b), Err(NonSeparable));
    }

    #[test]
    fn cancellation_drops_terms() {
        let a = xq(2, 0);
        let z = a.add(&a.scale(-1.0));
        assert!(z.terms().is_empty());
        assert_eq!(z.as_constant(), Some(0.0));
    }

    #[test]
    fn gradient_and_hessian_of_mixed_monomial() {
        // f = 3 p^2 q^3
        let f = Polynomial::from_terms(
            2,
            vec![Term {
                coeff: 3.0,
                time: TimeFactor::One,
                powers: vec![2, 3],
            }],
        );
        let (p, q) = (0.7, -1.3);
        let mut g = [0.0; 2];
        let mut h = [0.0; 4];
        let v = f.eval_into(&[p, q], 0.0, Some(&mut g), Some(&mut h));
        assert!((v - 3.0 * p * p * q * q * q).abs() < 1e-14);
        assert!((g[0] - 6.0 * p * q.powi(3)).abs() < 1e-14);
        assert!((g[1] - 9.0 * p * p * q * q).abs() < 1e-14);
        assert!((h[0] - 6.0 * q.powi(3)).abs() < 1e-14);
        assert!((h[1] - 18.0 * p * q * q).abs() < 1e-14);
        assert!((h[2] - h[1]).abs() < 1e-15);
        assert!((h[3] - 18.0 * p * p * q).abs() < 1e-14);
    }

    #[test]
    fn split_by_time_groups_terms() {
        let s = Polynomial::time_factor(2, TimeFactor::Sin { omega: 2.0 });
        let poly = xq(2, 0).add(&s.mul(&xq(2, 1)).unwrap());
        let groups = poly.split_by_time();
        assert_eq!(groups.len(), 2);
        assert!(poly.is_time_dependent());
    }
}
