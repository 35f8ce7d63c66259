//! Minimal expression language for polynomial Hamiltonians.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' integer)?
//! primary := number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! Coordinates are `p`, `q` for one degree of freedom and `p1..pN`,
//! `q1..qN` otherwise. `t` (or `tau`) is time and may only appear inside a
//! single `sin(ω t)` or `cos(ω t)` factor per term. Any other identifier is
//! looked up in the parameter table.

use std::collections::BTreeMap;

use super::polynomial::{Polynomial, TimeFactor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message} (at column {column})")]
pub struct ParseError {
    pub message: String,
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let save = i;
                i += 1;
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    i += 1;
                }
                if i < chars.len() && chars[i].is_ascii_digit() {
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value = text.parse::<f64>().map_err(|_| ParseError {
                message: format!("malformed number `{text}`"),
                column: start + 1,
            })?;
            out.push((Tok::Num(value), start + 1));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), start + 1));
        } else if "+-*/^()".contains(c) {
            out.push((Tok::Op(c), i + 1));
            i += 1;
        } else {
            return Err(ParseError {
                message: format!("unexpected character `{c}`"),
                column: i + 1,
            });
        }
    }
    Ok(out)
}

/// Value of a sub-expression while parsing: either a plain polynomial or a
/// bare multiple of time, which is only legal as a trig argument.
#[derive(Debug, Clone)]
enum Val {
    Poly(Polynomial),
    Time(f64),
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    dof: usize,
    params: &'a BTreeMap<String, f64>,
    end_column: usize,
}

impl<'a> Parser<'a> {
    fn dim(&self) -> usize {
        2 * self.dof
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        let column = self
            .toks
            .get(self.pos)
            .map(|(_, c)| *c)
            .unwrap_or(self.end_column);
        Err(ParseError {
            message: message.into(),
            column,
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn eat_op(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn poly(&self, v: Val) -> Result<Polynomial, ParseError> {
        match v {
            Val::Poly(p) => Ok(p),
            Val::Time(_) => self.err("time may only appear as the argument of sin() or cos()"),
        }
    }

    fn expr(&mut self) -> Result<Val, ParseError> {
        let mut acc = self.term()?;
        loop {
            let sign = if self.eat_op('+') {
                1.0
            } else if self.eat_op('-') {
                -1.0
            } else {
                return Ok(acc);
            };
            let rhs = self.term()?;
            acc = match (acc, rhs) {
                (Val::Time(a), Val::Time(b)) => Val::Time(a + sign * b),
                (a, b) => {
                    let a = self.poly(a)?;
                    let b = self.poly(b)?;
                    Val::Poly(a.add(&b.scale(sign)))
                }
            };
        }
    }

    fn term(&mut self) -> Result<Val, ParseError> {
        let mut acc = self.unary()?;
        loop {
            if self.eat_op('*') {
                let rhs = self.unary()?;
                acc = self.multiply(acc, rhs)?;
            } else if self.eat_op('/') {
                let rhs = self.unary()?;
                let divisor = match rhs {
                    Val::Poly(p) => p.as_constant(),
                    Val::Time(_) => None,
                };
                let Some(d) = divisor else {
                    return self.err("division is only allowed by constants");
                };
                if d == 0.0 {
                    return self.err("division by zero");
                }
                acc = match acc {
                    Val::Poly(p) => Val::Poly(p.scale(1.0 / d)),
                    Val::Time(w) => Val::Time(w / d),
                };
            } else {
                return Ok(acc);
            }
        }
    }

    fn multiply(&self, a: Val, b: Val) -> Result<Val, ParseError> {
        match (a, b) {
            (Val::Time(w), Val::Poly(p)) | (Val::Poly(p), Val::Time(w)) => match p.as_constant() {
                Some(c) => Ok(Val::Time(w * c)),
                None => self.err("time may only appear as the argument of sin() or cos()"),
            },
            (Val::Time(_), Val::Time(_)) => self.err("time squared is not supported"),
            (Val::Poly(a), Val::Poly(b)) => match a.mul(&b) {
                Ok(p) => Ok(Val::Poly(p)),
                Err(_) => self.err("a term may contain at most one time factor"),
            },
        }
    }

    fn unary(&mut self) -> Result<Val, ParseError> {
        if self.eat_op('-') {
            return Ok(match self.unary()? {
                Val::Poly(p) => Val::Poly(p.scale(-1.0)),
                Val::Time(w) => Val::Time(-w),
            });
        }
        if self.eat_op('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Val, ParseError> {
        let base = self.primary()?;
        if !self.eat_op('^') {
            return Ok(base);
        }
        let exponent = match self.toks.get(self.pos) {
            Some((Tok::Num(v), _)) if v.fract() == 0.0 && *v >= 0.0 && *v <= 32.0 => *v as u32,
            _ => return self.err("exponent must be a non-negative integer literal"),
        };
        self.pos += 1;
        let base = self.poly(base)?;
        match base.pow(exponent) {
            Ok(p) => Ok(Val::Poly(p)),
            Err(_) => self.err("a term may contain at most one time factor"),
        }
    }

    fn coordinate(&self, name: &str) -> Option<usize> {
        let (kind, rest) = name.split_at(1);
        let offset = match kind {
            "p" => 0,
            "q" => self.dof,
            _ => return None,
        };
        if rest.is_empty() {
            return (self.dof == 1).then_some(offset);
        }
        let idx: usize = rest.parse().ok()?;
        (1..=self.dof).contains(&idx).then_some(offset + idx - 1)
    }

    fn primary(&mut self) -> Result<Val, ParseError> {
        let Some((tok, _)) = self.toks.get(self.pos).cloned() else {
            return self.err("unexpected end of expression");
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Val::Poly(Polynomial::constant(self.dim(), v))),
            Tok::Op('(') => {
                let inner = self.expr()?;
                if !self.eat_op(')') {
                    return self.err("expected `)`");
                }
                Ok(inner)
            }
            Tok::Op(c) => {
                self.pos -= 1;
                self.err(format!("unexpected `{c}`"))
            }
            Tok::Ident(name) => {
                if self.peek() == Some(&Tok::Op('(')) {
                    self.pos += 1;
                    let arg = self.expr()?;
                    if !self.eat_op(')') {
                        return self.err("expected `)`");
                    }
                    return self.function(&name, arg);
                }
                if name == "t" || name == "tau" {
                    return Ok(Val::Time(1.0));
                }
                if let Some(i) = self.coordinate(&name) {
                    return Ok(Val::Poly(Polynomial::coordinate(self.dim(), i)));
                }
                if let Some(v) = self.params.get(&name) {
                    return Ok(Val::Poly(Polynomial::constant(self.dim(), *v)));
                }
                if name == "pi" {
                    return Ok(Val::Poly(Polynomial::constant(
                        self.dim(),
                        std::f64::consts::PI,
                    )));
                }
                self.pos -= 1;
                self.err(format!("unknown identifier `{name}`"))
            }
        }
    }

    fn function(&mut self, name: &str, arg: Val) -> Result<Val, ParseError> {
        let dim = self.dim();
        match (name, arg) {
            ("sin", Val::Time(w)) => Ok(Val::Poly(Polynomial::time_factor(
                dim,
                TimeFactor::Sin { omega: w },
            ))),
            ("cos", Val::Time(w)) => Ok(Val::Poly(Polynomial::time_factor(
                dim,
                TimeFactor::Cos { omega: w },
            ))),
            (f, Val::Poly(p)) => {
                let Some(c) = p.as_constant() else {
                    return self.err(format!("{f}() of a phase-space expression is not polynomial"));
                };
                let v = match f {
                    "sin" => c.sin(),
                    "cos" => c.cos(),
                    "sqrt" => c.sqrt(),
                    "exp" => c.exp(),
                    _ => return self.err(format!("unknown function `{f}`")),
                };
                Ok(Val::Poly(Polynomial::constant(dim, v)))
            }
            (f, Val::Time(_)) => self.err(format!("{f}() of time is not supported")),
        }
    }
}

/// Parse `src` into a polynomial over `2·dof` phase-space coordinates.
pub fn parse_polynomial(
    src: &str,
    dof: usize,
    params: &BTreeMap<String, f64>,
) -> Result<Polynomial, ParseError> {
    let toks = tokenize(src)?;
    let mut parser = Parser {
        toks,
        pos: 0,
        dof,
        params,
        end_column: src.chars().count() + 1,
    };
    let val = parser.expr()?;
    if parser.pos != parser.toks.len() {
        return parser.err("unexpected trailing input");
    }
    parser.poly(val)
}
