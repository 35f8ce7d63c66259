use std::collections::BTreeMap;

use super::{HamiltonianError, HamiltonianSystem};

struct Builtin {
    name: &'static str,
    dof: usize,
    expression: &'static str,
    defaults: &'static [(&'static str, f64)],
}

const CATALOG: &[Builtin] = &[
    Builtin {
        name: "harmonic",
        dof: 1,
        expression: "(p^2 + a*q^2)/2",
        defaults: &[("a", 1.0)],
    },
    Builtin {
        name: "displaced",
        dof: 1,
        expression: "(a*p^2 + (q - b)^2)/2",
        defaults: &[("a", 1.0), ("b", 0.0)],
    },
    Builtin {
        name: "duffing",
        dof: 1,
        expression: "p^2/2 + k*q^2/2 + q^4/4",
        defaults: &[("k", 0.0)],
    },
    Builtin {
        name: "displaced_duffing",
        dof: 1,
        expression: "p^2/2 + k*(q - b)^2/2 + (q - b)^4/4",
        defaults: &[("k", 0.0), ("b", 0.5)],
    },
    Builtin {
        name: "double_well",
        dof: 1,
        expression: "p^2/2 - w*q^2/2 + q^4/4",
        defaults: &[("w", 1.0)],
    },
    Builtin {
        name: "squeeze",
        dof: 1,
        expression: "(a*p^2 + c*q^2)/2",
        defaults: &[("a", 0.5), ("c", 1.5)],
    },
    Builtin {
        name: "perturbed",
        dof: 1,
        expression: "(p^2 + a*q^2)/2 + eta*sin(omega*t)*q",
        defaults: &[("a", 1.0), ("eta", 0.1), ("omega", 1.0)],
    },
    Builtin {
        name: "perturbed_const",
        dof: 1,
        expression: "(p^2 + a*q^2)/2 + eta*q",
        defaults: &[("a", 1.0), ("eta", 0.1)],
    },
    Builtin {
        name: "coupled_quartic",
        dof: 2,
        expression: "(p1^2 + p2^2)/2 + (q1^2 + w2^2*q2^2)/2 + (q1^4 + q2^4)/4 + c*q1^2*q2^2",
        defaults: &[("w2", 1.3), ("c", 0.1)],
    },
    Builtin {
        name: "coupled_drive",
        dof: 2,
        expression: "(a*(p1^2 + p2^2) + (q1 - b)^2 + q2^2)/2 + c*q1*q2",
        defaults: &[("a", 0.5), ("b", 1.0), ("c", 0.1)],
    },
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    CATALOG.iter().map(|b| b.name)
}

/// Builds a catalog system. Entries of `params` override the defaults;
/// parameters the entry does not use are ignored.
pub fn builtin(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<HamiltonianSystem, HamiltonianError> {
    let entry = CATALOG
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| HamiltonianError::UnknownBuiltin(name.to_string()))?;
    let mut merged: BTreeMap<String, f64> = entry
        .defaults
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    for (k, v) in params {
        if merged.contains_key(k) {
            merged.insert(k.clone(), *v);
        }
    }
    let sys = HamiltonianSystem::from_expression(name, entry.expression, entry.dof, &merged)?;
    Ok(sys.with_expression(entry.expression))
}
