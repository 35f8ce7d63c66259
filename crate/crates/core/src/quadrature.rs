//! Gauss–Legendre rules.

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Nodes and weights of the composite five-point rule on `[a, b]` with `panels` panels.
/// `b < a` gives negative weights.
pub(crate) fn composite_gl5(a: f64, b: f64, panels: usize) -> Vec<(f64, f64)> {
    let panels = panels.max(1);
    let width = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(5 * panels);
    for k in 0..panels {
        let mid = a + (k as f64 + 0.5) * width;
        for (node, weight) in GL5_NODES.iter().zip(GL5_WEIGHTS) {
            out.push((mid + 0.5 * width * node, 0.5 * width * weight));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_degree_nine_exactly() {
        let f = |x: f64| x.powi(9) - 3.0 * x.powi(4) + 1.0;
        let exact = |x: f64| x.powi(10) / 10.0 - 3.0 * x.powi(5) / 5.0 + x;
        let s: f64 = composite_gl5(-0.3, 1.7, 1).iter().map(|(x, w)| w * f(*x)).sum();
        assert!((s - (exact(1.7) - exact(-0.3))).abs() < 1e-12);
        let r: f64 = composite_gl5(1.7, -0.3, 3).iter().map(|(x, w)| w * f(*x)).sum();
        assert!((r + s).abs() < 1e-12);
    }
}
