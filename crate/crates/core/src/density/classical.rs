//! Monte Carlo estimate of the classical transition density
//! `(2πħ)^{-N} ∫ dx δ(H(x) − E) δ(H(Φ^τ x) − E′)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cell_edges, lorentzian, DensityError, Matrix, TransitionGrid};
use crate::dynamics::{flow_point, IntegratorConfig};
use crate::hamiltonians::HamiltonianSystem;

/// Which energy is read at the sampled point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DrivingDirection {
    /// `E = H(x)`, `E′ = H(Φ^{0→τ} x)`.
    #[default]
    Forward,
    /// `E′ = H(x)`, `E = H(Φ^{τ→0} x)`.
    Backward,
}

/// Axis-aligned sampling box, one `(lo, hi)` pair per phase-space coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SamplingBox(pub Vec<(f64, f64)>);

impl SamplingBox {
    pub fn volume(&self) -> f64 {
        self.0.iter().map(|(lo, hi)| hi - lo).product()
    }

    pub fn validate(&self, dim: usize) -> Result<(), DensityError> {
        if self.0.len() != dim {
            return Err(DensityError::Config(format!(
                "sampling box has {} bounds, expected {dim}",
                self.0.len()
            )));
        }
        if self.0.iter().any(|(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite()) {
            return Err(DensityError::Config("sampling box bounds must satisfy lo < hi".into()));
        }
        Ok(())
    }

    /// Inside the outer `fraction` of some coordinate range.
    fn in_boundary_layer(&self, x: &[f64], fraction: f64) -> bool {
        self.0
            .iter()
            .zip(x)
            .any(|((lo, hi), v)| (v - lo) < fraction * (hi - lo) || (hi - v) < fraction * (hi - lo))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub samples: u64,
    pub seed: u64,
    pub integrator: IntegratorConfig,
    pub direction: DrivingDirection,
    /// Samples per RNG stream.
    pub chunk: u64,
    /// Worker threads; `0` uses the available parallelism.
    pub threads: usize,
    /// Also produce the Lorentzian-smoothed density.
    pub smooth: bool,
    /// Extent of the fine histogram beyond the grid, in units of `ε`.
    pub margin: f64,
    /// Energy range of the fine histogram on both axes, replacing the margin.
    pub smoothing_window: Option<(f64, f64)>,
    /// Fine bins per axis are capped at this number.
    pub max_fine_bins: usize,
    /// Width of the box boundary layer as a fraction of each side.
    pub boundary_layer: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            seed: 0,
            integrator: IntegratorConfig::with_tol(1e-9).without_states(),
            direction: DrivingDirection::Forward,
            chunk: 4096,
            threads: 0,
            smooth: true,
            margin: 10.0,
            smoothing_window: None,
            max_fine_bins: 1024,
            boundary_layer: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalDensity {
    pub grid: TransitionGrid,
    /// Cell averages over the grid cells.
    pub binned: Matrix,
    /// One standard error of `binned`.
    pub binned_error: Matrix,
    pub counts: Matrix,
    /// Lorentzian-smoothed density at the grid points (zero when smoothing is off).
    pub smoothed: Matrix,
    pub smoothed_error: Matrix,
    pub samples: u64,
    /// Samples whose driven trajectory failed to integrate.
    pub failures: u64,
    /// Samples whose sampled-point energy lies in the histogram range.
    pub shell_adjacent: u64,
    /// Fraction of shell-adjacent samples inside the box boundary layer.
    pub boundary_fraction: f64,
    /// Fine-bin widths used for smoothing `(h_E, h_E′)`.
    pub fine_bin_width: (f64, f64),
    pub warnings: Vec<String>,
}

impl ClassicalDensity {
    /// Cells that received no samples.
    pub fn is_empty_cell(&self, i: usize, j: usize) -> bool {
        self.counts[(i, j)] == 0.0
    }
}

struct Histograms {
    coarse: Vec<u64>,
    fine: Vec<u64>,
    failures: u64,
    adjacent: u64,
    boundary: u64,
}

struct Axes {
    e_edges: Vec<f64>,
    p_edges: Vec<f64>,
    fine_e: (f64, f64, usize),
    fine_p: (f64, f64, usize),
}

fn bin(edges: &[f64], v: f64) -> Option<usize> {
    if !(v >= edges[0] && v < edges[edges.len() - 1]) {
        return None;
    }
    Some(edges.partition_point(|e| *e <= v) - 1)
}

fn uniform_bin(axis: (f64, f64, usize), v: f64) -> Option<usize> {
    let (lo, hi, n) = axis;
    if !(v >= lo && v < hi) {
        return None;
    }
    Some((((v - lo) / (hi - lo) * n as f64) as usize).min(n - 1))
}

fn fine_axis(values: &[f64], epsilon: f64, cfg: &MonteCarloConfig) -> (f64, f64, usize) {
    let edges = cell_edges(values);
    let (lo, hi) = cfg.smoothing_window.unwrap_or((
        edges[0] - cfg.margin * epsilon,
        edges[edges.len() - 1] + cfg.margin * epsilon,
    ));
    let n = (((hi - lo) / (0.25 * epsilon)).ceil() as usize).clamp(1, cfg.max_fine_bins.max(1));
    (lo, hi, n)
}

#[allow(clippy::too_many_arguments)]
fn run_chunk(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    tau: f64,
    bounds: &SamplingBox,
    axes: &Axes,
    cfg: &MonteCarloConfig,
    chunk: u64,
    hist: &mut Histograms,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chunk);
    let start = chunk * cfg.chunk;
    let count = cfg.chunk.min(cfg.samples - start);
    let np = axes.p_edges.len() - 1;
    let nfp = axes.fine_p.2;
    let (edges, fine) = match cfg.direction {
        DrivingDirection::Forward => (&axes.e_edges, axes.fine_e),
        DrivingDirection::Backward => (&axes.p_edges, axes.fine_p),
    };
    let (sample_lo, sample_hi) = (fine.0, fine.1);
    let (coarse_lo, coarse_hi) = (edges[0], edges[edges.len() - 1]);
    let in_coarse = |v: f64| v >= coarse_lo && v < coarse_hi;
    let mut x = vec![0.0; bounds.0.len()];
    for _ in 0..count {
        for (xi, (lo, hi)) in x.iter_mut().zip(&bounds.0) {
            *xi = lo + (hi - lo) * rng.gen::<f64>();
        }
        let here = inner.value(&x, 0.0);
        if here >= sample_lo && here < sample_hi {
            hist.adjacent += 1;
            if bounds.in_boundary_layer(&x, cfg.boundary_layer) {
                hist.boundary += 1;
            }
        } else if !in_coarse(here) {
            continue;
        }
        let driven = match cfg.direction {
            DrivingDirection::Forward => flow_point(driving, &x, 0.0, tau, &cfg.integrator),
            DrivingDirection::Backward => flow_point(driving, &x, tau, 0.0, &cfg.integrator),
        };
        let there = match driven {
            Ok(y) => inner.value(&y, 0.0),
            Err(_) => {
                hist.failures += 1;
                continue;
            }
        };
        let (e, ep) = match cfg.direction {
            DrivingDirection::Forward => (here, there),
            DrivingDirection::Backward => (there, here),
        };
        if let (Some(i), Some(j)) = (bin(&axes.e_edges, e), bin(&axes.p_edges, ep)) {
            hist.coarse[i * np + j] += 1;
        }
        if cfg.smooth {
            if let (Some(i), Some(j)) = (uniform_bin(axes.fine_e, e), uniform_bin(axes.fine_p, ep)) {
                hist.fine[i * nfp + j] += 1;
            }
        }
    }
}

/// Uniform sampling of `bounds`, one driven trajectory per sample, and 2-D
/// histogramming of the two energies.
///
/// Samples are drawn from ChaCha8 streams, one stream per chunk of
/// `cfg.chunk` samples, so the result does not depend on the thread count.
/// Histogram counts are merged by integer addition.
pub fn classical_density_mc(
    inner: &HamiltonianSystem,
    driving: &HamiltonianSystem,
    grid: &TransitionGrid,
    bounds: &SamplingBox,
    cfg: &MonteCarloConfig,
) -> Result<ClassicalDensity, DensityError> {
    grid.validate()?;
    bounds.validate(inner.dim())?;
    cfg.integrator.validate()?;
    if cfg.samples == 0 || cfg.chunk == 0 {
        return Err(DensityError::Config("samples and chunk must be positive".into()));
    }
    let axes = Axes {
        e_edges: grid.e_edges(),
        p_edges: grid.e_prime_edges(),
        fine_e: fine_axis(&grid.e_values, grid.epsilon, cfg),
        fine_p: fine_axis(&grid.e_prime_values, grid.epsilon, cfg),
    };
    let (ne, np) = grid.shape();
    let n_fine = if cfg.smooth { axes.fine_e.2 * axes.fine_p.2 } else { 0 };
    let chunks = cfg.samples.div_ceil(cfg.chunk);
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        t => t,
    }
    .min(chunks as usize)
    .max(1);
    let new_hist = || Histograms {
        coarse: vec![0; ne * np],
        fine: vec![0; n_fine],
        failures: 0,
        adjacent: 0,
        boundary: 0,
    };
    let partials: Vec<Histograms> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let axes = &axes;
                scope.spawn(move || {
                    let mut hist = new_hist();
                    let mut c = w as u64;
                    while c < chunks {
                        run_chunk(inner, driving, grid.tau, bounds, axes, cfg, c, &mut hist);
                        c += threads as u64;
                    }
                    hist
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampling worker panicked"))
            .collect()
    });
    let mut total = new_hist();
    for part in partials {
        total.coarse.iter_mut().zip(&part.coarse).for_each(|(a, b)| *a += b);
        total.fine.iter_mut().zip(&part.fine).for_each(|(a, b)| *a += b);
        total.failures += part.failures;
        total.adjacent += part.adjacent;
        total.boundary += part.boundary;
    }

    let n = cfg.samples as f64;
    let norm = bounds.volume() / (n * (2.0 * std::f64::consts::PI * grid.hbar).powi(inner.dof() as i32));
    let mut binned = Matrix::zeros(ne, np);
    let mut binned_error = Matrix::zeros(ne, np);
    let mut counts = Matrix::zeros(ne, np);
    for i in 0..ne {
        let de = axes.e_edges[i + 1] - axes.e_edges[i];
        for j in 0..np {
            let dp = axes.p_edges[j + 1] - axes.p_edges[j];
            let c = total.coarse[i * np + j] as f64;
            counts[(i, j)] = c;
            binned[(i, j)] = norm * c / (de * dp);
            binned_error[(i, j)] = norm * (c * (1.0 - c / n)).max(0.0).sqrt() / (de * dp);
        }
    }

    let mut warnings = Vec::new();
    let (smoothed, smoothed_error) = if cfg.smooth {
        smooth(grid, &axes, &total.fine, norm)
    } else {
        (Matrix::zeros(ne, np), Matrix::zeros(ne, np))
    };
    let h_e = (axes.fine_e.1 - axes.fine_e.0) / axes.fine_e.2 as f64;
    let h_p = (axes.fine_p.1 - axes.fine_p.0) / axes.fine_p.2 as f64;
    if cfg.smooth && (h_e > 0.25 * grid.epsilon * (1.0 + 1e-12) || h_p > 0.25 * grid.epsilon * (1.0 + 1e-12)) {
        warnings.push(format!(
            "fine bins ({h_e:.3e}, {h_p:.3e}) are wider than epsilon/4; raise max_fine_bins"
        ));
    }
    let boundary_fraction = if total.adjacent > 0 {
        total.boundary as f64 / total.adjacent as f64
    } else {
        0.0
    };
    if boundary_fraction > 0.01 {
        warnings.push(format!(
            "{:.2}% of shell-adjacent samples lie in the box boundary layer; the box may cut the shells",
            100.0 * boundary_fraction
        ));
    }
    if total.failures > 0 {
        warnings.push(format!("{} driven trajectories failed to integrate", total.failures));
    }
    let empty = counts.iter().filter(|c| **c == 0.0).count();
    if empty > 0 {
        log::info!("{empty} of {} cells received no samples", ne * np);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ClassicalDensity {
        grid: grid.clone(),
        binned,
        binned_error,
        counts,
        smoothed,
        smoothed_error,
        samples: cfg.samples,
        failures: total.failures,
        shell_adjacent: total.adjacent,
        boundary_fraction,
        fine_bin_width: (h_e, h_p),
        warnings,
    })
}

/// `Σ_ab m_ab δ_ε(E − e_a) δ_ε(E′ − e′_b)` over fine-bin masses, with Poisson errors.
fn smooth(grid: &TransitionGrid, axes: &Axes, fine: &[u64], norm: f64) -> (Matrix, Matrix) {
    let weights = |values: &[f64], axis: (f64, f64, usize)| {
        let (lo, hi, n) = axis;
        let h = (hi - lo) / n as f64;
        Matrix::from_fn(values.len(), n, |i, a| {
            lorentzian(grid.epsilon, values[i] - (lo + (a as f64 + 0.5) * h))
        })
    };
    let le = weights(&grid.e_values, axes.fine_e);
    let lp = weights(&grid.e_prime_values, axes.fine_p);
    let (nfe, nfp) = (axes.fine_e.2, axes.fine_p.2);
    let c = Matrix::from_fn(nfe, nfp, |a, b| fine[a * nfp + b] as f64);
    let value = &le * &c * lp.transpose() * norm;
    let var = le.map(|w| w * w) * &c * lp.map(|w| w * w).transpose() * (norm * norm);
    (value, var.map(f64::sqrt))
}
