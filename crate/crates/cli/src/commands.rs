use anyhow::{bail, Context as _};
use cco_core::cco::{close_cco, CcoConfig, CcoTimes};
use cco_core::density::{
    classical_density_mc, classical_density_smoothed_section, sc_density, section_bin_masses,
    section_families, total_density, CellStatus, FamilySigma, Matrix, OscillatoryTerm,
    SamplingBox, TransitionGrid,
};
use cco_core::oracle::{build_model, propagate, smeared_density, transition_probabilities};
use cco_core::seeds::{find_seed, seed_scan};
use cco_core::{HamiltonianSystem, PhaseSpacePoint};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ClassicalMethod, RunMetadata};
use crate::output::{parse_matrix_csv, Artifacts, GridMatrix};
use crate::{CompareArgs, Command, Context, Failure, Stages};

/// One closed compound orbit as written to `orbits.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitRecord {
    pub times: CcoTimes,
    pub x_start: Vec<f64>,
    pub closure_residual: f64,
    pub action_total: f64,
    pub action_stationary: f64,
    pub energy: f64,
    pub energy_prime: f64,
    pub det_i_minus_m: f64,
    /// Row-major.
    pub monodromy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitFailure {
    pub times: CcoTimes,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub winding: (i32, i32),
    pub sigma: f64,
    pub masked_cells: usize,
    pub max_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub left: String,
    pub right: String,
    pub cells: usize,
    /// `sqrt(Σ (right − left)²)` over the cells.
    pub l2: f64,
    pub rms: f64,
    pub max_abs: f64,
    /// `l2` over the norm of the left matrix; absent when that norm is zero.
    pub l2_relative: Option<f64>,
}

fn write_matrix(a: &mut Artifacts, name: &str, grid: &TransitionGrid, m: &Matrix) -> anyhow::Result<()> {
    a.matrix(name, &grid.e_values, &grid.e_prime_values, m)
}

fn mask_matrix(grid: &TransitionGrid, mask: &[bool]) -> Matrix {
    let (ne, np) = grid.shape();
    Matrix::from_fn(ne, np, |i, j| if mask[i * np + j] { 1.0 } else { 0.0 })
}

/// Runs a subcommand with a loaded configuration and returns the RNG seeds it used.
pub(crate) fn dispatch(
    command: &Command,
    ctx: &Context,
    stages: &mut Stages,
    artifacts: &mut Artifacts,
) -> Result<Vec<u64>, Failure> {
    let (inner, driving) = ctx.cfg.systems(&ctx.source, &ctx.path)?;
    let grid = ctx.cfg.grid()?;
    let meta = RunMetadata {
        config: ctx.cfg.clone(),
        inner_expression: inner.expression().to_string(),
        driving_expression: driving.expression().to_string(),
        grid: grid.clone(),
    };
    stages.run("output", |_| artifacts.json("metadata", &meta))?;
    let sys = (&inner, &driving);
    match command {
        Command::Seed(_) => seed(ctx, sys, stages, artifacts).map(|_| Vec::new()),
        Command::Cco(_) => cco(ctx, sys, &grid, stages, artifacts).map(|_| Vec::new()),
        Command::DensityClassical(_) => classical(ctx, sys, &grid, stages, artifacts),
        Command::DensitySc(_) => {
            let terms = oscillatory(ctx, sys, &grid, stages)?;
            stages.run("output", |_| {
                write_oscillatory(artifacts, &grid, &terms)?;
                artifacts.json("terms", &summaries(&terms))
            })?;
            Ok(Vec::new())
        }
        Command::DensityTotal(_) => total(ctx, sys, &grid, stages, artifacts),
        Command::Oracle(_) => oracle(ctx, sys, &grid, stages, artifacts).map(|_| Vec::new()),
        Command::Compare(_) => unreachable!("handled without systems"),
    }
}

type Systems<'a> = (&'a HamiltonianSystem, &'a HamiltonianSystem);

fn seed(ctx: &Context, (inner, driving): Systems, stages: &mut Stages, a: &mut Artifacts) -> Result<(), Failure> {
    let s = &ctx.cfg.run.seeds;
    let dim = inner.dim();
    let seeds = stages.run("seed", |d| {
        let seeds = match &s.guess {
            Some(g) => {
                if g.len() != dim {
                    bail!("seed guess has {} coordinates, the system needs {dim}", g.len());
                }
                vec![find_seed(inner, driving, &PhaseSpacePoint::new(g.clone()), s.tol)?]
            }
            None => {
                let bounds = s.scan_box.clone().unwrap_or_else(|| vec![(-3.0, 3.0); dim]);
                seed_scan(inner, driving, &bounds, s.scan_grid, s.tol)?
            }
        };
        d.insert("seeds".into(), json!(seeds.len()));
        Ok(seeds)
    })?;
    stages.run("output", |_| a.json("seeds", &seeds))
}

fn cco(
    ctx: &Context,
    (inner, driving): Systems,
    grid: &TransitionGrid,
    stages: &mut Stages,
    a: &mut Artifacts,
) -> Result<(), Failure> {
    let c = &ctx.cfg.run.cco;
    if c.times.is_empty() {
        let families = stages.run("families", |d| {
            let f = section_families(inner, driving, grid, &ctx.cfg.section_families())?;
            let resolved = f.status.iter().filter(|s| **s == CellStatus::Resolved).count();
            d.insert("families".into(), json!(f.families.len()));
            d.insert("resolved_cells".into(), json!(resolved));
            Ok(f)
        })?;
        return stages.run("output", |_| a.json("families", &families));
    }
    let mut cfg = CcoConfig::default();
    if let Some(i) = &ctx.cfg.integrator {
        cfg.integrator = i.without_states();
    }
    if let Some(tol) = c.closure_tol {
        cfg.closure_tol = tol;
    }
    let guess = match &c.guess {
        Some(g) if g.len() == inner.dim() => PhaseSpacePoint::new(g.clone()),
        Some(g) => {
            return Err(Failure::Config(format!(
                "cco guess has {} coordinates, the system needs {}",
                g.len(),
                inner.dim()
            )))
        }
        None => stages.run("seed", |_| {
            let origin = PhaseSpacePoint::new(vec![0.0; inner.dim()]);
            Ok(find_seed(inner, driving, &origin, ctx.cfg.run.seeds.tol)?.point)
        })?,
    };
    let (orbits, failures) = stages.run("cco", |d| {
        let mut orbits = Vec::new();
        let mut failures = Vec::new();
        for &(t, tp, tau) in &c.times {
            let times = CcoTimes::new(t, tp, tau);
            match close_cco(inner, driving, &guess, times, &cfg) {
                Ok(o) => orbits.push(OrbitRecord {
                    times,
                    x_start: o.x_start.as_slice().to_vec(),
                    closure_residual: o.closure_residual,
                    action_total: o.action_total,
                    action_stationary: o.action_stationary,
                    energy: o.energy,
                    energy_prime: o.energy_prime,
                    det_i_minus_m: o.det_i_minus_m(),
                    monodromy: o.monodromy_compound.transpose().iter().copied().collect(),
                }),
                Err(e) => failures.push(OrbitFailure {
                    times,
                    error: e.to_string(),
                }),
            }
        }
        if orbits.is_empty() {
            bail!("no orbit closed; first error: {}", failures[0].error);
        }
        d.insert("closed".into(), json!(orbits.len()));
        d.insert("failed".into(), json!(failures.len()));
        Ok((orbits, failures))
    })?;
    stages.run("output", |_| {
        a.json("orbits", &orbits)?;
        if !failures.is_empty() {
            a.json("orbit_failures", &failures)?;
        }
        Ok(())
    })
}

fn sampling_box(ctx: &Context, dim: usize) -> SamplingBox {
    SamplingBox(ctx.cfg.run.sampling_box.clone().unwrap_or_else(|| vec![(-5.0, 5.0); dim]))
}

/// Smoothed background and its standard error, with the RNG seeds used.
fn background(
    ctx: &Context,
    (inner, driving): Systems,
    grid: &TransitionGrid,
    stages: &mut Stages,
) -> Result<(Matrix, Matrix, Vec<u64>), Failure> {
    match ctx.cfg.run.classical {
        ClassicalMethod::Mc => {
            let mut mc = ctx.cfg.monte_carlo();
            mc.smooth = true;
            if ctx.cfg.run.smoothing_window.is_some() {
                mc.smoothing_window = Some(ctx.cfg.smoothing_window());
            }
            let bounds = sampling_box(ctx, inner.dim());
            let d = stages.run("classical", |d| {
                let r = classical_density_mc(inner, driving, grid, &bounds, &mc)?;
                d.insert("failures".into(), json!(r.failures));
                d.insert("warnings".into(), json!(r.warnings));
                Ok(r)
            })?;
            Ok((d.smoothed, d.smoothed_error, vec![mc.seed]))
        }
        ClassicalMethod::SmoothedSection => {
            let m = stages.run("classical", |_| {
                Ok(classical_density_smoothed_section(
                    inner,
                    driving,
                    grid,
                    ctx.cfg.smoothing_window(),
                    &ctx.cfg.smoothed_section(),
                )?)
            })?;
            let (ne, np) = grid.shape();
            Ok((m, Matrix::zeros(ne, np), Vec::new()))
        }
        ClassicalMethod::Section => Err(Failure::Config(
            "a smoothed background needs classical = \"mc\" or \"smoothed-section\"".into(),
        )),
    }
}

fn classical(
    ctx: &Context,
    (inner, driving): Systems,
    grid: &TransitionGrid,
    stages: &mut Stages,
    a: &mut Artifacts,
) -> Result<Vec<u64>, Failure> {
    match ctx.cfg.run.classical {
        ClassicalMethod::Mc => {
            let mut mc = ctx.cfg.monte_carlo();
            if ctx.cfg.run.smoothing_window.is_some() {
                mc.smoothing_window = Some(ctx.cfg.smoothing_window());
            }
            let bounds = sampling_box(ctx, inner.dim());
            let r = stages.run("classical", |d| {
                let r = classical_density_mc(inner, driving, grid, &bounds, &mc)?;
                d.insert("samples".into(), json!(r.samples));
                d.insert("failures".into(), json!(r.failures));
                d.insert("shell_adjacent".into(), json!(r.shell_adjacent));
                d.insert("boundary_fraction".into(), json!(r.boundary_fraction));
                d.insert("warnings".into(), json!(r.warnings));
                Ok(r)
            })?;
            stages.run("output", |_| {
                write_matrix(a, "classical_binned", grid, &r.binned)?;
                write_matrix(a, "classical_binned_error", grid, &r.binned_error)?;
                write_matrix(a, "classical_counts", grid, &r.counts)?;
                if mc.smooth {
                    write_matrix(a, "classical_smoothed", grid, &r.smoothed)?;
                    write_matrix(a, "classical_smoothed_error", grid, &r.smoothed_error)?;
                }
                Ok(())
            })?;
            Ok(vec![mc.seed])
        }
        ClassicalMethod::Section => {
            let m = stages.run("classical", |_| {
                Ok(section_bin_masses(inner, driving, grid, &ctx.cfg.smoothed_section().section)?)
            })?;
            stages.run("output", |_| write_matrix(a, "classical_binned", grid, &m))?;
            Ok(Vec::new())
        }
        ClassicalMethod::SmoothedSection => {
            let (m, _, seeds) = background(ctx, (inner, driving), grid, stages)?;
            stages.run("output", |_| write_matrix(a, "classical_smoothed", grid, &m))?;
            Ok(seeds)
        }
    }
}

fn oscillatory(
    ctx: &Context,
    (inner, driving): Systems,
    grid: &TransitionGrid,
    stages: &mut Stages,
) -> Result<Vec<OscillatoryTerm>, Failure> {
    let families = stages.run("families", |d| {
        let f = section_families(inner, driving, grid, &ctx.cfg.section_families())?;
        d.insert("families".into(), json!(f.families.len()));
        d.insert("messages".into(), json!(f.messages));
        Ok(f)
    })?;
    stages.run("sc", |d| {
        let terms = sc_density(&families, &ctx.cfg.run.sc)?;
        d.insert("terms".into(), json!(terms.len()));
        Ok(terms)
    })
}

fn summaries(terms: &[OscillatoryTerm]) -> Vec<TermSummary> {
    terms
        .iter()
        .map(|t| TermSummary {
            winding: t.winding,
            sigma: t.sigma,
            masked_cells: t.masked_cells(),
            max_amplitude: t.amplitude.iter().fold(0.0, |m, v| m.max(v.abs())),
        })
        .collect()
}

fn write_oscillatory(a: &mut Artifacts, grid: &TransitionGrid, terms: &[OscillatoryTerm]) -> anyhow::Result<()> {
    let (ne, np) = grid.shape();
    let mut sum = Matrix::zeros(ne, np);
    let mut mask = vec![false; ne * np];
    for t in terms {
        sum += &t.values;
        for (m, tm) in mask.iter_mut().zip(&t.mask) {
            *m |= tm;
        }
    }
    write_matrix(a, "oscillatory", grid, &sum)?;
    write_matrix(a, "mask", grid, &mask_matrix(grid, &mask))
}

fn total(
    ctx: &Context,
    sys: Systems,
    grid: &TransitionGrid,
    stages: &mut Stages,
    a: &mut Artifacts,
) -> Result<Vec<u64>, Failure> {
    let (classical, error, seeds) = background(ctx, sys, grid, stages)?;
    let terms = oscillatory(ctx, sys, grid, stages)?;
    let density = stages.run("total", |d| {
        let t = total_density(grid, classical, error, terms)?;
        d.insert("negative_cells".into(), json!(t.diagnostics.negative_cells.len()));
        d.insert("masked_cells".into(), json!(t.diagnostics.masked_cells));
        Ok(t)
    })?;
    stages.run("output", |_| {
        write_matrix(a, "total", grid, &density.total)?;
        write_matrix(a, "classical_smoothed", grid, &density.classical)?;
        write_matrix(a, "classical_smoothed_error", grid, &density.classical_error)?;
        write_oscillatory(a, grid, &density.oscillatory)?;
        let sigma: Vec<FamilySigma> = density
            .oscillatory
            .iter()
            .map(|t| FamilySigma {
                winding: t.winding,
                sigma: t.sigma,
            })
            .collect();
        let mut diagnostics = density.diagnostics.clone();
        diagnostics.sigma = sigma;
        a.json("diagnostics", &diagnostics)?;
        a.json("terms", &summaries(&density.oscillatory))
    })?;
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub basis_size: usize,
    pub levels_used: usize,
    pub energies: Vec<f64>,
    pub mean_spacing: f64,
    pub convergence_defect: Option<f64>,
    pub steps: usize,
    pub unitarity_defect: f64,
    pub richardson_defect: Option<f64>,
    pub warnings: Vec<String>,
}

fn oracle(
    ctx: &Context,
    (inner, driving): Systems,
    grid: &TransitionGrid,
    stages: &mut Stages,
    a: &mut Artifacts,
) -> Result<(), Failure> {
    let cfg = &ctx.cfg.run.oracle;
    let model = stages.run("oracle-model", |d| {
        let m = build_model(inner, driving, grid.hbar, cfg)?;
        d.insert("levels_used".into(), json!(m.levels_used));
        d.insert("convergence_defect".into(), json!(m.convergence_defect));
        Ok(m)
    })?;
    let prop = stages.run("oracle-propagate", |d| {
        let p = propagate(&model, grid.tau, ctx.cfg.run.steps, cfg)?;
        d.insert("unitarity_defect".into(), json!(p.unitarity_defect));
        d.insert("richardson_defect".into(), json!(p.richardson_defect));
        Ok(p)
    })?;
    let (probs, density) = stages.run("oracle-density", |_| {
        let p = transition_probabilities(&model, &prop.u);
        let s = smeared_density(&model, &p, grid)?;
        Ok((p, s))
    })?;
    let k = model.levels_used;
    let levels = model.energies[..k].to_vec();
    let summary = OracleSummary {
        basis_size: model.size(),
        levels_used: k,
        energies: levels.clone(),
        mean_spacing: density.mean_spacing,
        convergence_defect: model.convergence_defect,
        steps: prop.steps,
        unitarity_defect: prop.unitarity_defect,
        richardson_defect: prop.richardson_defect,
        warnings: density.warnings.clone(),
    };
    stages.run("output", |_| {
        write_matrix(a, "oracle", grid, &density.values)?;
        write_matrix(a, "oracle_tail_bound", grid, &density.tail_bound)?;
        // Rows are the initial level, columns the final level.
        let p = probs.view((0, 0), (k, k)).transpose();
        a.table("probabilities", &levels, &levels, &p)?;
        a.json("oracle", &summary)
    })
}

pub(crate) fn compare(
    ctx: Option<&Context>,
    args: &CompareArgs,
    stages: &mut Stages,
    a: &mut Artifacts,
) -> Result<(), Failure> {
    let from_cfg = ctx.map(|c| c.cfg.run.compare.clone()).unwrap_or_default();
    let left = args.left.clone().or(from_cfg.left);
    let right = args.right.clone().or(from_cfg.right);
    let (Some(left), Some(right)) = (left, right) else {
        return Err(Failure::Config("compare needs --left and --right".into()));
    };
    let (l, r, summary) = stages.run("compare", |d| {
        let read = |p: &std::path::Path| -> anyhow::Result<GridMatrix> {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_matrix_csv(&text).with_context(|| format!("parsing {}", p.display()))
        };
        let l = read(&left)?;
        let r = read(&right)?;
        if l.e_values != r.e_values || l.e_prime_values != r.e_prime_values {
            bail!("the two matrices are on different grids");
        }
        let diff = &r.values - &l.values;
        let cells = diff.len();
        let l2 = diff.norm();
        let left_norm = l.values.norm();
        let summary = CompareSummary {
            left: left.display().to_string(),
            right: right.display().to_string(),
            cells,
            l2,
            rms: if cells > 0 { l2 / (cells as f64).sqrt() } else { 0.0 },
            max_abs: diff.amax(),
            l2_relative: (left_norm > 0.0).then(|| l2 / left_norm),
        };
        d.insert("l2".into(), json!(l2));
        Ok((l, diff, summary))
    })?;
    stages.run("output", |_| {
        a.matrix("difference", &l.e_values, &l.e_prime_values, &r)?;
        a.json("compare", &summary)
    })
}
