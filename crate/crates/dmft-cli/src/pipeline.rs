use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dmft_core::deep_linear::{solve_deep_linear_saddle, DeepLinearConfig, DeepLinearPropagator, DeepLinearState};
use dmft_core::eos::{discrete_blocks, iterate_mean_field, variance_reduced, EosConfig, EosTrajectory, EosVariance};
use dmft_core::finite_net::{
    run_ensemble, run_online_ensemble, series_stats, Dataset, EnsembleRecord, LossReduction, NetworkConfig, OnlineConfig,
    RecordOptions, SeriesStats, TrainOptions,
};
use dmft_core::grid::TimeGrid;
use dmft_core::lazy::{eig_static_ntk, estimate_kappa4, solve_variance_ode, static_ntk, KappaSource, LazySpectrum};
use dmft_core::report::{compare, Comparison, CurveTable};
use dmft_core::saddle::{solve_saddle, SaddleConfig, SaddleSolution};
use dmft_core::two_layer::{two_layer_theory, InitialOutput, TwoLayerTheory};
use dmft_core::whitened::{online_map, WhitenedTheory, VALIDITY_RATIO};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::{Regime, RunConfig};

/// How far down the pipeline a command goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Infinite-width saddle only.
    Solve,
    /// Saddle, blocks and propagator.
    Propagator,
    /// Finite-width ensembles only.
    Ensemble,
    /// Everything plus the comparison.
    Run,
}

impl Stage {
    fn theory(self) -> bool {
        self != Stage::Ensemble
    }

    fn ensemble(self) -> bool {
        matches!(self, Stage::Ensemble | Stage::Run)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Solve => "solve",
            Stage::Propagator => "propagator",
            Stage::Ensemble => "ensemble",
            Stage::Run => "run",
        };
        f.write_str(s)
    }
}

/// One point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Case {
    pub gamma: f64,
    pub width: usize,
    pub points: Option<usize>,
}

impl Case {
    pub fn label(&self) -> String {
        let mut s = format!("g{}_n{}", self.gamma, self.width);
        if let Some(p) = self.points {
            s += &format!("_p{p}");
        }
        s
    }
}

pub fn cases(cfg: &RunConfig) -> Vec<Case> {
    let points: Vec<Option<usize>> = if cfg.model.points.is_empty() {
        vec![None]
    } else {
        cfg.model.points.iter().map(|&p| Some(p)).collect()
    };
    let mut out = Vec::new();
    for &gamma in &cfg.model.gammas {
        for &width in &cfg.ensemble.widths {
            for &p in &points {
                out.push(Case { gamma, width, points: p });
            }
        }
    }
    out
}

/// Whether a case counts towards the run verdict. Whitened sweeps past `P/N = 0.25`
/// are reported but sit outside the leading-order expansion.
fn gated(cfg: &RunConfig, case: &Case) -> bool {
    match (cfg.regime, case.points) {
        (Regime::Whitened | Regime::Online, Some(p)) => p as f64 / case.width as f64 <= VALIDITY_RATIO,
        _ => true,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub case: String,
    pub gated: bool,
    pub comparison: Comparison,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub regime: Regime,
    pub pass: bool,
    pub cases: Vec<CaseReport>,
}

/// What was written and, for full runs, the verdict.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub report: Option<RunReport>,
}

pub fn bundle_dir(cfg: &RunConfig, root: &Path) -> PathBuf {
    root.join(&cfg.output_dir)
}

pub fn plan(cfg: &RunConfig, root: &Path, stage: Stage) -> Result<String> {
    let grid = cfg.time_grid()?;
    let dir = bundle_dir(cfg, root);
    let mut s = String::new();
    s += &format!("regime {:?}, activation {:?}, seed {}\n", cfg.regime, cfg.activation(), cfg.seed);
    s += &format!("grid {:?}, step {}, {} steps\n", grid.mode(), grid.step_size(), grid.num_steps());
    let mut steps = Vec::new();
    if stage.theory() {
        steps.push("saddle");
        if stage != Stage::Solve {
            steps.extend(["blocks", "propagator"]);
        }
    }
    if stage.ensemble() {
        steps.push("ensemble");
    }
    if stage == Stage::Run {
        steps.push("comparison");
    }
    s += &format!("stages: {}\n", steps.join(" -> "));
    s += &format!("bundle: {}\n", dir.display());
    s += &format!("  {}\n", dir.join("config.toml").display());
    for case in cases(cfg) {
        let label = case.label();
        let size = if stage.ensemble() { format!(", E = {}", cfg.ensemble.size) } else { String::new() };
        s += &format!("case {label}{size}{}\n", if gated(cfg, &case) { "" } else { " (reported, not gated)" });
        if stage.theory() {
            s += &format!("  {}\n", dir.join(format!("theory_{label}.csv")).display());
        }
        if stage.ensemble() {
            s += &format!("  {}\n", dir.join(format!("ensemble_{label}.csv")).display());
        }
    }
    if stage == Stage::Run {
        s += &format!("  {}\n", dir.join("comparison.json").display());
    }
    Ok(s)
}

/// Infinite-width solution for one coupling, shared by every width and size in the sweep.
enum Solved {
    Lazy {
        spectrum: LazySpectrum,
        variance: Option<Vec<f64>>,
    },
    TwoLayer(Box<SaddleSolution>, Option<Box<TwoLayerTheory>>),
    Whitened(Box<WhitenedTheory>),
    DeepLinear(Box<DeepLinearState>, Option<Box<DeepLinearPropagator>>),
    Eos(EosTrajectory, Option<EosVariance>),
}

fn lazy_dataset(cfg: &RunConfig, points: usize) -> Result<Dataset> {
    // targets are the first input coordinate, a smooth function of the inputs
    let raw = Dataset::random_sphere(cfg.model.input_dim, vec![0.0; points], cfg.seed)?;
    let targets = (0..points).map(|m| cfg.model.target * raw.inputs[(0, m)]).collect();
    Ok(Dataset::new(raw.inputs.clone(), targets)?)
}

fn single_point(cfg: &RunConfig) -> Result<Dataset> {
    Ok(Dataset::single_point(cfg.model.input_dim, cfg.model.target, cfg.model.test_overlap)?)
}

fn whitened_dataset(cfg: &RunConfig, points: usize) -> Result<Dataset> {
    let mut y = vec![0.0; points];
    y[0] = cfg.model.target;
    Ok(Dataset::whitened(y)?)
}

fn saddle_config(cfg: &RunConfig, gamma: f64) -> SaddleConfig {
    SaddleConfig {
        hidden_layers: 1,
        gamma,
        activation: cfg.activation(),
        reduction: LossReduction::Sum,
        mc_samples: cfg.solver.mc_samples,
        damping: cfg.solver.damping,
        tol: cfg.solver.tol,
        max_iters: cfg.solver.max_iters,
        seed: cfg.seed,
    }
}

fn solve(cfg: &RunConfig, grid: &TimeGrid, gamma: f64, points: Option<usize>, full: bool) -> Result<Solved> {
    Ok(match cfg.regime {
        Regime::Lazy => {
            let ds = lazy_dataset(cfg, points.unwrap_or(1))?;
            let gram = ds.gram();
            let spectrum = eig_static_ntk(&static_ntk(cfg.activation(), &gram)?, &ds.targets)?;
            let variance = if full {
                let source = KappaSource::SingleSite {
                    activation: cfg.activation(),
                    gram: &gram,
                    samples: cfg.solver.mc_samples,
                    seed: cfg.seed,
                };
                let kappa = estimate_kappa4(source, &spectrum)?;
                Some(solve_variance_ode(&kappa, &spectrum, grid)?.total_train_variance())
            } else {
                None
            };
            Solved::Lazy { spectrum, variance }
        }
        Regime::TwoLayer => {
            let ds = single_point(cfg)?;
            let sc = saddle_config(cfg, gamma);
            if full {
                let th = two_layer_theory(&sc, &ds, grid, InitialOutput::Included)?;
                Solved::TwoLayer(Box::new(th.saddle.clone()), Some(Box::new(th)))
            } else {
                Solved::TwoLayer(Box::new(solve_saddle(&sc, &ds, grid)?), None)
            }
        }
        Regime::Whitened | Regime::Online => Solved::Whitened(Box::new(WhitenedTheory::new(gamma, cfg.model.target, grid)?)),
        Regime::DeepLinear => {
            let depth = cfg.model.depth.unwrap_or(2);
            let dc = DeepLinearConfig::new(depth, gamma, cfg.model.target);
            let state = solve_deep_linear_saddle(&dc, grid)?;
            let prop = if full { Some(Box::new(DeepLinearPropagator::from_state(&state)?)) } else { None };
            Solved::DeepLinear(Box::new(state), prop)
        }
        Regime::Eos => {
            let traj = iterate_mean_field(&EosConfig::new(grid.step_size(), gamma, cfg.model.target, grid.num_steps()))?;
            let var = if full { Some(variance_reduced(&discrete_blocks(&traj)?, &traj)?) } else { None };
            Solved::Eos(traj, var)
        }
    })
}

fn axis_name(grid: &TimeGrid) -> &'static str {
    if grid.mode() == dmft_core::grid::StepMode::DiscreteGd {
        "step"
    } else {
        "time"
    }
}

fn row(m: &nalgebra::DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}

/// Theory columns; variances are width-free `N·Var` except the whitened loss, which is `⟨|Δ|²⟩` at width `N`.
fn theory_table(solved: &Solved, grid: &TimeGrid, case: &Case) -> Result<CurveTable> {
    let mut t = CurveTable::new(axis_name(grid), grid.times());
    match solved {
        Solved::Lazy { spectrum, variance } => {
            t.push_theory("sq_error", grid.times().iter().map(|&x| spectrum.squared_error(x)).collect())?;
            if let Some(v) = variance {
                t.push_theory("nvar_train", v.clone())?;
            }
        }
        Solved::TwoLayer(saddle, theory) => {
            t.push_theory("mean_delta", row(&saddle.order.errors, 0))?;
            t.push_theory("mean_k", saddle.order.ntk.iter().map(|k| k[(0, 0)]).collect())?;
            if let Some(test) = &saddle.test {
                t.push_theory("mean_f_star", row(&test.predictions, 0))?;
            }
            if let Some(th) = theory {
                t.push_theory("nvar_delta", th.variance("delta", 1)?)?;
                t.push_theory("nvar_k", th.variance("K", 1)?)?;
                if saddle.test.is_some() {
                    t.push_theory("nvar_f_star", th.variance("f_star", 1)?)?;
                }
            }
        }
        Solved::Whitened(th) => {
            let p = case.points.unwrap_or(1);
            t.push_theory("loss", online_map(th, p, case.width)?.total)?;
        }
        Solved::DeepLinear(state, prop) => {
            t.push_theory("mean_delta", state.errors.clone())?;
            t.push_theory("mean_k", state.ntk())?;
            if let Some(pr) = prop {
                t.push_theory("nvar_delta", pr.error_variance())?;
                t.push_theory("nvar_k", pr.ntk_variance())?;
                for layer in 1..=state.hidden_layers() {
                    t.push_theory(&format!("nvar_h{layer}"), pr.feature_variance(layer))?;
                }
            }
        }
        Solved::Eos(traj, var) => {
            t.push_theory("mean_delta", traj.errors.clone())?;
            t.push_theory("mean_k", traj.kernels.clone())?;
            if let Some(v) = var {
                t.push_theory("nvar_delta", v.delta.clone())?;
                t.push_theory("nvar_k", v.kernel.clone())?;
            }
        }
    }
    Ok(t)
}

fn push_mean(t: &mut CurveTable, name: &str, s: &SeriesStats) -> Result<()> {
    Ok(t.push_ensemble(name, s.mean.clone(), s.std_error.clone())?)
}

fn push_nvar(t: &mut CurveTable, name: &str, s: &SeriesStats, width: usize) -> Result<()> {
    let n = width as f64;
    Ok(t.push_ensemble(name, s.scaled_variance.clone(), s.variance_std_error.iter().map(|v| n * v).collect())?)
}

fn network(cfg: &RunConfig, case: &Case, hidden_layers: usize, input_dim: usize) -> NetworkConfig {
    NetworkConfig {
        hidden_layers,
        width: case.width,
        input_dim,
        gamma: case.gamma,
        activation: cfg.activation(),
        seed: cfg.seed,
    }
}

fn stats_of(ens: &EnsembleRecord, f: impl Fn(&dmft_core::finite_net::TrainingTrajectory) -> Vec<f64> + Sync) -> Result<SeriesStats> {
    Ok(ens.stats(f)?)
}

fn ensemble_table(cfg: &RunConfig, grid: &TimeGrid, case: &Case) -> Result<CurveTable> {
    let mut t = CurveTable::new(axis_name(grid), grid.times());
    let e = cfg.ensemble.size;
    let width = case.width;
    let errors = |ens: &EnsembleRecord| stats_of(ens, |m| row(&m.errors, 0));
    let ntk = |ens: &EnsembleRecord| stats_of(ens, |m| m.ntk_entry(0, 0).unwrap_or_default());
    match cfg.regime {
        Regime::Lazy => {
            let ds = lazy_dataset(cfg, case.points.unwrap_or(1))?;
            let opts = TrainOptions {
                reduction: LossReduction::Mean,
                background_subtract: true,
                record: RecordOptions {
                    ntk: false,
                    layer_kernels: false,
                },
            };
            let ens = run_ensemble(&network(cfg, case, 1, ds.input_dim()), &ds, grid, &opts, e)?;
            push_mean(&mut t, "sq_error", &stats_of(&ens, |m| m.squared_error())?)?;
            // N Σ_μ Var Δ_μ with the per-point errors added in quadrature
            let (mut total, mut se_sq) = (vec![0.0; grid.num_steps()], vec![0.0; grid.num_steps()]);
            for mu in 0..ds.num_samples() {
                let s = stats_of(&ens, |m| row(&m.errors, mu))?;
                for i in 0..total.len() {
                    total[i] += s.scaled_variance[i];
                    se_sq[i] += (width as f64 * s.variance_std_error[i]).powi(2);
                }
            }
            t.push_ensemble("nvar_train", total, se_sq.iter().map(|v| v.sqrt()).collect())?;
        }
        Regime::TwoLayer => {
            let ds = single_point(cfg)?;
            let ens = run_ensemble(&network(cfg, case, 1, ds.input_dim()), &ds, grid, &TrainOptions::default(), e)?;
            let (d, k) = (errors(&ens)?, ntk(&ens)?);
            push_mean(&mut t, "mean_delta", &d)?;
            push_mean(&mut t, "mean_k", &k)?;
            let test = ds.test_inputs.is_some().then(|| {
                stats_of(&ens, |m| m.test_predictions.as_ref().map(|p| row(p, 0)).unwrap_or_default())
            });
            let test = test.transpose()?;
            if let Some(f) = &test {
                push_mean(&mut t, "mean_f_star", f)?;
            }
            push_nvar(&mut t, "nvar_delta", &d, width)?;
            push_nvar(&mut t, "nvar_k", &k, width)?;
            if let Some(f) = &test {
                push_nvar(&mut t, "nvar_f_star", f, width)?;
            }
        }
        Regime::Whitened => {
            let ds = whitened_dataset(cfg, case.points.unwrap_or(1))?;
            let opts = TrainOptions {
                reduction: LossReduction::Sum,
                background_subtract: false,
                record: RecordOptions {
                    ntk: false,
                    layer_kernels: false,
                },
            };
            let ens = run_ensemble(&network(cfg, case, 1, ds.input_dim()), &ds, grid, &opts, e)?;
            push_mean(&mut t, "loss", &stats_of(&ens, |m| m.squared_error())?)?;
        }
        Regime::Online => {
            let d = case.points.unwrap_or(1);
            let mut target = DVector::zeros(d);
            target[0] = cfg.model.target;
            let oc = OnlineConfig {
                width,
                input_dim: d,
                gamma: case.gamma,
                batch_size: cfg.model.batch_factor.map(|f| f * d),
                seed: cfg.seed,
            };
            let ens = run_online_ensemble(&oc, &target, grid, e)?;
            let samples: Vec<Vec<f64>> = ens.iter().map(|m| m.loss.clone()).collect();
            push_mean(&mut t, "loss", &series_stats(&samples, width)?)?;
        }
        Regime::DeepLinear => {
            let ds = single_point(cfg)?;
            let layers = cfg.model.depth.unwrap_or(2) - 1;
            let mut opts = TrainOptions::default();
            opts.record.layer_kernels = true;
            let ens = run_ensemble(&network(cfg, case, layers, ds.input_dim()), &ds, grid, &opts, e)?;
            let (d, k) = (errors(&ens)?, ntk(&ens)?);
            push_mean(&mut t, "mean_delta", &d)?;
            push_mean(&mut t, "mean_k", &k)?;
            push_nvar(&mut t, "nvar_delta", &d, width)?;
            push_nvar(&mut t, "nvar_k", &k, width)?;
            for layer in 1..=layers {
                let h = stats_of(&ens, |m| {
                    m.feature_kernels
                        .as_ref()
                        .map(|f| f[layer - 1].iter().map(|x| x[(0, 0)]).collect())
                        .unwrap_or_default()
                })?;
                push_nvar(&mut t, &format!("nvar_h{layer}"), &h, width)?;
            }
        }
        Regime::Eos => {
            let ds = single_point(cfg)?;
            let ens = run_ensemble(&network(cfg, case, 1, ds.input_dim()), &ds, grid, &TrainOptions::default(), e)?;
            let (d, k) = (errors(&ens)?, ntk(&ens)?);
            push_mean(&mut t, "mean_delta", &d)?;
            push_mean(&mut t, "mean_k", &k)?;
            push_nvar(&mut t, "nvar_delta", &d, width)?;
            push_nvar(&mut t, "nvar_k", &k, width)?;
        }
    }
    Ok(t)
}

/// Runs `stage` for every case and writes the bundle under `root`.
///
/// Artifacts are written as soon as they exist, so a failing stage leaves the earlier ones in place.
pub fn execute(cfg: &RunConfig, root: &Path, stage: Stage, log: &mut dyn Write) -> Result<Outcome> {
    cfg.validate()?;
    let grid = cfg.time_grid()?;
    let dir = bundle_dir(cfg, root);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.resolved_toml()?)?;
    let full = stage != Stage::Solve;
    let mut reports = Vec::new();
    let mut solved: Option<(f64, Option<usize>, Solved)> = None;
    for case in cases(cfg) {
        let label = case.label();
        let theory = if stage.theory() {
            // theory depends on the coupling and the point count, not on the width
            let reuse = matches!(&solved, Some((g, p, _)) if *g == case.gamma && (*p == case.points || cfg.regime != Regime::Lazy));
            if !reuse {
                let s = solve(cfg, &grid, case.gamma, case.points, full)
                    .with_context(|| format!("stage {} failed for case {label}", if full { "propagator" } else { "solve" }))?;
                solved = Some((case.gamma, case.points, s));
            }
            let (_, _, s) = solved.as_ref().context("no theory solution")?;
            let table = theory_table(s, &grid, &case).with_context(|| format!("assembling theory for case {label}"))?;
            table.write_path(&dir.join(format!("theory_{label}.csv")))?;
            writeln!(log, "theory   {label}")?;
            Some(table)
        } else {
            None
        };
        if !stage.ensemble() {
            continue;
        }
        let ensemble = ensemble_table(cfg, &grid, &case).with_context(|| format!("stage ensemble failed for case {label}"))?;
        ensemble.write_path(&dir.join(format!("ensemble_{label}.csv")))?;
        writeln!(log, "ensemble {label}")?;
        if let Some(theory) = theory {
            let comparison = compare(&theory, &ensemble, &cfg.thresholds).with_context(|| format!("stage comparison failed for case {label}"))?;
            writeln!(log, "compare  {label}: {}", if comparison.pass { "pass" } else { "fail" })?;
            reports.push(CaseReport {
                case: label,
                gated: gated(cfg, &case),
                comparison,
            });
        }
    }
    let report = (stage == Stage::Run).then(|| RunReport {
        regime: cfg.regime,
        pass: reports.iter().filter(|r| r.gated).all(|r| r.comparison.pass),
        cases: reports,
    });
    if let Some(r) = &report {
        fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(r)? + "\n")?;
    }
    Ok(Outcome { dir, report })
}
