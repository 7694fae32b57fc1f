use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dmft_cli::config::RunConfig;
use dmft_cli::pipeline::{execute, plan, Stage};
use dmft_cli::presets::preset;
use dmft_core::report::{compare, CurveTable, Thresholds};

const EXIT_ERROR: u8 = 1;
const EXIT_REJECTED: u8 = 2;

/// Infinite-width theory, finite-width propagators and network ensembles.
#[derive(Parser)]
#[command(name = "dmft", version)]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory that bundles are written under.
    #[arg(long, global = true, env = "DMFT_OUTPUT_ROOT", default_value = "dmft-output")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the infinite-width saddle and write mean curves.
    Solve(StageArgs),
    /// Saddle plus finite-width propagator variances.
    Propagator(StageArgs),
    /// Train finite-width ensembles only.
    Ensemble(StageArgs),
    /// Theory, ensembles and the comparison; exits 2 if the comparison fails.
    Run(StageArgs),
    /// Compare a theory CSV against an ensemble CSV.
    Compare(CompareArgs),
    /// Run one of the built-in figure configurations.
    Preset(PresetArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Print the plan and write nothing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct CompareArgs {
    theory: PathBuf,
    ensemble: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    max_z: f64,
    #[arg(long, default_value_t = 0.8)]
    min_pass: f64,
    /// Write the comparison as JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
    Fig5,
}

#[derive(Args)]
struct PresetArgs {
    figure: Figure,
    #[arg(long)]
    dry_run: bool,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

fn run_stage(cfg: &RunConfig, root: &Path, stage: Stage, dry_run: bool) -> Result<bool> {
    if dry_run {
        print!("{}", plan(cfg, root, stage)?);
        return Ok(true);
    }
    let mut log = io::stderr();
    let outcome = execute(cfg, root, stage, &mut log)?;
    println!("wrote {}", outcome.dir.display());
    Ok(match outcome.report {
        Some(report) => {
            for case in &report.cases {
                let verdict = if case.comparison.pass { "pass" } else { "fail" };
                let note = if case.gated { "" } else { " (not gated)" };
                println!("{:<20} {verdict}{note}", case.case);
            }
            println!("overall: {}", if report.pass { "pass" } else { "fail" });
            report.pass
        }
        None => true,
    })
}

fn run_compare(args: &CompareArgs) -> Result<bool> {
    let theory = CurveTable::read_path(&args.theory).with_context(|| format!("reading {}", args.theory.display()))?;
    let ensemble = CurveTable::read_path(&args.ensemble).with_context(|| format!("reading {}", args.ensemble.display()))?;
    let thresholds = Thresholds {
        max_abs_z: args.max_z,
        min_pass_fraction: args.min_pass,
        ..Thresholds::default()
    };
    let comparison = compare(&theory, &ensemble, &thresholds)?;
    let json = serde_json::to_string_pretty(&comparison)? + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?,
        None => io::stdout().write_all(json.as_bytes())?,
    }
    for obs in &comparison.observables {
        eprintln!(
            "{:<14} max |z| {:.2} at {}, {:.1}% within bound: {}",
            obs.name,
            obs.max_abs_z,
            obs.worst_at,
            100.0 * obs.pass_fraction,
            if obs.pass { "pass" } else { "fail" }
        );
    }
    Ok(comparison.pass)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("configuring the thread pool")?;
    }
    let root = &cli.output_root;
    let stage_cmd = |args: &StageArgs, stage| -> Result<bool> {
        let cfg = RunConfig::from_path(&args.config)?;
        run_stage(&cfg, root, stage, args.dry_run)
    };
    match &cli.command {
        Command::Solve(a) => stage_cmd(a, Stage::Solve),
        Command::Propagator(a) => stage_cmd(a, Stage::Propagator),
        Command::Ensemble(a) => stage_cmd(a, Stage::Ensemble),
        Command::Run(a) => stage_cmd(a, Stage::Run),
        Command::Compare(a) => run_compare(a),
        Command::Preset(a) => {
            let name = match a.figure {
                Figure::Fig1 => "fig1",
                Figure::Fig2 => "fig2",
                Figure::Fig3 => "fig3",
                Figure::Fig4 => "fig4",
                Figure::Fig5 => "fig5",
            };
            let cfg = preset(name)?;
            if a.print_config {
                print!("{}", cfg.resolved_toml()?);
                return Ok(true);
            }
            run_stage(&cfg, root, Stage::Run, a.dry_run)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // keep 2 for rejected comparisons; usage errors are plain errors
            let code = if err.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_REJECTED),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
