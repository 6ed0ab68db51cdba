//! Command-line front end: solve problems, verify multiplier sets, probe
//! for infimum gaps, and manage the bundled example corpus.
//!
//! Exit codes: 0 success (feasible candidate, residuals pass, or no gap),
//! 1 input error, 2 infeasible candidate, 3 residuals above tolerance,
//! 4 gap detected, 5 inconclusive.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use impulsive_core::analysis::{
    gap_probe, isolation_probe, Conclusion, GapProbeOptions, IsolationOptions,
};
use impulsive_core::bundled;
use impulsive_core::io as fio;
use impulsive_core::model::{validate, ProblemSpec};
use impulsive_core::pmp::{classify_normality, extremal_residuals, MultiplierSet};
use impulsive_core::reparam::ExtendedProcess;
use impulsive_core::solver::{solve_extended, solve_strict_restricted, Candidate, SolveConfig};

const EXIT_OK: u8 = 0;
const EXIT_INPUT: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_RESIDUALS: u8 = 3;
const EXIT_GAP: u8 = 4;
const EXIT_INCONCLUSIVE: u8 = 5;

#[derive(Parser)]
#[command(
    name = "impulsive",
    version,
    about = "Toolkit for impulsive optimal control: space-time embedding, \
             transcription solves, extremal verification, and gap detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the extended problem, optionally restricted to strict processes.
    Solve(SolveArgs),
    /// Verify a multiplier set against a trajectory and classify normality.
    Check(CheckArgs),
    /// Probe for an infimum gap and apply the no-gap certificates.
    Gap(GapArgs),
    /// List or export the bundled example corpus.
    Examples(ExamplesArgs),
    /// Re-run a recorded manifest; outputs are bit-identical.
    Replay(ReplayArgs),
}

#[derive(Args, Clone)]
struct ProblemSel {
    /// Bundled example id (see `examples list`).
    #[arg(long, conflicts_with = "problem")]
    example: Option<String>,
    /// Path to a problem document (TOML).
    #[arg(long)]
    problem: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SolveFlags {
    /// Transcription intervals.
    #[arg(long = "N", default_value_t = 80)]
    n: usize,
    /// Independent multistart runs.
    #[arg(long, default_value_t = 16)]
    multistarts: usize,
    /// Random seed for the multistart initializations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feasibility tolerance.
    #[arg(long = "tol-feas", default_value_t = 1e-6)]
    tol_feas: f64,
    /// Stationarity tolerance.
    #[arg(long = "tol-stat", default_value_t = 1e-5)]
    tol_stat: f64,
}

impl SolveFlags {
    fn config(&self) -> SolveConfig {
        SolveConfig {
            n_intervals: self.n,
            multistarts: self.multistarts,
            seed: self.seed,
            tol_feas: self.tol_feas,
            tol_stat: self.tol_stat,
            ..SolveConfig::default()
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    sel: ProblemSel,
    #[command(flatten)]
    flags: SolveFlags,
    /// Restrict to embedded strict processes with drift weight >= this.
    #[arg(long = "strict-eps")]
    strict_eps: Option<f64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    sel: ProblemSel,
    /// Trajectory CSV; defaults to the bundled minimizer for --example.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Multiplier TOML; defaults to the bundled set for --example.
    #[arg(long)]
    multipliers: Option<PathBuf>,
    /// Residual tolerance for the pass verdict.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct GapArgs {
    #[command(flatten)]
    sel: ProblemSel,
    #[command(flatten)]
    flags: SolveFlags,
    /// Comma-separated restriction levels, largest to smallest.
    #[arg(long = "eps-grid", value_delimiter = ',')]
    eps_grid: Option<Vec<f64>>,
    /// Also probe isolation of the extended minimizer in this metric ball.
    #[arg(long)]
    delta: Option<f64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ExamplesArgs {
    #[command(subcommand)]
    action: ExamplesAction,
}

#[derive(Subcommand)]
enum ExamplesAction {
    /// One line per bundled example.
    List,
    /// Write an example's problem, minimizer CSV, and multipliers.
    Export {
        /// Example id; omit to export all.
        id: Option<String>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReplayArgs {
    /// Path to a manifest.toml recorded by a previous run.
    manifest: PathBuf,
}

/// Record of one run: replaying it reproduces the outputs bit-identically.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    example: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    problem: Option<String>,
    seed: u64,
    n_intervals: usize,
    multistarts: usize,
    tol_feas: f64,
    tol_stat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strict_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    check_trajectory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    check_multipliers: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    check_tol: Option<f64>,
    out: String,
    tool_version: String,
}

#[derive(Debug, Serialize)]
struct CandidateSummary<'a> {
    objective: &'a str,
    cost: f64,
    feasibility: f64,
    converged: bool,
    run: usize,
}

fn fail(msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    EXIT_INPUT
}

fn load_selected(sel: &ProblemSel) -> Result<(ProblemSpec, Option<bundled::BundledExample>), String> {
    match (&sel.example, &sel.problem) {
        (Some(id), None) => match bundled::by_id(id) {
            Some(ex) => Ok((ex.problem.clone(), Some(ex))),
            None => Err(format!(
                "unknown example `{id}`; available: {}",
                bundled::ids().join(", ")
            )),
        },
        (None, Some(path)) => {
            let p = fio::load_problem(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let report = validate(&p);
            if !report.is_valid() {
                return Err(format!("{}: {report}", path.display()));
            }
            Ok((p, None))
        }
        _ => Err("select a problem with --example ID or --problem PATH".into()),
    }
}

fn ensure_out(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), String> {
    fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), String> {
    let text = toml::to_string_pretty(manifest).map_err(|e| e.to_string())?;
    write_text(&dir.join("manifest.toml"), &text)
}

fn manifest_base(command: &str, sel: &ProblemSel, flags: &SolveFlags, out: &Path) -> RunManifest {
    RunManifest {
        command: command.into(),
        example: sel.example.clone(),
        problem: sel.problem.as_ref().map(|p| p.display().to_string()),
        seed: flags.seed,
        n_intervals: flags.n,
        multistarts: flags.multistarts,
        tol_feas: flags.tol_feas,
        tol_stat: flags.tol_stat,
        strict_eps: None,
        eps_grid: None,
        delta: None,
        check_trajectory: None,
        check_multipliers: None,
        check_tol: None,
        out: out.display().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
    }
}

fn write_candidate(dir: &Path, cand: &Candidate, objective: &str) -> Result<(), String> {
    let mut csv = Vec::new();
    fio::write_extended_csv(&cand.process, &mut csv).map_err(|e| e.to_string())?;
    fs::write(dir.join("candidate.csv"), &csv).map_err(|e| e.to_string())?;
    let summary = CandidateSummary {
        objective,
        cost: cand.cost,
        feasibility: cand.feasibility,
        converged: cand.converged,
        run: cand.run,
    };
    let text = toml::to_string_pretty(&summary).map_err(|e| e.to_string())?;
    write_text(&dir.join("candidate.toml"), &text)?;
    write_text(&dir.join("solver.log"), &(cand.log.join("\n") + "\n"))
}

fn cmd_solve(args: &SolveArgs) -> u8 {
    let (p, _) = match load_selected(&args.sel) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    if let Some(eps) = args.strict_eps {
        if !(0.0..1.0).contains(&eps) || eps == 0.0 {
            return fail(format!("--strict-eps {eps} outside (0, 1)"));
        }
    }
    if let Err(e) = ensure_out(&args.out) {
        return fail(e);
    }
    let cfg = args.flags.config();
    let result = match args.strict_eps {
        Some(eps) => solve_strict_restricted(&p, eps, &cfg),
        None => solve_extended(&p, &cfg),
    };
    let cand = match result {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let objective = match args.strict_eps {
        Some(_) => "strict-restricted",
        None => "extended",
    };
    let mut manifest = manifest_base("solve", &args.sel, &args.flags, &args.out);
    manifest.strict_eps = args.strict_eps;
    if let Err(e) = write_candidate(&args.out, &cand, objective)
        .and_then(|()| write_manifest(&args.out, &manifest))
    {
        return fail(e);
    }
    println!(
        "{objective} solve: cost {:.6}, feasibility {:.2e}, converged {}, run {}",
        cand.cost, cand.feasibility, cand.converged, cand.run
    );
    println!("artifacts in {}", args.out.display());
    if cand.feasibility <= cfg.tol_feas {
        EXIT_OK
    } else {
        eprintln!(
            "candidate infeasible: residual {:.2e} above tolerance {:.1e}",
            cand.feasibility, cfg.tol_feas
        );
        EXIT_INFEASIBLE
    }
}

fn load_check_inputs(
    args: &CheckArgs,
    ex: Option<&bundled::BundledExample>,
) -> Result<(ExtendedProcess, MultiplierSet), String> {
    let trajectory = match (&args.trajectory, ex) {
        (Some(path), _) => {
            let file = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
            fio::read_extended_csv(file).map_err(|e| format!("{}: {e}", path.display()))?
        }
        (None, Some(ex)) => ex.minimizer.clone(),
        (None, None) => return Err("--trajectory is required with --problem".into()),
    };
    let multipliers = match (&args.multipliers, ex) {
        (Some(path), _) => fio::load_multipliers(path).map_err(|e| format!("{}: {e}", path.display()))?,
        (None, Some(ex)) => ex.multipliers.clone(),
        (None, None) => return Err("--multipliers is required with --problem".into()),
    };
    if multipliers.path.p0.len() != trajectory.grid.len() {
        return Err(format!(
            "grid mismatch: trajectory has {} nodes, multipliers {}",
            trajectory.grid.len(),
            multipliers.path.p0.len()
        ));
    }
    Ok((trajectory, multipliers))
}

fn cmd_check(args: &CheckArgs) -> u8 {
    let (p, ex) = match load_selected(&args.sel) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let (ep, ms) = match load_check_inputs(args, ex.as_ref()) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    if let Err(e) = ensure_out(&args.out) {
        return fail(e);
    }
    let report = match extremal_residuals(&p, &ep, &ms) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let verdict = match classify_normality(&p, &ep, 1e-6) {
        Ok(r) => r.verdict.to_string(),
        Err(e) => format!("unavailable ({e})"),
    };
    let text = format!("{report}normality classification: {verdict}\n");
    print!("{text}");
    let mut manifest = manifest_base(
        "check",
        &args.sel,
        &SolveFlags {
            n: 0,
            multistarts: 0,
            seed: 0,
            tol_feas: 1e-6,
            tol_stat: 1e-5,
        },
        &args.out,
    );
    manifest.check_trajectory = args.trajectory.as_ref().map(|p| p.display().to_string());
    manifest.check_multipliers = args.multipliers.as_ref().map(|p| p.display().to_string());
    manifest.check_tol = Some(args.tol);
    if let Err(e) =
        write_text(&args.out.join("check.txt"), &text).and_then(|()| write_manifest(&args.out, &manifest))
    {
        return fail(e);
    }
    if report.max_residual() <= args.tol {
        EXIT_OK
    } else {
        eprintln!(
            "residuals {:.2e} above tolerance {:.1e}",
            report.max_residual(),
            args.tol
        );
        EXIT_RESIDUALS
    }
}

fn cmd_gap(args: &GapArgs) -> u8 {
    let (p, _) = match load_selected(&args.sel) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    if let Err(e) = ensure_out(&args.out) {
        return fail(e);
    }
    let cfg = args.flags.config();
    let mut opts = GapProbeOptions::default();
    if let Some(grid) = &args.eps_grid {
        opts.eps_grid = grid.clone();
    }
    let report = match gap_probe(&p, &cfg, &opts) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let mut text = report.render();
    if let Some(delta) = args.delta {
        let iso_opts = IsolationOptions::default();
        match isolation_probe(&p, &report.minimizer, delta, &cfg, &iso_opts) {
            Ok(iso) => text.push_str(&iso.render()),
            Err(e) => return fail(e),
        }
    }
    print!("{text}");
    let mut manifest = manifest_base("gap", &args.sel, &args.flags, &args.out);
    manifest.eps_grid = Some(opts.eps_grid.clone());
    manifest.delta = args.delta;
    if let Err(e) = write_text(&args.out.join("report.txt"), &text)
        .and_then(|()| write_text(&args.out.join("report.csv"), &report.csv()))
        .and_then(|()| write_manifest(&args.out, &manifest))
    {
        return fail(e);
    }
    match report.conclusion {
        Conclusion::NoGapCertified(_) => EXIT_OK,
        Conclusion::GapDetected => EXIT_GAP,
        Conclusion::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

fn cmd_examples(args: &ExamplesArgs) -> u8 {
    match &args.action {
        ExamplesAction::List => {
            for ex in bundled::examples() {
                println!("{:<5} {}: {}", ex.id, ex.title, ex.summary);
            }
            EXIT_OK
        }
        ExamplesAction::Export { id, out } => {
            let targets: Vec<bundled::BundledExample> = match id {
                Some(id) => match bundled::by_id(id) {
                    Some(ex) => vec![ex],
                    None => {
                        return fail(format!(
                            "unknown example `{id}`; available: {}",
                            bundled::ids().join(", ")
                        ))
                    }
                },
                None => bundled::examples(),
            };
            if let Err(e) = ensure_out(out) {
                return fail(e);
            }
            for ex in &targets {
                let stem = out.join(ex.id);
                let problem_path = stem.with_extension("problem.toml");
                if let Err(e) = fio::save_problem(&ex.problem, &problem_path) {
                    return fail(format!("{}: {e}", problem_path.display()));
                }
                let csv_path = stem.with_extension("minimizer.csv");
                let mut buf = Vec::new();
                if let Err(e) = fio::write_extended_csv(&ex.minimizer, &mut buf) {
                    return fail(format!("{}: {e}", csv_path.display()));
                }
                if let Err(e) = fs::write(&csv_path, &buf) {
                    return fail(format!("{}: {e}", csv_path.display()));
                }
                let ms_path = stem.with_extension("multipliers.toml");
                if let Err(e) = fio::save_multipliers(&ex.multipliers, &ms_path) {
                    return fail(format!("{}: {e}", ms_path.display()));
                }
                println!(
                    "exported {} -> {}, {}, {}",
                    ex.id,
                    problem_path.display(),
                    csv_path.display(),
                    ms_path.display()
                );
            }
            EXIT_OK
        }
    }
}

fn cmd_replay(args: &ReplayArgs) -> u8 {
    let text = match fs::read_to_string(&args.manifest) {
        Ok(t) => t,
        Err(e) => return fail(format!("{}: {e}", args.manifest.display())),
    };
    let m: RunManifest = match toml::from_str(&text) {
        Ok(m) => m,
        Err(e) => return fail(format!("{}: {e}", args.manifest.display())),
    };
    let sel = ProblemSel {
        example: m.example.clone(),
        problem: m.problem.clone().map(PathBuf::from),
    };
    let flags = SolveFlags {
        n: m.n_intervals,
        multistarts: m.multistarts,
        seed: m.seed,
        tol_feas: m.tol_feas,
        tol_stat: m.tol_stat,
    };
    match m.command.as_str() {
        "solve" => cmd_solve(&SolveArgs {
            sel,
            flags,
            strict_eps: m.strict_eps,
            out: PathBuf::from(&m.out),
        }),
        "check" => cmd_check(&CheckArgs {
            sel,
            trajectory: m.check_trajectory.clone().map(PathBuf::from),
            multipliers: m.check_multipliers.clone().map(PathBuf::from),
            tol: m.check_tol.unwrap_or(1e-5),
            out: PathBuf::from(&m.out),
        }),
        "gap" => cmd_gap(&GapArgs {
            sel,
            flags,
            eps_grid: m.eps_grid.clone(),
            delta: m.delta,
            out: PathBuf::from(&m.out),
        }),
        other => fail(format!("manifest command `{other}` is not replayable")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Check(args) => cmd_check(args),
        Command::Gap(args) => cmd_gap(args),
        Command::Examples(args) => cmd_examples(args),
        Command::Replay(args) => cmd_replay(args),
    };
    ExitCode::from(code)
}
