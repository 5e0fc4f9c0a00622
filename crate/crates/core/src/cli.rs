//! Command-line front end: `solve`, `rollout`, `validate` and `sweep`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 policy iteration
//! stopped at `max_iters` without converging, 3 an assumption check failed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_policy, BoundaryCondition, GridGeometry, ValueGrid};
use crate::pia::{run_pia, PiaHistory};
use crate::rollout::{simulate_values, PolicyField};
use crate::validate::{check_action_space, validate_problem, ActionSpaceCheck};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_ASSUMPTIONS: i32 = 3;

pub const VALUE_GRID_CSV: &str = "value_grid.csv";
pub const ITERATIONS_CSV: &str = "iterations.csv";
pub const POLICY_CSV: &str = "policy.csv";
pub const ROLLOUT_CSV: &str = "rollout.csv";
pub const SWEEP_CSV: &str = "sweep_summary.csv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "pia", version, about = "Policy improvement for entropy-regularized diffusion control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate assumptions, run policy iteration and write the value grid.
    Solve {
        config: PathBuf,
        /// Output directory, overriding `[run] output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo value estimates at the given starting points.
    Rollout {
        config: PathBuf,
        /// Starting points, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        x: Vec<f64>,
        #[arg(long, value_enum, default_value_t = PolicyChoice::Final)]
        policy: PolicyChoice,
        /// CSV with columns `x,y` on a uniform grid; used with `--policy file`.
        #[arg(long)]
        policy_file: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the standing assumptions and print the report as JSON.
    Validate { config: PathBuf },
    /// One solve per entropy weight, each in its own subdirectory.
    Sweep {
        config: PathBuf,
        /// Entropy weights, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
        /// Run the solves concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyChoice {
    /// Final policy written by `solve`.
    Final,
    /// Gibbs policy with zero gradient.
    Uniform,
    /// Gradient field read from `--policy-file`.
    File,
}

/// Parse arguments and run. Usage errors map to exit code 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_ERROR
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Solve { config, out } => cmd_solve(&config, out.as_deref()),
        Command::Rollout {
            config,
            x,
            policy,
            policy_file,
            out,
        } => cmd_rollout(&config, &x, policy, policy_file.as_deref(), out.as_deref()),
        Command::Validate { config } => cmd_validate(&config),
        Command::Sweep {
            config,
            lambda,
            parallel,
            out,
        } => cmd_sweep(&config, &lambda, parallel, out.as_deref()),
    }
}

enum Outcome {
    Done(i32),
    Failed(Error),
}

fn report(outcome: Outcome) -> i32 {
    match outcome {
        Outcome::Done(code) => code,
        Outcome::Failed(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

impl From<Error> for Outcome {
    fn from(e: Error) -> Self {
        Outcome::Failed(e)
    }
}

fn load(config: &Path, out: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(o) = out {
        cfg.output = o.to_path_buf();
    }
    Ok(cfg)
}

/// Fixed-width float text: 17 significant digits, round-trip exact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        if rel == MANIFEST {
            continue;
        }
        let bytes = std::fs::read(&path)?;
        out.push(FileEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    Ok(())
}

/// Rewrite `manifest.json` in `dir` listing every other file under it.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, started: Instant, extra: serde_json::Value) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let manifest = serde_json::json!({
        "command": command,
        "config": cfg.source,
        "model": cfg.model.params.name(),
        "lambda": cfg.model.lambda,
        "versions": {
            "package": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "csv_format": 1,
        },
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "run": extra,
        "files": files,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Artifact(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(())
}

fn failed_space_json(model: &str, check: &ActionSpaceCheck) -> String {
    let v = serde_json::json!({
        "model": model,
        "action_space": check,
        "passed": false,
        "failures": [format!("action space: {}", check.failure.clone().unwrap_or_default())],
    });
    serde_json::to_string_pretty(&v).expect("serializable")
}

/// Assumption checks shared by `solve` and `validate`: `Ok(Err(json))` when an
/// assumption fails.
fn checked_assumptions(cfg: &RunConfig) -> Result<std::result::Result<String, String>> {
    let space = check_action_space(&cfg.action_intervals(), 0.0);
    if !space.leb_ok || !space.cone_ok {
        return Ok(Err(failed_space_json(cfg.model.params.name(), &space)));
    }
    let problem = cfg.build_problem()?;
    let report = validate_problem(&problem, &cfg.geometry()?, &cfg.sample_config())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Artifact(e.to_string()))?;
    Ok(if report.passed { Ok(json) } else { Err(json) })
}

/// Print to stdout, ignoring a closed pipe.
fn print_stdout(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

pub fn cmd_validate(config: &Path) -> i32 {
    let run = || -> Result<i32> {
        let cfg = load(config, None)?;
        Ok(match checked_assumptions(&cfg)? {
            Ok(json) => {
                print_stdout(&json);
                EXIT_OK
            }
            Err(json) => {
                print_stdout(&json);
                EXIT_ASSUMPTIONS
            }
        })
    };
    report(run().map_or_else(Outcome::from, Outcome::Done))
}

/// Summary of one solve, as reported by sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveSummary {
    pub code: i32,
    pub iterations: usize,
    pub value_at_x0: f64,
    pub final_residual: f64,
}

fn write_solve_artifacts(dir: &Path, hist: &PiaHistory) -> Result<()> {
    let g = &hist.final_grid;
    let x = g.x();
    write_csv(
        &dir.join(VALUE_GRID_CSV),
        &["x", "v", "dv", "d2v", "residual"],
        (0..x.len()).map(|i| {
            vec![
                fmt_f64(x[i]),
                fmt_f64(g.v[i]),
                fmt_f64(g.dv[i]),
                fmt_f64(g.d2v[i]),
                fmt_f64(hist.final_residual[i]),
            ]
        }),
    )?;
    write_csv(
        &dir.join(ITERATIONS_CSV),
        &["n", "sup_delta", "mono_margin", "residual_sup", "c2_proxy"],
        hist.records.iter().map(|r| {
            vec![
                r.n.to_string(),
                fmt_f64(r.sup_delta),
                fmt_f64(r.mono_margin),
                fmt_f64(r.residual_sup),
                fmt_f64(r.c2_proxy),
            ]
        }),
    )?;
    let y = hist.final_policy.gradient();
    write_csv(
        &dir.join(POLICY_CSV),
        &["x", "y"],
        (0..x.len()).map(|i| vec![fmt_f64(x[i]), fmt_f64(y[i])]),
    )
}

/// Solve into `cfg.output`. Errors are returned; assumption failures and
/// non-convergence are reported through the exit code.
pub fn solve_into(cfg: &RunConfig) -> Result<SolveSummary> {
    let started = Instant::now();
    let not_run = |code| SolveSummary {
        code,
        iterations: 0,
        value_at_x0: f64::NAN,
        final_residual: f64::NAN,
    };
    if let Err(json) = checked_assumptions(cfg)? {
        eprintln!("assumption check failed:\n{json}");
        return Ok(not_run(EXIT_ASSUMPTIONS));
    }
    let problem = cfg.build_problem()?;
    let quad = cfg.quadrature(&problem)?;
    let geom = cfg.geometry()?;
    let hist = run_pia(&problem, &quad, &geom, &cfg.pia)?;
    std::fs::create_dir_all(&cfg.output)?;
    write_solve_artifacts(&cfg.output, &hist)?;
    let code = if hist.converged { EXIT_OK } else { EXIT_NOT_CONVERGED };
    let last = hist.records.last().expect("at least one iteration");
    let summary = SolveSummary {
        code,
        iterations: hist.iterations(),
        value_at_x0: hist.final_grid.interpolate(cfg.x0),
        final_residual: last.residual_sup,
    };
    write_manifest(
        &cfg.output,
        "solve",
        cfg,
        started,
        serde_json::json!({
            "converged": hist.converged,
            "iterations": summary.iterations,
            "final_residual_sup": summary.final_residual,
            "value_bound": hist.value_bound,
        }),
    )?;
    Ok(summary)
}

pub fn cmd_solve(config: &Path, out: Option<&Path>) -> i32 {
    let run = || -> Result<i32> {
        let cfg = load(config, out)?;
        let s = solve_into(&cfg)?;
        if s.code == EXIT_NOT_CONVERGED {
            eprintln!("policy iteration stopped after {} iterations without converging", s.iterations);
        }
        Ok(s.code)
    };
    report(run().map_or_else(Outcome::from, Outcome::Done))
}

/// Read named columns from a CSV written by this tool.
pub fn read_csv_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Artifact(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::trim)
        .collect();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::Artifact(format!("{} has no column `{n}`", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        for (c, &i) in idx.iter().enumerate() {
            let v = fields
                .get(i)
                .and_then(|f| f.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Artifact(format!("{}: bad value on line {}", path.display(), ln + 2)))?;
            cols[c].push(v);
        }
    }
    Ok(cols)
}

/// Grid geometry implied by an `x` column; it must be uniform.
fn geometry_of(x: &[f64], path: &Path) -> Result<GridGeometry> {
    let bad = |why: &str| Error::Artifact(format!("{}: {why}", path.display()));
    if x.len() < 5 {
        return Err(bad("needs at least 5 rows"));
    }
    let g = GridGeometry::new(x[0], x[x.len() - 1], x.len()).map_err(|e| bad(&e.to_string()))?;
    let tol = 1e-9 * g.h();
    if x.iter().enumerate().any(|(i, &xi)| (xi - g.x(i)).abs() > tol.max(1e-12 * xi.abs())) {
        return Err(bad("x column is not a uniform grid"));
    }
    Ok(g)
}

pub fn cmd_rollout(config: &Path, xs: &[f64], choice: PolicyChoice, policy_file: Option<&Path>, out: Option<&Path>) -> i32 {
    let run = || -> Result<i32> {
        let started = Instant::now();
        let cfg = load(config, out)?;
        let problem = cfg.build_problem()?;
        let quad = cfg.quadrature(&problem)?;
        let (policy, pde): (PolicyField, ValueGrid) = match choice {
            PolicyChoice::Final => {
                let p = cfg.output.join(POLICY_CSV);
                let cols = read_csv_columns(&p, &["x", "y"])?;
                let geom = geometry_of(&cols[0], &p)?;
                let vpath = cfg.output.join(VALUE_GRID_CSV);
                let vcols = read_csv_columns(&vpath, &["x", "v"])?;
                if vcols[0].len() != geom.len() {
                    return Err(Error::Artifact(format!(
                        "{} and {} disagree on the grid",
                        p.display(),
                        vpath.display()
                    )));
                }
                let pde = ValueGrid::from_values(geom, vcols[1].clone(), cfg.pia.bc)?;
                (PolicyField::new(geom, cols[1].clone())?, pde)
            }
            PolicyChoice::Uniform => {
                let geom = cfg.geometry()?;
                let pde = evaluate_policy(&problem, &quad, &geom, &vec![0.0; geom.len()], cfg.pia.bc)?;
                (PolicyField::uniform(geom), pde)
            }
            PolicyChoice::File => {
                let p = policy_file.ok_or_else(|| Error::Artifact("--policy file needs --policy-file".into()))?;
                let cols = read_csv_columns(p, &["x", "y"])?;
                let geom = geometry_of(&cols[0], p)?;
                let pde = evaluate_policy(&problem, &quad, &geom, &cols[1], BoundaryCondition::NeumannZero)?;
                (PolicyField::new(geom, cols[1].clone())?, pde)
            }
        };
        let est = simulate_values(&problem, &quad, &policy, xs, &cfg.mc)?;
        std::fs::create_dir_all(&cfg.output)?;
        write_csv(
            &cfg.output.join(ROLLOUT_CSV),
            &["x0", "mean", "std_error", "tail_bound", "pde_value", "n_paths", "horizon"],
            est.iter().map(|e| {
                vec![
                    fmt_f64(e.x0),
                    fmt_f64(e.mean),
                    fmt_f64(e.std_error),
                    fmt_f64(e.tail_bound),
                    fmt_f64(pde.interpolate(e.x0)),
                    e.n_paths.to_string(),
                    fmt_f64(e.horizon),
                ]
            }),
        )?;
        let policy_name = match choice {
            PolicyChoice::Final => "final",
            PolicyChoice::Uniform => "uniform",
            PolicyChoice::File => "file",
        };
        write_manifest(
            &cfg.output,
            "rollout",
            &cfg,
            started,
            serde_json::json!({ "policy": policy_name, "x0": xs }),
        )?;
        Ok(EXIT_OK)
    };
    report(run().map_or_else(Outcome::from, Outcome::Done))
}

fn lambda_dir(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

pub fn cmd_sweep(config: &Path, lambdas: &[f64], parallel: bool, out: Option<&Path>) -> i32 {
    let run = || -> Result<i32> {
        let started = Instant::now();
        let cfg = load(config, out)?;
        if lambdas.is_empty() {
            return Err(Error::param("lambda", "need at least one value"));
        }
        if let Some(bad) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::param("lambda", format!("{bad} is not a positive number")));
        }
        std::fs::create_dir_all(&cfg.output)?;
        let one = |&lambda: &f64| -> (f64, Result<SolveSummary>) {
            let mut sub = cfg.with_lambda(lambda);
            sub.output = cfg.output.join(lambda_dir(lambda));
            (lambda, solve_into(&sub))
        };
        let results: Vec<(f64, Result<SolveSummary>)> = if parallel {
            lambdas.par_iter().map(one).collect()
        } else {
            lambdas.iter().map(one).collect()
        };
        let mut code = EXIT_OK;
        let mut rows = Vec::new();
        for (lambda, r) in &results {
            let (status, s) = match r {
                Ok(s) => (s.code, s.clone()),
                Err(e) => {
                    eprintln!("lambda = {lambda}: {e}");
                    (
                        EXIT_ERROR,
                        SolveSummary {
                            code: EXIT_ERROR,
                            iterations: 0,
                            value_at_x0: f64::NAN,
                            final_residual: f64::NAN,
                        },
                    )
                }
            };
            code = code.max(status);
            rows.push(vec![
                fmt_f64(*lambda),
                fmt_f64(s.value_at_x0),
                s.iterations.to_string(),
                fmt_f64(s.final_residual),
                status.to_string(),
            ]);
        }
        write_csv(
            &cfg.output.join(SWEEP_CSV),
            &["lambda", "v_at_x0", "iters", "final_residual", "exit_code"],
            rows,
        )?;
        let dirs: Vec<String> = lambdas.iter().map(|l| lambda_dir(*l)).collect();
        write_manifest(
            &cfg.output,
            "sweep",
            &cfg,
            started,
            serde_json::json!({ "lambdas": lambdas, "x0": cfg.x0, "subdirectories": dirs }),
        )?;
        Ok(code)
    };
    report(run().map_or_else(Outcome::from, Outcome::Done))
}
