//! Command-line front end.
//!
//! Every command reads one scenario file. Relative paths that do not exist
//! from the working directory are looked up in `$EVSHARE_SCENARIO_DIR`.
//!
//! Exit status: 0 success, 1 invalid input, 2 solver failure or
//! non-convergence, 3 a check exceeded its tolerance.
//!
//! CSV columns, in order:
//!
//! | command          | columns |
//! |------------------|---------|
//! | `dispatch`       | `record,bus,from,to,period,generation,load,injection,lmp,storage,operation` |
//! | `equilibrium`, `compare` | `concept,population,from,to,s_fix,s_flex,threshold_fix,threshold_flex,spread,objective,residual,converged,verified` |
//! | `gradient-check` | `point,from,to,storage,analytic,finite_difference,abs_error` |
//! | `oracle-check`   | `method,from,to,continuum,oracle,abs_diff` |
//! | `validate`       | `severity,kind,message` |
//!
//! `dispatch` rows with `record = bus` fill `bus` and the bus columns; rows
//! with `record = route` fill `from`, `to`, `storage` and `operation`. Buses
//! and routes are one-based.

use crate::dispatch::{solve_dispatch, storage_value_gradient, DispatchSolution, RouteStorage};
use crate::drivers::PopulationKind;
use crate::equilibrium::{solve, verify_equilibrium, Concept, EquilibriumResult, SolverOptions};
use crate::network::{PERIODS, Severity};
use crate::oracle::{best_response_dynamics, discretize_population, finite_difference_gradient, is_smooth_point};
use crate::scenario::{Scenario, ScenarioError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{rngs::StdRng, Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const SCENARIO_DIR_VAR: &str = "EVSHARE_SCENARIO_DIR";

#[derive(Debug, Clone, Parser)]
#[command(name = "evshare", version, about = "EV mobile-storage market equilibria")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Write output here instead of stdout.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Solve the dispatch at a given storage profile.
    Dispatch {
        scenario: PathBuf,
        /// Route storage as FROM-TO=VALUE, repeatable; unlisted routes are 0.
        #[arg(long = "storage", value_parser = parse_storage_entry)]
        storage: Vec<(usize, usize, f64)>,
    },
    /// Solve one concept.
    Equilibrium {
        scenario: PathBuf,
        #[arg(long, value_parser = parse_concept)]
        concept: Concept,
        #[command(flatten)]
        common: SolveArgs,
    },
    /// Solve all three concepts side by side.
    Compare {
        scenario: PathBuf,
        #[command(flatten)]
        common: SolveArgs,
    },
    /// Compare the storage value with finite differences of the dispatch cost.
    GradientCheck {
        scenario: PathBuf,
        #[arg(long, default_value_t = 5)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4, value_parser = positive)]
        step: f64,
        #[arg(long, default_value_t = 1e-3, value_parser = positive)]
        tolerance: f64,
    },
    /// Compare the continuum equilibrium with best-response dynamics on atoms.
    OracleCheck {
        scenario: PathBuf,
        /// Atoms per driver class.
        #[arg(long, default_value_t = 100)]
        atoms: usize,
        /// Allowed per-route gap, in units of total driver mass / atoms.
        #[arg(long, default_value_t = 3.0, value_parser = positive)]
        bound: f64,
        #[arg(long, default_value_t = 10_000)]
        max_rounds: usize,
        #[command(flatten)]
        common: SolveArgs,
    },
    /// Parse and validate a scenario.
    Validate { scenario: PathBuf },
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    /// Driver classes to include; defaults to those present in the scenario.
    #[arg(long, value_parser = parse_population)]
    pub population: Option<PopulationKind>,
    #[arg(long, default_value_t = SolverOptions::default().tol, value_parser = positive)]
    pub tol: f64,
    #[arg(long, default_value_t = SolverOptions::default().accept_tol, value_parser = positive)]
    pub accept_tol: f64,
    #[arg(long, default_value_t = SolverOptions::default().max_iter)]
    pub max_iter: usize,
    #[arg(long, default_value_t = SolverOptions::default().damping, value_parser = positive)]
    pub damping: f64,
    /// Deviation-gain tolerance of the equilibrium check.
    #[arg(long, default_value_t = 1e-5, value_parser = positive)]
    pub epsilon: f64,
}

impl SolveArgs {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            accept_tol: self.accept_tol,
            max_iter: self.max_iter,
            damping: self.damping,
        }
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(_) => Err("must be positive".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_concept(s: &str) -> Result<Concept, String> {
    s.parse()
}

fn parse_population(s: &str) -> Result<PopulationKind, String> {
    match s {
        "commuter" => Ok(PopulationKind::Commuter),
        "ondemand" | "on-demand" => Ok(PopulationKind::OnDemand),
        "hybrid" => Ok(PopulationKind::Hybrid),
        other => Err(format!("unknown population `{other}` (commuter, ondemand, hybrid)")),
    }
}

fn parse_storage_entry(s: &str) -> Result<(usize, usize, f64), String> {
    let err = || format!("expected FROM-TO=VALUE, got `{s}`");
    let (route, value) = s.split_once('=').ok_or_else(err)?;
    let (from, to) = route.split_once('-').ok_or_else(err)?;
    let from: usize = from.trim().parse().map_err(|_| err())?;
    let to: usize = to.trim().parse().map_err(|_| err())?;
    let value: f64 = value.trim().parse().map_err(|_| err())?;
    if from == 0 || to == 0 {
        return Err("buses are numbered from 1".into());
    }
    if !(value >= 0.0 && value.is_finite()) {
        return Err("storage must be nonnegative".into());
    }
    Ok((from, to, value))
}

/// Result of a run: exit status, rendered output and diagnostics for stderr.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub status: i32,
    pub output: String,
    pub diagnostics: Vec<String>,
}

impl Outcome {
    fn fail(status: i32, message: String) -> Self {
        Outcome {
            status,
            output: String::new(),
            diagnostics: vec![message],
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// Resolves a scenario path, falling back to the scenario directory variable.
pub fn resolve_scenario_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(SCENARIO_DIR_VAR) {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

fn load(path: &Path) -> Result<Scenario, Outcome> {
    Scenario::load(&resolve_scenario_path(path)).map_err(|e| {
        let message = match &e {
            ScenarioError::Io { .. } => e.to_string(),
            _ => format!("{}: {e}", path.display()),
        };
        Outcome::fail(EXIT_INVALID, message)
    })
}

fn warnings(s: &Scenario) -> Vec<String> {
    s.report.issues.iter().map(|i| i.to_string()).collect()
}

/// Runs a command without touching stdout or the file system beyond reading
/// the scenario.
pub fn execute(config: &RunConfig) -> Outcome {
    let format = config.format;
    let result = match &config.command {
        Command::Dispatch { scenario, storage } => run_dispatch(scenario, storage, format),
        Command::Equilibrium {
            scenario,
            concept,
            common,
        } => run_equilibrium(scenario, *concept, common, format),
        Command::Compare { scenario, common } => run_compare(scenario, common, format),
        Command::GradientCheck {
            scenario,
            points,
            seed,
            step,
            tolerance,
        } => run_gradient(scenario, *points, *seed, *step, *tolerance, format),
        Command::OracleCheck {
            scenario,
            atoms,
            bound,
            max_rounds,
            common,
        } => run_oracle(scenario, *atoms, *bound, *max_rounds, common, format),
        Command::Validate { scenario } => run_validate(scenario, format),
    };
    result.unwrap_or_else(|o| o)
}

/// Runs a command, writes its output and returns the exit status.
pub fn run(config: &RunConfig) -> i32 {
    let outcome = execute(config);
    for d in &outcome.diagnostics {
        eprintln!("{d}");
    }
    if !outcome.output.is_empty() {
        match &config.output {
            Some(path) => {
                if let Err(e) = std::fs::write(path, &outcome.output) {
                    eprintln!("cannot write {}: {e}", path.display());
                    return EXIT_INVALID;
                }
            }
            None => print!("{}", outcome.output),
        }
    }
    outcome.status
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn route_label(r: usize, n: usize) -> (usize, usize) {
    (r / n + 1, r % n + 1)
}

fn run_dispatch(
    path: &Path,
    entries: &[(usize, usize, f64)],
    format: Format,
) -> Result<Outcome, Outcome> {
    let sc = load(path)?;
    let n = sc.net.buses();
    let mut storage = RouteStorage::zeros(n);
    for &(i, j, v) in entries {
        if i > n || j > n {
            return Err(Outcome::fail(
                EXIT_INVALID,
                format!("route {i}-{j} outside a {n}-bus network"),
            ));
        }
        storage.set(i - 1, j - 1, v);
    }
    let sol = solve_dispatch(&sc.net, &storage)
        .map_err(|e| Outcome::fail(EXIT_SOLVER, format!("dispatch failed: {e}")))?;
    let output = match format {
        Format::Json => json(&sol),
        Format::Csv => dispatch_csv(&sol),
        Format::Table => dispatch_table(&sc.name, &sol),
    };
    Ok(Outcome {
        status: EXIT_OK,
        output,
        diagnostics: warnings(&sc),
    })
}

fn dispatch_csv(sol: &DispatchSolution) -> String {
    let n = sol.n;
    let mut out =
        String::from("record,bus,from,to,period,generation,load,injection,lmp,storage,operation\n");
    for i in 0..n {
        for t in 0..PERIODS {
            let _ = writeln!(
                out,
                "bus,{},,,{},{},{},{},{},,",
                i + 1,
                t + 1,
                sol.g[i][t],
                sol.d[i][t],
                sol.p[i][t],
                sol.lambda(t)[i]
            );
        }
    }
    for r in 0..n * n {
        let (i, j) = route_label(r, n);
        for t in 0..PERIODS {
            let _ = writeln!(
                out,
                "route,,{i},{j},{},,,,,{},{}",
                t + 1,
                sol.storage.as_slice()[r],
                sol.u[r][t]
            );
        }
    }
    out
}

fn dispatch_table(name: &str, sol: &DispatchSolution) -> String {
    let n = sol.n;
    let mut out = format!("dispatch: {name}   objective {:.6}\n\n", sol.objective);
    let _ = writeln!(
        out,
        "{:>4} {:>6} {:>12} {:>12} {:>12} {:>12}",
        "bus", "period", "gen", "load", "injection", "lmp"
    );
    for i in 0..n {
        for t in 0..PERIODS {
            let _ = writeln!(
                out,
                "{:>4} {:>6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                i + 1,
                t + 1,
                sol.g[i][t],
                sol.d[i][t],
                sol.p[i][t],
                sol.lambda(t)[i]
            );
        }
    }
    let active: Vec<usize> = (0..n * n).filter(|&r| sol.storage.as_slice()[r] > 0.0).collect();
    if !active.is_empty() {
        let _ = writeln!(
            out,
            "\n{:>7} {:>12} {:>12} {:>12} {:>12}",
            "route", "storage", "u1", "u2", "spread"
        );
        for r in active {
            let (i, j) = route_label(r, n);
            let _ = writeln!(
                out,
                "{:>7} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                format!("{i}->{j}"),
                sol.storage.as_slice()[r],
                sol.u[r][0],
                sol.u[r][1],
                sol.spread(i - 1, j - 1)
            );
        }
    }
    out
}

fn solve_concepts(
    sc: &Scenario,
    concepts: &[Concept],
    common: &SolveArgs,
) -> Result<Vec<EquilibriumResult>, Outcome> {
    let kind = common.population.unwrap_or_else(|| sc.pop.kind());
    let opts = common.options();
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = concepts
            .iter()
            .map(|&c| scope.spawn(move || solve(&sc.net, &sc.pop, c, kind, &opts)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("solver thread panicked"))
            .collect()
    });
    let restricted = sc.pop.restricted(kind);
    results
        .into_iter()
        .zip(concepts)
        .map(|(r, c)| {
            let mut r = r.map_err(|e| Outcome::fail(EXIT_SOLVER, format!("{c} solve failed: {e}")))?;
            let stale = r.deviation.as_ref().is_none_or(|d| d.epsilon != common.epsilon);
            if stale {
                r.deviation = Some(verify_equilibrium(&sc.net, &restricted, &r, common.epsilon));
            }
            Ok(r)
        })
        .collect()
}

const EQ_HEADER: &str = "concept,population,from,to,s_fix,s_flex,threshold_fix,threshold_flex,spread,objective,residual,converged,verified\n";

fn equilibrium_csv_rows(out: &mut String, r: &EquilibriumResult) {
    let n = r.n;
    let flex = r.threshold_flex.map(|t| t.to_string()).unwrap_or_default();
    let verified = r.deviation.as_ref().is_some_and(|d| d.passed);
    for k in 0..n * n {
        let (i, j) = route_label(k, n);
        let _ = writeln!(
            out,
            "{},{},{i},{j},{},{},{},{flex},{},{},{},{},{verified}",
            r.concept.short(),
            r.population.name(),
            r.s_fix[k],
            r.s_flex[k],
            r.thresholds_fix[k],
            r.spread(i - 1, j - 1),
            r.objective,
            r.residual,
            r.converged
        );
    }
}

fn equilibrium_table(out: &mut String, r: &EquilibriumResult) {
    let n = r.n;
    let verified = match &r.deviation {
        Some(d) if d.passed => "passed".to_string(),
        Some(d) => format!("failed (gain {:.3e}: {})", d.max_gain, d.worst),
        None => "not run".into(),
    };
    let _ = writeln!(
        out,
        "{} / {}: total storage {:.6}, objective {:.6}, residual {:.2e}, {}",
        r.concept.short(),
        r.population.name(),
        r.total_storage(),
        r.objective,
        r.residual,
        if r.converged { "converged" } else { "NOT converged" }
    );
    if let Some(t) = r.threshold_flex {
        let _ = writeln!(out, "  on-demand threshold {t:.6}");
    }
    let _ = writeln!(out, "  equilibrium check {verified}");
    let _ = writeln!(
        out,
        "  {:>7} {:>12} {:>12} {:>12} {:>12}",
        "route", "s_fix", "s_flex", "threshold", "spread"
    );
    for k in 0..n * n {
        if r.s_fix[k] + r.s_flex[k] <= 0.0 {
            continue;
        }
        let (i, j) = route_label(k, n);
        let _ = writeln!(
            out,
            "  {:>7} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            format!("{i}->{j}"),
            r.s_fix[k],
            r.s_flex[k],
            r.thresholds_fix[k],
            r.spread(i - 1, j - 1)
        );
    }
}

fn not_converged(results: &[EquilibriumResult]) -> Vec<String> {
    results
        .iter()
        .filter(|r| !r.converged)
        .map(|r| format!("{} did not converge (residual {:.3e})", r.concept, r.residual))
        .collect()
}

fn run_equilibrium(
    path: &Path,
    concept: Concept,
    common: &SolveArgs,
    format: Format,
) -> Result<Outcome, Outcome> {
    let sc = load(path)?;
    let results = solve_concepts(&sc, &[concept], common)?;
    let r = &results[0];
    let output = match format {
        Format::Json => json(r),
        Format::Csv => {
            let mut out = EQ_HEADER.to_string();
            equilibrium_csv_rows(&mut out, r);
            out
        }
        Format::Table => {
            let mut out = format!("scenario: {}\n", sc.name);
            equilibrium_table(&mut out, r);
            out
        }
    };
    let mut diagnostics = warnings(&sc);
    let failed = not_converged(&results);
    let status = if failed.is_empty() { EXIT_OK } else { EXIT_SOLVER };
    diagnostics.extend(failed);
    Ok(Outcome {
        status,
        output,
        diagnostics,
    })
}

/// Side-by-side results of the three concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub results: Vec<EquilibriumResult>,
    /// Total myopic storage is at least the equilibrium storage.
    pub myopic_at_least_ne: bool,
    /// Largest per-route storage difference between the optimum and the equilibrium.
    pub sw_ne_gap: f64,
}

fn run_compare(path: &Path, common: &SolveArgs, format: Format) -> Result<Outcome, Outcome> {
    let sc = load(path)?;
    let results = solve_concepts(&sc, &Concept::ALL, common)?;
    let [myop, sw, ne] = [&results[0], &results[1], &results[2]];
    let gap = sw
        .storage()
        .as_slice()
        .iter()
        .zip(ne.storage().as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let cmp = Comparison {
        scenario: sc.name.clone(),
        myopic_at_least_ne: myop.total_storage() >= ne.total_storage() - 1e-9,
        sw_ne_gap: gap,
        results: results.clone(),
    };
    let output = match format {
        Format::Json => json(&cmp),
        Format::Csv => {
            let mut out = EQ_HEADER.to_string();
            for r in &results {
                equilibrium_csv_rows(&mut out, r);
            }
            out
        }
        Format::Table => compare_table(&sc, &cmp),
    };
    let mut diagnostics = warnings(&sc);
    let failed = not_converged(&results);
    let status = if failed.is_empty() { EXIT_OK } else { EXIT_SOLVER };
    diagnostics.extend(failed);
    Ok(Outcome {
        status,
        output,
        diagnostics,
    })
}

fn compare_table(sc: &Scenario, cmp: &Comparison) -> String {
    let n = sc.net.buses();
    let rs = &cmp.results;
    let mut out = format!("scenario: {}   population: {}\n\n", sc.name, rs[0].population.name());
    let _ = write!(out, "{:<18}", "");
    for r in rs {
        let _ = write!(out, " {:>14}", r.concept.short());
    }
    out.push('\n');
    let mut row = |label: String, f: &dyn Fn(&EquilibriumResult) -> String| {
        let _ = write!(out, "{label:<18}");
        for r in rs {
            let _ = write!(out, " {:>14}", f(r));
        }
        out.push('\n');
    };
    for k in 0..n * n {
        if rs.iter().all(|r| r.s_fix[k] + r.s_flex[k] <= 0.0) {
            continue;
        }
        let (i, j) = route_label(k, n);
        row(format!("S {i}->{j}"), &|r| format!("{:.6}", r.s_fix[k] + r.s_flex[k]));
    }
    row("total storage".into(), &|r| format!("{:.6}", r.total_storage()));
    if rs.iter().any(|r| r.threshold_flex.is_some()) {
        row("on-demand thr.".into(), &|r| {
            r.threshold_flex.map(|t| format!("{t:.6}")).unwrap_or_else(|| "-".into())
        });
    }
    row("objective J".into(), &|r| format!("{:.6}", r.objective));
    row("residual".into(), &|r| format!("{:.2e}", r.residual));
    row("no deviation".into(), &|r| {
        r.deviation.as_ref().map_or("-", |d| if d.passed { "yes" } else { "no" }).into()
    });
    let (m, ne) = (rs[0].total_storage(), rs[2].total_storage());
    let _ = writeln!(
        out,
        "\nmyopic {m:.6} {} ne {ne:.6}; sw vs ne max route gap {:.2e}",
        if cmp.myopic_at_least_ne { ">=" } else { "<" },
        cmp.sw_ne_gap
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRow {
    pub point: usize,
    pub route: (usize, usize),
    pub storage: f64,
    pub analytic: f64,
    pub finite_difference: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub scenario: String,
    pub step: f64,
    pub tolerance: f64,
    /// Random points rejected for lying near a kink of the dispatch cost.
    pub rejected: usize,
    pub rows: Vec<GradientRow>,
    pub max_error: f64,
    pub passed: bool,
}

/// Random storage profiles at which the dispatch cost is smooth.
///
/// Each route draws uniformly from `[0, scale]`, where `scale` is the total
/// driver mass (at least 1). Up to 50 draws are made per requested point.
pub fn smooth_sample_points(
    sc: &Scenario,
    count: usize,
    seed: u64,
    step: f64,
) -> Result<(Vec<RouteStorage>, usize), crate::dispatch::DispatchError> {
    let n = sc.net.buses();
    let mass: f64 = sc.pop.commuter.routes.iter().map(|d| d.finite_mass()).sum::<f64>()
        + sc.pop.ondemand.dist.finite_mass();
    let scale = mass.max(1.0);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut rejected = 0;
    for _ in 0..count * 50 {
        if points.len() == count {
            break;
        }
        let s: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..scale)).collect();
        let storage = RouteStorage::from_vec(n, s)?;
        if is_smooth_point(&sc.net, &storage, step)? {
            points.push(storage);
        } else {
            rejected += 1;
        }
    }
    Ok((points, rejected))
}

fn run_gradient(
    path: &Path,
    count: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
    format: Format,
) -> Result<Outcome, Outcome> {
    let sc = load(path)?;
    let n = sc.net.buses();
    let solver = |e: crate::dispatch::DispatchError| Outcome::fail(EXIT_SOLVER, format!("dispatch failed: {e}"));
    let (points, rejected) = smooth_sample_points(&sc, count, seed, step).map_err(solver)?;
    let mut rows = Vec::new();
    for (p, storage) in points.iter().enumerate() {
        let analytic = storage_value_gradient(&sc.net, storage).map_err(solver)?;
        let numeric = finite_difference_gradient(&sc.net, storage, step).map_err(solver)?;
        for r in 0..n * n {
            let fd = -numeric[r];
            rows.push(GradientRow {
                point: p + 1,
                route: route_label(r, n),
                storage: storage.as_slice()[r],
                analytic: analytic[r],
                finite_difference: fd,
                abs_error: (analytic[r] - fd).abs(),
            });
        }
    }
    let max_error = rows.iter().map(|r| r.abs_error).fold(0.0, f64::max);
    let enough = points.len() == count;
    let check = GradientCheck {
        scenario: sc.name.clone(),
        step,
        tolerance,
        rejected,
        max_error,
        passed: enough && max_error <= tolerance,
        rows,
    };
    let output = match format {
        Format::Json => json(&check),
        Format::Csv => {
            let mut out = String::from("point,from,to,storage,analytic,finite_difference,abs_error\n");
            for r in &check.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.point, r.route.0, r.route.1, r.storage, r.analytic, r.finite_difference, r.abs_error
                );
            }
            out
        }
        Format::Table => {
            let mut out = format!(
                "gradient check: {}   step {step:e}   tolerance {tolerance:e}\n\n",
                sc.name
            );
            let _ = writeln!(
                out,
                "{:>5} {:>7} {:>10} {:>14} {:>14} {:>10}",
                "point", "route", "storage", "analytic", "-dJ/dS (fd)", "error"
            );
            for r in &check.rows {
                let _ = writeln!(
                    out,
                    "{:>5} {:>7} {:>10.4} {:>14.6} {:>14.6} {:>10.2e}",
                    r.point,
                    format!("{}->{}", r.route.0, r.route.1),
                    r.storage,
                    r.analytic,
                    r.finite_difference,
                    r.abs_error
                );
            }
            let _ = writeln!(
                out,
                "\nmax error {:.3e}; {} smooth points, {} rejected near kinks: {}",
                check.max_error,
                points.len(),
                rejected,
                if check.passed { "PASS" } else { "FAIL" }
            );
            out
        }
    };
    let mut diagnostics = warnings(&sc);
    if !enough {
        diagnostics.push(format!("found only {} of {count} smooth points", points.len()));
    }
    Ok(Outcome {
        status: if check.passed { EXIT_OK } else { EXIT_CHECK },
        output,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRoute {
    pub route: (usize, usize),
    pub continuum: f64,
    pub oracle: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub method: String,
    pub scenario: String,
    pub atoms: usize,
    pub bound: f64,
    pub rounds: usize,
    pub converged: bool,
    pub dispatch_solves: usize,
    pub routes: Vec<OracleRoute>,
    pub max_diff: f64,
    pub passed: bool,
    pub continuum: EquilibriumResult,
}

fn run_oracle(
    path: &Path,
    atoms: usize,
    bound: f64,
    max_rounds: usize,
    common: &SolveArgs,
    format: Format,
) -> Result<Outcome, Outcome> {
    let sc = load(path)?;
    let n = sc.net.buses();
    let kind = common.population.unwrap_or_else(|| sc.pop.kind());
    let pop = sc.pop.restricted(kind);
    let atomized = discretize_population(&pop, atoms)
        .map_err(|e| Outcome::fail(EXIT_INVALID, format!("cannot discretize: {e}")))?;
    let (continuum, dynamics) = std::thread::scope(|scope| {
        let c = scope.spawn(|| solve_concepts(&sc, &[Concept::Nash], common));
        let d = best_response_dynamics(&sc.net, &atomized, max_rounds);
        (c.join().expect("solver thread panicked"), d)
    });
    let continuum = continuum?.remove(0);
    let dynamics =
        dynamics.map_err(|e| Outcome::fail(EXIT_SOLVER, format!("oracle failed: {e}")))?;
    let limit = bound * atomized.total_mass().max(1.0) / atoms as f64;
    let cs = continuum.storage();
    let routes: Vec<OracleRoute> = (0..n * n)
        .map(|r| {
            let (c, o) = (cs.as_slice()[r], dynamics.storage.as_slice()[r]);
            OracleRoute {
                route: route_label(r, n),
                continuum: c,
                oracle: o,
                abs_diff: (c - o).abs(),
            }
        })
        .collect();
    let max_diff = routes.iter().map(|r| r.abs_diff).fold(0.0, f64::max);
    let check = OracleCheck {
        method: "oracle".into(),
        scenario: sc.name.clone(),
        atoms,
        bound: limit,
        rounds: dynamics.rounds,
        converged: dynamics.converged,
        dispatch_solves: dynamics.dispatch_solves,
        max_diff,
        passed: max_diff <= limit,
        routes,
        continuum,
    };
    let output = match format {
        Format::Json => json(&check),
        Format::Csv => {
            let mut out = String::from("method,from,to,continuum,oracle,abs_diff\n");
            for r in &check.routes {
                let _ = writeln!(
                    out,
                    "oracle,{},{},{},{},{}",
                    r.route.0, r.route.1, r.continuum, r.oracle, r.abs_diff
                );
            }
            out
        }
        Format::Table => {
            let mut out = format!(
                "oracle check: {}   {atoms} atoms per class   {} rounds{}\n\n",
                sc.name,
                check.rounds,
                if check.converged { "" } else { " (not converged)" }
            );
            let _ = writeln!(
                out,
                "{:>7} {:>12} {:>12} {:>12}",
                "route", "continuum", "oracle", "difference"
            );
            for r in check.routes.iter().filter(|r| r.continuum > 0.0 || r.oracle > 0.0) {
                let _ = writeln!(
                    out,
                    "{:>7} {:>12.6} {:>12.6} {:>12.2e}",
                    format!("{}->{}", r.route.0, r.route.1),
                    r.continuum,
                    r.oracle,
                    r.abs_diff
                );
            }
            let _ = writeln!(
                out,
                "\nmax difference {:.3e} against bound {:.3e}: {}",
                check.max_diff,
                check.bound,
                if check.passed { "PASS" } else { "FAIL" }
            );
            out
        }
    };
    let mut diagnostics = warnings(&sc);
    let status = if !check.converged || !check.continuum.converged {
        diagnostics.push("oracle dynamics or continuum solve did not converge".into());
        EXIT_SOLVER
    } else if check.passed {
        EXIT_OK
    } else {
        EXIT_CHECK
    };
    Ok(Outcome {
        status,
        output,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub scenario: String,
    pub valid: bool,
    pub issues: Vec<String>,
}

fn run_validate(path: &Path, format: Format) -> Result<Outcome, Outcome> {
    let (name, valid, issues) = match Scenario::load(&resolve_scenario_path(path)) {
        Ok(sc) => (sc.name.clone(), true, sc.report.issues),
        Err(ScenarioError::Invalid(report)) => (path.display().to_string(), false, report.issues),
        Err(e) => return Err(load(path).err().unwrap_or_else(|| Outcome::fail(EXIT_INVALID, e.to_string()))),
    };
    let output = match format {
        Format::Json => json(&Validation {
            scenario: name.clone(),
            valid,
            issues: issues.iter().map(|i| i.to_string()).collect(),
        }),
        Format::Csv => {
            let mut out = String::from("severity,kind,message\n");
            for i in &issues {
                let severity = match i.severity {
                    Severity::Error => "error",
                    Severity::Warning => "warning",
                };
                let _ = writeln!(out, "{severity},{:?},\"{}\"", i.kind, i.message.replace('"', "\"\""));
            }
            out
        }
        Format::Table => {
            let mut out = format!("{name}: {}\n", if valid { "valid" } else { "INVALID" });
            for i in &issues {
                let _ = writeln!(out, "  {i}");
            }
            out
        }
    };
    Ok(Outcome {
        status: if valid { EXIT_OK } else { EXIT_INVALID },
        output,
        diagnostics: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn storage_entries() {
        assert_eq!(parse_storage_entry("1-2=0.5"), Ok((1, 2, 0.5)));
        assert!(parse_storage_entry("0-2=0.5").is_err());
        assert!(parse_storage_entry("1-2=-1").is_err());
        assert!(parse_storage_entry("12=1").is_err());
    }

    #[test]
    fn tolerances_must_be_positive() {
        assert!(positive("0").is_err());
        assert!(positive("-1e-3").is_err());
        assert_eq!(positive("1e-6"), Ok(1e-6));
    }

    #[test]
    fn parses_command_lines() {
        let c = RunConfig::try_parse_from([
            "evshare", "equilibrium", "--concept", "ne", "--population", "commuter", "x.scn",
            "--format", "csv",
        ])
        .unwrap();
        assert_eq!(c.format, Format::Csv);
        match c.command {
            Command::Equilibrium { concept, common, .. } => {
                assert_eq!(concept, Concept::Nash);
                assert_eq!(common.population, Some(PopulationKind::Commuter));
                assert_eq!(common.options(), SolverOptions::default());
            }
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::try_parse_from(["evshare", "equilibrium", "x.scn"]).is_err());
        assert!(RunConfig::try_parse_from(["evshare", "compare", "x.scn", "--tol", "0"]).is_err());
    }

    #[test]
    fn missing_file_is_invalid_input() {
        let c = RunConfig::try_parse_from(["evshare", "validate", "/nonexistent/x.scn"]).unwrap();
        assert_eq!(execute(&c).status, EXIT_INVALID);
    }
}
