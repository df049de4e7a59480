//! Library side of the `mbmpc` command-line tool. Each `cmd_*` function runs
//! one subcommand and returns a report; the binary only handles arguments,
//! file output and exit codes.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::config::{ExperimentConfig, PatternSpec, PiSetting};
use crate::controller::{
    lyapunov_audit, make_initial_extended_state, offset_initial_point, plan, simulate_closed_loop,
    AuditReport, TrajectoryLog,
};
use crate::dynamics::OpenLoopTrajectory;
use crate::ocp::{assemble_blocked, assemble_offset, brute_force_solve, BruteForceResult};
use crate::parallel::Execution;
use crate::solver::{solve, SolveOutcome, SolverConfig};
use crate::terminal::{calibrate_pi, validate_terminal_set, Calibration, TerminalCertificate};
use crate::{Error, Result};

/// Level reported next to a calibrated one.
pub const REFERENCE_PI: f64 = 0.4856;

pub struct SimulationReport {
    pub config: ExperimentConfig,
    /// Prediction of the first plan at `n = 0`.
    pub open_loop: OpenLoopTrajectory,
    pub log: TrajectoryLog,
    pub audit: AuditReport,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for SimulationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode = {}", self.log.mode)?;
        writeln!(f, "steps = {}", self.log.records.len())?;
        writeln!(f, "complete = {}", self.log.is_complete())?;
        if let Some(e) = &self.log.failure {
            writeln!(f, "failure = {e}")?;
        }
        writeln!(f, "closed_loop_cost = {}", self.log.closed_loop_cost())?;
        writeln!(f, "fallback_steps = {}", self.log.fallback_count())?;
        let x = self.log.final_state();
        writeln!(f, "final_state = {},{}", x[0], x[1])?;
        write!(f, "{}", self.audit)
    }
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes `k, x1, x2, u` rows of an open-loop prediction.
pub fn write_open_loop<W: Write>(traj: &OpenLoopTrajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "x1", "x2", "u"])?;
    for (k, x) in traj.states.iter().enumerate() {
        let u = traj
            .inputs
            .get(k)
            .map_or(String::new(), |u| u[0].to_string());
        w.write_record([k.to_string(), x[0].to_string(), x[1].to_string(), u])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one closed loop and writes `config.txt`, `open_loop.csv`,
/// `trajectory.csv` and `audit.txt` into `out`.
///
/// The resolved config is written before anything can fail, so every run
/// leaves its provenance behind. Initialization failures are errors.
pub fn cmd_simulate(config: &ExperimentConfig, out: &Path) -> Result<SimulationReport> {
    create_dir(out)?;
    let config_path = out.join("config.txt");
    write_text(&config_path, &config.to_string())?;
    let setup = config.setup()?;
    let controller = config.controller()?;
    let x0 = config.initial_state();

    let z0 = make_initial_extended_state(&setup, &x0, &controller.pattern, &controller.solver)?;
    let first = plan(&setup, &controller, &z0, 0)?;
    let open_loop = setup.model.rollout(&x0, &first.inputs)?;
    let log = simulate_closed_loop(&setup, &controller, &x0, config.steps)?;
    let audit = lyapunov_audit(&log);

    let open_path = out.join("open_loop.csv");
    write_open_loop(&open_loop, fs::File::create(&open_path)?)?;
    let traj_path = out.join("trajectory.csv");
    log.write_csv(fs::File::create(&traj_path)?)?;
    let audit_path = out.join("audit.txt");
    write_text(&audit_path, &audit.to_string())?;
    Ok(SimulationReport {
        config: config.clone(),
        open_loop,
        log,
        audit,
        files: vec![config_path, open_path, traj_path, audit_path],
    })
}

/// Runs independent closed loops, one per config, without writing files.
/// Results are returned in input order for either execution strategy.
pub fn sweep(configs: &[ExperimentConfig], exec: Execution) -> Vec<Result<TrajectoryLog>> {
    exec.map_slice(configs, |config| {
        let setup = config.setup()?;
        let controller = config.controller()?;
        simulate_closed_loop(&setup, &controller, &config.initial_state(), config.steps)
    })
}

pub struct TerminalReport {
    pub certificate: TerminalCertificate,
    pub calibration: Option<Calibration>,
}

impl TerminalReport {
    pub fn pass(&self) -> bool {
        self.certificate.pass
    }
}

impl fmt::Display for TerminalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(cal) = &self.calibration {
            writeln!(f, "calibrated_pi = {}", cal.pi)?;
            writeln!(f, "reference_pi = {REFERENCE_PI}")?;
            writeln!(f, "calibration_upper = {}", cal.upper)?;
            writeln!(f, "calibration_evaluations = {}", cal.evaluations)?;
        }
        write!(f, "{}", self.certificate)?;
        writeln!(f, "verdict = {}", if self.pass() { "pass" } else { "fail" })
    }
}

/// Certifies the configured terminal set; with `terminal.pi = calibrate` the
/// certificate is for the calibrated level.
pub fn cmd_validate_terminal(config: &ExperimentConfig) -> Result<TerminalReport> {
    config.validate()?;
    let setup_model = crate::dynamics::vdp_model(config.ts)?;
    let cost = config.base_cost()?;
    let (state_box, input_box) = (config.state_box()?, config.input_box()?);
    let (ing, calibration) = match config.pi {
        PiSetting::Given(_) => (config.terminal()?, None),
        PiSetting::Calibrate => {
            let probe = crate::terminal::design_terminal(&setup_model, &cost, config.rho, 1.0)?;
            let cal = calibrate_pi(
                &setup_model,
                &cost,
                &probe.p,
                &probe.k,
                config.rho,
                &state_box,
                &input_box,
                config.samples,
                1e-6,
                Execution::default(),
            )?;
            (probe.with_level(cal.pi)?, Some(cal))
        }
    };
    let certificate = validate_terminal_set(
        &setup_model,
        &cost,
        &ing,
        &state_box,
        &input_box,
        config.samples,
        Execution::default(),
    )?;
    Ok(TerminalReport {
        certificate,
        calibration,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub blocks: usize,
    pub offset: bool,
    pub samples: Vec<Duration>,
    pub median: f64,
    pub q95: f64,
    /// `median / median(M = N, no offset)`.
    pub median_ratio: f64,
    pub q95_ratio: f64,
    /// Status and iteration count of the (deterministic) solve.
    pub status: String,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    pub repetitions: usize,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn row(&self, blocks: usize, offset: bool) -> Option<&BenchmarkRow> {
        self.rows
            .iter()
            .find(|r| r.blocks == blocks && r.offset == offset)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "blocks",
            "offset",
            "repetitions",
            "median_s",
            "q95_s",
            "median_ratio",
            "q95_ratio",
            "status",
            "iterations",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.blocks.to_string(),
                r.offset.to_string(),
                self.repetitions.to_string(),
                r.median.to_string(),
                r.q95.to_string(),
                r.median_ratio.to_string(),
                r.q95_ratio.to_string(),
                r.status.clone(),
                r.iterations.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for BenchmarkTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6} {:>6} {:>12} {:>12} {:>8} {:>8} {:>6}  status",
            "M", "offset", "median[s]", "q95[s]", "t/t_m", "q/q_m", "iters"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>6} {:>6} {:>12.6} {:>12.6} {:>8.3} {:>8.3} {:>6}  {}",
                r.blocks,
                r.offset,
                r.median,
                r.q95,
                r.median_ratio,
                r.q95_ratio,
                r.iterations,
                r.status
            )?;
        }
        Ok(())
    }
}

/// Median of sorted samples (mean of the middle pair for even counts).
pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Nearest-rank quantile of sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// `M ∈ {2, 16, N}`, each with and without offset.
pub fn benchmark_cases(horizon: usize) -> Vec<(usize, bool)> {
    [2, 16, horizon]
        .into_iter()
        .flat_map(|m| [(m, false), (m, true)])
        .collect()
}

/// Times `repetitions` open-loop solves at `n = 0` from the configured state
/// for every `(M, offset)` case.
///
/// Without offset the solve is cold-started at zero inputs with no reference;
/// with offset it starts at the warm-start. Only the solve call is timed.
pub fn cmd_benchmark(
    config: &ExperimentConfig,
    cases: &[(usize, bool)],
    repetitions: usize,
) -> Result<BenchmarkTable> {
    if repetitions == 0 {
        return Err(Error::Parameter(
            "benchmark needs at least one repetition".into(),
        ));
    }
    let setup = config.setup()?;
    let x0 = config.initial_state();
    let solver = SolverConfig::default();
    let mut rows = Vec::new();
    for &(m, offset) in cases {
        let pattern = PatternSpec::Uniform(m).build(config.horizon)?;
        let (problem, start, reference) = if offset {
            let z = make_initial_extended_state(&setup, &x0, &pattern, &solver)?;
            let reference = setup.total_cost(&x0, &z.warmstart)?;
            let problem = assemble_offset(
                &setup.model,
                &setup.cost,
                &setup.constraints,
                &x0,
                config.horizon,
                &pattern,
                &z.warmstart,
                config.eta,
            )?;
            let start = offset_initial_point(&problem)?;
            (problem, start, reference)
        } else {
            let problem = assemble_blocked(
                &setup.model,
                &setup.cost,
                &setup.constraints,
                &x0,
                config.horizon,
                &pattern,
            )?;
            let zeros = vec![nalgebra::DVector::zeros(1); m];
            let start = problem.point_from_inputs(&zeros, 0.0)?;
            (problem, start, f64::INFINITY)
        };
        let mut samples = Vec::with_capacity(repetitions);
        let mut last: Option<SolveOutcome> = None;
        for _ in 0..repetitions {
            let t = Instant::now();
            let outcome = solve(&problem, &start, reference, &solver)?;
            samples.push(t.elapsed());
            last = Some(outcome);
        }
        let mut secs: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
        secs.sort_by(f64::total_cmp);
        rows.push(BenchmarkRow {
            blocks: m,
            offset,
            samples,
            median: median(&secs),
            q95: quantile(&secs, 0.95),
            median_ratio: f64::NAN,
            q95_ratio: f64::NAN,
            status: last.as_ref().map(|o| o.status.to_string()).unwrap_or_default(),
            iterations: last.as_ref().map_or(0, |o| o.iterations),
        });
    }
    let base = rows
        .iter()
        .find(|r| r.blocks == config.horizon && !r.offset)
        .or_else(|| rows.iter().filter(|r| !r.offset).max_by_key(|r| r.blocks))
        .map(|r| (r.median, r.q95));
    if let Some((m0, q0)) = base {
        for r in &mut rows {
            r.median_ratio = r.median / m0;
            r.q95_ratio = r.q95 / q0;
        }
    }
    Ok(BenchmarkTable { repetitions, rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub grid: BruteForceResult,
    /// Cost of the solver's admissible result, if it found one.
    pub solver_cost: Option<f64>,
    pub solver: SolveOutcome,
    pub gap: Option<f64>,
    pub pass: bool,
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or("infeasible".to_string(), |c| c.to_string());
        writeln!(f, "grid_points_evaluated = {}", self.grid.evaluated)?;
        writeln!(f, "grid_points_admissible = {}", self.grid.admissible)?;
        writeln!(
            f,
            "grid_best = {}",
            show(self.grid.best.as_ref().map(|b| b.1))
        )?;
        writeln!(f, "grid_cell_bound = {}", self.grid.cell_bound)?;
        writeln!(f, "solver_cost = {}", show(self.solver_cost))?;
        writeln!(f, "solver_status = {}", self.solver.status)?;
        if let Some(gap) = self.gap {
            writeln!(f, "gap = {gap}")?;
        }
        writeln!(f, "verdict = {}", if self.pass { "pass" } else { "fail" })
    }
}

/// Compares the SQP solution of the blocked problem with an exhaustive grid.
///
/// Passes when the solver cost is at most the grid best plus the grid-cell
/// bound, or when both find the problem infeasible.
pub fn cmd_oracle_compare(config: &ExperimentConfig, grid_points: usize) -> Result<OracleReport> {
    let setup = config.setup()?;
    let x0 = config.initial_state();
    let pattern = config.pattern.build(config.horizon)?;
    let grid = brute_force_solve(
        &setup.model,
        &setup.cost,
        &setup.constraints,
        &x0,
        config.horizon,
        &pattern,
        grid_points,
        Execution::default(),
    )?;
    let problem = assemble_blocked(
        &setup.model,
        &setup.cost,
        &setup.constraints,
        &x0,
        config.horizon,
        &pattern,
    )?;
    let zeros = vec![nalgebra::DVector::zeros(1); pattern.num_blocks()];
    let start = problem.point_from_inputs(&zeros, 0.0)?;
    let solver = solve(&problem, &start, f64::INFINITY, &SolverConfig::default())?;
    let solver_cost = if solver.status.is_success() {
        let inputs = problem.expanded_inputs(&solver.point);
        let report =
            crate::ocp::evaluate_admissibility(&setup.model, &setup.constraints, &x0, &inputs)?;
        report
            .feasible
            .then(|| setup.total_cost(&x0, &inputs))
            .transpose()?
    } else {
        None
    };
    let (gap, pass) = match (solver_cost, grid.best.as_ref()) {
        (Some(c), Some((_, best))) => (Some(c - best), c <= best + grid.cell_bound),
        (Some(_), None) => (None, true),
        (None, Some(_)) => (None, false),
        (None, None) => (None, true),
    };
    Ok(OracleReport {
        grid,
        solver_cost,
        solver,
        gap,
        pass,
    })
}
