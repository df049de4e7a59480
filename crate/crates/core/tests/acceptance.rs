//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N ... PASS|FAIL` line before asserting.
//!
//! Tests take a shared lock so that runtime bounds and timing comparisons are
//! not distorted by other tests running concurrently.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use mbmpc::cli::{cmd_benchmark, cmd_oracle_compare};
use mbmpc::config::{ExperimentConfig, PatternSpec};
use mbmpc::controller::{lyapunov_audit, offset_initial_point, simulate_closed_loop, ControllerMode, TrajectoryLog};
use mbmpc::dynamics::vdp_model;
use mbmpc::ocp::{assemble_offset, evaluate_admissibility};
use mbmpc::parallel::Execution;
use mbmpc::solver::Nlp;
use mbmpc::terminal::{design_terminal, riccati_residual, solve_dare, validate_terminal_set};
use nalgebra::{DMatrix, DVector};

static SERIAL: Mutex<()> = Mutex::new(());

const PAPER_PI: f64 = 0.4856;
const PAPER_RHO: f64 = 1.001;
const CERTIFICATE_SAMPLES: usize = 10_000;
const CLF_SLACK: f64 = 1e-9;
const CERTIFICATE_BUDGET: Duration = Duration::from_secs(5);
const DARE_SCALAR_TOL: f64 = 1e-10;
const DARE_RESIDUAL_TOL: f64 = 1e-8;
const DARE_BUDGET: Duration = Duration::from_secs(1);
const CLOSED_LOOP_X0: [f64; 2] = [-0.6, 0.8];
const CLOSED_LOOP_STEPS: usize = 200;
const ADMISSIBILITY_TOL: f64 = 1e-8;
const RUN_BUDGET: Duration = Duration::from_secs(120);
const DECREASE_SLACK: f64 = 1e-6;
const CONVERGENCE_RADIUS: f64 = 1e-2;
const OFFSET_EQUALITY_TOL: f64 = 1e-12;
const ORACLE_X0: [f64; 2] = [-0.13, 0.17];
const ORACLE_GRID: usize = 21;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
const TIMING_REPETITIONS: usize = 100;
const DOF_COST_TOLERANCE: f64 = 0.10;

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n:>2} [{name}] {}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn closed_loop_config(preset: &str, blocks: usize) -> ExperimentConfig {
    let mut config = ExperimentConfig::preset(preset).unwrap();
    config.pattern = PatternSpec::Uniform(blocks);
    config.x0 = CLOSED_LOOP_X0.to_vec();
    config.steps = CLOSED_LOOP_STEPS;
    config
}

/// Buffered-fallback (preset t2 settings) and offset (preset t4 settings) runs
/// for `M ∈ {2, 16}` from the prescribed initial state.
fn closed_loop_runs() -> Vec<(String, Result<(TrajectoryLog, Duration), String>)> {
    let mut runs = Vec::new();
    for (preset, mode) in [("t2", "buffered-fallback"), ("t4", "offset")] {
        for blocks in [2, 16] {
            let config = closed_loop_config(preset, blocks);
            let label = format!("{mode} M={blocks}");
            let t = Instant::now();
            let result = config
                .setup()
                .and_then(|setup| {
                    let controller = config.controller()?;
                    simulate_closed_loop(&setup, &controller, &config.initial_state(), config.steps)
                })
                .map(|log| (log, t.elapsed()))
                .map_err(|e| e.to_string());
            runs.push((label, result));
        }
    }
    runs
}

fn preset_log(preset: &str) -> TrajectoryLog {
    let config = ExperimentConfig::preset(preset).unwrap();
    let setup = config.setup().unwrap();
    let controller = config.controller().unwrap();
    simulate_closed_loop(&setup, &controller, &config.initial_state(), config.steps).unwrap()
}

#[test]
fn criterion_01_terminal_set_certificate() {
    let _guard = lock();
    let model = vdp_model(2f64.powi(-5)).unwrap();
    let cost = ExperimentConfig::default().base_cost().unwrap();
    let config = ExperimentConfig::default();
    let t = Instant::now();
    let ing = design_terminal(&model, &cost, PAPER_RHO, PAPER_PI).unwrap();
    let cert = validate_terminal_set(
        &model,
        &cost,
        &ing,
        &config.state_box().unwrap(),
        &config.input_box().unwrap(),
        CERTIFICATE_SAMPLES,
        Execution::default(),
    )
    .unwrap();
    let elapsed = t.elapsed();
    let pass = cert.samples >= CERTIFICATE_SAMPLES
        && cert.invariance.pass
        && cert.input_admissible.pass
        && cert.state_admissible.pass
        && cert.decrease.worst_margin <= CLF_SLACK
        && elapsed < CERTIFICATE_BUDGET;
    verdict(
        1,
        "terminal-set certificate",
        pass,
        &format!(
            "pi={PAPER_PI} samples={} invariance={} decrease_margin={:e} (slack {CLF_SLACK:e}) input={} state={} runtime={elapsed:?}",
            cert.samples, cert.invariance.pass, cert.decrease.worst_margin, cert.input_admissible.pass, cert.state_admissible.pass
        ),
    );
}

#[test]
fn criterion_02_dare_correctness() {
    let _guard = lock();
    let t = Instant::now();
    let one = DMatrix::from_element(1, 1, 1.0);
    let p = solve_dare(&one, &one, &one, &one, 1.0).unwrap()[(0, 0)];
    let golden = (1.0 + 5f64.sqrt()) / 2.0;

    let model = vdp_model(2f64.powi(-5)).unwrap();
    let cost = ExperimentConfig::default().base_cost().unwrap();
    let (x, u) = model.steady_state();
    let (a, b) = model.linearize(x, u).unwrap();
    let p_vdp = solve_dare(&a, &b, cost.q(), cost.r(), PAPER_RHO).unwrap();
    let residual = riccati_residual(&a, &b, cost.q(), cost.r(), PAPER_RHO, &p_vdp).unwrap();
    let elapsed = t.elapsed();
    let pass = (p - golden).abs() <= DARE_SCALAR_TOL && residual <= DARE_RESIDUAL_TOL && elapsed < DARE_BUDGET;
    verdict(
        2,
        "DARE correctness",
        pass,
        &format!(
            "|p - golden ratio|={:e} (tol {DARE_SCALAR_TOL:e}) vdp residual={residual:e} (tol {DARE_RESIDUAL_TOL:e}) runtime={elapsed:?}",
            (p - golden).abs()
        ),
    );
}

#[test]
fn criterion_03_recursive_feasibility() {
    let _guard = lock();
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for (label, run) in closed_loop_runs() {
        let (log, elapsed) = match run {
            Ok(r) => r,
            Err(e) => {
                failures.push(format!("{label}: {e}"));
                continue;
            }
        };
        let config = ExperimentConfig::default();
        let setup = config.setup().unwrap();
        let worst = log
            .states
            .iter()
            .zip(&log.warmstarts)
            .map(|(x, w)| {
                let r = evaluate_admissibility(&setup.model, &setup.constraints, x, w).unwrap();
                r.state_violation.max(r.input_violation).max(r.terminal_margin)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        if !log.is_complete() || log.records.len() != CLOSED_LOOP_STEPS {
            failures.push(format!("{label}: step failure {:?}", log.failure));
        }
        if worst > ADMISSIBILITY_TOL {
            failures.push(format!("{label}: warm-start violation {worst:e}"));
        }
        if elapsed >= RUN_BUDGET {
            failures.push(format!("{label}: runtime {elapsed:?}"));
        }
        summary.push(format!("{label}: worst={worst:e} runtime={elapsed:?}"));
    }
    let detail = format!(
        "x0={CLOSED_LOOP_X0:?} {} {}",
        summary.join("; "),
        failures.join("; ")
    );
    verdict(3, "recursive feasibility", failures.is_empty(), &detail);
}

#[test]
fn criterion_04_lyapunov_decrease() {
    let _guard = lock();
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for (label, run) in closed_loop_runs() {
        let log = match run {
            Ok((log, _)) => log,
            Err(e) => {
                failures.push(format!("{label}: {e}"));
                continue;
            }
        };
        let v: Vec<f64> = log
            .records
            .iter()
            .map(|r| r.v)
            .chain(std::iter::once(log.final_v))
            .collect();
        let worst = log
            .records
            .iter()
            .enumerate()
            .map(|(n, r)| v[n + 1] - v[n] + r.stage_cost)
            .fold(f64::NEG_INFINITY, f64::max);
        let final_norm = log.final_state().norm();
        if !(worst <= DECREASE_SLACK) {
            failures.push(format!("{label}: decrease excess {worst:e}"));
        }
        if !(final_norm <= CONVERGENCE_RADIUS) || log.records.len() != CLOSED_LOOP_STEPS {
            failures.push(format!("{label}: |x(200)|={final_norm:e} after {} steps", log.records.len()));
        }
        summary.push(format!("{label}: worst excess={worst:e} |x(end)|={final_norm:e}"));
    }
    let detail = format!(
        "x0={CLOSED_LOOP_X0:?} {} {}",
        summary.join("; "),
        failures.join("; ")
    );
    verdict(4, "Lyapunov decrease", failures.is_empty(), &detail);
}

#[test]
fn criterion_05_offset_without_iterations_reuses_warmstart() {
    let _guard = lock();
    let log = preset_log("t3");
    let mismatches = log
        .records
        .iter()
        .zip(&log.warmstarts)
        .filter(|(r, w)| {
            r.input
                .iter()
                .zip(w[0].iter())
                .any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .count();
    let audit = lyapunov_audit(&log);
    let pass = log.is_complete() && log.records.len() == CLOSED_LOOP_STEPS && mismatches == 0 && audit.pass();
    verdict(
        5,
        "T3 identity",
        pass,
        &format!(
            "steps={} bit mismatches={mismatches} audit pass={}",
            log.records.len(),
            audit.pass()
        ),
    );
}

#[test]
fn criterion_06_offset_feasible_point() {
    let _guard = lock();
    let mut config = ExperimentConfig::preset("t4").unwrap();
    config.eta = 1e-3;
    let setup = config.setup().unwrap();
    let controller = config.controller().unwrap();
    let log = simulate_closed_loop(&setup, &controller, &config.initial_state(), config.steps).unwrap();
    let mut worst_eq = 0.0_f64;
    let mut worst_obj = 0.0_f64;
    for (n, rec) in log.records.iter().enumerate() {
        let problem = assemble_offset(
            &setup.model,
            &setup.cost,
            &setup.constraints,
            &log.states[n],
            config.horizon,
            &controller.pattern,
            &log.warmstarts[n],
            config.eta,
        )
        .unwrap();
        let point = offset_initial_point(&problem).unwrap();
        let eval = problem.evaluate(&point).unwrap();
        worst_eq = worst_eq.max(eval.equalities.amax());
        worst_obj = worst_obj.max((eval.objective - rec.v).abs() / (1.0 + rec.v));
    }
    let pass = log.is_complete() && worst_eq <= OFFSET_EQUALITY_TOL && worst_obj <= OFFSET_EQUALITY_TOL;
    verdict(
        6,
        "offset feasible point",
        pass,
        &format!(
            "steps={} eta={} max equality residual={worst_eq:e} max relative |objective - V|={worst_obj:e} (tol {OFFSET_EQUALITY_TOL:e})",
            log.records.len(),
            config.eta
        ),
    );
}

#[test]
fn criterion_07_oracle_equivalence() {
    let _guard = lock();
    let mut config = ExperimentConfig::default();
    config.horizon = 4;
    config.pattern = PatternSpec::Uniform(2);
    config.x0 = ORACLE_X0.to_vec();
    let t = Instant::now();
    let report = cmd_oracle_compare(&config, ORACLE_GRID).unwrap();
    let elapsed = t.elapsed();
    let grid_best = report.grid.best.as_ref().map(|b| b.1);
    let pass = match (report.solver_cost, grid_best) {
        (Some(c), Some(g)) => c <= g + report.grid.cell_bound,
        _ => false,
    } && elapsed < ORACLE_BUDGET;
    verdict(
        7,
        "oracle equivalence",
        pass,
        &format!(
            "x0={ORACLE_X0:?} solver={:?} grid best={grid_best:?} cell bound={:e} runtime={elapsed:?}",
            report.solver_cost, report.grid.cell_bound
        ),
    );
}

#[test]
fn criterion_08_performance_ordering() {
    let _guard = lock();
    let config = ExperimentConfig::default();
    let cases = [(2, false), (2, true), (config.horizon, false)];
    let table = cmd_benchmark(&config, &cases, TIMING_REPETITIONS).unwrap();
    let t2 = table.row(2, false).unwrap();
    let t2o = table.row(2, true).unwrap();
    let tm = table.row(config.horizon, false).unwrap();
    let pass = t2.median < t2o.median && t2o.median < tm.median;
    verdict(
        8,
        "performance ordering",
        pass,
        &format!(
            "medians over {TIMING_REPETITIONS} runs: M=2 {:.3e}s ({:.3} t_m, {} iters), M=2 offset {:.3e}s ({:.3} t_m, {} iters), M=80 {:.3e}s ({} iters); required M=2 < M=2 offset < M=80",
            t2.median, t2.median_ratio, t2.iterations, t2o.median, t2o.median_ratio, t2o.iterations, tm.median, tm.iterations
        ),
    );
}

#[test]
fn criterion_09_performance_vs_degrees_of_freedom() {
    let _guard = lock();
    let j16 = preset_log("t6");
    let j80 = preset_log("t5");
    let j2 = preset_log("t4");
    let (c16, c80, c2) = (j16.closed_loop_cost(), j80.closed_loop_cost(), j2.closed_loop_cost());
    let complete = [&j16, &j80, &j2].iter().all(|l| l.is_complete() && l.records.len() == CLOSED_LOOP_STEPS);
    let pass = complete && (c16 - c80).abs() <= DOF_COST_TOLERANCE * c80 && c2 > c16;
    verdict(
        9,
        "performance vs DoF",
        pass,
        &format!(
            "closed-loop cost offset M=16 i=3: {c16:.6}, M=80: {c80:.6} (rel. diff {:.3e}, tol {DOF_COST_TOLERANCE}), offset M=2 i=3: {c2:.6}",
            (c16 - c80).abs() / c80
        ),
    );
}

#[test]
fn criterion_10_plain_blocked_audit_flags() {
    let _guard = lock();
    let config = ExperimentConfig::preset("t1").unwrap();
    let setup = config.setup().unwrap();
    let controller = config.controller().unwrap();
    let outcome = simulate_closed_loop(&setup, &controller, &config.initial_state(), config.steps);
    let (pass, detail) = match outcome {
        Ok(log) => {
            let audit = lyapunov_audit(&log);
            let text = audit.to_string();
            (
                log.mode == ControllerMode::PlainBlocked && audit.pass() && text.contains("enforced = false"),
                format!(
                    "steps={} decrease violations flagged={} audit pass={}",
                    log.records.len(),
                    audit.decrease_violations.len(),
                    audit.pass()
                ),
            )
        }
        Err(e) => (false, format!("run failed: {e}")),
    };
    verdict(10, "T1 contrast", pass, &detail);
}

#[test]
fn oracle_point_lies_outside_the_terminal_set() {
    let setup = ExperimentConfig::default().setup().unwrap();
    assert!(!setup.terminal.contains(&DVector::from_column_slice(&ORACLE_X0)));
}
