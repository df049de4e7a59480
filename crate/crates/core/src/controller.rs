//! Suboptimal MPC closed loop with a buffered warm-start.
//!
//! The controller state is the pair `z = (x, ũ)`: the plant state and an
//! admissible input sequence for it. Each step tries to improve on `ũ` with a
//! move-blocked (or offset move-blocked) problem, applies the first input of
//! whatever it ends up with, and generates the next warm-start by either
//! shifting and appending the local law, or by restarting the local law when
//! the successor state lies in the terminal set and that is no more costly.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DVector;

use crate::blocking::BlockingPattern;
use crate::dynamics::{check_len, InputVector, StateVector, SystemModel};
use crate::error::{Error, Result};
use crate::objective::CostSpec;
use crate::ocp::{
    assemble_blocked, assemble_offset, evaluate_admissibility, ConstraintSet, NlpProblem, FEAS_TOL,
};
use crate::solver::{solve, solve_feasibility, SolveOutcome, SolveStatus, SolverConfig};
use crate::terminal::{local_warmstart, TerminalIngredients};

/// Slack of the Lyapunov decrease audit.
pub const DECREASE_SLACK: f64 = 1e-6;
/// Slack of the realized-cost-versus-buffer audit.
pub const REALIZED_SLACK: f64 = 1e-12;
/// Slack of the terminal-cost bound on warm-starts inside the terminal set.
pub const WARMSTART_BOUND_SLACK: f64 = 1e-9;

/// Model, cost (with terminal weight `P`), terminal ingredients, constraints and horizon.
#[derive(Debug, Clone)]
pub struct ControlSetup {
    pub model: SystemModel,
    pub cost: CostSpec,
    pub terminal: TerminalIngredients,
    pub constraints: ConstraintSet,
    pub horizon: usize,
}

impl ControlSetup {
    pub fn new(
        model: SystemModel,
        cost: CostSpec,
        terminal: TerminalIngredients,
        constraints: ConstraintSet,
        horizon: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Parameter("horizon must be positive".into()));
        }
        if cost.p() != &terminal.p || constraints.terminal != terminal.terminal_set() {
            return Err(Error::Parameter(
                "cost, terminal ingredients and constraints disagree on the terminal set".into(),
            ));
        }
        check_len("state box", model.state_dim(), constraints.state_box.dim())?;
        check_len("input box", model.input_dim(), constraints.input_box.dim())?;
        Ok(Self {
            model,
            cost,
            terminal,
            constraints,
            horizon,
        })
    }

    pub fn total_cost(&self, x: &StateVector, inputs: &[InputVector]) -> Result<f64> {
        self.cost.total_cost(&self.model, x, inputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerMode {
    /// Blocked problem from a cold start with no warm-start buffer.
    PlainBlocked,
    /// Blocked problem; the buffered warm-start is applied when it cannot be improved.
    BufferedFallback,
    /// Offset-blocked problem around the buffered warm-start.
    Offset,
}

impl ControllerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PlainBlocked => "plain-blocked",
            Self::BufferedFallback => "buffered-fallback",
            Self::Offset => "offset",
        }
    }

    /// Whether the stability guarantees (and hence the audit) apply.
    pub fn is_buffered(self) -> bool {
        !matches!(self, Self::PlainBlocked)
    }
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "plain-blocked" | "plain" => Ok(Self::PlainBlocked),
            "buffered-fallback" | "buffered" => Ok(Self::BufferedFallback),
            "offset" => Ok(Self::Offset),
            other => Err(Error::Config(format!("unknown controller mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub mode: ControllerMode,
    pub pattern: BlockingPattern,
    pub solver: SolverConfig,
    /// Weight of `η (λ − 1)²` in offset mode.
    pub eta: f64,
}

impl ControllerConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.pattern.horizon() != horizon {
            return Err(Error::Parameter(format!(
                "blocking pattern covers {} steps but the horizon is {horizon}",
                self.pattern.horizon()
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Parameter(format!(
                "regularization weight must be nonnegative, got {}",
                self.eta
            )));
        }
        self.solver.validate()
    }
}

/// `z = (x, ũ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub x: StateVector,
    pub warmstart: Vec<InputVector>,
}

/// Which warm-start candidate was kept for the successor state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Local law restarted from the successor state.
    Local,
    /// Previous sequence shifted with the local law appended.
    Shifted,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Shifted => "shifted",
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Self::Local),
            "shifted" => Ok(Self::Shifted),
            other => Err(Error::Parameter(format!("unknown branch `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub n: usize,
    pub state: StateVector,
    pub input: InputVector,
    /// Cost of the buffered warm-start (realized cost in plain-blocked mode).
    pub v: f64,
    pub j_realized: f64,
    pub stage_cost: f64,
    pub branch: Branch,
    pub fallback: bool,
    /// `λ` of the applied sequence in offset mode.
    pub lambda: Option<f64>,
    pub solver_iterations: usize,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub mode: ControllerMode,
    pub records: Vec<StepRecord>,
    /// `x(0), …, x(steps)`.
    pub states: Vec<StateVector>,
    /// Buffered warm-start held at each closed-loop time, `z(n).ũ` for `n = 0…steps`.
    pub warmstarts: Vec<Vec<InputVector>>,
    /// `V` at the final state.
    pub final_v: f64,
    /// Error that ended the run early, if any.
    pub failure: Option<Error>,
}

impl TrajectoryLog {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    /// `Σ ℓ(x(n), u(n))` over the recorded steps.
    pub fn closed_loop_cost(&self) -> f64 {
        self.records.iter().map(|r| r.stage_cost).sum()
    }

    pub fn fallback_count(&self) -> usize {
        self.records.iter().filter(|r| r.fallback).count()
    }

    pub fn final_state(&self) -> &StateVector {
        self.states.last().expect("log holds the initial state")
    }
}

/// `[u(1), …, u(N−1), κ_f(φ(N; x, u))]`.
pub fn shift_append(
    model: &SystemModel,
    ing: &TerminalIngredients,
    x: &StateVector,
    inputs: &[InputVector],
) -> Result<Vec<InputVector>> {
    let traj = model.rollout(x, inputs)?;
    let end = traj.terminal_state();
    let cost = ing.terminal_cost(end);
    if cost > ing.pi + FEAS_TOL {
        return Err(Error::OutsideTerminalSet {
            cost,
            level: ing.pi,
        });
    }
    let mut out = inputs[1..].to_vec();
    out.push(ing.local_control(end));
    Ok(out)
}

/// Successor state, its warm-start and the branch that produced it.
pub fn next_warmstart(
    setup: &ControlSetup,
    x: &StateVector,
    applied: &[InputVector],
) -> Result<(StateVector, Vec<InputVector>, Branch)> {
    let x_next = setup.model.step(x, &applied[0])?;
    let shifted = shift_append(&setup.model, &setup.terminal, x, applied)?;
    if setup.terminal.contains(&x_next) {
        let local = local_warmstart(&setup.model, &setup.terminal, &x_next, setup.horizon)?;
        // ties go to the local law, which certifies the terminal-cost bound directly
        if setup.total_cost(&x_next, &local)? <= setup.total_cost(&x_next, &shifted)? {
            return Ok((x_next, local, Branch::Local));
        }
    }
    Ok((x_next, shifted, Branch::Shifted))
}

/// Finds an admissible warm-start for `x0`: the local law inside the terminal
/// set, otherwise a feasibility solve on the blocked problem from zero inputs.
pub fn make_initial_extended_state(
    setup: &ControlSetup,
    x0: &StateVector,
    pattern: &BlockingPattern,
    solver: &SolverConfig,
) -> Result<ExtendedState> {
    check_len("initial state", setup.model.state_dim(), x0.len())?;
    if setup.constraints.state_box.violation(x0) > FEAS_TOL {
        return Err(Error::Initialization(
            format!("initial state {x0:?} violates the state box").replace('\n', ""),
        ));
    }
    let warmstart = if setup.terminal.contains(x0) {
        local_warmstart(&setup.model, &setup.terminal, x0, setup.horizon)?
    } else {
        let problem = assemble_blocked(
            &setup.model,
            &setup.cost,
            &setup.constraints,
            x0,
            setup.horizon,
            pattern,
        )?;
        let zeros = vec![DVector::zeros(setup.model.input_dim()); pattern.num_blocks()];
        let start = problem.point_from_inputs(&zeros, 0.0)?;
        let config = SolverConfig {
            max_iterations: solver.max_iterations.max(200),
            ..solver.clone()
        };
        let outcome = solve_feasibility(&problem, &start, &config)?;
        if outcome.status != SolveStatus::Converged {
            return Err(Error::Initialization(format!(
                "no admissible input sequence found (violation {:e} after {} iterations)",
                outcome.violation, outcome.iterations
            )));
        }
        problem.expanded_inputs(&outcome.point)
    };
    let report = evaluate_admissibility(&setup.model, &setup.constraints, x0, &warmstart)?;
    if !report.feasible {
        return Err(Error::Initialization(format!(
            "initial warm-start is not admissible: {report:?}"
        )));
    }
    Ok(ExtendedState {
        x: x0.clone(),
        warmstart,
    })
}

/// The point `(ū, λ) = (0, 1)` of the offset problem, which reproduces the warm-start.
pub fn offset_initial_point(problem: &NlpProblem) -> Result<DVector<f64>> {
    let zeros = vec![DVector::zeros(problem.input_dim()); problem.num_blocks()];
    problem.point_from_inputs(&zeros, 1.0)
}

/// Assembles the problem the controller solves in state `z` together with its
/// initial point and reference objective.
pub fn step_problem(
    setup: &ControlSetup,
    config: &ControllerConfig,
    z: &ExtendedState,
) -> Result<(NlpProblem, DVector<f64>, f64)> {
    let (model, cost, cons) = (&setup.model, &setup.cost, &setup.constraints);
    let n = setup.horizon;
    match config.mode {
        ControllerMode::BufferedFallback => {
            let problem = assemble_blocked(model, cost, cons, &z.x, n, &config.pattern)?;
            let start = problem.point_from_inputs(&config.pattern.project(&z.warmstart)?, 0.0)?;
            Ok((problem, start, setup.total_cost(&z.x, &z.warmstart)?))
        }
        ControllerMode::Offset => {
            let problem = assemble_offset(
                model,
                cost,
                cons,
                &z.x,
                n,
                &config.pattern,
                &z.warmstart,
                config.eta,
            )?;
            let start = offset_initial_point(&problem)?;
            Ok((problem, start, setup.total_cost(&z.x, &z.warmstart)?))
        }
        ControllerMode::PlainBlocked => {
            let problem = assemble_blocked(model, cost, cons, &z.x, n, &config.pattern)?;
            let zeros = vec![DVector::zeros(model.input_dim()); config.pattern.num_blocks()];
            let start = problem.point_from_inputs(&zeros, 0.0)?;
            Ok((problem, start, f64::INFINITY))
        }
    }
}

/// The input sequence chosen at one closed-loop step, before it is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub inputs: Vec<InputVector>,
    /// Cost of `inputs` from the current state.
    pub j_realized: f64,
    /// Cost of the buffered warm-start (`∞` in plain-blocked mode).
    pub reference: f64,
    pub lambda: f64,
    pub fallback: bool,
    pub outcome: SolveOutcome,
}

/// Solves the step problem in state `z` and selects the input sequence to apply.
pub fn plan(
    setup: &ControlSetup,
    config: &ControllerConfig,
    z: &ExtendedState,
    n: usize,
) -> Result<Plan> {
    let (problem, start, reference) = step_problem(setup, config, z)?;
    let outcome: SolveOutcome = solve(&problem, &start, reference, &config.solver)?;
    let x = &z.x;

    // single-shooting verification of the solver's candidate
    let candidate = if outcome.status.is_success() {
        let inputs = problem.expanded_inputs(&outcome.point);
        let report = evaluate_admissibility(&setup.model, &setup.constraints, x, &inputs)?;
        let realized = setup.total_cost(x, &inputs)?;
        (report.feasible && realized <= reference).then_some((
            inputs,
            realized,
            problem.lambda(&outcome.point),
        ))
    } else {
        None
    };

    let (inputs, j_realized, lambda, fallback) = match (candidate, config.mode) {
        (Some((inputs, realized, lambda)), _) => (inputs, realized, lambda, false),
        (None, ControllerMode::PlainBlocked) => {
            return Err(Error::StepFailure {
                step: n,
                reason: format!("no admissible iterate ({})", outcome.status),
            })
        }
        (None, _) => (z.warmstart.clone(), reference, 1.0, true),
    };
    Ok(Plan {
        inputs,
        j_realized,
        reference,
        lambda,
        fallback,
        outcome,
    })
}

/// One closed-loop step at time `n`: returns the applied input, the successor
/// extended state and the step record.
pub fn controller_step(
    setup: &ControlSetup,
    config: &ControllerConfig,
    z: &ExtendedState,
    n: usize,
) -> Result<(InputVector, ExtendedState, StepRecord)> {
    let Plan {
        inputs: applied,
        j_realized,
        reference,
        lambda,
        fallback,
        outcome,
    } = plan(setup, config, z, n)?;
    let x = &z.x;
    let v = if config.mode.is_buffered() {
        reference
    } else {
        j_realized
    };
    let u = applied[0].clone();
    let stage_cost = setup.cost.stage_cost(x, &u)?;
    let (x_next, warmstart, branch) = next_warmstart(setup, x, &applied)?;
    let record = StepRecord {
        n,
        state: x.clone(),
        input: u.clone(),
        v,
        j_realized,
        stage_cost,
        branch,
        fallback,
        lambda: (config.mode == ControllerMode::Offset).then_some(lambda),
        solver_iterations: outcome.iterations,
        status: outcome.status,
    };
    Ok((
        u,
        ExtendedState {
            x: x_next,
            warmstart,
        },
        record,
    ))
}

/// Runs `steps` nominal closed-loop steps from `x0`. Initialization errors are
/// returned; a failing step ends the run and is kept in `failure`.
pub fn simulate_closed_loop(
    setup: &ControlSetup,
    config: &ControllerConfig,
    x0: &StateVector,
    steps: usize,
) -> Result<TrajectoryLog> {
    config.validate(setup.horizon)?;
    let mut z = make_initial_extended_state(setup, x0, &config.pattern, &config.solver)?;
    let mut log = TrajectoryLog {
        mode: config.mode,
        records: Vec::with_capacity(steps),
        states: vec![z.x.clone()],
        warmstarts: vec![z.warmstart.clone()],
        final_v: f64::NAN,
        failure: None,
    };
    for n in 0..steps {
        match controller_step(setup, config, &z, n) {
            Ok((_, next, record)) => {
                log.records.push(record);
                log.states.push(next.x.clone());
                log.warmstarts.push(next.warmstart.clone());
                z = next;
            }
            Err(e) => {
                log.failure = Some(e);
                break;
            }
        }
    }
    log.final_v = setup.total_cost(&z.x, &z.warmstart)?;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub mode: ControllerMode,
    pub steps: usize,
    /// `(n, V(n+1) − V(n) + ℓ(n))` where this exceeds the slack.
    pub decrease_violations: Vec<(usize, f64)>,
    /// `(n, J(n) − V(n))` where the realized cost exceeds the buffered cost.
    pub realized_violations: Vec<(usize, f64)>,
    pub worst_decrease: f64,
}

impl AuditReport {
    /// True when no decrease or realized-cost violation was found.
    pub fn is_monotone(&self) -> bool {
        self.decrease_violations.is_empty() && self.realized_violations.is_empty()
    }

    /// Verdict for the mode: only modes with a buffer are required to be monotone.
    pub fn pass(&self) -> bool {
        !self.mode.is_buffered() || self.is_monotone()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "steps = {}", self.steps)?;
        writeln!(
            f,
            "decrease_violations = {}",
            self.decrease_violations.len()
        )?;
        writeln!(
            f,
            "realized_violations = {}",
            self.realized_violations.len()
        )?;
        writeln!(f, "worst_decrease = {:e}", self.worst_decrease)?;
        for (n, excess) in &self.decrease_violations {
            writeln!(f, "decrease_violation n={n} excess={excess:e}")?;
        }
        writeln!(f, "enforced = {}", self.mode.is_buffered())?;
        writeln!(f, "pass = {}", self.pass())
    }
}

/// Checks `V(n+1) ≤ V(n) − ℓ(x(n), u(n)) + 10⁻⁶` and `J(n) ≤ V(n) + 10⁻¹²`
/// along the log. Violations are reported, never raised.
pub fn lyapunov_audit(log: &TrajectoryLog) -> AuditReport {
    let mut decrease_violations = Vec::new();
    let mut realized_violations = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for (idx, rec) in log.records.iter().enumerate() {
        let next_v = log.records.get(idx + 1).map_or(log.final_v, |r| r.v);
        let excess = next_v - rec.v + rec.stage_cost;
        worst = worst.max(excess);
        if !(excess <= DECREASE_SLACK) {
            decrease_violations.push((rec.n, excess));
        }
        let gap = rec.j_realized - rec.v;
        if !(gap <= REALIZED_SLACK) {
            realized_violations.push((rec.n, gap));
        }
    }
    AuditReport {
        mode: log.mode,
        steps: log.records.len(),
        decrease_violations,
        realized_violations,
        worst_decrease: if log.records.is_empty() { 0.0 } else { worst },
    }
}

pub const CSV_HEADER: [&str; 12] = [
    "n",
    "x1",
    "x2",
    "u",
    "V",
    "J_realized",
    "stage_cost",
    "branch",
    "fallback",
    "lambda",
    "solver_iters",
    "solve_status",
];

impl TrajectoryLog {
    /// Writes one row per step plus a final row holding `x(steps)` and its `V`.
    /// Floats use shortest round-trip formatting, so reading back is exact.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let x0 = &self.states[0];
        if x0.len() != 2 || self.records.first().is_some_and(|r| r.input.len() != 1) {
            return Err(Error::Parameter(
                "CSV schema covers two states and one input".into(),
            ));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.n.to_string(),
                r.state[0].to_string(),
                r.state[1].to_string(),
                r.input[0].to_string(),
                r.v.to_string(),
                r.j_realized.to_string(),
                r.stage_cost.to_string(),
                r.branch.as_str().to_string(),
                r.fallback.to_string(),
                r.lambda.map(|l| l.to_string()).unwrap_or_default(),
                r.solver_iterations.to_string(),
                r.status.to_string(),
            ])?;
        }
        let last = self.final_state();
        w.write_record([
            self.records.len().to_string(),
            last[0].to_string(),
            last[1].to_string(),
            String::new(),
            self.final_v.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
        w.flush()?;
        Ok(())
    }

    /// Reads a log written by [`TrajectoryLog::write_csv`]; warm-starts are not stored.
    pub fn read_csv<R: Read>(input: R, mode: ControllerMode) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Parameter(format!("bad number `{s}`")))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Parameter(format!("bad integer `{s}`")))
        };
        let rows: Vec<csv::StringRecord> =
            reader.records().collect::<std::result::Result<_, _>>()?;
        let (last, body) = rows
            .split_last()
            .ok_or_else(|| Error::Parameter("empty trajectory CSV".into()))?;
        let mut records = Vec::with_capacity(body.len());
        let mut states = Vec::with_capacity(rows.len());
        for row in body {
            let state = DVector::from_vec(vec![parse_f(&row[1])?, parse_f(&row[2])?]);
            states.push(state.clone());
            records.push(StepRecord {
                n: parse_u(&row[0])?,
                state,
                input: DVector::from_element(1, parse_f(&row[3])?),
                v: parse_f(&row[4])?,
                j_realized: parse_f(&row[5])?,
                stage_cost: parse_f(&row[6])?,
                branch: row[7].parse()?,
                fallback: row[8] == *"true",
                lambda: if row[9].is_empty() {
                    None
                } else {
                    Some(parse_f(&row[9])?)
                },
                solver_iterations: parse_u(&row[10])?,
                status: row[11].parse()?,
            });
        }
        states.push(DVector::from_vec(vec![
            parse_f(&last[1])?,
            parse_f(&last[2])?,
        ]));
        Ok(Self {
            mode,
            records,
            states,
            warmstarts: Vec::new(),
            final_v: parse_f(&last[4])?,
            failure: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::BoxBounds;
    use crate::dynamics::vdp_model;
    use crate::terminal::design_terminal;
    use nalgebra::DMatrix;

    fn setup(horizon: usize) -> ControlSetup {
        let model = vdp_model(0.03125).unwrap();
        let base = CostSpec::diagonal(&[1.0, 0.1], 0.1, 1, DMatrix::identity(2, 2)).unwrap();
        let ing = design_terminal(&model, &base, 1.001, 0.4856).unwrap();
        let cost = base.with_terminal(ing.p.clone()).unwrap();
        let cons = ConstraintSet::new(
            BoxBounds::symmetric(2, 1.0).unwrap(),
            BoxBounds::symmetric(1, 1.0).unwrap(),
            ing.terminal_set(),
        )
        .unwrap();
        ControlSetup::new(model, cost, ing, cons, horizon).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn config(
        mode: ControllerMode,
        horizon: usize,
        blocks: usize,
        iterations: usize,
    ) -> ControllerConfig {
        ControllerConfig {
            mode,
            pattern: BlockingPattern::uniform(horizon, blocks).unwrap(),
            solver: SolverConfig::with_iterations(iterations),
            eta: 0.0,
        }
    }

    #[test]
    fn shift_append_examples() {
        let s = setup(4);
        let x = v(&[0.05, -0.02]);
        let useq: Vec<_> = local_warmstart(&s.model, &s.terminal, &x, 4).unwrap();
        let shifted = shift_append(&s.model, &s.terminal, &x, &useq).unwrap();
        let end = s.model.rollout(&x, &useq).unwrap().terminal_state().clone();
        assert_eq!(&shifted[..3], &useq[1..]);
        assert_eq!(shifted[3], s.terminal.local_control(&end));
        let zeros = vec![v(&[0.0]); 4];
        assert_eq!(
            shift_append(&s.model, &s.terminal, &v(&[0.0, 0.0]), &zeros).unwrap(),
            zeros
        );
        let x_next = s.model.step(&x, &useq[0]).unwrap();
        assert!(
            evaluate_admissibility(&s.model, &s.constraints, &x_next, &shifted)
                .unwrap()
                .feasible
        );
    }

    #[test]
    fn next_warmstart_branches() {
        let s = setup(20);
        let zeros = vec![v(&[0.0]); 20];
        let (x_next, w, branch) = next_warmstart(&s, &v(&[0.0, 0.0]), &zeros).unwrap();
        assert_eq!(x_next, v(&[0.0, 0.0]));
        assert_eq!(branch, Branch::Local);
        assert_eq!(w, zeros);

        let far = ExtendedState {
            x: v(&[-0.6, 0.8]),
            warmstart: Vec::new(),
        };
        let z = make_initial_extended_state(
            &s,
            &far.x,
            &BlockingPattern::uniform(20, 2).unwrap(),
            &SolverConfig::default(),
        );
        // from far away the short horizon cannot reach the terminal set
        assert!(matches!(z, Err(Error::Initialization(_))));
    }

    #[test]
    fn initialization_examples() {
        let s = setup(80);
        let pattern = BlockingPattern::uniform(80, 2).unwrap();
        let z =
            make_initial_extended_state(&s, &v(&[0.0, 0.0]), &pattern, &SolverConfig::default())
                .unwrap();
        assert!(z.warmstart.iter().all(|u| u[0] == 0.0));

        let near = v(&[0.1, 0.05])
            * (0.4856f64 / s.terminal.terminal_cost(&v(&[0.1, 0.05]))).sqrt()
            * 0.999;
        let z = make_initial_extended_state(&s, &near, &pattern, &SolverConfig::default()).unwrap();
        assert!(
            s.total_cost(&near, &z.warmstart).unwrap()
                <= s.terminal.terminal_cost(&near) + WARMSTART_BOUND_SLACK
        );

        let outside = v(&[1.2, 0.0]);
        assert!(matches!(
            make_initial_extended_state(&s, &outside, &pattern, &SolverConfig::default()),
            Err(Error::Initialization(_))
        ));

        let z =
            make_initial_extended_state(&s, &v(&[-0.3, 0.4]), &pattern, &SolverConfig::default())
                .unwrap();
        assert!(
            evaluate_admissibility(&s.model, &s.constraints, &z.x, &z.warmstart)
                .unwrap()
                .feasible
        );

        // inside the state box, but the terminal set is out of reach within 80 steps
        assert!(matches!(
            make_initial_extended_state(&s, &v(&[-0.6, 0.8]), &pattern, &SolverConfig::default()),
            Err(Error::Initialization(_))
        ));
    }

    #[test]
    fn equilibrium_is_absorbing() {
        let s = setup(80);
        for mode in [
            ControllerMode::BufferedFallback,
            ControllerMode::Offset,
            ControllerMode::PlainBlocked,
        ] {
            let log =
                simulate_closed_loop(&s, &config(mode, 80, 2, 3), &v(&[0.0, 0.0]), 5).unwrap();
            assert!(log.is_complete());
            assert!(log.states.iter().all(|x| x.iter().all(|&c| c == 0.0)));
            assert!(log
                .records
                .iter()
                .all(|r| r.input[0] == 0.0 && r.v == 0.0 && r.stage_cost == 0.0));
            assert!(lyapunov_audit(&log).pass());
        }
    }

    #[test]
    fn offset_without_iterations_reuses_warmstart() {
        let s = setup(80);
        let cfg = config(ControllerMode::Offset, 80, 2, 0);
        let log = simulate_closed_loop(&s, &cfg, &v(&[0.15, -0.1]), 10).unwrap();
        for (rec, warm) in log.records.iter().zip(&log.warmstarts) {
            assert_eq!(rec.input, warm[0]);
            assert!(rec.fallback);
            assert_eq!(rec.j_realized, rec.v);
        }
    }

    #[test]
    fn buffered_unimproved_falls_back() {
        let s = setup(80);
        let cfg = config(ControllerMode::BufferedFallback, 80, 2, 0);
        let z =
            make_initial_extended_state(&s, &v(&[-0.3, 0.4]), &cfg.pattern, &cfg.solver).unwrap();
        let (u, _, rec) = controller_step(&s, &cfg, &z, 0).unwrap();
        assert!(rec.fallback);
        assert_eq!(u, z.warmstart[0]);
        assert_eq!(rec.j_realized, rec.v);
    }

    #[test]
    fn audit_of_zero_log_and_flagging() {
        let log = TrajectoryLog {
            mode: ControllerMode::PlainBlocked,
            records: vec![StepRecord {
                n: 0,
                state: v(&[0.1, 0.0]),
                input: v(&[0.0]),
                v: 1.0,
                j_realized: 1.0,
                stage_cost: 0.5,
                branch: Branch::Shifted,
                fallback: false,
                lambda: None,
                solver_iterations: 1,
                status: SolveStatus::Improved,
            }],
            states: vec![v(&[0.1, 0.0]), v(&[0.1, 0.0])],
            warmstarts: Vec::new(),
            final_v: 2.0,
            failure: None,
        };
        let report = lyapunov_audit(&log);
        assert_eq!(report.decrease_violations.len(), 1);
        assert!(!report.is_monotone());
        assert!(report.pass());
        let buffered = TrajectoryLog {
            mode: ControllerMode::BufferedFallback,
            ..log
        };
        assert!(!lyapunov_audit(&buffered).pass());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = setup(80);
        let log = simulate_closed_loop(
            &s,
            &config(ControllerMode::Offset, 80, 2, 2),
            &v(&[0.15, -0.1]),
            6,
        )
        .unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let back = TrajectoryLog::read_csv(buf.as_slice(), log.mode).unwrap();
        assert_eq!(back.records, log.records);
        assert_eq!(back.states, log.states);
        assert_eq!(back.final_v, log.final_v);
        assert_eq!(lyapunov_audit(&back), lyapunov_audit(&log));
    }

    #[test]
    fn mode_strings() {
        for m in [
            ControllerMode::PlainBlocked,
            ControllerMode::BufferedFallback,
            ControllerMode::Offset,
        ] {
            assert_eq!(m.as_str().parse::<ControllerMode>().unwrap(), m);
        }
        assert!("nonsense".parse::<ControllerMode>().is_err());
    }
}
