use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_qp, QpError, QpSolution};
use super::{Evaluation, Linearization, Nlp};
use crate::error::{Error, Result};

/// Objective differences below this are ties; the incumbent is kept.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Weight of the elastic variable when the linearized constraints are inconsistent.
const RELAXATION_WEIGHT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Iteration budget `i`; zero returns the initial point.
    pub max_iterations: usize,
    pub feasibility_tolerance: f64,
    pub optimality_tolerance: f64,
    pub initial_penalty: f64,
    /// Step-length contraction factor of the backtracking line search.
    pub backtracking: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub min_step: f64,
    pub log_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            feasibility_tolerance: 1e-8,
            optimality_tolerance: 1e-8,
            initial_penalty: 1.0,
            backtracking: 0.5,
            armijo: 1e-4,
            min_step: 1e-10,
            log_iterates: false,
        }
    }
}

impl SolverConfig {
    pub fn with_iterations(max_iterations: usize) -> Self {
        Self {
            max_iterations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.feasibility_tolerance) || !positive(self.optimality_tolerance) {
            return Err(Error::Parameter(
                "solver tolerances must be positive".into(),
            ));
        }
        if !positive(self.initial_penalty) || !positive(self.min_step) {
            return Err(Error::Parameter(
                "penalty and minimum step must be positive".into(),
            ));
        }
        if !(self.backtracking > 0.0 && self.backtracking < 1.0)
            || !(self.armijo > 0.0 && self.armijo < 0.5)
        {
            return Err(Error::Parameter(
                "line-search constants out of range".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolveStatus {
    /// A feasible point strictly better than the reference was found.
    Improved,
    Unimproved,
    /// The initial point is infeasible and no feasible iterate was found.
    InfeasibleStart,
    /// KKT conditions met at a feasible point no worse than the reference.
    Converged,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Improved => "improved",
            Self::Unimproved => "unimproved",
            Self::InfeasibleStart => "infeasible-start",
            Self::Converged => "converged",
        }
    }

    /// Whether the returned point may replace the reference solution.
    pub fn is_success(self) -> bool {
        matches!(self, Self::Improved | Self::Converged)
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolveStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "improved" => Ok(Self::Improved),
            "unimproved" => Ok(Self::Unimproved),
            "infeasible-start" => Ok(Self::InfeasibleStart),
            "converged" => Ok(Self::Converged),
            other => Err(Error::Parameter(format!("unknown solve status `{other}`"))),
        }
    }
}

/// One accepted SQP step. Both merit values use the penalty in force for the step.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateRecord {
    pub iteration: usize,
    pub objective: f64,
    pub violation: f64,
    pub penalty: f64,
    pub merit_before: f64,
    pub merit_after: f64,
    pub step_length: f64,
    pub relaxed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub point: DVector<f64>,
    pub objective: f64,
    pub violation: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub log: Vec<IterateRecord>,
}

impl fmt::Display for SolveOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "status={} iterations={} objective={:e} violation={:e}",
            self.status, self.iterations, self.objective, self.violation
        )
    }
}

struct Step {
    d: DVector<f64>,
    multiplier_norm: f64,
    relaxed: bool,
}

fn merit(eval: &Evaluation, mu: f64) -> f64 {
    eval.objective + mu * eval.l1_violation()
}

fn gauss_newton_hessian(lin: &Linearization) -> DMatrix<f64> {
    let jr = &lin.residual_jacobian;
    let mut h = jr.tr_mul(jr) * 2.0;
    let scale = h.diagonal().amax().max(1.0);
    for i in 0..h.nrows() {
        h[(i, i)] += 1e-9 * scale;
    }
    h
}

fn multiplier_norm(sol: &QpSolution) -> f64 {
    sol.eq_multipliers.amax().max(sol.ineq_multipliers.amax())
}

fn qp_step(lin: &Linearization, hessian: &DMatrix<f64>, gradient: &DVector<f64>) -> Option<Step> {
    let e = &lin.eval;
    match solve_qp(
        hessian,
        gradient,
        &lin.eq_jacobian,
        &(-&e.equalities),
        &lin.ineq_jacobian,
        &(-&e.inequalities),
    ) {
        Ok(sol) => Some(Step {
            multiplier_norm: multiplier_norm(&sol),
            d: sol.x,
            relaxed: false,
        }),
        Err(QpError::Infeasible)
        | Err(QpError::DependentEqualities)
        | Err(QpError::IterationLimit) => relaxed_step(lin, hessian, gradient),
        Err(_) => None,
    }
}

/// Elastic subproblem: the violated linearizations are scaled by `1 − ξ`, `ξ ∈ [0, 1]`,
/// so `(d, ξ) = (0, 1)` is always feasible.
fn relaxed_step(
    lin: &Linearization,
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
) -> Option<Step> {
    let e = &lin.eval;
    let n = gradient.len();
    let me = e.equalities.len();
    let mi = e.inequalities.len();
    let mut h = DMatrix::zeros(n + 1, n + 1);
    h.view_mut((0, 0), (n, n)).copy_from(hessian);
    h[(n, n)] = RELAXATION_WEIGHT * hessian.diagonal().amax().max(1.0);
    let mut g = DVector::zeros(n + 1);
    g.rows_mut(0, n).copy_from(gradient);
    let mut a_eq = DMatrix::zeros(me, n + 1);
    a_eq.view_mut((0, 0), (me, n)).copy_from(&lin.eq_jacobian);
    a_eq.set_column(n, &(-&e.equalities));
    let b_eq = -&e.equalities;
    let mut a_in = DMatrix::zeros(mi + 2, n + 1);
    a_in.view_mut((0, 0), (mi, n)).copy_from(&lin.ineq_jacobian);
    let mut b_in = DVector::zeros(mi + 2);
    for i in 0..mi {
        let c = e.inequalities[i];
        if c > 0.0 {
            a_in[(i, n)] = -c;
        }
        b_in[i] = -c;
    }
    a_in[(mi, n)] = 1.0;
    b_in[mi] = 1.0;
    a_in[(mi + 1, n)] = -1.0;
    b_in[mi + 1] = 0.0;
    let sol = solve_qp(&h, &g, &a_eq, &b_eq, &a_in, &b_in).ok()?;
    Some(Step {
        multiplier_norm: sol
            .eq_multipliers
            .amax()
            .max(sol.ineq_multipliers.rows(0, mi).amax()),
        d: sol.x.rows(0, n).into_owned(),
        relaxed: true,
    })
}

/// ℓ1 violation of the constraint linearization after step `d`.
fn linearized_violation(lin: &Linearization, d: &DVector<f64>) -> f64 {
    let h = &lin.eval.equalities + &lin.eq_jacobian * d;
    let c = &lin.eval.inequalities + &lin.ineq_jacobian * d;
    h.iter().map(|v| v.abs()).sum::<f64>() + c.iter().map(|v| v.max(0.0)).sum::<f64>()
}

struct Incumbent {
    point: DVector<f64>,
    objective: f64,
    violation: f64,
}

/// SQP with Gauss–Newton curvature and an ℓ1-merit backtracking line search.
///
/// Returns the best point encountered whose constraint violation is at most
/// the feasibility tolerance and whose objective is below `reference`; the
/// initial point is returned when no such point appears within the budget.
pub fn solve<P: Nlp + ?Sized>(
    problem: &P,
    initial: &DVector<f64>,
    reference: f64,
    config: &SolverConfig,
) -> Result<SolveOutcome> {
    run(problem, initial, reference, config, f64::NEG_INFINITY)
}

fn run<P: Nlp + ?Sized>(
    problem: &P,
    initial: &DVector<f64>,
    reference: f64,
    config: &SolverConfig,
    stop_below: f64,
) -> Result<SolveOutcome> {
    config.validate()?;
    if initial.len() != problem.num_variables() {
        return Err(Error::Dimension {
            what: "initial point",
            expected: problem.num_variables(),
            got: initial.len(),
        });
    }
    let eval0 = problem.evaluate(initial)?;
    if !eval0.is_finite() {
        return Err(Error::NonFinite(
            "problem evaluation at the initial point".into(),
        ));
    }
    let tol = config.feasibility_tolerance;
    let violation0 = eval0.violation();
    let feasible0 = violation0 <= tol;
    let mut incumbent: Option<Incumbent> = None;
    if feasible0 && eval0.objective < reference - TIE_TOLERANCE {
        incumbent = Some(Incumbent {
            point: initial.clone(),
            objective: eval0.objective,
            violation: violation0,
        });
    }

    let mut z = initial.clone();
    let mut mu = config.initial_penalty;
    let mut converged = false;
    let mut iterations = 0;
    let mut log = Vec::new();
    let reached_target =
        |inc: &Option<Incumbent>| inc.as_ref().is_some_and(|i| i.objective <= stop_below);

    while iterations < config.max_iterations && !reached_target(&incumbent) {
        let Ok(lin) = problem.linearize(&z) else {
            break;
        };
        let gradient = lin.gradient();
        let hessian = gauss_newton_hessian(&lin);
        let Some(step) = qp_step(&lin, &hessian, &gradient) else {
            break;
        };
        let d = step.d;
        let violation = lin.eval.l1_violation();
        // H d = −(∇f + Aᵀμ) for the QP step, so a small H d is a small KKT residual
        // even when d is long along a flat direction.
        let small_step = d.amax() <= config.optimality_tolerance * (1.0 + z.amax());
        let stationary = !step.relaxed
            && (&hessian * &d).amax() <= config.optimality_tolerance * (1.0 + gradient.amax());
        if (small_step || stationary) && lin.eval.violation() <= tol {
            converged = true;
            break;
        }
        if mu < 1.1 * step.multiplier_norm {
            mu = 1.1 * step.multiplier_norm + config.initial_penalty * 1e-3;
        }
        let slope = gradient.dot(&d) + mu * (linearized_violation(&lin, &d) - violation);
        let merit0 = merit(&lin.eval, mu);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= config.min_step {
            let trial = &z + &d * alpha;
            if let Ok(eval) = problem.evaluate(&trial) {
                if eval.is_finite() {
                    let m = merit(&eval, mu);
                    if m <= merit0 + config.armijo * alpha * slope.min(0.0) {
                        accepted = Some((trial, eval, m));
                        break;
                    }
                }
            }
            alpha *= config.backtracking;
        }
        let Some((trial, eval, merit_after)) = accepted else {
            break;
        };
        iterations += 1;
        if config.log_iterates {
            log.push(IterateRecord {
                iteration: iterations,
                objective: eval.objective,
                violation: eval.violation(),
                penalty: mu,
                merit_before: merit0,
                merit_after,
                step_length: alpha,
                relaxed: step.relaxed,
            });
        }
        z = trial;

        let (candidate, cand_eval) = match problem.restore(&z) {
            Some(restored) => match problem.evaluate(&restored) {
                Ok(e) if e.is_finite() => (restored, e),
                _ => continue,
            },
            None => (z.clone(), eval),
        };
        let threshold = incumbent
            .as_ref()
            .map_or(reference, |i| i.objective.min(reference));
        let cand_violation = cand_eval.violation();
        // Reaching the stopping target counts even when the gain is below the tie tolerance.
        let reaches_target = cand_eval.objective <= stop_below && !reached_target(&incumbent);
        if cand_violation <= tol
            && (cand_eval.objective < threshold - TIE_TOLERANCE || reaches_target)
        {
            incumbent = Some(Incumbent {
                point: candidate,
                objective: cand_eval.objective,
                violation: cand_violation,
            });
        }
    }

    let (point, objective, violation, status) = match incumbent {
        Some(inc) => {
            let status = if converged {
                SolveStatus::Converged
            } else {
                SolveStatus::Improved
            };
            (inc.point, inc.objective, inc.violation, status)
        }
        None => {
            let status = if !feasible0 {
                SolveStatus::InfeasibleStart
            } else if converged && eval0.objective <= reference {
                SolveStatus::Converged
            } else {
                SolveStatus::Unimproved
            };
            (initial.clone(), eval0.objective, violation0, status)
        }
    };
    Ok(SolveOutcome {
        point,
        objective,
        violation,
        iterations,
        status,
        log,
    })
}

/// Elastic reformulation `min ‖h‖² + t²` s.t. `c_nl(z) ≤ t`, `t ≥ 0`, `c_lin(z) ≤ 0`:
/// one shared bound on the nonlinear rows keeps the subproblems small.
struct FeasibilityNlp<'a, P: Nlp + ?Sized> {
    inner: &'a P,
    elastic: Vec<bool>,
}

impl<'a, P: Nlp + ?Sized> FeasibilityNlp<'a, P> {
    fn new(inner: &'a P) -> Self {
        let elastic = (0..inner.num_inequalities())
            .map(|r| !inner.is_linear_inequality(r))
            .collect();
        Self { inner, elastic }
    }

    fn nz(&self) -> usize {
        self.inner.num_variables()
    }

    fn bound(&self, eval: &Evaluation) -> f64 {
        self.elastic
            .iter()
            .zip(eval.inequalities.iter())
            .filter(|(e, _)| **e)
            .fold(0.0_f64, |acc, (_, c)| acc.max(*c))
    }

    fn lift(&self, z: &DVector<f64>, eval: &Evaluation) -> DVector<f64> {
        let mut w = DVector::zeros(self.num_variables());
        w.rows_mut(0, self.nz()).copy_from(z);
        w[self.nz()] = self.bound(eval);
        w
    }

    fn wrap(&self, w: &DVector<f64>, eval: Evaluation) -> Evaluation {
        let t = w[self.nz()];
        let mut c = DVector::zeros(self.num_inequalities());
        for (r, elastic) in self.elastic.iter().enumerate() {
            c[r] = if *elastic {
                eval.inequalities[r] - t
            } else {
                eval.inequalities[r]
            };
        }
        c[self.elastic.len()] = -t;
        Evaluation {
            objective: eval.equalities.norm_squared() + t * t,
            equalities: DVector::zeros(0),
            inequalities: c,
        }
    }
}

impl<P: Nlp + ?Sized> Nlp for FeasibilityNlp<'_, P> {
    fn num_variables(&self) -> usize {
        self.nz() + 1
    }

    fn num_equalities(&self) -> usize {
        0
    }

    fn num_inequalities(&self) -> usize {
        self.elastic.len() + 1
    }

    fn evaluate(&self, w: &DVector<f64>) -> Result<Evaluation> {
        let eval = self.inner.evaluate(&w.rows(0, self.nz()).into_owned())?;
        Ok(self.wrap(w, eval))
    }

    fn linearize(&self, w: &DVector<f64>) -> Result<Linearization> {
        let nz = self.nz();
        let lin = self.inner.linearize(&w.rows(0, nz).into_owned())?;
        let me = lin.eval.equalities.len();
        let mut residuals = DVector::zeros(me + 1);
        residuals.rows_mut(0, me).copy_from(&lin.eval.equalities);
        residuals[me] = w[nz];
        let mut jr = DMatrix::zeros(me + 1, nz + 1);
        jr.view_mut((0, 0), (me, nz)).copy_from(&lin.eq_jacobian);
        jr[(me, nz)] = 1.0;
        let rows = self.elastic.len();
        let mut jc = DMatrix::zeros(rows + 1, nz + 1);
        jc.view_mut((0, 0), (rows, nz))
            .copy_from(&lin.ineq_jacobian);
        for (r, elastic) in self.elastic.iter().enumerate() {
            if *elastic {
                jc[(r, nz)] = -1.0;
            }
        }
        jc[(rows, nz)] = -1.0;
        let eval = self.wrap(w, lin.eval);
        Ok(Linearization {
            eval,
            residuals,
            residual_jacobian: jr,
            eq_jacobian: DMatrix::zeros(0, nz + 1),
            ineq_jacobian: jc,
        })
    }

    fn is_linear_inequality(&self, row: usize) -> bool {
        row >= self.elastic.len() || !self.elastic[row]
    }

    fn restore(&self, w: &DVector<f64>) -> Option<DVector<f64>> {
        let z = self.inner.restore(&w.rows(0, self.nz()).into_owned())?;
        let eval = self.inner.evaluate(&z).ok()?;
        Some(self.lift(&z, &eval))
    }
}

/// Drives the constraint violation to zero, ignoring the objective.
///
/// Status is `Converged` iff the returned point's violation is within the
/// feasibility tolerance, `InfeasibleStart` otherwise.
pub fn solve_feasibility<P: Nlp + ?Sized>(
    problem: &P,
    initial: &DVector<f64>,
    config: &SolverConfig,
) -> Result<SolveOutcome> {
    config.validate()?;
    let eval0 = problem.evaluate(initial)?;
    if !eval0.is_finite() {
        return Err(Error::NonFinite(
            "problem evaluation at the initial point".into(),
        ));
    }
    let tol = config.feasibility_tolerance;
    if eval0.violation() <= tol {
        return Ok(SolveOutcome {
            point: initial.clone(),
            objective: eval0.objective,
            violation: eval0.violation(),
            iterations: 0,
            status: SolveStatus::Converged,
            log: Vec::new(),
        });
    }
    let elastic = FeasibilityNlp::new(problem);
    let w0 = elastic.lift(initial, &eval0);
    let inner = run(&elastic, &w0, f64::INFINITY, config, tol * tol)?;
    let point = inner.point.rows(0, elastic.nz()).into_owned();
    let eval = problem.evaluate(&point)?;
    let violation = eval.violation();
    Ok(SolveOutcome {
        point,
        objective: eval.objective,
        violation,
        iterations: inner.iterations,
        status: if violation <= tol {
            SolveStatus::Converged
        } else {
            SolveStatus::InfeasibleStart
        },
        log: inner.log,
    })
}
