//! Move-blocked optimal control problems transcribed by multiple shooting.
//!
//! The shooting grid equals the blocking grid: node `s_j` starts block `j`,
//! and each defect `s_{j+1} − Φ_j(s_j, ū_j, λ)` spans the multi-step rollout
//! of one block under its constant (or offset) input. The decision vector is
//! interleaved as `[s_0, ū_0, s_1, ū_1, …, s_M, (λ)]`.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::blocking::BlockingPattern;
use crate::bounds::BoxBounds;
use crate::dynamics::{check_len, stencil_width, InputVector, StateVector, SystemModel};
use crate::error::{Error, Result};
use crate::objective::CostSpec;
use crate::parallel::Execution;
use crate::solver::{Evaluation, Linearization, Nlp};
use crate::terminal::TerminalSet;

/// Feasibility tolerance used for admissibility and solver acceptance.
pub const FEAS_TOL: f64 = 1e-8;

/// State box `X̄`, compact input box `Ū` and terminal set `X_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub state_box: BoxBounds,
    pub input_box: BoxBounds,
    pub terminal: TerminalSet,
}

impl ConstraintSet {
    pub fn new(state_box: BoxBounds, input_box: BoxBounds, terminal: TerminalSet) -> Result<Self> {
        if !input_box.is_finite() {
            return Err(Error::Parameter("input box must be compact".into()));
        }
        if !state_box.contains_origin() || !input_box.contains_origin() {
            return Err(Error::Parameter(
                "constraint boxes must contain the origin".into(),
            ));
        }
        if terminal.p().nrows() != state_box.dim() {
            return Err(Error::Dimension {
                what: "terminal weight",
                expected: state_box.dim(),
                got: terminal.p().nrows(),
            });
        }
        Ok(Self {
            state_box,
            input_box,
            terminal,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissibilityReport {
    pub feasible: bool,
    pub state_violation: f64,
    pub input_violation: f64,
    /// `ℓ_f(φ(N)) − π`; non-positive inside the terminal set.
    pub terminal_margin: f64,
}

/// Rollout-based membership test for the admissible input set of `x0`.
pub fn evaluate_admissibility(
    model: &SystemModel,
    cons: &ConstraintSet,
    x0: &StateVector,
    inputs: &[InputVector],
) -> Result<AdmissibilityReport> {
    let traj = model.rollout(x0, inputs)?;
    let state_violation = traj.states[..inputs.len()]
        .iter()
        .fold(0.0_f64, |acc, x| acc.max(cons.state_box.violation(x)));
    let input_violation = inputs
        .iter()
        .fold(0.0_f64, |acc, u| acc.max(cons.input_box.violation(u)));
    let terminal_margin = cons.terminal.margin(traj.terminal_state());
    Ok(AdmissibilityReport {
        feasible: state_violation <= FEAS_TOL
            && input_violation <= FEAS_TOL
            && terminal_margin <= FEAS_TOL,
        state_violation,
        input_violation,
        terminal_margin,
    })
}

/// How the horizon inputs depend on the blocked decision variables.
#[derive(Debug, Clone, PartialEq)]
pub enum Parameterization {
    /// `u = (B ⊗ I) ū`.
    Blocked,
    /// `u = (B ⊗ I) ū + λ ũ` with regularizer `η (λ − 1)²`.
    Offset {
        warmstart: Vec<InputVector>,
        eta: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum IneqRow {
    /// `x_k[i] − upper ≤ 0` at an intra-block step.
    StateUpper { k: usize, i: usize, bound: f64 },
    /// `lower − x_k[i] ≤ 0` at an intra-block step.
    StateLower { k: usize, i: usize, bound: f64 },
    /// `Σ c z − rhs ≤ 0`.
    Linear {
        coefficients: Vec<(usize, f64)>,
        rhs: f64,
    },
    /// `ℓ_f(s_M) − π ≤ 0`.
    Terminal,
}

/// Shooting transcription of the (offset) move-blocked optimal control problem.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    model: SystemModel,
    cost: CostSpec,
    cons: ConstraintSet,
    x0: StateVector,
    pattern: BlockingPattern,
    param: Parameterization,
    q_factor: DMatrix<f64>,
    r_factor: DMatrix<f64>,
    p_factor: DMatrix<f64>,
    rows: Vec<IneqRow>,
}

struct Trajectory {
    /// `x_k` for `k = 0…N−1`; block starts are the shooting nodes.
    states: Vec<StateVector>,
    inputs: Vec<InputVector>,
    /// `Φ_j(s_j, ū_j, λ)` per block.
    ends: Vec<StateVector>,
}

/// Blocked problem (`u = (B ⊗ I) ū`) over horizon `N = pattern.horizon()`.
pub fn assemble_blocked(
    model: &SystemModel,
    cost: &CostSpec,
    cons: &ConstraintSet,
    x0: &StateVector,
    horizon: usize,
    pattern: &BlockingPattern,
) -> Result<NlpProblem> {
    NlpProblem::new(
        model,
        cost,
        cons,
        x0,
        horizon,
        pattern,
        Parameterization::Blocked,
    )
}

/// Offset-blocked problem with the extra scalar `λ` scaling the warm-start.
#[allow(clippy::too_many_arguments)]
pub fn assemble_offset(
    model: &SystemModel,
    cost: &CostSpec,
    cons: &ConstraintSet,
    x0: &StateVector,
    horizon: usize,
    pattern: &BlockingPattern,
    warmstart: &[InputVector],
    eta: f64,
) -> Result<NlpProblem> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Parameter(format!(
            "regularization weight must be nonnegative, got {eta}"
        )));
    }
    NlpProblem::new(
        model,
        cost,
        cons,
        x0,
        horizon,
        pattern,
        Parameterization::Offset {
            warmstart: warmstart.to_vec(),
            eta,
        },
    )
}

/// The unblocked problem: one block per step.
pub fn assemble_standard(
    model: &SystemModel,
    cost: &CostSpec,
    cons: &ConstraintSet,
    x0: &StateVector,
    horizon: usize,
) -> Result<NlpProblem> {
    assemble_blocked(
        model,
        cost,
        cons,
        x0,
        horizon,
        &BlockingPattern::uniform(horizon, horizon)?,
    )
}

/// `F` with `FᵀF = W` for symmetric positive semidefinite `W`.
fn sqrt_factor(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w.clone());
    let mut f = eig.eigenvectors.transpose();
    for (i, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        f.row_mut(i).scale_mut(s);
    }
    f
}

impl NlpProblem {
    fn new(
        model: &SystemModel,
        cost: &CostSpec,
        cons: &ConstraintSet,
        x0: &StateVector,
        horizon: usize,
        pattern: &BlockingPattern,
        param: Parameterization,
    ) -> Result<Self> {
        let n = model.state_dim();
        let m = model.input_dim();
        if pattern.horizon() != horizon {
            return Err(Error::Parameter(format!(
                "blocking pattern covers {} steps but the horizon is {horizon}",
                pattern.horizon()
            )));
        }
        check_len("initial state", n, x0.len())?;
        check_len("cost state weight", n, cost.state_dim())?;
        check_len("cost input weight", m, cost.input_dim())?;
        check_len("state box", n, cons.state_box.dim())?;
        check_len("input box", m, cons.input_box.dim())?;
        if let Parameterization::Offset { warmstart, .. } = &param {
            check_len("warm-start sequence", horizon, warmstart.len())?;
            for w in warmstart {
                check_len("warm-start input", m, w.len())?;
            }
        }
        let mut problem = Self {
            model: model.clone(),
            cost: cost.clone(),
            cons: cons.clone(),
            x0: x0.clone(),
            pattern: pattern.clone(),
            param,
            q_factor: sqrt_factor(cost.q()),
            r_factor: sqrt_factor(cost.r()),
            p_factor: sqrt_factor(cost.p()),
            rows: Vec::new(),
        };
        problem.rows = problem.build_rows()?;
        Ok(problem)
    }

    fn build_rows(&self) -> Result<Vec<IneqRow>> {
        let n = self.state_dim();
        let m = self.input_dim();
        let sb = &self.cons.state_box;
        let mut rows = Vec::new();
        for j in 0..self.num_blocks() {
            for k in self.pattern.block_range(j) {
                if k == 0 {
                    // x_0 is pinned; its membership is checked by the caller
                    continue;
                }
                for i in 0..n {
                    let (lo, hi) = (sb.lower()[i], sb.upper()[i]);
                    if k == self.pattern.start(j) {
                        let col = self.s_index(j) + i;
                        if hi.is_finite() {
                            rows.push(IneqRow::Linear {
                                coefficients: vec![(col, 1.0)],
                                rhs: hi,
                            });
                        }
                        if lo.is_finite() {
                            rows.push(IneqRow::Linear {
                                coefficients: vec![(col, -1.0)],
                                rhs: -lo,
                            });
                        }
                    } else {
                        if hi.is_finite() {
                            rows.push(IneqRow::StateUpper { k, i, bound: hi });
                        }
                        if lo.is_finite() {
                            rows.push(IneqRow::StateLower { k, i, bound: lo });
                        }
                    }
                }
            }
        }
        match &self.param {
            Parameterization::Blocked => {
                let ib = &self.cons.input_box;
                for j in 0..self.num_blocks() {
                    for i in 0..m {
                        let col = self.u_index(j) + i;
                        rows.push(IneqRow::Linear {
                            coefficients: vec![(col, 1.0)],
                            rhs: ib.upper()[i],
                        });
                        rows.push(IneqRow::Linear {
                            coefficients: vec![(col, -1.0)],
                            rhs: -ib.lower()[i],
                        });
                    }
                }
            }
            Parameterization::Offset { warmstart, .. } => {
                let lambda_blocked = m * self.num_blocks();
                let remap = |idx: usize| {
                    if idx == lambda_blocked {
                        self.lambda_index()
                    } else {
                        self.u_index(idx / m) + idx % m
                    }
                };
                for row in self
                    .pattern
                    .offset_bound_rows(warmstart, &self.cons.input_box)?
                {
                    let coefficients: Vec<(usize, f64)> = row
                        .coefficients
                        .iter()
                        .map(|&(idx, c)| (remap(idx), c))
                        .collect();
                    rows.push(IneqRow::Linear {
                        coefficients: coefficients.clone(),
                        rhs: row.upper,
                    });
                    rows.push(IneqRow::Linear {
                        coefficients: coefficients.into_iter().map(|(idx, c)| (idx, -c)).collect(),
                        rhs: -row.lower,
                    });
                }
            }
        }
        rows.push(IneqRow::Terminal);
        Ok(rows)
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn horizon(&self) -> usize {
        self.pattern.horizon()
    }

    pub fn num_blocks(&self) -> usize {
        self.pattern.num_blocks()
    }

    pub fn pattern(&self) -> &BlockingPattern {
        &self.pattern
    }

    pub fn initial_state(&self) -> &StateVector {
        &self.x0
    }

    pub fn parameterization(&self) -> &Parameterization {
        &self.param
    }

    pub fn is_offset(&self) -> bool {
        matches!(self.param, Parameterization::Offset { .. })
    }

    fn stride(&self) -> usize {
        self.state_dim() + self.input_dim()
    }

    /// Column of the first coordinate of node `s_j`, `j = 0…M`.
    pub fn s_index(&self, j: usize) -> usize {
        j * self.stride()
    }

    /// Column of the first coordinate of block input `ū_j`.
    pub fn u_index(&self, j: usize) -> usize {
        j * self.stride() + self.state_dim()
    }

    /// Column of `λ` (offset problems only).
    pub fn lambda_index(&self) -> usize {
        self.num_blocks() * self.stride() + self.state_dim()
    }

    pub fn blocked_inputs(&self, z: &DVector<f64>) -> Vec<InputVector> {
        let m = self.input_dim();
        (0..self.num_blocks())
            .map(|j| z.rows(self.u_index(j), m).into_owned())
            .collect()
    }

    pub fn lambda(&self, z: &DVector<f64>) -> f64 {
        if self.is_offset() {
            z[self.lambda_index()]
        } else {
            0.0
        }
    }

    fn warm(&self) -> Option<&[InputVector]> {
        match &self.param {
            Parameterization::Offset { warmstart, .. } => Some(warmstart),
            Parameterization::Blocked => None,
        }
    }

    fn input_at(&self, k: usize, ubar: &InputVector, lambda: f64) -> InputVector {
        match self.warm() {
            Some(w) => ubar + &w[k] * lambda,
            None => ubar.clone(),
        }
    }

    /// Full horizon input sequence `Γ(ū, λ)` encoded in `z`.
    pub fn expanded_inputs(&self, z: &DVector<f64>) -> Vec<InputVector> {
        let blocked = self.blocked_inputs(z);
        let lambda = self.lambda(z);
        (0..self.horizon())
            .map(|k| self.input_at(k, &blocked[self.pattern.block_of(k)], lambda))
            .collect()
    }

    /// Single-shooting point: nodes from the rollout of `Γ(ū, λ)` from `x0`.
    pub fn point_from_inputs(&self, blocked: &[InputVector], lambda: f64) -> Result<DVector<f64>> {
        check_len("blocked sequence", self.num_blocks(), blocked.len())?;
        let mut z = DVector::zeros(self.num_variables());
        let m = self.input_dim();
        for (j, u) in blocked.iter().enumerate() {
            check_len("blocked input", m, u.len())?;
            z.rows_mut(self.u_index(j), m).copy_from(u);
        }
        if self.is_offset() {
            z[self.lambda_index()] = lambda;
        }
        self.fill_nodes(&mut z)?;
        Ok(z)
    }

    fn fill_nodes(&self, z: &mut DVector<f64>) -> Result<()> {
        let n = self.state_dim();
        let lambda = self.lambda(z);
        let mut s = self.x0.clone();
        z.rows_mut(0, n).copy_from(&s);
        for j in 0..self.num_blocks() {
            let ubar = z.rows(self.u_index(j), self.input_dim()).into_owned();
            s = self.block_end(j, &s, &ubar, lambda)?;
            z.rows_mut(self.s_index(j + 1), n).copy_from(&s);
        }
        Ok(())
    }

    fn block_end(
        &self,
        j: usize,
        s: &StateVector,
        ubar: &InputVector,
        lambda: f64,
    ) -> Result<StateVector> {
        let mut x = s.clone();
        for k in self.pattern.block_range(j) {
            x = self.model.transition(&x, &self.input_at(k, ubar, lambda));
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow { index: k + 1 });
            }
        }
        Ok(x)
    }

    /// States `x_{start+1}, …, x_{end}` of block `j` (the last is the block end).
    fn block_states(
        &self,
        j: usize,
        s: &StateVector,
        ubar: &InputVector,
        lambda: f64,
    ) -> Result<Vec<StateVector>> {
        let range = self.pattern.block_range(j);
        let mut out = Vec::with_capacity(range.len());
        let mut x = s.clone();
        for k in range {
            x = self.model.transition(&x, &self.input_at(k, ubar, lambda));
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow { index: k + 1 });
            }
            out.push(x.clone());
        }
        Ok(out)
    }

    fn simulate(&self, z: &DVector<f64>) -> Result<Trajectory> {
        check_len("decision vector", self.num_variables(), z.len())?;
        let n = self.state_dim();
        let lambda = self.lambda(z);
        let mut states = Vec::with_capacity(self.horizon());
        let mut inputs = Vec::with_capacity(self.horizon());
        let mut ends = Vec::with_capacity(self.num_blocks());
        for j in 0..self.num_blocks() {
            let mut x = z.rows(self.s_index(j), n).into_owned();
            let ubar = z.rows(self.u_index(j), self.input_dim()).into_owned();
            for k in self.pattern.block_range(j) {
                let u = self.input_at(k, &ubar, lambda);
                let next = self.model.transition(&x, &u);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Overflow { index: k + 1 });
                }
                states.push(x);
                inputs.push(u);
                x = next;
            }
            ends.push(x);
        }
        Ok(Trajectory {
            states,
            inputs,
            ends,
        })
    }

    fn terminal_node(&self, z: &DVector<f64>) -> StateVector {
        z.rows(self.s_index(self.num_blocks()), self.state_dim())
            .into_owned()
    }

    fn objective_of(&self, traj: &Trajectory, z: &DVector<f64>) -> f64 {
        let mut cost = 0.0;
        for (x, u) in traj.states.iter().zip(&traj.inputs) {
            cost += self.cost.stage(x, u);
        }
        let cost = cost + self.cost.terminal(&self.terminal_node(z));
        match &self.param {
            Parameterization::Offset { eta, .. } => {
                let d = z[self.lambda_index()] - 1.0;
                cost + eta * d * d
            }
            Parameterization::Blocked => cost,
        }
    }

    fn evaluation_of(&self, traj: &Trajectory, z: &DVector<f64>) -> Evaluation {
        let n = self.state_dim();
        let mut equalities = DVector::zeros(self.num_equalities());
        equalities
            .rows_mut(0, n)
            .copy_from(&(z.rows(0, n) - &self.x0));
        for (j, end) in traj.ends.iter().enumerate() {
            let next = z.rows(self.s_index(j + 1), n);
            equalities.rows_mut(n * (j + 1), n).copy_from(&(next - end));
        }
        let terminal = self.terminal_node(z);
        let inequalities = DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|row| match row {
                IneqRow::StateUpper { k, i, bound } => traj.states[*k][*i] - bound,
                IneqRow::StateLower { k, i, bound } => bound - traj.states[*k][*i],
                IneqRow::Linear { coefficients, rhs } => {
                    coefficients.iter().map(|&(c, a)| a * z[c]).sum::<f64>() - rhs
                }
                IneqRow::Terminal => self.cons.terminal.margin(&terminal),
            }),
        );
        Evaluation {
            objective: self.objective_of(traj, z),
            equalities,
            inequalities,
        }
    }

    /// Local decision columns of block `j`: `s_j`, `ū_j` and (offset) `λ`.
    fn local_columns(&self, j: usize) -> Vec<usize> {
        let mut cols: Vec<usize> = (self.s_index(j)..self.s_index(j) + self.state_dim()).collect();
        cols.extend(self.u_index(j)..self.u_index(j) + self.input_dim());
        if self.is_offset() {
            cols.push(self.lambda_index());
        }
        cols
    }

    /// Central-difference sensitivities of block `j`'s states w.r.t. its local columns:
    /// entry `l` is the `n × nv` Jacobian of `x_{start+1+l}`.
    fn block_sensitivities(&self, j: usize, z: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        let n = self.state_dim();
        let m = self.input_dim();
        let cols = self.local_columns(j);
        let len = self.pattern.lengths()[j];
        let mut sens = vec![DMatrix::zeros(n, cols.len()); len];
        let s = z.rows(self.s_index(j), n).into_owned();
        let ubar = z.rows(self.u_index(j), m).into_owned();
        let lambda = self.lambda(z);
        for (c, &col) in cols.iter().enumerate() {
            let h = stencil_width(z[col]);
            let (mut sp, mut sm) = (s.clone(), s.clone());
            let (mut up, mut um) = (ubar.clone(), ubar.clone());
            let (mut lp, mut lm) = (lambda, lambda);
            if c < n {
                sp[c] += h;
                sm[c] -= h;
            } else if c < n + m {
                up[c - n] += h;
                um[c - n] -= h;
            } else {
                lp += h;
                lm -= h;
            }
            let plus = self.block_states(j, &sp, &up, lp)?;
            let minus = self.block_states(j, &sm, &um, lm)?;
            for (l, (xp, xm)) in plus.iter().zip(&minus).enumerate() {
                sens[l].set_column(c, &((xp - xm) / (2.0 * h)));
            }
        }
        Ok(sens)
    }

    /// Declared nonzero pattern of the constraint Jacobian as `(row, column)`
    /// triplets; equality rows come first, then inequality rows.
    pub fn jacobian_sparsity(&self) -> Vec<(usize, usize)> {
        let n = self.state_dim();
        let mut out = Vec::new();
        for i in 0..n {
            out.push((i, i));
        }
        for j in 0..self.num_blocks() {
            let lambda_dep = self.block_lambda_dependence(j, self.pattern.lengths()[j]);
            for i in 0..n {
                let row = n * (j + 1) + i;
                for col in self.dependence_columns(j, lambda_dep) {
                    out.push((row, col));
                }
                out.push((row, self.s_index(j + 1) + i));
            }
        }
        let me = self.num_equalities();
        for (r, row) in self.rows.iter().enumerate() {
            let row_index = me + r;
            match row {
                IneqRow::StateUpper { k, .. } | IneqRow::StateLower { k, .. } => {
                    let j = self.pattern.block_of(*k);
                    let steps = k - self.pattern.start(j);
                    for col in self.dependence_columns(j, self.block_lambda_dependence(j, steps)) {
                        out.push((row_index, col));
                    }
                }
                IneqRow::Linear { coefficients, .. } => {
                    out.extend(coefficients.iter().map(|&(c, _)| (row_index, c)));
                }
                IneqRow::Terminal => {
                    let s = self.s_index(self.num_blocks());
                    out.extend((s..s + n).map(|c| (row_index, c)));
                }
            }
        }
        out
    }

    /// Whether the first `steps` inputs of block `j` carry a nonzero warm-start.
    fn block_lambda_dependence(&self, j: usize, steps: usize) -> bool {
        match self.warm() {
            Some(w) => {
                let start = self.pattern.start(j);
                w[start..start + steps]
                    .iter()
                    .any(|u| u.iter().any(|&v| v != 0.0))
            }
            None => false,
        }
    }

    fn dependence_columns(&self, j: usize, lambda: bool) -> Vec<usize> {
        let mut cols: Vec<usize> = (self.s_index(j)..self.s_index(j) + self.state_dim()).collect();
        cols.extend(self.u_index(j)..self.u_index(j) + self.input_dim());
        if lambda {
            cols.push(self.lambda_index());
        }
        cols
    }

    /// Human-readable dimensions for diagnostics.
    pub fn summary(&self) -> ProblemSummary {
        ProblemSummary {
            horizon: self.horizon(),
            blocks: self.num_blocks(),
            offset: self.is_offset(),
            variables: self.num_variables(),
            equalities: self.num_equalities(),
            inequalities: self.num_inequalities(),
            jacobian_nonzeros: self.jacobian_sparsity().len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemSummary {
    pub horizon: usize,
    pub blocks: usize,
    pub offset: bool,
    pub variables: usize,
    pub equalities: usize,
    pub inequalities: usize,
    pub jacobian_nonzeros: usize,
}

impl fmt::Display for ProblemSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N={} M={} offset={} variables={} equalities={} inequalities={} jacobian_nnz={}",
            self.horizon,
            self.blocks,
            self.offset,
            self.variables,
            self.equalities,
            self.inequalities,
            self.jacobian_nonzeros
        )
    }
}

impl Nlp for NlpProblem {
    fn num_variables(&self) -> usize {
        self.num_blocks() * self.stride() + self.state_dim() + usize::from(self.is_offset())
    }

    fn num_equalities(&self) -> usize {
        self.state_dim() * (self.num_blocks() + 1)
    }

    fn num_inequalities(&self) -> usize {
        self.rows.len()
    }

    fn evaluate(&self, z: &DVector<f64>) -> Result<Evaluation> {
        let traj = self.simulate(z)?;
        Ok(self.evaluation_of(&traj, z))
    }

    fn linearize(&self, z: &DVector<f64>) -> Result<Linearization> {
        let traj = self.simulate(z)?;
        let eval = self.evaluation_of(&traj, z);
        let n = self.state_dim();
        let m = self.input_dim();
        let nv = self.num_variables();
        let sens: Vec<Vec<DMatrix<f64>>> = (0..self.num_blocks())
            .map(|j| self.block_sensitivities(j, z))
            .collect::<Result<_>>()?;
        let locals: Vec<Vec<usize>> = (0..self.num_blocks())
            .map(|j| self.local_columns(j))
            .collect();

        // state derivative of x_k w.r.t. local columns of its block
        let state_jac = |k: usize| -> (usize, DMatrix<f64>) {
            let j = self.pattern.block_of(k);
            let offset = k - self.pattern.start(j);
            if offset == 0 {
                let mut d = DMatrix::zeros(n, locals[j].len());
                d.view_mut((0, 0), (n, n)).fill_with_identity();
                (j, d)
            } else {
                (j, sens[j][offset - 1].clone())
            }
        };

        let offset = self.is_offset();
        let n_res = self.horizon() * (n + m) + n + usize::from(offset);
        let mut residuals = DVector::zeros(n_res);
        let mut jr = DMatrix::zeros(n_res, nv);
        for k in 0..self.horizon() {
            let base = k * (n + m);
            let (j, dx) = state_jac(k);
            residuals
                .rows_mut(base, n)
                .copy_from(&(&self.q_factor * &traj.states[k]));
            residuals
                .rows_mut(base + n, m)
                .copy_from(&(&self.r_factor * &traj.inputs[k]));
            let fdx = &self.q_factor * dx;
            for (c, &col) in locals[j].iter().enumerate() {
                jr.view_mut((base, col), (n, 1)).copy_from(&fdx.column(c));
            }
            let ucol = self.u_index(j);
            jr.view_mut((base + n, ucol), (m, m))
                .copy_from(&self.r_factor);
            if let Some(w) = self.warm() {
                let col = self.lambda_index();
                jr.view_mut((base + n, col), (m, 1))
                    .copy_from(&(&self.r_factor * &w[k]));
            }
        }
        let tbase = self.horizon() * (n + m);
        let terminal = self.terminal_node(z);
        residuals
            .rows_mut(tbase, n)
            .copy_from(&(&self.p_factor * &terminal));
        let scol = self.s_index(self.num_blocks());
        jr.view_mut((tbase, scol), (n, n)).copy_from(&self.p_factor);
        if let Parameterization::Offset { eta, .. } = &self.param {
            let root = eta.sqrt();
            residuals[n_res - 1] = root * (z[self.lambda_index()] - 1.0);
            jr[(n_res - 1, self.lambda_index())] = root;
        }

        let mut jh = DMatrix::zeros(self.num_equalities(), nv);
        jh.view_mut((0, 0), (n, n)).fill_with_identity();
        for j in 0..self.num_blocks() {
            let end = sens[j].last().expect("blocks are non-empty");
            let row = n * (j + 1);
            for (c, &col) in locals[j].iter().enumerate() {
                for i in 0..n {
                    jh[(row + i, col)] -= end[(i, c)];
                }
            }
            for i in 0..n {
                jh[(row + i, self.s_index(j + 1) + i)] += 1.0;
            }
        }

        let mut jc = DMatrix::zeros(self.rows.len(), nv);
        let pt = self.cons.terminal.p() * &terminal * 2.0;
        for (r, row) in self.rows.iter().enumerate() {
            match row {
                IneqRow::StateUpper { k, i, .. } | IneqRow::StateLower { k, i, .. } => {
                    let sign = if matches!(row, IneqRow::StateUpper { .. }) {
                        1.0
                    } else {
                        -1.0
                    };
                    let (j, dx) = state_jac(*k);
                    for (c, &col) in locals[j].iter().enumerate() {
                        jc[(r, col)] = sign * dx[(*i, c)];
                    }
                }
                IneqRow::Linear { coefficients, .. } => {
                    for &(col, a) in coefficients {
                        jc[(r, col)] += a;
                    }
                }
                IneqRow::Terminal => {
                    for i in 0..n {
                        jc[(r, scol + i)] = pt[i];
                    }
                }
            }
        }
        Ok(Linearization {
            eval,
            residuals,
            residual_jacobian: jr,
            eq_jacobian: jh,
            ineq_jacobian: jc,
        })
    }

    fn is_linear_inequality(&self, row: usize) -> bool {
        matches!(self.rows[row], IneqRow::Linear { .. })
    }

    fn restore(&self, z: &DVector<f64>) -> Option<DVector<f64>> {
        let mut out = z.clone();
        self.fill_nodes(&mut out).ok()?;
        Some(out)
    }
}

/// Result of the exhaustive grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    /// Best admissible blocked sequence and its cost, if any grid point is admissible.
    pub best: Option<(Vec<InputVector>, f64)>,
    pub evaluated: usize,
    pub admissible: usize,
    /// Largest cost difference between grid neighbours that are both admissible.
    pub cell_bound: f64,
}

pub const BRUTE_FORCE_MAX_DIM: usize = 4;
pub const BRUTE_FORCE_MAX_GRID: usize = 21;

/// Exhaustive search over a uniform grid on the input box for the blocked problem.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_solve(
    model: &SystemModel,
    cost: &CostSpec,
    cons: &ConstraintSet,
    x0: &StateVector,
    horizon: usize,
    pattern: &BlockingPattern,
    grid_points_per_dim: usize,
    exec: Execution,
) -> Result<BruteForceResult> {
    let m = model.input_dim();
    let dims = m * pattern.num_blocks();
    if dims > BRUTE_FORCE_MAX_DIM
        || !(2..=BRUTE_FORCE_MAX_GRID).contains(&grid_points_per_dim)
    {
        return Err(Error::Tractability(format!(
            "grid search needs m·M ≤ {BRUTE_FORCE_MAX_DIM} and 2 ≤ points ≤ {BRUTE_FORCE_MAX_GRID} (got m·M = {dims}, points = {grid_points_per_dim})"
        )));
    }
    if pattern.horizon() != horizon {
        return Err(Error::Parameter(
            "blocking pattern does not match the horizon".into(),
        ));
    }
    check_len("initial state", model.state_dim(), x0.len())?;
    let g = grid_points_per_dim;
    let total = g.pow(dims as u32);
    let ib = &cons.input_box;
    let axis = |d: usize, t: usize| {
        let i = d % m;
        let (lo, hi) = (ib.lower()[i], ib.upper()[i]);
        lo + (hi - lo) * t as f64 / (g - 1) as f64
    };
    let digits = |mut idx: usize| {
        let mut out = vec![0; dims];
        for d in out.iter_mut() {
            *d = idx % g;
            idx /= g;
        }
        out
    };
    let blocked_at = |idx: usize| -> Vec<InputVector> {
        let t = digits(idx);
        (0..pattern.num_blocks())
            .map(|j| DVector::from_fn(m, |i, _| axis(j * m + i, t[j * m + i])))
            .collect()
    };
    let costs: Vec<Option<f64>> = exec.map_range(total, |idx| {
        let inputs = pattern.expand(&blocked_at(idx)).ok()?;
        let report = evaluate_admissibility(model, cons, x0, &inputs).ok()?;
        if !report.feasible {
            return None;
        }
        cost.total_cost(model, x0, &inputs).ok()
    });
    let mut best: Option<(usize, f64)> = None;
    let mut cell_bound = 0.0_f64;
    let mut admissible = 0;
    let mut stride = 1;
    let strides: Vec<usize> = (0..dims)
        .map(|_| {
            let s = stride;
            stride *= g;
            s
        })
        .collect();
    for (idx, c) in costs.iter().enumerate() {
        let Some(c) = *c else { continue };
        admissible += 1;
        if best.is_none_or(|(_, b)| c < b) {
            best = Some((idx, c));
        }
        let t = digits(idx);
        for (d, &s) in strides.iter().enumerate() {
            if t[d] + 1 < g {
                if let Some(other) = costs[idx + s] {
                    cell_bound = cell_bound.max((other - c).abs());
                }
            }
        }
    }
    Ok(BruteForceResult {
        best: best.map(|(idx, c)| (blocked_at(idx), c)),
        evaluated: total,
        admissible,
        cell_bound,
    })
}
