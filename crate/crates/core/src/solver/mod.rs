//! Nonlinear programming: the problem interface, a dense dual active-set QP
//! and the SQP driver with its monotone-improvement acceptance contract.

pub mod qp;
mod sqp;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

pub use sqp::{
    solve, solve_feasibility, IterateRecord, SolveOutcome, SolveStatus, SolverConfig, TIE_TOLERANCE,
};

/// Values of `f`, `h` (`h = 0`) and `c` (`c ≤ 0`) at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub equalities: DVector<f64>,
    pub inequalities: DVector<f64>,
}

impl Evaluation {
    /// Largest equality residual or positive inequality value.
    pub fn violation(&self) -> f64 {
        let eq = self.equalities.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        self.inequalities.iter().fold(eq, |a, v| a.max(*v))
    }

    /// `‖h‖₁ + Σ max(c, 0)`, the infeasibility measure of the ℓ1 merit.
    pub fn l1_violation(&self) -> f64 {
        self.equalities.iter().map(|v| v.abs()).sum::<f64>()
            + self.inequalities.iter().map(|v| v.max(0.0)).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.objective.is_finite()
            && self.equalities.iter().all(|v| v.is_finite())
            && self.inequalities.iter().all(|v| v.is_finite())
    }
}

/// First-order data at one point. The objective is a sum of squares `‖r‖²`
/// (plus a constant), which supplies Gauss–Newton curvature `2 JᵣᵀJᵣ`.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub eval: Evaluation,
    pub residuals: DVector<f64>,
    pub residual_jacobian: DMatrix<f64>,
    pub eq_jacobian: DMatrix<f64>,
    pub ineq_jacobian: DMatrix<f64>,
}

impl Linearization {
    /// `∇f = 2 Jᵣᵀ r`.
    pub fn gradient(&self) -> DVector<f64> {
        self.residual_jacobian.tr_mul(&self.residuals) * 2.0
    }
}

/// A nonlinear program `min f(z)` subject to `h(z) = 0`, `c(z) ≤ 0`.
pub trait Nlp {
    fn num_variables(&self) -> usize;
    fn num_equalities(&self) -> usize;
    fn num_inequalities(&self) -> usize;
    fn evaluate(&self, z: &DVector<f64>) -> Result<Evaluation>;
    fn linearize(&self, z: &DVector<f64>) -> Result<Linearization>;

    /// Whether inequality `row` is affine in `z`.
    fn is_linear_inequality(&self, _row: usize) -> bool {
        false
    }

    /// Optional projection onto a structurally consistent point (for shooting
    /// problems: re-simulating the states from the inputs).
    fn restore(&self, _z: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}
