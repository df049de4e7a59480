//! Quadratic stage, terminal and horizon costs.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::dynamics::{check_len, InputVector, OpenLoopTrajectory, StateVector, SystemModel};
use crate::error::{Error, Result};

/// Positivity threshold for the minimal eigenvalue of each weight.
pub const POSITIVITY_TOL: f64 = 1e-12;

/// Weights of `ℓ(x, u) = xᵀQx + uᵀRu` and `ℓ_f(x) = xᵀPx`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    p: DMatrix<f64>,
}

/// Minimal eigenvalues of the three weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub min_eig_q: f64,
    pub min_eig_r: f64,
    pub min_eig_p: f64,
    pub pass: bool,
}

impl CostSpec {
    /// Builds a cost and rejects weights that are not symmetric positive definite.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        let spec = Self::unchecked(q, r, p)?;
        let report = spec.verify_comparison_bounds();
        if !report.pass {
            return Err(Error::Parameter(format!(
                "cost weights must be positive definite (min eigenvalues Q {:e}, R {:e}, P {:e})",
                report.min_eig_q, report.min_eig_r, report.min_eig_p
            )));
        }
        Ok(spec)
    }

    /// Builds a cost with only shape and symmetry checks.
    pub fn unchecked(q: DMatrix<f64>, r: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        for (name, w) in [("Q", &q), ("R", &r), ("P", &p)] {
            if !w.is_square() {
                return Err(Error::Parameter(format!("{name} must be square")));
            }
            if (w - w.transpose()).amax() > 1e-12 * w.amax().max(1.0) {
                return Err(Error::Parameter(format!("{name} must be symmetric")));
            }
        }
        if q.nrows() != p.nrows() {
            return Err(Error::Parameter("Q and P must have the same size".into()));
        }
        Ok(Self { q, r, p })
    }

    /// Diagonal `Q`, scalar-times-identity `R` and the given `P`.
    pub fn diagonal(q_diag: &[f64], r: f64, m: usize, p: DMatrix<f64>) -> Result<Self> {
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(q_diag));
        Self::new(q, DMatrix::identity(m, m) * r, p)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }

    /// Same weights with a different terminal matrix.
    pub fn with_terminal(&self, p: DMatrix<f64>) -> Result<Self> {
        Self::new(self.q.clone(), self.r.clone(), p)
    }

    pub fn stage_cost(&self, x: &StateVector, u: &InputVector) -> Result<f64> {
        check_len("state", self.q.nrows(), x.len())?;
        check_len("input", self.r.nrows(), u.len())?;
        Ok(self.stage(x, u))
    }

    pub fn terminal_cost(&self, x: &StateVector) -> Result<f64> {
        check_len("state", self.p.nrows(), x.len())?;
        Ok(self.terminal(x))
    }

    #[inline]
    pub(crate) fn stage(&self, x: &StateVector, u: &InputVector) -> f64 {
        quad_form(&self.q, x.as_slice()) + quad_form(&self.r, u.as_slice())
    }

    #[inline]
    pub(crate) fn terminal(&self, x: &StateVector) -> f64 {
        quad_form(&self.p, x.as_slice())
    }

    /// Horizon cost `Σ ℓ(φ(k), u(k)) + ℓ_f(φ(N))`, fused with the rollout.
    pub fn total_cost(
        &self,
        model: &SystemModel,
        x0: &StateVector,
        inputs: &[InputVector],
    ) -> Result<f64> {
        if inputs.is_empty() {
            return Err(Error::Parameter("cost needs at least one input".into()));
        }
        self.check_model(model)?;
        check_len("initial state", model.state_dim(), x0.len())?;
        let mut x = x0.clone();
        let mut cost = 0.0;
        for (k, u) in inputs.iter().enumerate() {
            check_len("input", model.input_dim(), u.len())?;
            cost += self.stage(&x, u);
            x = model.transition(&x, u);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow { index: k + 1 });
            }
        }
        Ok(cost + self.terminal(&x))
    }

    /// Horizon cost together with the trajectory that produced it.
    pub fn total_cost_with_trajectory(
        &self,
        model: &SystemModel,
        x0: &StateVector,
        inputs: &[InputVector],
    ) -> Result<(f64, OpenLoopTrajectory)> {
        self.check_model(model)?;
        let traj = model.rollout(x0, inputs)?;
        Ok((self.trajectory_cost(&traj), traj))
    }

    /// Cost of an already simulated trajectory, summed in horizon order.
    pub fn trajectory_cost(&self, traj: &OpenLoopTrajectory) -> f64 {
        let mut cost = 0.0;
        for (x, u) in traj.states.iter().zip(&traj.inputs) {
            cost += self.stage(x, u);
        }
        cost + self.terminal(traj.terminal_state())
    }

    pub fn verify_comparison_bounds(&self) -> ComparisonReport {
        let min_eig_q = min_eigenvalue(&self.q);
        let min_eig_r = min_eigenvalue(&self.r);
        let min_eig_p = min_eigenvalue(&self.p);
        ComparisonReport {
            min_eig_q,
            min_eig_r,
            min_eig_p,
            pass: [min_eig_q, min_eig_r, min_eig_p]
                .iter()
                .all(|&e| e > POSITIVITY_TOL),
        }
    }

    fn check_model(&self, model: &SystemModel) -> Result<()> {
        check_len("model state dimension", self.q.nrows(), model.state_dim())?;
        check_len("model input dimension", self.r.nrows(), model.input_dim())
    }
}

/// `vᵀ W v`, accumulated row by row.
#[inline]
pub(crate) fn quad_form(w: &DMatrix<f64>, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, vi) in v.iter().enumerate() {
        let mut row = 0.0;
        for (j, vj) in v.iter().enumerate() {
            row += w[(i, j)] * vj;
        }
        acc += vi * row;
    }
    acc
}

/// Smallest eigenvalue of a symmetric matrix (Householder tridiagonalization + QL).
pub fn min_eigenvalue(w: &DMatrix<f64>) -> f64 {
    if w.is_empty() {
        return f64::NAN;
    }
    SymmetricEigen::new(w.clone()).eigenvalues.min()
}
