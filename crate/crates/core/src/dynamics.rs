//! Discrete-time system models: single-step transition, open-loop rollout and
//! central-difference linearization.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type StateVector = DVector<f64>;
pub type InputVector = DVector<f64>;

/// Transition map `x⁺ = f(x, u)`. Must be a pure function of its arguments.
pub type Transition = dyn Fn(&StateVector, &InputVector) -> StateVector + Send + Sync;

/// Relative and absolute width of the central-difference stencil.
pub const FD_STENCIL: f64 = 1e-6;

/// Stencil width used for a coordinate with value `v`: `max(1e-6, 1e-6·|v|)`.
#[inline]
pub fn stencil_width(v: f64) -> f64 {
    FD_STENCIL * v.abs().max(1.0)
}

#[derive(Clone)]
pub struct SystemModel {
    name: String,
    n: usize,
    m: usize,
    transition: Arc<Transition>,
    steady_state: (StateVector, InputVector),
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .finish()
    }
}

/// States and inputs of an open-loop prediction; `states[k + 1] = f(states[k], inputs[k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopTrajectory {
    pub states: Vec<StateVector>,
    pub inputs: Vec<InputVector>,
}

impl OpenLoopTrajectory {
    pub fn terminal_state(&self) -> &StateVector {
        self.states
            .last()
            .expect("trajectory holds at least the initial state")
    }
}

impl SystemModel {
    /// Builds a model and checks that the declared steady state is a fixed point.
    pub fn new<F>(
        name: impl Into<String>,
        n: usize,
        m: usize,
        transition: F,
        steady_state: (StateVector, InputVector),
    ) -> Result<Self>
    where
        F: Fn(&StateVector, &InputVector) -> StateVector + Send + Sync + 'static,
    {
        if n == 0 || m == 0 {
            return Err(Error::Parameter(format!(
                "model dimensions must be positive (n = {n}, m = {m})"
            )));
        }
        check_len("steady state", n, steady_state.0.len())?;
        check_len("steady input", m, steady_state.1.len())?;
        let next = transition(&steady_state.0, &steady_state.1);
        check_len("transition output", n, next.len())?;
        if next != steady_state.0 {
            return Err(Error::Parameter(
                "declared steady state is not a fixed point of the transition".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            n,
            m,
            transition: Arc::new(transition),
            steady_state,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn steady_state(&self) -> (&StateVector, &InputVector) {
        (&self.steady_state.0, &self.steady_state.1)
    }

    /// `f(x, u)` with dimension checks.
    pub fn step(&self, x: &StateVector, u: &InputVector) -> Result<StateVector> {
        check_len("state", self.n, x.len())?;
        check_len("input", self.m, u.len())?;
        Ok((self.transition)(x, u))
    }

    /// `f(x, u)` without checks, for inner loops whose dimensions are already validated.
    #[inline]
    pub(crate) fn transition(&self, x: &StateVector, u: &InputVector) -> StateVector {
        (self.transition)(x, u)
    }

    /// Iterates the transition map over `inputs`, starting from `x0`.
    pub fn rollout(&self, x0: &StateVector, inputs: &[InputVector]) -> Result<OpenLoopTrajectory> {
        if inputs.is_empty() {
            return Err(Error::Parameter("rollout needs at least one input".into()));
        }
        check_len("initial state", self.n, x0.len())?;
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.clone());
        for (k, u) in inputs.iter().enumerate() {
            check_len("input", self.m, u.len())?;
            let next = self.transition(&states[k], u);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow { index: k + 1 });
            }
            states.push(next);
        }
        Ok(OpenLoopTrajectory {
            states,
            inputs: inputs.to_vec(),
        })
    }

    /// Central-difference Jacobians `(∂f/∂x, ∂f/∂u)` at `(x, u)`.
    pub fn linearize(
        &self,
        x: &StateVector,
        u: &InputVector,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.linearize_with(x, u, stencil_width)
    }

    /// Same as [`linearize`](Self::linearize) with a caller-provided stencil width.
    pub fn linearize_with(
        &self,
        x: &StateVector,
        u: &InputVector,
        width: impl Fn(f64) -> f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_len("state", self.n, x.len())?;
        check_len("input", self.m, u.len())?;
        if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linearization point".into()));
        }
        let mut a = DMatrix::zeros(self.n, self.n);
        let mut b = DMatrix::zeros(self.n, self.m);
        for j in 0..self.n {
            let h = width(x[j]);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let col = (self.transition(&xp, u) - self.transition(&xm, u)) / (xp[j] - xm[j]);
            a.set_column(j, &col);
        }
        for j in 0..self.m {
            let h = width(u[j]);
            let (mut up, mut um) = (u.clone(), u.clone());
            up[j] += h;
            um[j] -= h;
            let col = (self.transition(x, &up) - self.transition(x, &um)) / (up[j] - um[j]);
            b.set_column(j, &col);
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linearization".into()));
        }
        Ok((a, b))
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}

/// Explicit-Euler discretization of the forced Van der Pol oscillator:
///
/// ```text
/// x1⁺ = x1 + ts·x2
/// x2⁺ = x2 + ts·u − ts·x1 + ts·x2·(1 − x1²)
/// ```
pub fn vdp_model(ts: f64) -> Result<SystemModel> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::Parameter(format!(
            "step size must be positive, got {ts}"
        )));
    }
    SystemModel::new(
        "van-der-pol",
        2,
        1,
        move |x: &StateVector, u: &InputVector| {
            let (x1, x2) = (x[0], x[1]);
            StateVector::from_vec(vec![
                x1 + ts * x2,
                x2 + ts * u[0] - ts * x1 + ts * x2 * (1.0 - x1 * x1),
            ])
        },
        (StateVector::zeros(2), InputVector::zeros(1)),
    )
}

/// Linear time-invariant model `x⁺ = A x + B u` with steady state at the origin.
pub fn linear_model(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<SystemModel> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Parameter(
            "A must be square and B must have as many rows as A".into(),
        ));
    }
    let m = b.ncols();
    SystemModel::new(
        "linear",
        n,
        m,
        move |x: &StateVector, u: &InputVector| &a * x + &b * u,
        (StateVector::zeros(n), InputVector::zeros(m)),
    )
}
