//! Stabilizing terminal ingredients: scaled discrete Riccati solution, LQR gain,
//! local control law, terminal level set and its sampling certificate.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::bounds::BoxBounds;
use crate::dynamics::{check_len, InputVector, StateVector, SystemModel};
use crate::error::{Error, Result};
use crate::objective::{quad_form, CostSpec};
use crate::parallel::Execution;

pub const DARE_MAX_ITERATIONS: usize = 100_000;
pub const DARE_TOLERANCE: f64 = 1e-12;
pub const DARE_RESIDUAL_TOL: f64 = 1e-8;
/// Slack added to `π` in every membership test.
pub const MEMBERSHIP_SLACK: f64 = 1e-12;
/// Allowed excess in the local decrease condition.
pub const CLF_SLACK: f64 = 1e-9;

/// `P`, `K`, level `π` and Riccati scaling `ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub pi: f64,
    pub rho: f64,
}

/// Sublevel set `{x : xᵀPx ≤ π}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSet {
    p: DMatrix<f64>,
    pi: f64,
}

impl TerminalSet {
    pub fn new(p: DMatrix<f64>, pi: f64) -> Result<Self> {
        if !(pi > 0.0 && pi.is_finite()) {
            return Err(Error::Parameter(format!(
                "terminal level must be positive, got {pi}"
            )));
        }
        Ok(Self { p, pi })
    }

    pub fn level(&self) -> f64 {
        self.pi
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn cost(&self, x: &StateVector) -> f64 {
        quad_form(&self.p, x.as_slice())
    }

    /// `ℓ_f(x) − π`; non-positive inside.
    pub fn margin(&self, x: &StateVector) -> f64 {
        self.cost(x) - self.pi
    }

    pub fn contains(&self, x: &StateVector) -> bool {
        self.cost(x) <= self.pi + MEMBERSHIP_SLACK
    }
}

impl TerminalIngredients {
    pub fn new(p: DMatrix<f64>, k: DMatrix<f64>, pi: f64, rho: f64) -> Result<Self> {
        if !p.is_square() || k.ncols() != p.nrows() {
            return Err(Error::Parameter("P must be n×n and K must be m×n".into()));
        }
        if !(pi > 0.0 && pi.is_finite()) {
            return Err(Error::Parameter(format!(
                "terminal level must be positive, got {pi}"
            )));
        }
        if !(rho >= 1.0 && rho.is_finite()) {
            return Err(Error::Parameter(format!(
                "Riccati scaling must be at least 1, got {rho}"
            )));
        }
        Ok(Self { p, k, pi, rho })
    }

    pub fn with_level(&self, pi: f64) -> Result<Self> {
        Self::new(self.p.clone(), self.k.clone(), pi, self.rho)
    }

    pub fn terminal_set(&self) -> TerminalSet {
        TerminalSet {
            p: self.p.clone(),
            pi: self.pi,
        }
    }

    pub fn terminal_cost(&self, x: &StateVector) -> f64 {
        quad_form(&self.p, x.as_slice())
    }

    pub fn contains(&self, x: &StateVector) -> bool {
        self.terminal_cost(x) <= self.pi + MEMBERSHIP_SLACK
    }

    /// Local law `κ_f(x) = −Kx`.
    pub fn local_control(&self, x: &StateVector) -> InputVector {
        -(&self.k * x)
    }
}

/// Residual `‖AᵀPA − AᵀPB(ρR + BᵀPB)⁻¹BᵀPA + ρQ − P‖_F`.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    rho: f64,
    p: &DMatrix<f64>,
) -> Result<f64> {
    Ok((riccati_map(a, b, q, r, rho, p)? - p).norm())
}

fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    rho: f64,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let at_p = a.transpose() * p;
    let bt_p = b.transpose() * p;
    let inner = r * rho + &bt_p * b;
    let inner_inv = inner.try_inverse().ok_or(Error::Singular("ρR + BᵀPB"))?;
    let next = &at_p * a - (&at_p * b) * inner_inv * (&bt_p * a) + q * rho;
    // symmetrize against rounding drift
    Ok((&next + next.transpose()) * 0.5)
}

fn check_lqr_shapes(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<()> {
    let n = a.nrows();
    if !a.is_square()
        || b.nrows() != n
        || q.shape() != (n, n)
        || r.shape() != (b.ncols(), b.ncols())
    {
        return Err(Error::Parameter("inconsistent LQR matrix shapes".into()));
    }
    Ok(())
}

/// Solves the scaled DARE `P = AᵀPA − AᵀPB(ρR + BᵀPB)⁻¹BᵀPA + ρQ` by fixed-point
/// iteration from `P₀ = ρQ`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    rho: f64,
) -> Result<DMatrix<f64>> {
    check_lqr_shapes(a, b, q, r)?;
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(Error::Parameter(format!(
            "Riccati scaling must be at least 1, got {rho}"
        )));
    }
    let mut p = q * rho;
    let mut difference = f64::INFINITY;
    let mut converged = false;
    for _ in 0..DARE_MAX_ITERATIONS {
        let next = riccati_map(a, b, q, r, rho, &p)?;
        difference = (&next - &p).norm();
        p = next;
        if !difference.is_finite() {
            break;
        }
        if difference <= DARE_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations: DARE_MAX_ITERATIONS,
            difference,
        });
    }
    let k = lqr_gain(a, b, &p, r, rho)?;
    let radius = spectral_radius(&(a - b * &k));
    if radius >= 1.0 {
        return Err(Error::NotStabilizable { radius });
    }
    Ok(p)
}

/// `K = (ρR + BᵀPB)⁻¹BᵀPA`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    p: &DMatrix<f64>,
    r: &DMatrix<f64>,
    rho: f64,
) -> Result<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let inner = r * rho + &bt_p * b;
    let inner_inv = inner.try_inverse().ok_or(Error::Singular("ρR + BᵀPB"))?;
    Ok(inner_inv * bt_p * a)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Linearizes `model` at its steady state and builds `P`, `K` for the given weights.
pub fn design_terminal(
    model: &SystemModel,
    cost: &CostSpec,
    rho: f64,
    pi: f64,
) -> Result<TerminalIngredients> {
    let (xs, us) = model.steady_state();
    let (a, b) = model.linearize(xs, us)?;
    let p = solve_dare(&a, &b, cost.q(), cost.r(), rho)?;
    let k = lqr_gain(&a, &b, &p, cost.r(), rho)?;
    TerminalIngredients::new(p, k, pi, rho)
}

/// Applies the local law `horizon` times starting from `x ∈ X_f`.
pub fn local_warmstart(
    model: &SystemModel,
    ing: &TerminalIngredients,
    x: &StateVector,
    horizon: usize,
) -> Result<Vec<InputVector>> {
    check_len("state", model.state_dim(), x.len())?;
    let cost = ing.terminal_cost(x);
    if cost > ing.pi + MEMBERSHIP_SLACK {
        return Err(Error::OutsideTerminalSet {
            cost,
            level: ing.pi,
        });
    }
    let mut state = x.clone();
    let mut inputs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let u = ing.local_control(&state);
        state = model.transition(&state, &u);
        inputs.push(u);
    }
    Ok(inputs)
}

/// Worst observed value of one certificate check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub pass: bool,
    /// Largest `value − limit` over all samples; the check passes iff this is ≤ the allowed slack.
    pub worst_margin: f64,
    pub witness: Option<StateVector>,
}

/// Sampling certificate for the terminal ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCertificate {
    pub pi: f64,
    pub rho: f64,
    pub samples: usize,
    pub invariance: CheckOutcome,
    pub decrease: CheckOutcome,
    pub input_admissible: CheckOutcome,
    pub state_admissible: CheckOutcome,
    pub pass: bool,
}

impl fmt::Display for TerminalCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pi = {}", self.pi)?;
        writeln!(f, "rho = {}", self.rho)?;
        writeln!(f, "samples = {}", self.samples)?;
        for (name, check) in [
            ("invariance", &self.invariance),
            ("clf_decrease", &self.decrease),
            ("input_admissible", &self.input_admissible),
            ("state_admissible", &self.state_admissible),
        ] {
            writeln!(f, "{name}.pass = {}", check.pass)?;
            writeln!(f, "{name}.worst_margin = {:e}", check.worst_margin)?;
            if let Some(w) = &check.witness {
                let coords: Vec<String> = w.iter().map(|v| v.to_string()).collect();
                writeln!(f, "{name}.witness = {}", coords.join(", "))?;
            }
        }
        writeln!(f, "pass = {}", self.pass)
    }
}

/// Van der Corput radical inverse of `index` in `base`.
fn radical_inverse(mut index: usize, base: usize) -> f64 {
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base) as f64 * scale;
        index /= base;
        scale *= inv;
    }
    value
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Point `i` of the deterministic sampling of the unit ball: even indices lie on
/// the sphere, odd ones inside with radius `h^(1/n)`.
fn unit_ball_sample(i: usize, n: usize) -> DVector<f64> {
    let idx = i / 2 + 1;
    let mut dir = if n == 1 {
        DVector::from_element(1, if idx % 2 == 0 { 1.0 } else { -1.0 })
    } else if n == 2 {
        let angle = 2.0 * std::f64::consts::PI * radical_inverse(idx, PRIMES[0]);
        DVector::from_vec(vec![angle.cos(), angle.sin()])
    } else {
        DVector::from_fn(n, |j, _| {
            2.0 * radical_inverse(idx, PRIMES[j % PRIMES.len()]) - 1.0
        })
    };
    let norm = dir.norm();
    if norm < 1e-12 {
        dir = DVector::zeros(n);
        dir[0] = 1.0;
    } else {
        dir /= norm;
    }
    if i % 2 == 0 {
        dir
    } else {
        let h = radical_inverse(idx, PRIMES[n.min(PRIMES.len() - 1)]);
        dir * h.powf(1.0 / n as f64)
    }
}

/// Boundary maximizers `±√π·P⁻¹c / √(cᵀP⁻¹c)` of every linear functional `c`
/// constrained by a box (state coordinates and rows of `K`).
fn support_points(ing: &TerminalIngredients, p_inv: &DMatrix<f64>) -> Vec<StateVector> {
    let n = ing.p.nrows();
    let mut functionals: Vec<DVector<f64>> = (0..n)
        .map(|j| {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            e
        })
        .collect();
    functionals.extend((0..ing.k.nrows()).map(|i| ing.k.row(i).transpose()));
    let mut points = Vec::new();
    for c in functionals {
        let pc = p_inv * &c;
        let scale = c.dot(&pc);
        if scale > 0.0 {
            let x = pc * (ing.pi / scale).sqrt();
            points.push(-&x);
            points.push(x);
        }
    }
    points
}

struct SampleMargins {
    invariance: f64,
    decrease: f64,
    input: f64,
    state: f64,
}

/// Checks invariance, local decrease and input/state admissibility of `X_f` on
/// `samples` deterministic points of the level set plus its box support points.
pub fn validate_terminal_set(
    model: &SystemModel,
    cost: &CostSpec,
    ing: &TerminalIngredients,
    state_box: &BoxBounds,
    input_box: &BoxBounds,
    samples: usize,
    exec: Execution,
) -> Result<TerminalCertificate> {
    if samples == 0 {
        return Err(Error::Parameter(
            "validation needs at least one sample".into(),
        ));
    }
    let n = model.state_dim();
    check_len("terminal matrix", n, ing.p.nrows())?;
    check_len("state box", n, state_box.dim())?;
    check_len("input box", model.input_dim(), input_box.dim())?;
    let chol = ing
        .p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Parameter("terminal matrix is not positive definite".into()))?;
    // x = √π L⁻ᵀ y maps the unit ball onto {xᵀPx ≤ π}
    let lt_inv = chol
        .l()
        .transpose()
        .try_inverse()
        .ok_or(Error::Singular("Cholesky factor of P"))?;
    let p_inv = chol.inverse();
    let scale = ing.pi.sqrt();

    let mut points: Vec<StateVector> =
        exec.map_range(samples, |i| &lt_inv * unit_ball_sample(i, n) * scale);
    points.extend(support_points(ing, &p_inv));

    let margins = exec.map_slice(&points, |x| {
        let u = ing.local_control(x);
        let next = model.transition(x, &u);
        let lf = ing.terminal_cost(x);
        let lf_next = ing.terminal_cost(&next);
        SampleMargins {
            invariance: lf_next - ing.pi,
            decrease: lf_next - lf + cost.stage(x, &u),
            input: input_box.signed_margin(&u),
            state: state_box.signed_margin(x),
        }
    });

    let reduce = |value: fn(&SampleMargins) -> f64, allowed: f64| {
        let mut worst = f64::NEG_INFINITY;
        let mut witness = None;
        for (x, m) in points.iter().zip(&margins) {
            let v = value(m);
            if v > worst || v.is_nan() {
                worst = v;
                witness = Some(x.clone());
            }
        }
        CheckOutcome {
            pass: worst <= allowed,
            worst_margin: worst,
            witness,
        }
    };
    let invariance = reduce(|m| m.invariance, MEMBERSHIP_SLACK);
    let decrease = reduce(|m| m.decrease, CLF_SLACK);
    let input_admissible = reduce(|m| m.input, 0.0);
    let state_admissible = reduce(|m| m.state, 0.0);
    let pass = invariance.pass && decrease.pass && input_admissible.pass && state_admissible.pass;
    Ok(TerminalCertificate {
        pi: ing.pi,
        rho: ing.rho,
        samples: points.len(),
        invariance,
        decrease,
        input_admissible,
        state_admissible,
        pass,
    })
}

/// Result of the level bisection.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Largest level found to pass validation.
    pub pi: f64,
    /// Smallest level found to fail (equal to `pi` when the box-support bound itself passes).
    pub upper: f64,
    pub evaluations: usize,
}

/// Largest `π` (up to `tolerance`) for which [`validate_terminal_set`] passes.
///
/// The search starts from the largest level whose ellipse still fits the state
/// and input boxes, then bisects.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_pi(
    model: &SystemModel,
    cost: &CostSpec,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    rho: f64,
    state_box: &BoxBounds,
    input_box: &BoxBounds,
    samples: usize,
    tolerance: f64,
    exec: Execution,
) -> Result<Calibration> {
    if !(tolerance > 0.0) {
        return Err(Error::Parameter(
            "calibration tolerance must be positive".into(),
        ));
    }
    let p_inv = p.clone().try_inverse().ok_or(Error::Singular("P"))?;
    // largest level whose ellipse fits every finite box face
    let mut hi = f64::INFINITY;
    let mut fit = |c: DVector<f64>, lo: f64, up: f64| {
        let s = c.dot(&(&p_inv * &c));
        let limit = lo.abs().min(up.abs());
        if s > 0.0 && limit.is_finite() {
            hi = hi.min(limit * limit / s);
        }
    };
    for j in 0..p.nrows() {
        let mut e = DVector::zeros(p.nrows());
        e[j] = 1.0;
        fit(e, state_box.lower()[j], state_box.upper()[j]);
    }
    for i in 0..k.nrows() {
        fit(
            k.row(i).transpose(),
            input_box.lower()[i],
            input_box.upper()[i],
        );
    }
    if !hi.is_finite() {
        hi = 1e6;
    }
    let passes = |level: f64| -> Result<bool> {
        let ing = TerminalIngredients::new(p.clone(), k.clone(), level, rho)?;
        Ok(validate_terminal_set(model, cost, &ing, state_box, input_box, samples, exec)?.pass)
    };
    let mut evaluations = 1;
    if passes(hi)? {
        return Ok(Calibration {
            pi: hi,
            upper: hi,
            evaluations,
        });
    }
    let mut lo = 0.0;
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        evaluations += 1;
        if passes(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo <= 0.0 {
        return Err(Error::Design(format!(
            "no positive terminal level passes validation (smallest failing level {hi:e})"
        )));
    }
    Ok(Calibration {
        pi: lo,
        upper: hi,
        evaluations,
    })
}
