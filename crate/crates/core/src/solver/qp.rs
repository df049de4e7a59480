//! Dense strictly convex quadratic programs by the Goldfarb–Idnani dual active-set method.
//!
//! ```text
//! minimize    ½ dᵀ H d + gᵀ d
//! subject to  A_eq d  = b_eq
//!             A_in d ≤ b_in
//! ```
//!
//! The method starts at the unconstrained minimizer and adds violated
//! constraints one at a time while keeping dual feasibility, so the active set
//! grows from the equalities outward. `J = L⁻ᵀ Q` and the triangular `R` of the
//! active normals are updated with Givens rotations.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("equality constraints are linearly dependent")]
    DependentEqualities,
    #[error("active-set iteration limit reached")]
    IterationLimit,
    #[error("dimension mismatch in quadratic program")]
    Dimension,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Multipliers `μ` with `Hx + g + A_eqᵀμ_eq + A_inᵀμ_in = 0`.
    pub eq_multipliers: DVector<f64>,
    /// Nonnegative, zero for inactive rows.
    pub ineq_multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Eq(usize),
    In(usize),
}

struct Factors {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
    iq: usize,
}

impl Factors {
    /// `d = Jᵀ np`.
    fn project(&self, np: &[f64], d: &mut DVector<f64>) {
        for (col, di) in self.j.column_iter().zip(d.iter_mut()) {
            *di = dot(col.as_slice(), np);
        }
    }

    /// Primal step direction `z = J₂ d₂`.
    fn primal_direction(&self, d: &DVector<f64>, z: &mut DVector<f64>) {
        z.fill(0.0);
        for jj in self.iq..d.len() {
            z.axpy(d[jj], &self.j.column(jj), 1.0);
        }
    }

    /// Dual step direction `r = R⁻¹ d₁`.
    fn dual_direction(&self, d: &DVector<f64>, rvec: &mut [f64]) {
        for i in (0..self.iq).rev() {
            let mut sum = 0.0;
            for jj in i + 1..self.iq {
                sum += self.r[(i, jj)] * rvec[jj];
            }
            rvec[i] = (d[i] - sum) / self.r[(i, i)];
        }
    }

    fn add(&mut self, d: &mut DVector<f64>) -> bool {
        let n = d.len();
        for jj in (self.iq + 1..n).rev() {
            let (mut cc, mut ss) = (d[jj - 1], d[jj]);
            let h = cc.hypot(ss);
            if h.abs() < f64::EPSILON {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                let new = t1 * cc + t2 * ss;
                self.j[(k, jj - 1)] = new;
                self.j[(k, jj)] = xny * (t1 + new) - t2;
            }
        }
        self.iq += 1;
        for i in 0..self.iq {
            self.r[(i, self.iq - 1)] = d[i];
        }
        let diag = d[self.iq - 1].abs();
        if diag <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    /// Removes active slot `qq`, shifting later slots (including the pending one at `iq`) down.
    fn delete(&mut self, slots: &mut [Slot], u: &mut [f64], qq: usize) {
        let n = self.j.nrows();
        let iq = self.iq;
        for i in qq..iq - 1 {
            slots[i] = slots[i + 1];
            u[i] = u[i + 1];
            for row in 0..n {
                self.r[(row, i)] = self.r[(row, i + 1)];
            }
        }
        slots[iq - 1] = slots[iq];
        u[iq - 1] = u[iq];
        u[iq] = 0.0;
        for row in 0..iq {
            self.r[(row, iq - 1)] = 0.0;
        }
        self.iq -= 1;
        let iq = self.iq;
        if iq == 0 {
            return;
        }
        for jj in qq..iq {
            let (mut cc, mut ss) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            let h = cc.hypot(ss);
            if h.abs() < f64::EPSILON {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                let new = t1 * cc + t2 * ss;
                self.r[(jj, k)] = new;
                self.r[(jj + 1, k)] = xny * (t1 + new) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                let new = t1 * cc + t2 * ss;
                self.j[(k, jj)] = new;
                self.j[(k, jj + 1)] = xny * (new + t1) - t2;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the quadratic program; `hessian` must be symmetric positive definite.
pub fn solve_qp(
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = gradient.len();
    let me = a_eq.nrows();
    let mi = a_in.nrows();
    if hessian.shape() != (n, n)
        || (me > 0 && a_eq.ncols() != n)
        || (mi > 0 && a_in.ncols() != n)
        || b_eq.len() != me
        || b_in.len() != mi
    {
        return Err(QpError::Dimension);
    }
    let chol = hessian
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite)?;
    let lt = chol.l().transpose();
    let j = lt
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let mut x = -chol.solve(gradient);
    let mut objective = 0.5 * gradient.dot(&x);

    // constraint normals stored as contiguous columns
    let ce = a_eq.transpose();
    let ci = a_in.transpose();

    let mut f = Factors {
        j,
        r: DMatrix::zeros(n, n),
        r_norm: 1.0,
        iq: 0,
    };
    let mut slots = vec![Slot::Eq(0); n + 1];
    let mut u = vec![0.0; n + 1];
    let mut d = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    let mut rvec = vec![0.0; n + 1];

    for i in 0..me {
        let np = ce.column(i);
        let np = np.as_slice();
        f.project(np, &mut d);
        f.primal_direction(&d, &mut z);
        f.dual_direction(&d, &mut rvec);
        let znp = dot(z.as_slice(), np);
        let t2 = if z.norm_squared() > f64::EPSILON {
            (b_eq[i] - dot(np, x.as_slice())) / znp
        } else {
            0.0
        };
        x.axpy(t2, &z, 1.0);
        u[f.iq] = t2;
        for k in 0..f.iq {
            u[k] -= t2 * rvec[k];
        }
        objective += 0.5 * t2 * t2 * znp;
        slots[f.iq] = Slot::Eq(i);
        if !f.add(&mut d) {
            return Err(QpError::DependentEqualities);
        }
    }

    let mut candidate = vec![true; mi];
    let mut included = vec![true; mi];
    let mut slack = vec![0.0; mi];
    let neg_normal = |i: usize| -> Vec<f64> { ci.column(i).iter().map(|v| -v).collect() };
    let slack_of =
        |i: usize, x: &DVector<f64>| b_in[i] - dot(ci.column(i).as_slice(), x.as_slice());

    // a row counts as violated only beyond rounding of its own scale
    let tolerance: Vec<f64> = (0..mi)
        .map(|i| 1e-13 * (1.0 + b_in[i].abs() + ci.column(i).amax()))
        .collect();
    let max_iterations = 10 * (n + me + mi) + 100;
    let mut iterations = 0;
    'outer: loop {
        iterations += 1;
        if iterations > max_iterations {
            return Err(QpError::IterationLimit);
        }
        for slot in &slots[me..f.iq] {
            if let Slot::In(p) = slot {
                candidate[*p] = false;
            }
        }
        for i in 0..mi {
            included[i] = true;
            slack[i] = slack_of(i, &x);
        }
        let u_old = u.clone();
        let slots_old = slots.clone();
        let x_old = x.clone();

        'select: loop {
            let mut most = 0.0;
            let mut pick = None;
            for i in 0..mi {
                if slack[i] < most && slack[i] < -tolerance[i] && candidate[i] && included[i] {
                    most = slack[i];
                    pick = Some(i);
                }
            }
            let Some(ip) = pick else {
                break 'outer;
            };
            let np = neg_normal(ip);
            u[f.iq] = 0.0;
            slots[f.iq] = Slot::In(ip);

            loop {
                f.project(&np, &mut d);
                f.primal_direction(&d, &mut z);
                f.dual_direction(&d, &mut rvec);

                // largest dual step keeping active inequality multipliers nonnegative
                let mut t1 = f64::INFINITY;
                let mut drop_slot = None;
                for k in me..f.iq {
                    if rvec[k] > 0.0 && u[k] / rvec[k] < t1 {
                        t1 = u[k] / rvec[k];
                        drop_slot = Some(k);
                    }
                }
                let znp = dot(z.as_slice(), &np);
                let t2 = if z.norm_squared() > f64::EPSILON {
                    -slack[ip] / znp
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if t == f64::INFINITY {
                    return Err(QpError::Infeasible);
                }
                if t2 == f64::INFINITY {
                    for k in 0..f.iq {
                        u[k] -= t * rvec[k];
                    }
                    u[f.iq] += t;
                    let qq = drop_slot.expect("finite t1 has a blocking slot");
                    if let Slot::In(l) = slots[qq] {
                        candidate[l] = true;
                    }
                    f.delete(&mut slots, &mut u, qq);
                    continue;
                }
                x.axpy(t, &z, 1.0);
                objective += t * znp * (0.5 * t + u[f.iq]);
                for k in 0..f.iq {
                    u[k] -= t * rvec[k];
                }
                u[f.iq] += t;

                if t == t2 {
                    if !f.add(&mut d) {
                        // degenerate: the new normal is dependent on the active set
                        included[ip] = false;
                        let qq = (me..f.iq)
                            .find(|&k| slots[k] == Slot::In(ip))
                            .expect("just added");
                        f.delete(&mut slots, &mut u, qq);
                        candidate.iter_mut().for_each(|c| *c = true);
                        for k in me..f.iq {
                            slots[k] = slots_old[k];
                            u[k] = u_old[k];
                            if let Slot::In(p) = slots[k] {
                                candidate[p] = false;
                            }
                        }
                        x.copy_from(&x_old);
                        continue 'select;
                    }
                    candidate[ip] = false;
                    continue 'outer;
                }
                // partial step: drop the blocking constraint and retry the same one
                let qq = drop_slot.expect("partial step has a blocking slot");
                if let Slot::In(l) = slots[qq] {
                    candidate[l] = true;
                }
                f.delete(&mut slots, &mut u, qq);
                slack[ip] = slack_of(ip, &x);
            }
        }
    }

    let mut eq_multipliers = DVector::zeros(me);
    let mut ineq_multipliers = DVector::zeros(mi);
    let mut active = Vec::new();
    for k in 0..f.iq {
        match slots[k] {
            Slot::Eq(i) => eq_multipliers[i] = -u[k],
            Slot::In(i) => {
                ineq_multipliers[i] = u[k];
                active.push(i);
            }
        }
    }
    active.sort_unstable();
    Ok(QpSolution {
        x,
        objective,
        eq_multipliers,
        ineq_multipliers,
        active,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn m(r: usize, c: usize, xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, xs)
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn none(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    }

    #[test]
    fn unconstrained_minimum() {
        let (ae, be) = none(2);
        let sol = solve_qp(
            &m(2, 2, &[2.0, 0.0, 0.0, 4.0]),
            &v(&[-2.0, 4.0]),
            &ae,
            &be,
            &ae,
            &be,
        )
        .unwrap();
        assert_abs_diff_eq!(sol.x, v(&[1.0, -1.0]), epsilon = 1e-14);
        assert_abs_diff_eq!(sol.objective, -3.0, epsilon = 1e-14);
    }

    #[test]
    fn single_inequality() {
        // min ½x² + ½y² + x  s.t.  x + 2y ≥ 1  →  (−0.6, 0.8)
        let (ae, be) = none(2);
        let sol = solve_qp(
            &DMatrix::identity(2, 2),
            &v(&[1.0, 0.0]),
            &ae,
            &be,
            &m(1, 2, &[-1.0, -2.0]),
            &v(&[-1.0]),
        )
        .unwrap();
        assert_abs_diff_eq!(sol.x, v(&[-0.6, 0.8]), epsilon = 1e-14);
        assert_eq!(sol.active, vec![0]);
        assert!(sol.ineq_multipliers[0] > 0.0);
    }

    #[test]
    fn equality_and_bounds() {
        // min (x−3)² + (y−3)²  s.t. x + y = 1, x ≤ 0.25
        let sol = solve_qp(
            &(DMatrix::identity(2, 2) * 2.0),
            &v(&[-6.0, -6.0]),
            &m(1, 2, &[1.0, 1.0]),
            &v(&[1.0]),
            &m(1, 2, &[1.0, 0.0]),
            &v(&[0.25]),
        )
        .unwrap();
        assert_abs_diff_eq!(sol.x, v(&[0.25, 0.75]), epsilon = 1e-13);
    }

    #[test]
    fn detects_infeasibility() {
        let (ae, be) = none(1);
        let res = solve_qp(
            &DMatrix::identity(1, 1),
            &v(&[0.0]),
            &ae,
            &be,
            &m(2, 1, &[1.0, -1.0]),
            &v(&[-1.0, -1.0]),
        );
        assert_eq!(res.unwrap_err(), QpError::Infeasible);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let (ae, be) = none(2);
        let res = solve_qp(
            &m(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            &v(&[0.0, 0.0]),
            &ae,
            &be,
            &ae,
            &be,
        );
        assert_eq!(res.unwrap_err(), QpError::NotPositiveDefinite);
    }

    #[test]
    fn dependent_equalities_are_reported() {
        let (ai, bi) = none(2);
        let res = solve_qp(
            &DMatrix::identity(2, 2),
            &v(&[0.0, 0.0]),
            &m(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            &v(&[1.0, 2.0]),
            &ai,
            &bi,
        );
        assert_eq!(res.unwrap_err(), QpError::DependentEqualities);
    }

    #[test]
    fn duplicated_inequalities_are_handled() {
        let (ae, be) = none(2);
        let a = m(3, 2, &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
        let sol = solve_qp(
            &DMatrix::identity(2, 2),
            &v(&[-3.0, -3.0]),
            &ae,
            &be,
            &a,
            &v(&[1.0, 1.0, 2.0]),
        )
        .unwrap();
        assert_abs_diff_eq!(sol.x, v(&[0.5, 0.5]), epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn random_programs_satisfy_kkt(
            n in 2usize..7,
            seed in proptest::collection::vec(-1.0..1.0f64, 200),
            me in 0usize..2,
            mi in 0usize..10,
        ) {
            let mut it = seed.iter().cycle().copied();
            let mut next = move || it.next().unwrap();
            let l = DMatrix::from_fn(n, n, |_, _| next());
            let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
            let g = DVector::from_fn(n, |_, _| 3.0 * next());
            let feasible = DVector::from_fn(n, |_, _| next());
            let a_eq = DMatrix::from_fn(me, n, |_, _| next());
            let b_eq = &a_eq * &feasible;
            let a_in = DMatrix::from_fn(mi, n, |_, _| next());
            let b_in = &a_in * &feasible + DVector::from_fn(mi, |_, _| next().abs() * 0.5);
            let sol = solve_qp(&h, &g, &a_eq, &b_eq, &a_in, &b_in).unwrap();
            let x = &sol.x;
            prop_assert!((&a_eq * x - &b_eq).amax() < 1e-9);
            let slack = &b_in - &a_in * x;
            prop_assert!(slack.min() > -1e-9 || mi == 0);
            prop_assert!(sol.ineq_multipliers.min() >= -1e-12 || mi == 0);
            for i in 0..mi {
                prop_assert!((sol.ineq_multipliers[i] * slack[i]).abs() < 1e-8);
            }
            let stationarity = &h * x + &g + a_eq.transpose() * &sol.eq_multipliers + a_in.transpose() * &sol.ineq_multipliers;
            prop_assert!(stationarity.amax() < 1e-8, "stationarity {}", stationarity.amax());
            prop_assert!((sol.objective - (0.5 * x.dot(&(&h * x)) + g.dot(x))).abs() < 1e-9);
        }
    }
}
