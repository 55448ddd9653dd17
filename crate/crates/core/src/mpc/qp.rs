//! Dense strictly convex QP solver.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 z' H z + f' z + c
//!     subject to  C z >= b
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani: start from the unconstrained
//! minimizer and add violated constraints one at a time, dropping constraints whose
//! multipliers would turn negative. Every iterate is dual feasible, so the objective
//! increases monotonically and the method terminates in finitely many steps.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

/// Outcome of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    /// The constraints admit no feasible point; the returned iterate is the last dual
    /// feasible point reached.
    InfeasibleRelaxed,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub constant: f64,
    /// One constraint per row: `constraints.row(i) * z >= bounds[i]`.
    pub constraints: DMatrix<f64>,
    pub bounds: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers, one per constraint row; zero for inactive rows.
    pub multipliers: DVector<f64>,
    pub cost: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub max_iter: usize,
    /// Feasibility tolerance, relative to `max(1, |b_i|)`.
    pub feas_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iter: 500,
            feas_tol: 1e-10,
        }
    }
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.bounds.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z) + self.constant
    }

    /// Largest constraint violation `max(0, b_i - C_i z)`.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let slack = &self.constraints * z - &self.bounds;
        slack.iter().fold(0.0f64, |acc, s| acc.max(-s))
    }

    /// Scaled stationarity residual `|H z + f - C' lambda|_inf / max(1, |f|_inf, |H z|_inf)`.
    pub fn kkt_residual(&self, z: &DVector<f64>, multipliers: &DVector<f64>) -> f64 {
        let hz = &self.hessian * z;
        let r = &hz + &self.gradient - self.constraints.transpose() * multipliers;
        let scale = 1.0f64.max(self.gradient.amax()).max(hz.amax());
        r.amax() / scale
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(QpError::Dimension(format!(
                "hessian is {}x{}, gradient has {n}",
                self.hessian.nrows(),
                self.hessian.ncols()
            )));
        }
        if self.constraints.ncols() != n || self.constraints.nrows() != self.bounds.len() {
            return Err(QpError::Dimension(format!(
                "constraints are {}x{}, expected {}x{n}",
                self.constraints.nrows(),
                self.constraints.ncols(),
                self.bounds.len()
            )));
        }
        let finite = self.hessian.iter().all(|v| v.is_finite())
            && self.gradient.iter().all(|v| v.is_finite())
            && self.constraints.iter().all(|v| v.is_finite())
            && self.bounds.iter().all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(QpError::NonFinite)
        }
    }
}

pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution, QpError> {
    solve_qp_with(problem, &QpSettings::default())
}

pub fn solve_qp_with(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    problem.check()?;
    let n = problem.dim();
    let m = problem.num_constraints();
    let chol =
        Cholesky::new(problem.hessian.clone()).ok_or(QpError::NotPositiveDefinite)?;

    let mut z = chol.solve(&(-&problem.gradient));
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut status = QpStatus::Optimal;

    let normal = |i: usize| -> DVector<f64> { problem.constraints.row(i).transpose() };
    let slack = |i: usize, z: &DVector<f64>| -> f64 {
        problem.constraints.row(i).dot(&z.transpose()) - problem.bounds[i]
    };

    'outer: loop {
        // most violated inactive constraint, measured relative to its scale
        let mut chosen = None;
        let mut worst = 0.0;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let s = slack(i, &z);
            let scale = 1.0f64.max(problem.bounds[i].abs());
            if s < -settings.feas_tol * scale && s / scale < worst {
                worst = s / scale;
                chosen = Some(i);
            }
        }
        let Some(p) = chosen else { break };
        let np = normal(p);
        let mut lambda_p = 0.0;

        loop {
            iterations += 1;
            if iterations > settings.max_iter {
                status = QpStatus::MaxIter;
                break 'outer;
            }
            let (step, r) = directions(&chol, problem, &active, &np, n);
            // largest dual step keeping the active multipliers non-negative
            let mut dual_step = f64::INFINITY;
            let mut blocking = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 1e-12 {
                    let t = lambda[j] / rj;
                    if t < dual_step {
                        dual_step = t;
                        blocking = Some(j);
                    }
                }
            }
            let curvature = step.dot(&np);
            if curvature <= 1e-14 * np.norm_squared().max(1.0) {
                // p is linearly dependent on the active set
                let Some(k) = blocking else {
                    status = QpStatus::InfeasibleRelaxed;
                    break 'outer;
                };
                for (lj, rj) in lambda.iter_mut().zip(&r) {
                    *lj -= dual_step * rj;
                }
                lambda_p += dual_step;
                active.remove(k);
                lambda.remove(k);
                continue;
            }
            let primal_step = -slack(p, &z) / curvature;
            let t = primal_step.min(dual_step);
            z.axpy(t, &step, 1.0);
            for (lj, rj) in lambda.iter_mut().zip(&r) {
                *lj -= t * rj;
            }
            lambda_p += t;
            if primal_step <= dual_step {
                active.push(p);
                lambda.push(lambda_p);
                break;
            }
            let k = blocking.expect("finite dual step has a blocking constraint");
            active.remove(k);
            lambda.remove(k);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (&i, &l) in active.iter().zip(&lambda) {
        multipliers[i] = l.max(0.0);
    }
    let cost = problem.objective(&z);
    Ok(QpSolution {
        z,
        multipliers,
        cost,
        status,
        iterations,
        active,
    })
}

/// Primal direction `z = H^-1 n_p - H^-1 N r` and multiplier direction
/// `r = (N' H^-1 N)^-1 N' H^-1 n_p` for the current active set.
fn directions(
    chol: &Cholesky<f64, Dyn>,
    problem: &QpProblem,
    active: &[usize],
    np: &DVector<f64>,
    n: usize,
) -> (DVector<f64>, Vec<f64>) {
    let hinv_np = chol.solve(np);
    if active.is_empty() {
        return (hinv_np, Vec::new());
    }
    let q = active.len();
    let mut normals = DMatrix::zeros(n, q);
    for (j, &i) in active.iter().enumerate() {
        normals.set_column(j, &problem.constraints.row(i).transpose());
    }
    let hinv_n = chol.solve(&normals);
    let gram = normals.transpose() * &hinv_n;
    let rhs = normals.transpose() * &hinv_np;
    let r = match Cholesky::new(gram.clone()) {
        Some(c) => c.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| DVector::zeros(q)),
    };
    let step = hinv_np - hinv_n * &r;
    (step, r.iter().copied().collect())
}
