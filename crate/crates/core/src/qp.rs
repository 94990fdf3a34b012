//! Dense convex quadratic programs
//!
//! ```text
//! minimize    1/2 x^T P x + q^T x
//! subject to  E x = e,   G x <= h
//! ```
//!
//! solved by an interior-point method (Clarabel) followed by an active-set
//! polish on the KKT system. Residuals are recomputed here from the problem
//! data, independent of the backend's own bookkeeping.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem in `n` variables; add rows with the builders.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, e: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.eq_matrix = e;
        self.eq_rhs = rhs;
        self
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.ineq_matrix = g;
        self.ineq_rhs = rhs;
        self
    }

    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        check_dim("QP Hessian rows", n, self.hessian.nrows())?;
        check_dim("QP Hessian columns", n, self.hessian.ncols())?;
        check_dim("QP equality columns", n, self.eq_matrix.ncols())?;
        check_dim("QP equality rhs", self.eq_matrix.nrows(), self.eq_rhs.len())?;
        check_dim("QP inequality columns", n, self.ineq_matrix.ncols())?;
        check_dim("QP inequality rhs", self.ineq_matrix.nrows(), self.ineq_rhs.len())?;
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-12 * (1.0 + self.hessian.amax()) {
            return Err(Error::Argument(format!("QP Hessian is not symmetric ({asym:.2e})")));
        }
        let all_finite = self.hessian.iter().all(|v| v.is_finite())
            && self.linear.iter().all(|v| v.is_finite())
            && self.eq_matrix.iter().all(|v| v.is_finite())
            && self.eq_rhs.iter().all(|v| v.is_finite())
            && self.ineq_matrix.iter().all(|v| v.is_finite())
            && self.ineq_rhs.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Numerical("QP data contains non-finite entries".into()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// Residuals of the KKT conditions at `(x, y, z)` with the Lagrangian
    /// `f(x) + y^T (E x - e) + z^T (G x - h)`.
    pub fn kkt_residuals(&self, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> KktResiduals {
        let grad = &self.hessian * x
            + &self.linear
            + self.eq_matrix.transpose() * y
            + self.ineq_matrix.transpose() * z;
        let eq = &self.eq_matrix * x - &self.eq_rhs;
        let slack = &self.ineq_rhs - &self.ineq_matrix * x;
        KktResiduals {
            stationarity: linalg::vec_inf_norm(&grad),
            primal_equality: linalg::vec_inf_norm(&eq),
            primal_inequality: slack.iter().fold(0.0, |a, s| a.max(-s)),
            dual_feasibility: z.iter().fold(0.0, |a, v| a.max(-v)),
            complementarity: slack.iter().zip(z.iter()).fold(0.0, |a, (s, v)| a.max((s * v).abs())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_equality: f64,
    pub primal_inequality: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_equality)
            .max(self.primal_inequality)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSettings {
    /// Target for every KKT residual.
    pub tol: f64,
    pub max_iter: u32,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            polish: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub iterations: u32,
    pub polished: bool,
    /// Infeasibility certificate `y` (constraint space, `[eq; ineq]`) or
    /// unboundedness direction (variable space).
    pub certificate: Option<DVector<f64>>,
}

pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    problem.validate()?;
    let n = problem.n();
    let (meq, mineq) = (problem.eq_matrix.nrows(), problem.ineq_matrix.nrows());

    if let Some(cert) = equality_inconsistency(problem, settings.tol) {
        return Ok(QpSolution {
            status: QpStatus::Infeasible,
            x: DVector::zeros(n),
            eq_multipliers: DVector::zeros(meq),
            ineq_multipliers: DVector::zeros(mineq),
            objective: f64::NAN,
            kkt: KktResiduals::default(),
            iterations: 0,
            polished: false,
            certificate: Some(cert),
        });
    }

    let p = to_csc(&problem.hessian, true);
    let mut a_dense = DMatrix::zeros(meq + mineq, n);
    a_dense.rows_mut(0, meq).copy_from(&problem.eq_matrix);
    a_dense.rows_mut(meq, mineq).copy_from(&problem.ineq_matrix);
    let a = to_csc(&a_dense, false);
    let b: Vec<f64> = problem.eq_rhs.iter().chain(problem.ineq_rhs.iter()).copied().collect();
    let mut cones = Vec::new();
    if meq > 0 {
        cones.push(SupportedConeT::ZeroConeT(meq));
    }
    if mineq > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(mineq));
    }
    let ipm_settings = DefaultSettings {
        verbose: false,
        max_iter: settings.max_iter,
        max_threads: 1,
        tol_gap_abs: 1e-10,
        tol_gap_rel: 1e-10,
        tol_feas: 1e-10,
        tol_ktratio: 1e-8,
        presolve_enable: false,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, problem.linear.as_slice(), &a, &b, &cones, ipm_settings)
        .map_err(|e| Error::Numerical(format!("QP backend rejected the problem: {e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let x = DVector::from_column_slice(&sol.x);
    let z_all = DVector::from_column_slice(&sol.z);
    let y = z_all.rows(0, meq).into_owned();
    let z = z_all.rows(meq, mineq).into_owned();
    let iterations = sol.iterations;

    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => QpStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            QpStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => QpStatus::Unbounded,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => QpStatus::MaxIterations,
        _ => QpStatus::NumericalError,
    };
    match status {
        QpStatus::Infeasible => {
            return Ok(QpSolution {
                status,
                x: DVector::zeros(n),
                eq_multipliers: DVector::zeros(meq),
                ineq_multipliers: DVector::zeros(mineq),
                objective: f64::NAN,
                kkt: KktResiduals::default(),
                iterations,
                polished: false,
                certificate: Some(z_all),
            })
        }
        QpStatus::Unbounded => {
            return Ok(QpSolution {
                status,
                x: DVector::zeros(n),
                eq_multipliers: DVector::zeros(meq),
                ineq_multipliers: DVector::zeros(mineq),
                objective: f64::NEG_INFINITY,
                kkt: KktResiduals::default(),
                iterations,
                polished: false,
                certificate: Some(x),
            })
        }
        _ => {}
    }

    let slack = DVector::from_column_slice(&sol.s).rows(meq, mineq).into_owned();
    let mut best = (x, y, z);
    let mut kkt = problem.kkt_residuals(&best.0, &best.1, &best.2);
    let mut polished = false;
    if settings.polish {
        if let Some(candidate) = polish(problem, &best.2, &slack) {
            let ckkt = problem.kkt_residuals(&candidate.0, &candidate.1, &candidate.2);
            if ckkt.max() <= kkt.max() {
                best = candidate;
                kkt = ckkt;
                polished = true;
            }
        }
    }
    let status = if kkt.max() <= settings.tol * 10.0 {
        QpStatus::Optimal
    } else if status == QpStatus::Optimal && kkt.max() <= 1e-5 {
        // The backend converged but polishing could not reach the target;
        // report the solution, residuals are attached.
        log::debug!("QP solved to reduced accuracy (kkt = {:.2e})", kkt.max());
        QpStatus::Optimal
    } else if status == QpStatus::Optimal {
        QpStatus::NumericalError
    } else {
        status
    };
    let objective = problem.objective(&best.0);
    Ok(QpSolution {
        status,
        x: best.0,
        eq_multipliers: best.1,
        ineq_multipliers: best.2,
        objective,
        kkt,
        iterations,
        polished,
        certificate: None,
    })
}

/// Farkas certificate `y = e - E x_ls` when `E x = e` has no solution
/// (`E^T y = 0`, `e^T y > 0`).
fn equality_inconsistency(problem: &QpProblem, tol: f64) -> Option<DVector<f64>> {
    if problem.eq_matrix.nrows() == 0 {
        return None;
    }
    let x = linalg::lstsq_min_norm(&problem.eq_matrix, &problem.eq_rhs);
    let residual = &problem.eq_rhs - &problem.eq_matrix * x;
    let scale = 1.0 + linalg::vec_inf_norm(&problem.eq_rhs);
    if linalg::vec_inf_norm(&residual) > 1e3 * tol.max(1e-12) * scale {
        let mut cert = DVector::zeros(problem.eq_matrix.nrows() + problem.ineq_matrix.nrows());
        cert.rows_mut(0, residual.len()).copy_from(&residual);
        Some(cert)
    } else {
        None
    }
}

/// Re-solves the KKT system with the active set read off the interior-point
/// iterate; returns `None` when the guessed set turns out wrong.
fn polish(
    problem: &QpProblem,
    z: &DVector<f64>,
    slack: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = problem.n();
    let meq = problem.eq_matrix.nrows();
    let mineq = problem.ineq_matrix.nrows();
    let active: Vec<usize> = (0..mineq).filter(|&i| z[i] > slack[i]).collect();
    let na = active.len();
    let dim = n + meq + na;
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
    k.view_mut((n, 0), (meq, n)).copy_from(&problem.eq_matrix);
    k.view_mut((0, n), (n, meq)).copy_from(&problem.eq_matrix.transpose());
    for (j, &i) in active.iter().enumerate() {
        let row = problem.ineq_matrix.row(i);
        k.view_mut((n + meq + j, 0), (1, n)).copy_from(&row);
        k.view_mut((0, n + meq + j), (n, 1)).copy_from(&row.transpose());
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&problem.linear));
    rhs.rows_mut(n, meq).copy_from(&problem.eq_rhs);
    for (j, &i) in active.iter().enumerate() {
        rhs[n + meq + j] = problem.ineq_rhs[i];
    }

    let scale = 1.0 + k.amax();
    let delta = 1e-11 * scale;
    let mut kreg = k.clone();
    for i in 0..dim {
        kreg[(i, i)] += if i < n { delta } else { -delta };
    }
    let lu = kreg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..25 {
        let r = &rhs - &k * &sol;
        if linalg::vec_inf_norm(&r) < 1e-14 * scale {
            break;
        }
        sol += lu.solve(&r)?;
    }
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let xp = sol.rows(0, n).into_owned();
    let yp = sol.rows(n, meq).into_owned();
    let mut zp = DVector::zeros(mineq);
    for (j, &i) in active.iter().enumerate() {
        zp[i] = sol[n + meq + j];
    }
    // Guessed active set must be consistent: nonnegative multipliers and the
    // dropped rows still satisfied.
    let ok_dual = zp.iter().all(|v| *v >= -1e-10);
    let ok_primal = (&problem.ineq_rhs - &problem.ineq_matrix * &xp)
        .iter()
        .all(|s| *s >= -1e-10);
    if !(ok_dual && ok_primal) {
        return None;
    }
    zp.iter_mut().for_each(|v| *v = v.max(0.0));
    Some((xp, yp, zp))
}

fn to_csc(m: &DMatrix<f64>, upper_only: bool) -> CscMatrix<f64> {
    let (rows, cols) = m.shape();
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for c in 0..cols {
        let last = if upper_only { (c + 1).min(rows) } else { rows };
        for r in 0..last {
            let v = m[(r, c)];
            if v != 0.0 {
                rowval.push(r);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_with_bound() {
        // min x^2 s.t. x >= 1  (written as -x <= -1)
        let qp = QpProblem::new(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1))
            .with_inequalities(DMatrix::from_element(1, 1, -1.0), DVector::from_element(1, -1.0));
        let s = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-10);
        assert!((s.ineq_multipliers[0] - 2.0).abs() < 1e-9);
        assert!(s.kkt.max() <= 1e-8);
    }

    #[test]
    fn min_norm_equality() {
        let a = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, -1.0, 0.0, 1.0, 3.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, -2.0]);
        let qp = QpProblem::new(DMatrix::identity(4, 4) * 2.0, DVector::zeros(4))
            .with_equalities(a.clone(), b.clone());
        let s = solve_qp(&qp, &QpSettings::default()).unwrap();
        let oracle = a.transpose() * (&a * a.transpose()).try_inverse().unwrap() * b;
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x - oracle).amax() < 1e-10);
    }

    #[test]
    fn contradictory_equalities() {
        let qp = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1)).with_equalities(
            DMatrix::from_element(2, 1, 1.0),
            DVector::from_vec(vec![0.0, 1.0]),
        );
        let s = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        let cert = s.certificate.unwrap();
        // E^T y = 0 and e^T y != 0
        assert!((cert[0] + cert[1]).abs() < 1e-12);
        assert!(cert[1].abs() > 0.1);
    }

    #[test]
    fn contradictory_bounds() {
        let qp = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1)).with_inequalities(
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![0.0, -1.0]),
        );
        let s = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn unbounded_linear() {
        let qp = QpProblem::new(DMatrix::zeros(1, 1), DVector::from_element(1, 1.0));
        let s = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Unbounded);
    }
}
