//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rdnpc_core::lifting::Trajectory;
use rdnpc_core::npc::PastWindow;
use rdnpc_core::qp::{QpProblem, QpSolution};

/// Exact rank of an integer matrix by fraction-free (Bareiss) elimination.
pub fn exact_rank(rows: usize, cols: usize, entries: &[i64]) -> usize {
    let mut a: Vec<Vec<i128>> = (0..rows)
        .map(|i| (0..cols).map(|j| entries[i * cols + j] as i128).collect())
        .collect();
    let mut rank = 0;
    let mut prev = 1i128;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let Some(p) = (rank..rows).find(|&r| a[r][c] != 0) else { continue };
        a.swap(rank, p);
        for r in rank + 1..rows {
            for j in c + 1..cols {
                a[r][j] = (a[rank][c] * a[r][j] - a[r][c] * a[rank][j]) / prev;
            }
            a[r][c] = 0;
        }
        prev = a[rank][c];
        rank += 1;
    }
    rank
}

pub fn integer_seq(values: &[i64], eta: usize) -> Vec<DVector<f64>> {
    values
        .chunks(eta)
        .map(|c| DVector::from_iterator(eta, c.iter().map(|v| *v as f64)))
        .collect()
}

/// Textbook data-enabled predictive control on the linear plant, built from
/// scratch: `H(u) a = u`, `H(y) a = y` with past window and terminal zeros,
/// solved through the KKT system of the equality-constrained QP.
pub fn deepc_oracle(
    data: &Trajectory,
    horizon: usize,
    past: &PastWindow,
) -> (f64, Vec<f64>) {
    let d = 2usize;
    let depth_u = horizon + d;
    let depth_y = horizon + d + 2;
    let width = data.len() - depth_u + 1;
    // Column j of the output Hankel starts at y_j; it needs depth_y samples,
    // which exist since outputs run to N + d - 1.
    let hu = DMatrix::from_fn(depth_u, width, |i, j| data.inputs()[i + j][0]);
    let hy = DMatrix::from_fn(depth_y, width, |i, j| data.output(0, i + j));
    // Variables z = (u_f (L), y_f (L), a (width)).
    let nz = 2 * horizon + width;
    let ne = depth_u + depth_y;
    let mut e = DMatrix::zeros(ne, nz);
    let mut b = DVector::zeros(ne);
    for i in 0..depth_u {
        for j in 0..width {
            e[(i, 2 * horizon + j)] = hu[(i, j)];
        }
        if i < d {
            b[i] = past.inputs[i][0];
        } else {
            e[(i, i - d)] = -1.0;
        }
    }
    for i in 0..depth_y {
        let row = depth_u + i;
        for j in 0..width {
            e[(row, 2 * horizon + j)] = hy[(i, j)];
        }
        if i < d {
            b[row] = past.outputs[0][i];
        } else if i < d + horizon {
            e[(row, horizon + i - d)] = -1.0;
        }
    }
    let mut hess = DMatrix::zeros(nz, nz);
    for k in 0..2 * horizon {
        hess[(k, k)] = 2.0;
    }
    let mut kkt = DMatrix::zeros(nz + ne, nz + ne);
    kkt.view_mut((0, 0), (nz, nz)).copy_from(&hess);
    kkt.view_mut((0, nz), (nz, ne)).copy_from(&e.transpose());
    kkt.view_mut((nz, 0), (ne, nz)).copy_from(&e);
    let mut rhs = DVector::zeros(nz + ne);
    rhs.rows_mut(nz, ne).copy_from(&b);
    let sol = kkt.svd(true, true).solve(&rhs, 1e-10).unwrap();
    let z = sol.rows(0, nz);
    let cost: f64 = z.rows(0, 2 * horizon).norm_squared();
    (cost, z.rows(0, horizon).iter().copied().collect())
}

/// Random convex QP with at most `max_n` variables and a known strictly
/// feasible point.
pub fn random_qp<R: Rng>(rng: &mut R, max_n: usize) -> QpProblem {
    let n = rng.gen_range(2..=max_n);
    let meq = rng.gen_range(0..n / 2 + 1);
    let mineq = rng.gen_range(0..=2 * n);
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let hessian = a.transpose() * &a + DMatrix::identity(n, n) * 1e-2;
    let linear = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
    let feasible = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let e = DMatrix::from_fn(meq, n, |_, _| rng.gen_range(-1.0..1.0));
    let g = DMatrix::from_fn(mineq, n, |_, _| rng.gen_range(-1.0..1.0));
    let slack = DVector::from_fn(mineq, |_, _| rng.gen_range(0.0..1.0));
    let eq_rhs = &e * &feasible;
    let ineq_rhs = &g * &feasible + slack;
    QpProblem::new(hessian, linear)
        .with_equalities(e, eq_rhs)
        .with_inequalities(g, ineq_rhs)
}

/// Solves the equality-constrained QP in which the rows of `active` hold as
/// equalities, by pseudo-inverse of the KKT matrix, and returns the point
/// and the inequality multipliers (zero off the active set).
pub fn active_set_oracle(qp: &QpProblem, active: &[usize]) -> (DVector<f64>, DVector<f64>) {
    let n = qp.n();
    let meq = qp.eq_matrix.nrows();
    let rows = meq + active.len();
    let mut c = DMatrix::zeros(rows, n);
    let mut d = DVector::zeros(rows);
    c.rows_mut(0, meq).copy_from(&qp.eq_matrix);
    d.rows_mut(0, meq).copy_from(&qp.eq_rhs);
    for (i, &j) in active.iter().enumerate() {
        c.row_mut(meq + i).copy_from(&qp.ineq_matrix.row(j));
        d[meq + i] = qp.ineq_rhs[j];
    }
    let mut kkt = DMatrix::zeros(n + rows, n + rows);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
    kkt.view_mut((0, n), (n, rows)).copy_from(&c.transpose());
    kkt.view_mut((n, 0), (rows, n)).copy_from(&c);
    let mut rhs = DVector::zeros(n + rows);
    rhs.rows_mut(0, n).copy_from(&(-&qp.linear));
    rhs.rows_mut(n, rows).copy_from(&d);
    let z = kkt.pseudo_inverse(1e-12).unwrap() * rhs;
    let mut mult = DVector::zeros(qp.ineq_matrix.nrows());
    for (i, &j) in active.iter().enumerate() {
        mult[j] = z[n + meq + i];
    }
    (z.rows(0, n).into_owned(), mult)
}

/// Checks a solver result against the active-set oracle: the active set is
/// read off the solver's multipliers, the oracle point must be feasible with
/// non-negative multipliers (which certifies it optimal), and the objectives
/// must agree. Returns the objective gap.
pub fn qp_oracle_gap(qp: &QpProblem, sol: &QpSolution) -> Result<f64, String> {
    let active: Vec<usize> = (0..qp.ineq_matrix.nrows())
        .filter(|&j| sol.ineq_multipliers[j] > 1e-7)
        .collect();
    let (x, mult) = active_set_oracle(qp, &active);
    let slack = &qp.ineq_rhs - &qp.ineq_matrix * &x;
    if slack.iter().any(|s| *s < -1e-9) {
        return Err("oracle point violates an inequality".into());
    }
    if mult.iter().any(|v| *v < -1e-9) {
        return Err("oracle multipliers change sign".into());
    }
    if (&qp.eq_matrix * &x - &qp.eq_rhs).amax() > 1e-9 {
        return Err("oracle point violates an equality".into());
    }
    Ok((qp.objective(&x) - qp.objective(&sol.x)).abs())
}
