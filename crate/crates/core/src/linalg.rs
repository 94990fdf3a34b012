//! Small dense linear-algebra helpers shared by the modules.

use nalgebra::{DMatrix, DVector, SVD};

/// Singular values below this fraction of the largest one count as zero.
pub const RANK_REL_TOL: f64 = 1e-9;

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    // The iterative SVD does not terminate reliably on non-finite input.
    if !m.iter().all(|v| v.is_finite()) {
        return vec![f64::NAN; m.nrows().min(m.ncols())];
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

pub fn rank_from_singular_values(s: &[f64]) -> usize {
    let Some(&smax) = s.first() else { return 0 };
    if smax <= 0.0 || !smax.is_finite() {
        return 0;
    }
    s.iter().filter(|&&v| v > RANK_REL_TOL * smax).count()
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    rank_from_singular_values(&singular_values(m))
}

/// Moore-Penrose pseudo-inverse with the relative rank threshold.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    if !m.iter().all(|v| v.is_finite()) {
        return DMatrix::from_element(m.ncols(), m.nrows(), f64::NAN);
    }
    let svd = SVD::new(m.clone(), true, true);
    let smax = svd.singular_values.max();
    let cut = RANK_REL_TOL * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            out += (vt.row(j).transpose() / s) * u.column(j).transpose();
        }
    }
    out
}

/// Minimum-norm least-squares solution of `m x = b`.
pub fn lstsq_min_norm(m: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    pinv(m) * b
}

/// Induced infinity norm (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_wide_full_row_rank() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
        let p = pinv(&a);
        let eye = &a * &p;
        assert!((eye - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn rank_of_rank_one() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert_eq!(numerical_rank(&a), 1);
        assert_eq!(numerical_rank(&DMatrix::zeros(3, 3)), 0);
    }

    #[test]
    fn inf_norm_is_max_row_sum() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 0.5]);
        assert_eq!(inf_norm(&a), 3.0);
    }
}
