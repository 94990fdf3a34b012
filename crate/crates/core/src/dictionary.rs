//! Basis-function dictionaries `Psi(u, Xi)`, regression of the coefficient
//! matrix `G`, and sampling estimates of the constants the controller needs.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lifting::{self, Trajectory};
use crate::linalg;
use crate::plant::PlantModel;
use crate::seed;

/// Forward finite-difference step used for dictionary Jacobians.
pub const FD_STEP: f64 = 1e-6;
/// Step of the central second differences in [`Dictionary::weighted_hessian`].
pub const HESSIAN_STEP: f64 = 1e-4;
/// Inflation applied to the sampled approximation error.
pub const EPS_STAR_INFLATION: f64 = 1.5;
/// Inflation applied to sampled Lipschitz constants and `K_w`.
pub const LIPSCHITZ_INFLATION: f64 = 1.25;
/// Sampled approximation errors below this are reported as zero.
pub const EPS_STAR_ZERO_THRESHOLD: f64 = 1e-7;

/// Serializable description of a dictionary over the stacked argument
/// `z = (u_1..u_m, xi_1..xi_n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DictionaryDescriptor {
    /// One row of exponents per basis function, `prod_j z_j^e_j`.
    Monomial { exponents: Vec<Vec<u32>> },
    /// Gaussian bumps `exp(-|z-c|^2 / w^2) - exp(-|c|^2 / w^2)`, shifted so
    /// every basis function vanishes at the origin.
    RadialBasis {
        centers: Vec<Vec<f64>>,
        widths: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    m: usize,
    n: usize,
    descriptor: DictionaryDescriptor,
}

impl Dictionary {
    pub fn new(m: usize, n: usize, descriptor: DictionaryDescriptor) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Argument("dictionary needs m >= 1 and n >= 1".into()));
        }
        let dim = m + n;
        match &descriptor {
            DictionaryDescriptor::Monomial { exponents } => {
                if exponents.is_empty() {
                    return Err(Error::Argument("empty monomial dictionary".into()));
                }
                for e in exponents {
                    check_dim("monomial exponent row", dim, e.len())?;
                    if e.iter().all(|&p| p == 0) {
                        return Err(Error::Argument(
                            "constant basis function is not allowed (Psi must vanish at the origin)"
                                .into(),
                        ));
                    }
                }
            }
            DictionaryDescriptor::RadialBasis { centers, widths } => {
                if centers.is_empty() {
                    return Err(Error::Argument("empty radial-basis dictionary".into()));
                }
                check_dim("radial-basis widths", centers.len(), widths.len())?;
                for c in centers {
                    check_dim("radial-basis center", dim, c.len())?;
                }
                if widths.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
                    return Err(Error::Argument("radial-basis widths must be positive".into()));
                }
            }
        }
        Ok(Self { m, n, descriptor })
    }

    /// All monomials in `(u, Xi)` with total degree in `1..=degree`, in
    /// graded lexicographic order.
    pub fn monomials_up_to_degree(m: usize, n: usize, degree: u32) -> Result<Self> {
        let dim = m + n;
        let mut exponents = Vec::new();
        for total in 1..=degree {
            let mut current = vec![0u32; dim];
            compositions(total, 0, &mut current, &mut exponents);
        }
        Self::new(m, n, DictionaryDescriptor::Monomial { exponents })
    }

    /// Default dictionary of a builtin plant.
    pub fn default_for(plant: &PlantModel) -> Result<Self> {
        let (m, n) = (plant.m(), plant.n());
        match plant.id() {
            // (xi_1^2, xi_2, u)
            "P1" | "P2" => Self::new(
                m,
                n,
                DictionaryDescriptor::Monomial {
                    exponents: vec![vec![0, 2, 0], vec![0, 0, 1], vec![1, 0, 0]],
                },
            ),
            "P3" => Self::monomials_up_to_degree(m, n, 2),
            "L1" => Self::new(
                m,
                n,
                DictionaryDescriptor::Monomial {
                    exponents: (0..m)
                        .map(|j| {
                            let mut e = vec![0; m + n];
                            e[j] = 1;
                            e
                        })
                        .collect(),
                },
            ),
            other => Err(Error::UnknownPlant(format!(
                "no default dictionary for plant `{other}`"
            ))),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of basis functions `r`.
    pub fn r(&self) -> usize {
        match &self.descriptor {
            DictionaryDescriptor::Monomial { exponents } => exponents.len(),
            DictionaryDescriptor::RadialBasis { centers, .. } => centers.len(),
        }
    }

    pub fn descriptor(&self) -> &DictionaryDescriptor {
        &self.descriptor
    }

    /// Human-readable name of every basis function.
    pub fn labels(&self) -> Vec<String> {
        let var = |j: usize| {
            if j < self.m {
                format!("u{}", j + 1)
            } else {
                format!("xi{}", j - self.m + 1)
            }
        };
        match &self.descriptor {
            DictionaryDescriptor::Monomial { exponents } => exponents
                .iter()
                .map(|e| {
                    let mut s = String::new();
                    for (j, &p) in e.iter().enumerate().filter(|(_, p)| **p > 0) {
                        if !s.is_empty() {
                            s.push('*');
                        }
                        s.push_str(&var(j));
                        if p > 1 {
                            let _ = write!(s, "^{p}");
                        }
                    }
                    s
                })
                .collect(),
            DictionaryDescriptor::RadialBasis { centers, .. } => {
                (0..centers.len()).map(|k| format!("rbf{}", k + 1)).collect()
            }
        }
    }

    pub fn evaluate(&self, u: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("dictionary input", self.m, u.len())?;
        check_dim("dictionary lifted state", self.n, xi.len())?;
        Ok(self.eval_unchecked(u.as_slice(), xi.as_slice()))
    }

    fn eval_unchecked(&self, u: &[f64], xi: &[f64]) -> DVector<f64> {
        let z = |j: usize| if j < self.m { u[j] } else { xi[j - self.m] };
        match &self.descriptor {
            DictionaryDescriptor::Monomial { exponents } => DVector::from_iterator(
                exponents.len(),
                exponents.iter().map(|e| {
                    e.iter()
                        .enumerate()
                        .filter(|(_, p)| **p > 0)
                        .map(|(j, &p)| z(j).powi(p as i32))
                        .product()
                }),
            ),
            DictionaryDescriptor::RadialBasis { centers, widths } => DVector::from_iterator(
                centers.len(),
                centers.iter().zip(widths).map(|(c, w)| {
                    let w2 = w * w;
                    let d2: f64 = c.iter().enumerate().map(|(j, cj)| (z(j) - cj).powi(2)).sum();
                    let c2: f64 = c.iter().map(|cj| cj * cj).sum();
                    (-d2 / w2).exp() - (-c2 / w2).exp()
                }),
            ),
        }
    }

    /// Columns `Psi(u_k, Xi_k)` for `k` in `range` (needs `k < N`).
    pub fn evaluate_sequence(
        &self,
        traj: &Trajectory,
        range: std::ops::Range<usize>,
    ) -> Result<DMatrix<f64>> {
        check_dim("trajectory outputs", self.m, traj.m())?;
        check_dim("trajectory lifted dimension", self.n, traj.n())?;
        if range.end > traj.len() {
            return Err(Error::Index(format!(
                "dictionary sequence up to {} exceeds input length {}",
                range.end,
                traj.len()
            )));
        }
        let mut out = DMatrix::zeros(self.r(), range.len());
        for (c, k) in range.enumerate() {
            let xi = traj.lifted(k)?;
            out.set_column(c, &self.eval_unchecked(traj.inputs()[k].as_slice(), xi.0.as_slice()));
        }
        Ok(out)
    }

    /// Forward finite-difference Jacobians `(dPsi/du, dPsi/dXi)`.
    pub fn jacobian(
        &self,
        u: &DVector<f64>,
        xi: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let base = self.evaluate(u, xi)?;
        let r = self.r();
        let mut ju = DMatrix::zeros(r, self.m);
        let mut jx = DMatrix::zeros(r, self.n);
        let mut up = u.clone();
        for j in 0..self.m {
            up[j] += FD_STEP;
            let col = (self.eval_unchecked(up.as_slice(), xi.as_slice()) - &base) / FD_STEP;
            ju.set_column(j, &col);
            up[j] = u[j];
        }
        let mut xp = xi.clone();
        for j in 0..self.n {
            xp[j] += FD_STEP;
            let col = (self.eval_unchecked(u.as_slice(), xp.as_slice()) - &base) / FD_STEP;
            jx.set_column(j, &col);
            xp[j] = xi[j];
        }
        Ok((ju, jx))
    }

    /// Hessian of `w^T Psi` with respect to `z = (u, Xi)`, by central second
    /// differences.
    pub fn weighted_hessian(
        &self,
        u: &DVector<f64>,
        xi: &DVector<f64>,
        weights: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        check_dim("dictionary weights", self.r(), weights.len())?;
        check_dim("dictionary input", self.m, u.len())?;
        check_dim("dictionary lifted state", self.n, xi.len())?;
        let dim = self.m + self.n;
        let mut z: Vec<f64> = u.iter().chain(xi.iter()).copied().collect();
        let g = |z: &[f64]| weights.dot(&self.eval_unchecked(&z[..self.m], &z[self.m..]));
        let h = HESSIAN_STEP;
        let mut out = DMatrix::zeros(dim, dim);
        for a in 0..dim {
            for b in a..dim {
                let mut acc = 0.0;
                for (sa, sb, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                    z[a] += sa * h;
                    z[b] += sb * h;
                    acc += sign * g(&z);
                    z[a] -= sa * h;
                    z[b] -= sb * h;
                }
                out[(a, b)] = acc / (4.0 * h * h);
                out[(b, a)] = out[(a, b)];
            }
        }
        Ok(out)
    }
}

fn compositions(total: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == current.len() {
        current[pos] = total;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for p in (0..=total).rev() {
        current[pos] = p;
        compositions(total - p, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// Axis-aligned box `Omega` over `z = (u, Xi)` on which constants are
/// estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaBox {
    pub m: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl OmegaBox {
    pub fn new(m: usize, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("box upper bound", lower.len(), upper.len())?;
        if m >= lower.len() {
            return Err(Error::Argument("box must cover (u, Xi) with n >= 1".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Argument("box lower bound exceeds upper bound".into()));
        }
        Ok(Self { m, lower, upper })
    }

    /// Bounding box of the visited `(u_k, Xi_k)`, `k < N`, padded by 10% of
    /// each side length.
    pub fn from_data(traj: &Trajectory) -> Result<Self> {
        if traj.is_empty() {
            return Err(Error::Argument("empty trajectory".into()));
        }
        let (m, n) = (traj.m(), traj.n());
        let mut lower = vec![f64::INFINITY; m + n];
        let mut upper = vec![f64::NEG_INFINITY; m + n];
        for k in 0..traj.len() {
            let xi = traj.lifted(k)?;
            for (j, v) in traj.inputs()[k].iter().chain(xi.0.iter()).enumerate() {
                lower[j] = lower[j].min(*v);
                upper[j] = upper[j].max(*v);
            }
        }
        for j in 0..m + n {
            let pad = 0.1 * (upper[j] - lower[j]);
            lower[j] -= pad;
            upper[j] += pad;
        }
        Self::new(m, lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower.iter().zip(&self.upper).any(|(l, u)| !(u > l))
    }

    /// Degeneracy restricted to the `Xi` coordinates.
    pub fn xi_degenerate(&self) -> bool {
        self.lower[self.m..]
            .iter()
            .zip(&self.upper[self.m..])
            .any(|(l, u)| !(u > l))
    }

    pub fn contains(&self, u: &DVector<f64>, xi: &DVector<f64>) -> bool {
        u.iter()
            .chain(xi.iter())
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    fn sample_coord<R: Rng>(&self, j: usize, rng: &mut R) -> f64 {
        if self.upper[j] > self.lower[j] {
            rng.gen_range(self.lower[j]..=self.upper[j])
        } else {
            self.lower[j]
        }
    }

    /// Uniform sample `(u, Xi)` from the box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
        let u = DVector::from_fn(self.m, |j, _| self.sample_coord(j, rng));
        let xi = DVector::from_fn(self.dim() - self.m, |j, _| self.sample_coord(self.m + j, rng));
        (u, xi)
    }
}

/// Linear independence of the basis functions over the box: the Gram matrix
/// of sampled evaluations must have full numerical rank. Returns the rank.
pub fn check_independence(
    dict: &Dictionary,
    omega: &OmegaBox,
    n_samples: usize,
    seed: u64,
) -> Result<usize> {
    check_dim("box dimension", dict.m() + dict.n(), omega.dim())?;
    let mut rng = seed::rng(seed);
    let mut samples = DMatrix::zeros(dict.r(), n_samples);
    for k in 0..n_samples {
        let (u, xi) = omega.sample(&mut rng);
        samples.set_column(k, &dict.eval_unchecked(u.as_slice(), xi.as_slice()));
    }
    let gram = &samples * samples.transpose();
    let rank = linalg::numerical_rank(&gram);
    if rank < dict.r() {
        return Err(Error::RankDeficient(format!(
            "basis functions are linearly dependent over the box (Gram rank {rank} of {})",
            dict.r()
        )));
    }
    Ok(rank)
}

/// Targets `v_{i,k} = y_{i,k+d_i}` for `k < N` as an `m x N` matrix.
pub fn regression_targets(traj: &Trajectory) -> DMatrix<f64> {
    let d = traj.relative_degrees();
    DMatrix::from_fn(traj.m(), traj.len(), |i, k| traj.output(i, k + d[i]))
}

/// Ridge regression of `G` (one row per output) on the features
/// `Psi(u_k, Xi_k)` with regularization `1e-8 trace(Psi Psi^T) / r`, followed
/// by iterative refinement against the unregularized normal equations.
pub fn fit_coefficients(dict: &Dictionary, data: &Trajectory) -> Result<DMatrix<f64>> {
    let r = dict.r();
    if data.len() <= r {
        return Err(Error::Precondition(format!(
            "fit needs more samples than basis functions (N = {}, r = {r})",
            data.len()
        )));
    }
    let psi = dict.evaluate_sequence(data, 0..data.len())?;
    let svd = psi.clone().svd(true, false);
    let rank = linalg::rank_from_singular_values(&linalg::singular_values(&psi));
    if rank < r {
        let u = svd.u.as_ref().expect("u requested");
        let smax = svd.singular_values.max();
        let labels = dict.labels();
        let mut directions = Vec::new();
        for (j, &s) in svd.singular_values.iter().enumerate() {
            if !(s > linalg::RANK_REL_TOL * smax) {
                let col = u.column(j);
                let terms: Vec<String> = col
                    .iter()
                    .zip(&labels)
                    .filter(|(c, _)| c.abs() > 1e-3)
                    .map(|(c, l)| format!("{c:+.3}*{l}"))
                    .collect();
                directions.push(format!("[{}] (sigma = {s:.3e})", terms.join(" ")));
            }
        }
        return Err(Error::RankDeficient(format!(
            "dictionary features have rank {rank} of {r}; deficient directions: {}",
            directions.join(", ")
        )));
    }
    let targets = regression_targets(data);
    let gram = &psi * psi.transpose();
    let ridge = 1e-8 * gram.trace() / r as f64;
    let regularized = &gram + DMatrix::identity(r, r) * ridge;
    let chol = regularized.cholesky().ok_or_else(|| {
        Error::Numerical("regularized normal matrix is not positive definite".into())
    })?;
    let rhs = &targets * psi.transpose();
    // G (Psi Psi^T + rho I) = V Psi^T, solved row-wise via the transpose.
    let mut g = chol.solve(&rhs.transpose()).transpose();
    for _ in 0..REFINEMENT_STEPS {
        let residual = &rhs - &g * &gram;
        g += chol.solve(&residual.transpose()).transpose();
    }
    Ok(g)
}

const REFINEMENT_STEPS: usize = 3;

/// Residuals `y_{i,k+d_i} - g_i^T Psi(u_k, Xi_k)` as an `m x N` matrix.
pub fn approximation_residuals(
    dict: &Dictionary,
    g: &DMatrix<f64>,
    traj: &Trajectory,
) -> Result<DMatrix<f64>> {
    check_dim("G rows", dict.m(), g.nrows())?;
    check_dim("G columns", dict.r(), g.ncols())?;
    let psi = dict.evaluate_sequence(traj, 0..traj.len())?;
    Ok(regression_targets(traj) - g * psi)
}

/// `1.5 * max |y_{i,k+d_i} - g_i^T Psi_k|` on noise-free validation data;
/// reported as 0 when the raw maximum is below `1e-7`.
pub fn estimate_eps_star(
    dict: &Dictionary,
    g: &DMatrix<f64>,
    validation: &Trajectory,
) -> Result<f64> {
    if validation.is_noisy() {
        return Err(Error::Precondition(
            "approximation error must be estimated on noise-free data".into(),
        ));
    }
    let raw = approximation_residuals(dict, g, validation)?.amax();
    Ok(if raw < EPS_STAR_ZERO_THRESHOLD {
        0.0
    } else {
        EPS_STAR_INFLATION * raw
    })
}

/// Sampled Lipschitz constant in `Xi` (infinity norms) of a map
/// `(u, Xi) -> R^p` over the box, inflated by 1.25.
///
/// Half of the samples are random pairs spread over the box; the other half
/// are short-range pairs around random points, which catch the local slope.
pub fn estimate_lipschitz<F>(g: F, omega: &OmegaBox, n_samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync,
{
    if omega.xi_degenerate() {
        return Err(Error::Precondition(
            "Lipschitz estimation needs a box with nonempty interior in Xi".into(),
        ));
    }
    let max_ratio = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = seed::rng(seed::derive(seed, s as u64));
            let (u, xi) = omega.sample(&mut rng);
            let other = if s % 2 == 0 {
                omega.sample(&mut rng).1
            } else {
                let mut x = xi.clone();
                for j in 0..x.len() {
                    let (lo, hi) = (omega.lower[omega.m + j], omega.upper[omega.m + j]);
                    let h = 1e-4 * (hi - lo) * rng.gen_range(-1.0..=1.0);
                    x[j] = (x[j] + h).clamp(lo, hi);
                }
                x
            };
            let dx = linalg::vec_inf_norm(&(&other - &xi));
            if dx == 0.0 {
                return 0.0;
            }
            linalg::vec_inf_norm(&(g(&u, &other) - g(&u, &xi))) / dx
        })
        .reduce(|| 0.0, f64::max);
    Ok(LIPSCHITZ_INFLATION * max_ratio)
}

/// `K_Psi`: Lipschitz constant of the dictionary in `Xi`.
pub fn estimate_k_psi(dict: &Dictionary, omega: &OmegaBox, n_samples: usize, seed: u64) -> Result<f64> {
    check_dim("box dimension", dict.m() + dict.n(), omega.dim())?;
    estimate_lipschitz(
        |u, xi| dict.eval_unchecked(u.as_slice(), xi.as_slice()),
        omega,
        n_samples,
        seed,
    )
}

/// `K_w`: sampled gain from lifted-state noise `omega` to
/// `delta(omega) = Phi(u, Xi) - Phi(u, Xi + omega)`, inflated by 1.25.
///
/// `Phi` is the plant oracle when given (so the approximation-error terms are
/// the true plant residuals), else `G Psi`.
pub fn estimate_k_w(
    dict: &Dictionary,
    g: &DMatrix<f64>,
    phi: Option<crate::plant::PhiFn>,
    data: &Trajectory,
    w_star: f64,
    n_trials: usize,
    seed: u64,
) -> Result<f64> {
    check_dim("G rows", dict.m(), g.nrows())?;
    check_dim("G columns", dict.r(), g.ncols())?;
    if !(w_star > 0.0) || n_trials == 0 || data.is_empty() {
        log::warn!("K_w estimate degenerate (w* = {w_star}, trials = {n_trials}); returning 0");
        return Ok(0.0);
    }
    let eval_phi = |u: &DVector<f64>, xi: &DVector<f64>| match phi {
        Some(f) => f(u, xi),
        None => g * dict.eval_unchecked(u.as_slice(), xi.as_slice()),
    };
    let n_data = data.len();
    let max_ratio = (0..n_trials)
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let mut rng = seed::rng(seed::derive(seed, t as u64));
            let k = rng.gen_range(0..n_data);
            let xi = data.lifted(k)?.0;
            let u = &data.inputs()[k];
            let noise = DVector::from_fn(xi.len(), |_, _| rng.gen_range(-w_star..=w_star));
            let delta = eval_phi(u, &xi) - eval_phi(u, &(&xi + noise));
            Ok(linalg::vec_inf_norm(&delta) / w_star)
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    Ok(LIPSCHITZ_INFLATION * max_ratio)
}

/// Smallest singular value of `G`; `G` must have full row rank.
fn check_full_row_rank(g: &DMatrix<f64>) -> Result<f64> {
    let s = linalg::singular_values(g);
    let rank = linalg::rank_from_singular_values(&s);
    let smin = s.get(g.nrows().saturating_sub(1)).copied().unwrap_or(0.0);
    if g.nrows() == 0 || g.nrows() > g.ncols() || rank < g.nrows() {
        return Err(Error::RankDeficient(format!(
            "G ({}x{}) lacks full row rank (sigma_min = {smin:.3e})",
            g.nrows(),
            g.ncols()
        )));
    }
    Ok(smin)
}

/// Right inverse `G^T (G G^T)^{-1}`.
pub fn g_dagger(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_full_row_rank(g)?;
    let ggt = g * g.transpose();
    let inv = ggt
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("G G^T is singular".into()))?;
    Ok(g.transpose() * inv)
}

pub fn g_dagger_inf_norm(g: &DMatrix<f64>) -> Result<f64> {
    Ok(linalg::inf_norm(&g_dagger(g)?))
}

pub fn g_inf_norm(g: &DMatrix<f64>) -> f64 {
    linalg::inf_norm(g)
}

/// `||M^+||_2^2 = 1 / sigma_min(M)^2` for a matrix that must have full row
/// rank.
pub fn c_pe_of_matrix(m: &DMatrix<f64>) -> Result<f64> {
    let s = linalg::singular_values(m);
    let rank = linalg::rank_from_singular_values(&s);
    let rows = m.nrows();
    let smin = s.get(rows.saturating_sub(1)).copied().unwrap_or(0.0);
    if rows == 0 || rank < rows {
        return Err(Error::RankDeficient(format!(
            "stacked data matrix ({}x{}) lacks full row rank (rank {rank}, sigma_min = {smin:.3e})",
            rows,
            m.ncols()
        )));
    }
    Ok(1.0 / (smin * smin))
}

/// Stacked matrix `[H_{L+d_max}(Psi); H_1(Xi_{[0, N-L-d_max]})]`.
pub fn c_pe_matrix(
    data: &Trajectory,
    dict: &Dictionary,
    horizon: usize,
    d_max: usize,
) -> Result<DMatrix<f64>> {
    let n_data = data.len();
    let depth = horizon + d_max;
    if depth > n_data {
        return Err(Error::Precondition(format!(
            "data length {n_data} shorter than L + d_max = {depth}"
        )));
    }
    let psi = lifting::columns(&dict.evaluate_sequence(data, 0..n_data)?);
    let h_psi = lifting::build_hankel(&psi, depth)?;
    let width = h_psi.width();
    let xi: Vec<DVector<f64>> = lifting::lift_sequence(data, 0..width)?
        .into_iter()
        .map(|x| x.0)
        .collect();
    let h_xi = lifting::build_hankel(&xi, 1)?;
    Ok(lifting::stack_rows(h_psi.matrix(), h_xi.matrix()))
}

/// `c_pe` of the stacked data matrix, using the Moore-Penrose inverse: when
/// the dictionary obeys exact shift relations the matrix cannot have full row
/// rank, and the squared norm of its pseudo-inverse is `1 / sigma_r^2` with
/// `sigma_r` the smallest singular value above the rank threshold.
pub fn compute_c_pe(
    data: &Trajectory,
    dict: &Dictionary,
    horizon: usize,
    d_max: usize,
) -> Result<CpeReport> {
    let m = c_pe_matrix(data, dict, horizon, d_max)?;
    let s = linalg::singular_values(&m);
    let rank = linalg::rank_from_singular_values(&s);
    if rank == 0 {
        return Err(Error::RankDeficient("stacked data matrix is zero or non-finite".into()));
    }
    let sigma = s[rank - 1];
    if rank < m.nrows() {
        log::info!(
            "stacked data matrix has rank {rank} of {} rows; c_pe uses the pseudo-inverse",
            m.nrows()
        );
    }
    Ok(CpeReport {
        c_pe: 1.0 / (sigma * sigma),
        rank,
        rows: m.nrows(),
        sigma_min_nonzero: sigma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpeReport {
    pub c_pe: f64,
    pub rank: usize,
    pub rows: usize,
    pub sigma_min_nonzero: f64,
}

/// Scalar constants consumed by the controller and the deviation bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryConstants {
    pub eps_star: f64,
    pub k_psi: f64,
    pub k_xi: f64,
    pub k_w: f64,
    /// `G` stored row by row.
    pub g_matrix: Vec<Vec<f64>>,
    pub g_dagger_inf_norm: f64,
    pub g_inf_norm: f64,
    pub omega_box: OmegaBox,
}

impl DictionaryConstants {
    pub fn g(&self) -> DMatrix<f64> {
        let rows = self.g_matrix.len();
        let cols = self.g_matrix.first().map_or(0, Vec::len);
        DMatrix::from_fn(rows, cols, |i, j| self.g_matrix[i][j])
    }

    /// Constants for a nominal setting: everything zero except the `G`
    /// norms.
    pub fn nominal(g: &DMatrix<f64>, omega_box: OmegaBox) -> Result<Self> {
        Ok(Self {
            eps_star: 0.0,
            k_psi: 0.0,
            k_xi: 0.0,
            k_w: 0.0,
            g_matrix: matrix_rows(g),
            g_dagger_inf_norm: g_dagger_inf_norm(g)?,
            g_inf_norm: g_inf_norm(g),
            omega_box,
        })
    }
}

pub(crate) fn matrix_rows(g: &DMatrix<f64>) -> Vec<Vec<f64>> {
    g.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationOptions {
    pub lipschitz_samples: usize,
    pub kw_trials: usize,
    pub seed: u64,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self {
            lipschitz_samples: 4000,
            kw_trials: 2000,
            seed: 0,
        }
    }
}

/// Fits `G` on `fit_data` and estimates every constant. `validation` must be
/// noise-free; `K_Xi` uses the plant oracle when the plant has one and
/// `G Psi` otherwise.
pub fn estimate_constants(
    plant: &PlantModel,
    dict: &Dictionary,
    fit_data: &Trajectory,
    validation: &Trajectory,
    w_star: f64,
    opts: &EstimationOptions,
) -> Result<DictionaryConstants> {
    let g = fit_coefficients(dict, fit_data)?;
    let omega = OmegaBox::from_data(validation)?;
    let eps_star = estimate_eps_star(dict, &g, validation)?;
    let k_psi = estimate_k_psi(dict, &omega, opts.lipschitz_samples, seed::derive(opts.seed, 1))?;
    let phi = plant.phi_oracle();
    let k_xi = match phi {
        Some(f) => estimate_lipschitz(f, &omega, opts.lipschitz_samples, seed::derive(opts.seed, 2))?,
        None => {
            log::warn!("plant {} has no Phi oracle; K_Xi estimated from G Psi", plant.id());
            let gg = g.clone();
            estimate_lipschitz(
                move |u, xi| &gg * dict.eval_unchecked(u.as_slice(), xi.as_slice()),
                &omega,
                opts.lipschitz_samples,
                seed::derive(opts.seed, 2),
            )?
        }
    };
    let k_w = estimate_k_w(dict, &g, phi, validation, w_star, opts.kw_trials, seed::derive(opts.seed, 3))?;
    Ok(DictionaryConstants {
        eps_star,
        k_psi,
        k_xi,
        k_w,
        g_matrix: matrix_rows(&g),
        g_dagger_inf_norm: g_dagger_inf_norm(&g)?,
        g_inf_norm: g_inf_norm(&g),
        omega_box: omega,
    })
}
