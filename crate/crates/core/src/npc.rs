//! One instance of the robust data-driven predictive control program:
//!
//! ```text
//! min  sum_{k=0}^{L-1} |u_k - u^s|_R^2 + |y_k - y^s|_Q^2
//!        + lambda_alpha max(eps*, w*) |alpha|_2^2 + lambda_sigma |sigma|_2^2
//! s.t. [Psi(u_bar, Xi_bar); Xi_bar] + sigma = [H_{L+d}(Psi_hat); H_{L+d+1}(Xi_hat)] alpha
//!      past window fixed to measurements, terminal outputs zero,
//!      |sigma_k|_inf <= K_Psi w* + (eps* + K_w w*) |G^+|_inf (1 + |alpha|_1),
//!      u_bar_k in U
//! ```
//!
//! solved by sequential quadratic programming.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, DictionaryConstants};
use crate::error::{check_dim, Error, Result};
use crate::lifting::{
    self, build_hankel, is_persistently_exciting, HankelMatrix, PeCertificate, Trajectory,
};
use crate::linalg;
use crate::plant::InputBox;
use crate::qp::{solve_qp, QpProblem, QpSettings, QpStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpcConfig {
    /// Prediction horizon `L`.
    pub horizon: usize,
    pub lambda_alpha: f64,
    pub lambda_sigma: f64,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_setpoint: DVector<f64>,
    pub y_setpoint: DVector<f64>,
    pub input_box: InputBox,
    pub sqp_max_iters: usize,
    pub sqp_tol: f64,
    pub qp_tol: f64,
}

impl NpcConfig {
    /// `Q = R = I`, `lambda_alpha = lambda_sigma = 1e3`, setpoints at the
    /// origin, input box `[-5, 5]^m`.
    pub fn new(m: usize, horizon: usize) -> Self {
        Self {
            horizon,
            lambda_alpha: 1e3,
            lambda_sigma: 1e3,
            q: DMatrix::identity(m, m),
            r: DMatrix::identity(m, m),
            u_setpoint: DVector::zeros(m),
            y_setpoint: DVector::zeros(m),
            input_box: InputBox::symmetric(m, 5.0),
            sqp_max_iters: 50,
            sqp_tol: 1e-7,
            qp_tol: 1e-8,
        }
    }

    pub fn m(&self) -> usize {
        self.u_setpoint.len()
    }

    pub fn validate(&self, d_max: usize) -> Result<()> {
        let m = self.m();
        if self.horizon < d_max {
            return Err(Error::Argument(format!(
                "horizon L = {} must be at least d_max = {d_max}",
                self.horizon
            )));
        }
        check_dim("output setpoint", m, self.y_setpoint.len())?;
        check_dim("input box", m, self.input_box.dim())?;
        for (name, mat) in [("Q", &self.q), ("R", &self.r)] {
            check_dim(name, m, mat.nrows())?;
            check_dim(name, m, mat.ncols())?;
            if (mat - mat.transpose()).amax() > 1e-12 * (1.0 + mat.amax()) {
                return Err(Error::Argument(format!("{name} is not symmetric")));
            }
            if mat.clone().cholesky().is_none() {
                return Err(Error::Argument(format!("{name} is not positive definite")));
            }
        }
        if !(self.lambda_alpha > 0.0) || !(self.lambda_sigma > 0.0) {
            return Err(Error::Argument("lambda_alpha and lambda_sigma must be positive".into()));
        }
        if !self.input_box.interior_contains(&self.u_setpoint) {
            return Err(Error::Argument("input setpoint must lie inside the input box".into()));
        }
        if !(self.sqp_tol > 0.0 && self.qp_tol > 0.0 && self.sqp_max_iters > 0) {
            return Err(Error::Argument("SQP tolerances and iteration limit must be positive".into()));
        }
        Ok(())
    }
}

/// `|u - u^s|_R^2 + |y - y^s|_Q^2`.
pub fn stage_cost(config: &NpcConfig, u: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let du = u - &config.u_setpoint;
    let dy = y - &config.y_setpoint;
    du.dot(&(&config.r * &du)) + dy.dot(&(&config.q * &dy))
}

/// Right-hand side of the slack bound,
/// `K_Psi w* + (eps* + K_w w*) |G^+|_inf (1 + |alpha|_1)`.
pub fn slack_bound_rhs(constants: &DictionaryConstants, w_star: f64, alpha_l1: f64) -> f64 {
    let (c0, c1) = slack_bound_coefficients(constants, w_star);
    c0 + c1 * alpha_l1
}

/// `(c0, c1)` with bound `c0 + c1 |alpha|_1`.
fn slack_bound_coefficients(constants: &DictionaryConstants, w_star: f64) -> (f64, f64) {
    let c1 = (constants.eps_star + constants.k_w * w_star) * constants.g_dagger_inf_norm;
    (constants.k_psi * w_star + c1, c1)
}

/// Data-side matrices of the program, built once per data set.
#[derive(Clone, Debug)]
pub struct DataHankels {
    horizon: usize,
    d_max: usize,
    hankel_psi: HankelMatrix,
    hankel_xi: HankelMatrix,
    stacked_pinv: DMatrix<f64>,
    certificate: PeCertificate,
    dictionary_certificate: Option<PeCertificate>,
}

impl DataHankels {
    /// `H_{L+d_max}(Psi(u^d, Xi^d))` and `H_{L+d_max+1}(Xi^d)` from the
    /// (possibly noisy) data. The synthetic input must be persistently
    /// exciting of order `L + d_max + n`.
    pub fn new(dict: &Dictionary, data: &Trajectory, horizon: usize) -> Result<Self> {
        let d_max = data.d_max();
        let n_data = data.len();
        let depth = horizon + d_max;
        if depth + 1 > n_data + 1 || n_data < depth {
            return Err(Error::Precondition(format!(
                "data length {n_data} is shorter than L + d_max = {depth}"
            )));
        }
        let order = depth + data.n();
        let v = lifting::synthetic_inputs(data);
        if order > v.len() {
            return Err(Error::Precondition(format!(
                "data length {n_data} too short for excitation order {order}"
            )));
        }
        let certificate = is_persistently_exciting(&v, order)?;
        if !certificate.satisfied {
            return Err(Error::Precondition(format!(
                "synthetic input not persistently exciting of order {order} (rank {} of {})",
                certificate.rank, certificate.rows
            )));
        }
        let psi = lifting::columns(&dict.evaluate_sequence(data, 0..n_data)?);
        let dictionary_certificate = is_persistently_exciting(&psi, order).ok();
        let xi: Vec<DVector<f64>> = lifting::lift_sequence(data, 0..n_data + 1)?
            .into_iter()
            .map(|x| x.0)
            .collect();
        let hankel_psi = build_hankel(&psi, depth)?;
        let hankel_xi = build_hankel(&xi, depth + 1)?;
        check_dim("Hankel widths", hankel_psi.width(), hankel_xi.width())?;
        let stacked = lifting::stack_rows(hankel_psi.matrix(), hankel_xi.matrix());
        Ok(Self {
            horizon,
            d_max,
            hankel_psi,
            hankel_xi,
            stacked_pinv: linalg::pinv(&stacked),
            certificate,
            dictionary_certificate,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    /// Number of columns, i.e. the dimension of `alpha`.
    pub fn width(&self) -> usize {
        self.hankel_psi.width()
    }

    pub fn hankel_psi(&self) -> &HankelMatrix {
        &self.hankel_psi
    }

    pub fn hankel_xi(&self) -> &HankelMatrix {
        &self.hankel_xi
    }

    /// Persistency of excitation of the synthetic input (order
    /// `L + d_max + n`).
    pub fn certificate(&self) -> &PeCertificate {
        &self.certificate
    }

    /// Rank-based persistency of the dictionary sequence itself, same
    /// order (diagnostic; fails structurally for dictionaries containing
    /// shifted lifted-state coordinates).
    pub fn dictionary_certificate(&self) -> Option<&PeCertificate> {
        self.dictionary_certificate.as_ref()
    }
}

/// Last `d_max` applied inputs and measured outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PastWindow {
    pub inputs: Vec<DVector<f64>>,
    /// One vector of `d_max` samples per output channel.
    pub outputs: Vec<Vec<f64>>,
}

impl PastWindow {
    pub fn zeros(m: usize, d_max: usize) -> Self {
        Self {
            inputs: vec![DVector::zeros(m); d_max],
            outputs: vec![vec![0.0; d_max]; m],
        }
    }
}

#[derive(Clone, Debug)]
pub struct NpcProblemData<'a> {
    pub dictionary: &'a Dictionary,
    pub hankels: &'a DataHankels,
    pub constants: &'a DictionaryConstants,
    pub w_star: f64,
    pub relative_degrees: Vec<usize>,
    pub past: PastWindow,
}

/// Either a fixed value (past window, terminal zeros) or a decision variable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Entry {
    Fixed(f64),
    Var(usize),
}

/// Index map of the decision vector
/// `x = (u_bar_[0,L-1], y_bar_[0,L-1], alpha, sigma_Psi, sigma_Xi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarLayout {
    pub horizon: usize,
    pub d_max: usize,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub width: usize,
}

impl VarLayout {
    pub fn n_inputs(&self) -> usize {
        self.horizon * self.m
    }

    pub fn n_free_outputs(&self) -> usize {
        self.horizon * self.m
    }

    pub fn n_alpha(&self) -> usize {
        self.width
    }

    pub fn n_sigma_psi(&self) -> usize {
        self.r * (self.horizon + self.d_max)
    }

    pub fn n_sigma_xi(&self) -> usize {
        self.n * (self.horizon + self.d_max + 1)
    }

    /// Epigraph variables; the norms in the slack bound are linearized
    /// directly, so there are none.
    pub fn n_auxiliary(&self) -> usize {
        0
    }

    pub fn n_vars(&self) -> usize {
        self.n_inputs()
            + self.n_free_outputs()
            + self.n_alpha()
            + self.n_sigma_psi()
            + self.n_sigma_xi()
            + self.n_auxiliary()
    }

    pub fn u(&self, k: usize, j: usize) -> usize {
        k * self.m + j
    }

    pub fn y(&self, k: usize, i: usize) -> usize {
        self.n_inputs() + k * self.m + i
    }

    pub fn alpha(&self, c: usize) -> usize {
        self.n_inputs() + self.n_free_outputs() + c
    }

    pub fn alpha_start(&self) -> usize {
        self.alpha(0)
    }

    /// Block `b = k + d_max` of `sigma_Psi`.
    pub fn sigma_psi(&self, b: usize, j: usize) -> usize {
        self.alpha_start() + self.width + b * self.r + j
    }

    pub fn sigma_start(&self) -> usize {
        self.alpha_start() + self.width
    }

    pub fn n_sigma(&self) -> usize {
        self.n_sigma_psi() + self.n_sigma_xi()
    }

    /// Block `b = k + d_max` of `sigma_Xi`.
    pub fn sigma_xi(&self, b: usize, j: usize) -> usize {
        self.sigma_start() + self.n_sigma_psi() + b * self.n + j
    }
}

/// Assembled program: variable layout, quadratic cost and the data needed to
/// evaluate and linearize the constraints.
#[derive(Clone, Debug)]
pub struct NpcProblem<'a> {
    data: NpcProblemData<'a>,
    config: NpcConfig,
    layout: VarLayout,
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    cost_constant: f64,
    alpha_weight: f64,
    slack_c0: f64,
    slack_c1: f64,
}

pub fn assemble<'a>(data: NpcProblemData<'a>, config: &NpcConfig) -> Result<NpcProblem<'a>> {
    let d = &data.relative_degrees;
    let m = d.len();
    let n: usize = d.iter().sum();
    let d_max = d.iter().copied().max().unwrap_or(0);
    let dict = data.dictionary;
    let assembly = |msg: String| Error::Assembly(msg);
    if m == 0 || d.contains(&0) {
        return Err(assembly("relative degrees must be >= 1".into()));
    }
    config.validate(d_max).map_err(|e| assembly(e.to_string()))?;
    if dict.m() != m || dict.n() != n || config.m() != m {
        return Err(assembly(format!(
            "dimension mismatch: dictionary ({}, {}), config m = {}, relative degrees give ({m}, {n})",
            dict.m(),
            dict.n(),
            config.m()
        )));
    }
    let hk = data.hankels;
    if hk.horizon() != config.horizon || hk.d_max() != d_max {
        return Err(assembly(format!(
            "Hankel matrices built for L = {}, d_max = {} but problem has L = {}, d_max = {d_max}",
            hk.horizon(),
            hk.d_max(),
            config.horizon
        )));
    }
    if hk.hankel_psi().block_height() != dict.r() || hk.hankel_xi().block_height() != n {
        return Err(assembly("Hankel block heights do not match the dictionary".into()));
    }
    if data.past.inputs.len() != d_max
        || data.past.outputs.len() != m
        || data.past.outputs.iter().any(|c| c.len() != d_max)
        || data.past.inputs.iter().any(|u| u.len() != m)
    {
        return Err(assembly(format!("past window must hold {d_max} samples per channel")));
    }
    let c = data.constants;
    if [c.eps_star, c.k_psi, c.k_xi, c.k_w, c.g_dagger_inf_norm, data.w_star]
        .iter()
        .any(|v| !(*v >= 0.0) || !v.is_finite())
    {
        return Err(assembly("constants and noise bound must be finite and >= 0".into()));
    }

    let layout = VarLayout {
        horizon: config.horizon,
        d_max,
        m,
        n,
        r: dict.r(),
        width: hk.width(),
    };
    let nx = layout.n_vars();
    let mut hessian = DMatrix::zeros(nx, nx);
    let mut linear = DVector::zeros(nx);
    let r_us = &config.r * &config.u_setpoint;
    let q_ys = &config.q * &config.y_setpoint;
    for k in 0..config.horizon {
        for a in 0..m {
            for b in 0..m {
                hessian[(layout.u(k, a), layout.u(k, b))] = 2.0 * config.r[(a, b)];
                hessian[(layout.y(k, a), layout.y(k, b))] = 2.0 * config.q[(a, b)];
            }
            linear[layout.u(k, a)] = -2.0 * r_us[a];
            linear[layout.y(k, a)] = -2.0 * q_ys[a];
        }
    }
    let alpha_weight = config.lambda_alpha * c.eps_star.max(data.w_star);
    for j in 0..layout.width {
        hessian[(layout.alpha(j), layout.alpha(j))] = 2.0 * alpha_weight;
    }
    for j in 0..layout.n_sigma() {
        let idx = layout.sigma_start() + j;
        hessian[(idx, idx)] = 2.0 * config.lambda_sigma;
    }
    let cost_constant = config.horizon as f64
        * (config.u_setpoint.dot(&r_us) + config.y_setpoint.dot(&q_ys));
    let (slack_c0, slack_c1) = slack_bound_coefficients(c, data.w_star);
    Ok(NpcProblem {
        data,
        config: config.clone(),
        layout,
        hessian,
        linear,
        cost_constant,
        alpha_weight,
        slack_c0,
        slack_c1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpcStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    NumericalError,
}

impl NpcStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            NpcStatus::Optimal => "optimal",
            NpcStatus::Infeasible => "infeasible",
            NpcStatus::MaxIterations => "max_iters",
            NpcStatus::NumericalError => "numerical_error",
        }
    }
}

/// One accepted SQP step: merit before and after, at penalty `mu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeritStep {
    pub mu: f64,
    pub before: f64,
    pub after: f64,
    pub step_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpcSolution {
    pub horizon: usize,
    pub d_max: usize,
    /// `u_bar_k` for `k` in `[-d_max, L-1]` (index `k + d_max`).
    pub u_bar: Vec<DVector<f64>>,
    /// Channel `i` holds `y_bar_{i,k}` for `k` in `[-d_max, L+d_i-1]`
    /// (index `k + d_max`).
    pub y_bar: Vec<Vec<f64>>,
    pub alpha: DVector<f64>,
    pub sigma_psi: DVector<f64>,
    pub sigma_xi: DVector<f64>,
    #[serde(with = "crate::nonfinite")]
    pub cost: f64,
    pub status: NpcStatus,
    /// NaN when no solve produced multipliers.
    #[serde(with = "crate::nonfinite")]
    pub kkt_residual: f64,
    /// Accepted SQP steps.
    pub sqp_iters: usize,
    pub merit_history: Vec<MeritStep>,
    pub certificate: Option<DVector<f64>>,
}

impl NpcSolution {
    pub fn u_at(&self, k: isize) -> &DVector<f64> {
        &self.u_bar[(k + self.d_max as isize) as usize]
    }

    pub fn y_at(&self, i: usize, k: isize) -> f64 {
        self.y_bar[i][(k + self.d_max as isize) as usize]
    }

    /// First `d_max` optimal inputs `u_bar_[0, d_max-1]`.
    pub fn first_inputs(&self) -> &[DVector<f64>] {
        &self.u_bar[self.d_max..2 * self.d_max]
    }

    /// Optimal inputs `u_bar_[0, L-1]`.
    pub fn predicted_inputs(&self) -> &[DVector<f64>] {
        &self.u_bar[self.d_max..]
    }

    pub fn alpha_l1(&self) -> f64 {
        self.alpha.lp_norm(1)
    }

    pub fn alpha_l2(&self) -> f64 {
        self.alpha.norm()
    }

    pub fn sigma_inf_norm(&self) -> f64 {
        linalg::vec_inf_norm(&self.sigma_psi).max(linalg::vec_inf_norm(&self.sigma_xi))
    }

    /// Largest `|sigma_k|_inf` of the time-`k` blocks (Psi block for
    /// `k < L`, Xi block for all `k` in `[-d_max, L]`).
    pub fn sigma_block_inf(&self, r: usize, n: usize, k: isize) -> f64 {
        let b = (k + self.d_max as isize) as usize;
        let mut s: f64 = 0.0;
        if b < self.horizon + self.d_max {
            s = s.max(linalg::vec_inf_norm(&self.sigma_psi.rows(b * r, r).into_owned()));
        }
        s.max(linalg::vec_inf_norm(&self.sigma_xi.rows(b * n, n).into_owned()))
    }

    /// Candidate for the next solve, `d_max` steps later: the tail of this
    /// solution, padded with the setpoints. Past entries are overwritten by
    /// the measured window when used.
    pub fn shifted(&self, u_setpoint: &DVector<f64>, y_setpoint: &DVector<f64>) -> NpcSolution {
        let d = self.d_max;
        let mut out = self.clone();
        let len_u = self.u_bar.len();
        out.u_bar = (0..len_u)
            .map(|idx| self.u_bar.get(idx + d).cloned().unwrap_or_else(|| u_setpoint.clone()))
            .collect();
        out.y_bar = self
            .y_bar
            .iter()
            .enumerate()
            .map(|(i, ch)| {
                (0..ch.len())
                    .map(|idx| {
                        // Indices past L keep the terminal zeros of the new
                        // problem; the assembly overrides them anyway.
                        ch.get(idx + d).copied().unwrap_or(y_setpoint[i])
                    })
                    .collect()
            })
            .collect();
        out.merit_history.clear();
        out
    }

    /// CSV block: `k,u_bar,y_bar_1..m,sigma_inf_norm` per time index
    /// `k` in `[-d_max, L + d_max - 1]`, then the scalar footer
    /// `J,alpha_l1,alpha_l2,kkt,iters,status`.
    pub fn write_csv<W: Write>(&self, writer: W, r: usize, n: usize) -> Result<()> {
        let m = self.y_bar.len();
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
        let mut header = vec!["k".to_string(), "u_bar".to_string()];
        header.extend((1..=m).map(|i| format!("y_bar_{i}")));
        header.push("sigma_inf_norm".into());
        w.write_record(&header)?;
        let last = self.y_bar.iter().map(Vec::len).max().unwrap_or(0);
        for idx in 0..last {
            let k = idx as isize - self.d_max as isize;
            let u = self
                .u_bar
                .get(idx)
                .map(|u| u.iter().map(f64::to_string).collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
            let mut rec = vec![k.to_string(), u];
            for ch in &self.y_bar {
                rec.push(ch.get(idx).map(f64::to_string).unwrap_or_default());
            }
            let sig = if idx <= self.horizon + self.d_max {
                self.sigma_block_inf(r, n, k).to_string()
            } else {
                String::new()
            };
            rec.push(sig);
            w.write_record(&rec)?;
        }
        w.write_record(["J", "alpha_l1", "alpha_l2", "kkt", "iters", "status"])?;
        w.write_record([
            self.cost.to_string(),
            self.alpha_l1().to_string(),
            self.alpha_l2().to_string(),
            self.kkt_residual.to_string(),
            self.sqp_iters.to_string(),
            self.status.as_str().to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

impl<'a> NpcProblem<'a> {
    pub fn layout(&self) -> &VarLayout {
        &self.layout
    }

    pub fn config(&self) -> &NpcConfig {
        &self.config
    }

    pub fn data(&self) -> &NpcProblemData<'a> {
        &self.data
    }

    /// `c0 + c1 |alpha|_1` coefficients of the slack bound.
    pub fn slack_bound(&self) -> (f64, f64) {
        (self.slack_c0, self.slack_c1)
    }

    /// Slack variables are pinned to zero when the bound vanishes.
    pub fn slack_pinned(&self) -> bool {
        self.slack_c0 == 0.0 && self.slack_c1 == 0.0
    }

    pub fn input_entry(&self, k: isize, j: usize) -> Entry {
        if k < 0 {
            Entry::Fixed(self.data.past.inputs[(k + self.layout.d_max as isize) as usize][j])
        } else {
            Entry::Var(self.layout.u(k as usize, j))
        }
    }

    pub fn output_entry(&self, i: usize, k: isize) -> Entry {
        let l = self.layout.horizon as isize;
        if k < 0 {
            Entry::Fixed(self.data.past.outputs[i][(k + self.layout.d_max as isize) as usize])
        } else if k >= l {
            Entry::Fixed(0.0)
        } else {
            Entry::Var(self.layout.y(k as usize, i))
        }
    }

    /// Entries of `Xi_bar_k`, channel by channel.
    pub fn xi_entries(&self, k: isize) -> Vec<Entry> {
        self.data
            .relative_degrees
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| (0..d as isize).map(move |j| (i, k + j)))
            .map(|(i, kk)| self.output_entry(i, kk))
            .collect()
    }

    fn value(entry: Entry, x: &DVector<f64>) -> f64 {
        match entry {
            Entry::Fixed(v) => v,
            Entry::Var(i) => x[i],
        }
    }

    fn u_vec(&self, x: &DVector<f64>, k: isize) -> DVector<f64> {
        DVector::from_fn(self.layout.m, |j, _| Self::value(self.input_entry(k, j), x))
    }

    fn xi_vec(&self, x: &DVector<f64>, k: isize) -> DVector<f64> {
        let e = self.xi_entries(k);
        DVector::from_iterator(e.len(), e.into_iter().map(|en| Self::value(en, x)))
    }

    fn alpha_of<'x>(&self, x: &'x DVector<f64>) -> nalgebra::DVectorView<'x, f64> {
        x.rows(self.layout.alpha_start(), self.layout.width)
    }

    /// Cost of the program at `x`.
    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.cost_constant
    }

    /// Exact constraint residual `[Psi(u,Xi); Xi] + sigma - H alpha`.
    pub fn hankel_residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let (r, n, d) = (self.layout.r, self.layout.n, self.layout.d_max as isize);
        let blocks_psi = self.layout.horizon + self.layout.d_max;
        let alpha = self.alpha_of(x);
        let h_alpha_psi = self.data.hankels.hankel_psi().matrix() * alpha;
        let h_alpha_xi = self.data.hankels.hankel_xi().matrix() * alpha;
        let mut out = DVector::zeros(r * blocks_psi + n * (blocks_psi + 1));
        for b in 0..blocks_psi {
            let k = b as isize - d;
            let psi = self
                .data
                .dictionary
                .evaluate(&self.u_vec(x, k), &self.xi_vec(x, k))
                .expect("dimensions checked at assembly");
            for j in 0..r {
                out[b * r + j] = psi[j] + x[self.layout.sigma_psi(b, j)] - h_alpha_psi[b * r + j];
            }
        }
        let off = r * blocks_psi;
        for b in 0..=blocks_psi {
            let k = b as isize - d;
            let xi = self.xi_vec(x, k);
            for j in 0..n {
                out[off + b * n + j] = xi[j] + x[self.layout.sigma_xi(b, j)] - h_alpha_xi[b * n + j];
            }
        }
        out
    }

    /// Violation of the inequality rows, with `|alpha|_1` in the slack bound
    /// replaced by `signs^T alpha`.
    fn inequality_violation(&self, x: &DVector<f64>, signs: &[f64]) -> f64 {
        let l = &self.layout;
        let s_alpha: f64 = self.alpha_of(x).iter().zip(signs).map(|(a, s)| a * s).sum();
        let bound = self.slack_c0 + self.slack_c1 * s_alpha;
        let mut v = 0.0;
        for j in 0..l.n_sigma() {
            v += (x[l.sigma_start() + j].abs() - bound).max(0.0);
        }
        let bx = &self.config.input_box;
        for k in 0..l.horizon {
            for j in 0..l.m {
                let u = x[l.u(k, j)];
                v += (u - bx.upper[j]).max(0.0) + (bx.lower[j] - u).max(0.0);
            }
        }
        v
    }

    fn merit(&self, x: &DVector<f64>, mu: f64, signs: &[f64]) -> f64 {
        let eq: f64 = self.hankel_residual(x).iter().map(|v| v.abs()).sum();
        self.cost(x) + mu * (eq + self.inequality_violation(x, signs))
    }

    /// Quadratic subproblem linearized at `x0`, in the full variable `x`,
    /// with `|alpha|_1` replaced by `sign(alpha0)^T alpha`.
    pub fn linearized_qp(&self, x0: &DVector<f64>) -> Result<QpProblem> {
        let signs: Vec<f64> = self.alpha_of(x0).iter().map(|v| sign(*v)).collect();
        self.linearized_qp_with_signs(x0, &signs)
    }

    /// As [`NpcProblem::linearized_qp`] with explicit coefficients
    /// `s`, `|s_c| <= 1`, for the `|alpha|_1` term; any such choice gives a
    /// restriction of the slack bound since `s^T alpha <= |alpha|_1`.
    pub fn linearized_qp_with_signs(&self, x0: &DVector<f64>, signs: &[f64]) -> Result<QpProblem> {
        check_dim("sign vector", self.layout.width, signs.len())?;
        let l = &self.layout;
        let (r, n, m) = (l.r, l.n, l.m);
        let d = l.d_max as isize;
        let nx = l.n_vars();
        let blocks_psi = l.horizon + l.d_max;
        let n_eq = r * blocks_psi + n * (blocks_psi + 1);
        let pinned = self.slack_pinned();
        let n_eq_total = n_eq + if pinned { l.n_sigma() } else { 0 };
        let mut e = DMatrix::zeros(n_eq_total, nx);
        let mut rhs = DVector::zeros(n_eq_total);
        let hp = self.data.hankels.hankel_psi().matrix();
        let hx = self.data.hankels.hankel_xi().matrix();
        let a0 = l.alpha_start();

        for b in 0..blocks_psi {
            let k = b as isize - d;
            let u0 = self.u_vec(x0, k);
            let xi0 = self.xi_vec(x0, k);
            let psi0 = self.data.dictionary.evaluate(&u0, &xi0)?;
            let (ju, jx) = self.data.dictionary.jacobian(&u0, &xi0)?;
            let u_entries: Vec<Entry> = (0..m).map(|j| self.input_entry(k, j)).collect();
            let xi_entries = self.xi_entries(k);
            for j in 0..r {
                let row = b * r + j;
                let mut c = -psi0[j];
                for (col, en) in u_entries.iter().enumerate() {
                    if let Entry::Var(idx) = en {
                        e[(row, *idx)] += ju[(j, col)];
                        c += ju[(j, col)] * x0[*idx];
                    }
                }
                for (col, en) in xi_entries.iter().enumerate() {
                    if let Entry::Var(idx) = en {
                        e[(row, *idx)] += jx[(j, col)];
                        c += jx[(j, col)] * x0[*idx];
                    }
                }
                e[(row, l.sigma_psi(b, j))] = 1.0;
                for cidx in 0..l.width {
                    e[(row, a0 + cidx)] = -hp[(row, cidx)];
                }
                rhs[row] = c;
            }
        }
        let off = r * blocks_psi;
        for b in 0..=blocks_psi {
            let k = b as isize - d;
            for (j, en) in self.xi_entries(k).into_iter().enumerate() {
                let row = off + b * n + j;
                match en {
                    Entry::Var(idx) => e[(row, idx)] = 1.0,
                    Entry::Fixed(v) => rhs[row] = -v,
                }
                e[(row, l.sigma_xi(b, j))] = 1.0;
                for cidx in 0..l.width {
                    e[(row, a0 + cidx)] = -hx[(b * n + j, cidx)];
                }
            }
        }
        if pinned {
            for j in 0..l.n_sigma() {
                e[(n_eq + j, l.sigma_start() + j)] = 1.0;
            }
        }

        let n_box = 2 * l.n_inputs();
        let n_slack = if pinned { 0 } else { 2 * l.n_sigma() };
        let mut g = DMatrix::zeros(n_box + n_slack, nx);
        let mut h = DVector::zeros(n_box + n_slack);
        let bx = &self.config.input_box;
        for k in 0..l.horizon {
            for j in 0..m {
                let row = 2 * (k * m + j);
                g[(row, l.u(k, j))] = 1.0;
                h[row] = bx.upper[j];
                g[(row + 1, l.u(k, j))] = -1.0;
                h[row + 1] = -bx.lower[j];
            }
        }
        if !pinned {
            // |sigma_j| <= c0 + c1 s^T alpha.
            for j in 0..l.n_sigma() {
                let row = n_box + 2 * j;
                let sj = l.sigma_start() + j;
                g[(row, sj)] = 1.0;
                g[(row + 1, sj)] = -1.0;
                for (cidx, s) in signs.iter().enumerate() {
                    if *s != 0.0 {
                        g[(row, a0 + cidx)] = -self.slack_c1 * s;
                        g[(row + 1, a0 + cidx)] = -self.slack_c1 * s;
                    }
                }
                h[row] = self.slack_c0;
                h[row + 1] = self.slack_c0;
            }
        }

        Ok(QpProblem::new(self.hessian.clone(), self.linear.clone())
            .with_equalities(e, rhs)
            .with_inequalities(g, h))
    }

    /// `sum_j y_j Hess Psi_j` over the input and free-output variables (the
    /// leading `2 L m` coordinates), `y` being multipliers of the Psi rows.
    pub fn constraint_curvature(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let l = &self.layout;
        let nv = l.n_inputs() + l.n_free_outputs();
        let mut out = DMatrix::zeros(nv, nv);
        for b in 0..l.horizon + l.d_max {
            let k = b as isize - l.d_max as isize;
            let w = y.rows(b * l.r, l.r).into_owned();
            if w.amax() == 0.0 {
                continue;
            }
            let hess = self.data.dictionary.weighted_hessian(&self.u_vec(x, k), &self.xi_vec(x, k), &w)?;
            let entries: Vec<Entry> = (0..l.m)
                .map(|j| self.input_entry(k, j))
                .chain(self.xi_entries(k))
                .collect();
            for (a, ea) in entries.iter().enumerate() {
                let Entry::Var(ia) = ea else { continue };
                for (c, ec) in entries.iter().enumerate() {
                    if let Entry::Var(ic) = ec {
                        out[(*ia, *ic)] += hess[(a, c)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Cold start: zero free inputs and outputs, minimum-norm `alpha` for the
    /// resulting window, slack equal to the exact residual.
    pub fn cold_start(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.layout.n_vars());
        self.fit_alpha_and_sigma(&mut x);
        x
    }

    /// Decision vector from a solution candidate (e.g. a shifted previous
    /// optimum); `alpha` and `sigma` are recomputed.
    pub fn start_from(&self, guess: &NpcSolution) -> DVector<f64> {
        let l = &self.layout;
        let mut x = DVector::zeros(l.n_vars());
        for k in 0..l.horizon {
            let idx = k + l.d_max;
            for j in 0..l.m {
                if let Some(u) = guess.u_bar.get(idx) {
                    x[l.u(k, j)] = u[j];
                }
                if let Some(y) = guess.y_bar.get(j).and_then(|c| c.get(idx)) {
                    x[l.y(k, j)] = *y;
                }
            }
        }
        self.fit_alpha_and_sigma(&mut x);
        x
    }

    fn fit_alpha_and_sigma(&self, x: &mut DVector<f64>) {
        let l = &self.layout;
        for j in 0..l.n_sigma() {
            x[l.sigma_start() + j] = 0.0;
        }
        let blocks_psi = l.horizon + l.d_max;
        let d = l.d_max as isize;
        let mut target = DVector::zeros(l.r * blocks_psi + l.n * (blocks_psi + 1));
        for b in 0..blocks_psi {
            let k = b as isize - d;
            let psi = self
                .data
                .dictionary
                .evaluate(&self.u_vec(x, k), &self.xi_vec(x, k))
                .expect("dimensions checked at assembly");
            target.rows_mut(b * l.r, l.r).copy_from(&psi);
        }
        let off = l.r * blocks_psi;
        for b in 0..=blocks_psi {
            let xi = self.xi_vec(x, b as isize - d);
            target.rows_mut(off + b * l.n, l.n).copy_from(&xi);
        }
        let alpha = &self.data.hankels.stacked_pinv * &target;
        x.rows_mut(l.alpha_start(), l.width).copy_from(&alpha);
        self.set_exact_sigma(x);
    }

    /// `sigma = H alpha - [Psi(u, Xi); Xi]`, making the Hankel constraint
    /// hold exactly.
    fn set_exact_sigma(&self, x: &mut DVector<f64>) {
        let res = self.hankel_residual(x);
        let s0 = self.layout.sigma_start();
        for j in 0..res.len() {
            x[s0 + j] -= res[j];
        }
    }

    fn solution_from(&self, x: &DVector<f64>) -> NpcSolution {
        let l = &self.layout;
        let u_bar = (-(l.d_max as isize)..l.horizon as isize).map(|k| self.u_vec(x, k)).collect();
        let y_bar = self
            .data
            .relative_degrees
            .iter()
            .enumerate()
            .map(|(i, &di)| {
                (-(l.d_max as isize)..(l.horizon + di) as isize)
                    .map(|k| Self::value(self.output_entry(i, k), x))
                    .collect()
            })
            .collect();
        let s0 = l.sigma_start();
        NpcSolution {
            horizon: l.horizon,
            d_max: l.d_max,
            u_bar,
            y_bar,
            alpha: self.alpha_of(x).into_owned(),
            sigma_psi: x.rows(s0, l.n_sigma_psi()).into_owned(),
            sigma_xi: x.rows(s0 + l.n_sigma_psi(), l.n_sigma_xi()).into_owned(),
            cost: self.cost(x),
            status: NpcStatus::Optimal,
            kkt_residual: f64::NAN,
            sqp_iters: 0,
            merit_history: Vec::new(),
            certificate: None,
        }
    }

    /// Cost recomputed from the returned trajectories and weights.
    pub fn cost_of(&self, sol: &NpcSolution) -> f64 {
        let mut j = 0.0;
        for k in 0..self.layout.horizon as isize {
            let y = DVector::from_fn(self.layout.m, |i, _| sol.y_at(i, k));
            j += stage_cost(&self.config, sol.u_at(k), &y);
        }
        j + self.alpha_weight * sol.alpha.norm_squared()
            + self.config.lambda_sigma
                * (sol.sigma_psi.norm_squared() + sol.sigma_xi.norm_squared())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Upper limit on the number of sign patterns tried for the `|alpha|_1` term.
const MAX_SIGN_PHASES: usize = 4;

/// Mutable SQP state shared by the sign phases.
struct SqpState {
    x: DVector<f64>,
    mu: f64,
    history: Vec<MeritStep>,
    accepted: usize,
    iterations: usize,
    kkt: f64,
    certificate: Option<DVector<f64>>,
}

/// SQP solve. `init` is a candidate aligned with this problem's time
/// (see [`NpcSolution::shifted`]); `None` means cold start.
///
/// `|alpha|_1` in the slack bound is handled in phases: each phase fixes
/// `s = sign(alpha)` at its starting point and solves the smooth problem
/// with `s^T alpha` in place of the norm. Since `s^T alpha <= |alpha|_1`
/// every phase solution is feasible for the original bound, and the next
/// phase starts feasible for its own restriction.
pub fn solve(problem: &NpcProblem<'_>, init: Option<&NpcSolution>) -> Result<NpcSolution> {
    let x = match init {
        Some(s) => problem.start_from(s),
        None => problem.cold_start(),
    };
    let mut st = SqpState {
        x,
        mu: 0.0,
        history: Vec::new(),
        accepted: 0,
        iterations: 0,
        kkt: f64::NAN,
        certificate: None,
    };
    let l = &problem.layout;
    let signs_of = |x: &DVector<f64>| -> Vec<f64> { (0..l.width).map(|c| sign(x[l.alpha(c)])).collect() };
    let mut signs = signs_of(&st.x);
    let mut status = NpcStatus::MaxIterations;
    for _ in 0..MAX_SIGN_PHASES {
        status = sqp_phase(problem, &mut st, &signs)?;
        if status != NpcStatus::Optimal || problem.slack_c1 == 0.0 {
            break;
        }
        let next = signs_of(&st.x);
        if next == signs {
            break;
        }
        signs = next;
    }

    let mut x = st.x;
    if status == NpcStatus::Infeasible {
        let mut out = problem.solution_from(&x);
        out.status = status;
        out.certificate = st.certificate;
        out.sqp_iters = st.accepted;
        out.merit_history = st.history;
        out.kkt_residual = st.kkt;
        return Ok(out);
    }
    problem.set_exact_sigma(&mut x);
    let mut out = problem.solution_from(&x);
    out.cost = problem.cost_of(&out);
    out.status = status;
    out.kkt_residual = st.kkt;
    out.sqp_iters = st.accepted;
    out.merit_history = st.history;
    Ok(out)
}

/// SQP iterations with the sign vector fixed; stops at convergence, on a
/// subproblem failure or when the shared iteration budget runs out.
fn sqp_phase(problem: &NpcProblem<'_>, st: &mut SqpState, signs: &[f64]) -> Result<NpcStatus> {
    let cfg = &problem.config;
    let l = &problem.layout;
    let qp_settings = QpSettings {
        tol: cfg.qp_tol,
        ..QpSettings::default()
    };
    // Proximal weight on alpha: keeps the step unique when the alpha penalty
    // vanishes (nominal case); it scales with the cost weights.
    let prox = 1e-8 * cfg.lambda_sigma;
    let mut multipliers: Option<DVector<f64>> = None;
    while st.iterations < cfg.sqp_max_iters {
        st.iterations += 1;
        let x = &st.x;
        let mut qp = problem.linearized_qp_with_signs(x, signs)?;
        for c in 0..l.width {
            let idx = l.alpha(c);
            qp.hessian[(idx, idx)] += 2.0 * prox;
            qp.linear[idx] -= 2.0 * prox * x[idx];
        }
        if let Some(y) = &multipliers {
            add_curvature(&mut qp, &problem.constraint_curvature(x, y)?, x);
        }
        let sol = solve_qp(&qp, &qp_settings)?;
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => {
                st.certificate = sol.certificate;
                return Ok(NpcStatus::Infeasible);
            }
            QpStatus::MaxIterations => return Ok(NpcStatus::MaxIterations),
            QpStatus::Unbounded | QpStatus::NumericalError => return Ok(NpcStatus::NumericalError),
        }
        st.kkt = sol.kkt.max();
        let step = &sol.x - x;
        let scale = linalg::vec_inf_norm(x).max(1.0);
        let step_norm = linalg::vec_inf_norm(&step);
        if step_norm < cfg.sqp_tol * scale {
            // The subproblem point satisfies the linearized constraints
            // exactly; taking it removes the O(step) residual left by the
            // finite-difference Jacobian.
            st.x = sol.x;
            return Ok(NpcStatus::Optimal);
        }
        multipliers = Some(sol.eq_multipliers.rows(0, l.n_sigma_psi()).into_owned());
        let lam = linalg::vec_inf_norm(&sol.eq_multipliers)
            .max(linalg::vec_inf_norm(&sol.ineq_multipliers));
        st.mu = st.mu.max(1.1 * lam).max(1e-8);
        let mu = st.mu;

        // Directional derivative bound of the l1 merit along the step: the
        // linearized constraints hold at x + step.
        let grad = &problem.hessian * x + &problem.linear;
        let phi0 = problem.merit(x, mu, signs);
        let viol0 = (phi0 - problem.cost(x)) / mu;
        let slope = (grad.dot(&step) - mu * viol0).min(0.0);
        let mut t = 1.0;
        let mut accepted_step = None;
        let full = x + &step;
        let phi_full = problem.merit(&full, mu, signs);
        if phi_full <= phi0 + 1e-4 * slope {
            accepted_step = Some((full, phi_full));
        } else if let Some((soc, phi)) =
            second_order_correction(problem, &qp, &full, &qp_settings, mu, signs)
        {
            // Curvature of Psi spoils the full step (Maratos effect); the
            // corrected point removes the second-order residual.
            if phi <= phi0 + 1e-4 * slope {
                accepted_step = Some((soc, phi));
            }
        }
        if accepted_step.is_none() {
            t = 0.5;
            for _ in 0..40 {
                let trial = x + &step * t;
                let phi = problem.merit(&trial, mu, signs);
                if phi <= phi0 + 1e-4 * t * slope {
                    accepted_step = Some((trial, phi));
                    break;
                }
                t *= 0.5;
            }
        }
        // Steps this short are at the accuracy of the finite-difference
        // Jacobians: the merit cannot resolve them any more.
        let near_stationary = step_norm <= 1e3 * cfg.sqp_tol * scale;
        match accepted_step {
            Some((trial, phi)) if t >= 1e-6 || !near_stationary => {
                st.history.push(MeritStep {
                    mu,
                    before: phi0,
                    after: phi,
                    step_length: t,
                });
                st.x = trial;
                st.accepted += 1;
            }
            _ if near_stationary => {
                st.x = sol.x;
                return Ok(NpcStatus::Optimal);
            }
            _ => return Ok(NpcStatus::NumericalError),
        }
    }
    Ok(NpcStatus::MaxIterations)
}

/// Adds the constraint curvature to the leading block of the subproblem
/// Hessian. The subproblem is posed in `x`, not in the step, so the linear
/// term is shifted to keep its gradient at `x0` unchanged.
///
/// The result is usually indefinite in the full space while positive on the
/// null space of the equality rows; adding `rho/2 |E x - e|^2`, which
/// vanishes on the feasible set, then makes it convex without changing the
/// subproblem's solution. If no moderate `rho` works, negative eigenvalues
/// of the block are clipped instead.
fn add_curvature(qp: &mut QpProblem, curvature: &DMatrix<f64>, x0: &DVector<f64>) {
    let nv = curvature.nrows();
    let nx = qp.hessian.nrows();
    let mut hess = qp.hessian.clone();
    let mut block = hess.view_mut((0, 0), (nv, nv));
    block += curvature;
    let floor = 1e-6 * qp.hessian.diagonal().amax().max(f64::MIN_POSITIVE);
    let margin = DMatrix::identity(nx, nx) * floor;
    let shift_linear = |qp: &mut QpProblem, new_block: &DMatrix<f64>| {
        let delta = new_block - qp.hessian.view((0, 0), (nv, nv));
        let shift = delta * x0.rows(0, nv);
        for i in 0..nv {
            qp.linear[i] -= shift[i];
        }
    };

    let ete = qp.eq_matrix.transpose() * &qp.eq_matrix;
    let ete_scale = ete.diagonal().amax();
    if ete_scale > 0.0 {
        let mut rho = 0.0;
        let rho0 = curvature.amax().max(floor) / ete_scale;
        for attempt in 0..8 {
            let trial = &hess + &ete * rho - &margin;
            if trial.cholesky().is_some() {
                let new_block = hess.view((0, 0), (nv, nv)).into_owned();
                shift_linear(qp, &new_block);
                qp.hessian = hess + &ete * rho;
                let ete_rhs = qp.eq_matrix.transpose() * &qp.eq_rhs;
                qp.linear -= ete_rhs * rho;
                return;
            }
            rho = rho0 * 10f64.powi(attempt);
        }
    }

    let b = hess.view((0, 0), (nv, nv)).into_owned();
    let eig = nalgebra::SymmetricEigen::new(0.5 * (&b + b.transpose()));
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    shift_linear(qp, &rebuilt);
    qp.hessian.view_mut((0, 0), (nv, nv)).copy_from(&rebuilt);
}

/// Re-solves the subproblem with the equality right-hand side shifted by the
/// nonlinear residual at the trial point.
fn second_order_correction(
    problem: &NpcProblem<'_>,
    qp: &QpProblem,
    trial: &DVector<f64>,
    settings: &QpSettings,
    mu: f64,
    signs: &[f64],
) -> Option<(DVector<f64>, f64)> {
    let residual = problem.hankel_residual(trial);
    let mut corrected = qp.clone();
    for (j, r) in residual.iter().enumerate() {
        corrected.eq_rhs[j] -= r;
    }
    let sol = solve_qp(&corrected, settings).ok()?;
    if sol.status != QpStatus::Optimal {
        return None;
    }
    let phi = problem.merit(&sol.x, mu, signs);
    Some((sol.x, phi))
}

/// Checks the solution invariants: past window verbatim, terminal zeros,
/// slack bound (up to `tol`), input box. Returns the first violation.
pub fn check_solution(problem: &NpcProblem<'_>, sol: &NpcSolution, tol: f64) -> Result<()> {
    let l = problem.layout();
    let past = &problem.data().past;
    for k in 0..l.d_max {
        if sol.u_bar[k] != past.inputs[k] {
            return Err(Error::Numerical(format!("past input {k} altered")));
        }
        for (i, ch) in past.outputs.iter().enumerate() {
            if sol.y_bar[i][k] != ch[k] {
                return Err(Error::Numerical(format!("past output ({i}, {k}) altered")));
            }
        }
    }
    for (i, &di) in problem.data().relative_degrees.iter().enumerate() {
        for k in l.horizon..l.horizon + di {
            if sol.y_at(i, k as isize) != 0.0 {
                return Err(Error::Numerical(format!("terminal output ({i}, {k}) nonzero")));
            }
        }
    }
    let bound = slack_bound_rhs(problem.data().constants, problem.data().w_star, sol.alpha_l1());
    if sol.sigma_inf_norm() > bound + tol {
        return Err(Error::Numerical(format!(
            "slack {:.3e} exceeds bound {bound:.3e}",
            sol.sigma_inf_norm()
        )));
    }
    let bx = &problem.config().input_box;
    if let Some(k) = sol.u_bar.iter().position(|u| !bx.contains(u)) {
        return Err(Error::Numerical(format!("input {k} leaves the box")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{self, OmegaBox};

    #[test]
    fn stage_cost_examples() {
        let cfg = NpcConfig::new(2, 2);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let y = DVector::from_vec(vec![0.0, 2.0]);
        assert_eq!(stage_cost(&cfg, &u, &y), 5.0);
        assert_eq!(stage_cost(&cfg, &cfg.u_setpoint, &cfg.y_setpoint), 0.0);
        let mut cfg = NpcConfig::new(1, 2);
        cfg.q *= 2.0;
        let one = DVector::from_element(1, 1.0);
        assert_eq!(stage_cost(&cfg, &one, &one), 3.0);
    }

    fn constants(eps: f64, k_psi: f64, k_w: f64, gd: f64) -> DictionaryConstants {
        DictionaryConstants {
            eps_star: eps,
            k_psi,
            k_xi: 0.0,
            k_w,
            g_matrix: vec![vec![1.0]],
            g_dagger_inf_norm: gd,
            g_inf_norm: 1.0,
            omega_box: OmegaBox::new(1, vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
        }
    }

    #[test]
    fn slack_bound_examples() {
        assert_eq!(slack_bound_rhs(&constants(0.0, 0.0, 0.0, 0.0), 0.0, 3.0), 0.0);
        let v = slack_bound_rhs(&constants(0.1, 1.0, 2.0, 0.5), 0.01, 3.0);
        assert!((v - 0.25).abs() < 1e-15);
        let c = constants(0.1, 1.0, 2.0, 0.5);
        assert!((slack_bound_rhs(&c, 0.0, 3.0) - 0.1 * 0.5 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = NpcConfig::new(1, 1);
        assert!(cfg.validate(2).is_err());
        cfg.horizon = 4;
        assert!(cfg.validate(2).is_ok());
        cfg.r[(0, 0)] = -1.0;
        assert!(cfg.validate(2).is_err());
        let mut cfg = NpcConfig::new(1, 4);
        cfg.u_setpoint[0] = 5.0;
        assert!(cfg.validate(2).is_err());
        let _ = dictionary::FD_STEP;
    }
}
