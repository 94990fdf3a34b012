//! Receding-horizon loop: solve, apply the first `d_max` inputs, shift.
//! Logs the Lyapunov candidate `V_t = J*_t + c3 |Xi_t|^2` (identity weight),
//! checks the open-loop deviation bound online and summarizes sweeps.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{self, Dictionary, DictionaryConstants, EstimationOptions};
use crate::error::{Error, Result};
use crate::lifting::{add_noise, Trajectory};
use crate::npc::{self, DataHankels, NpcConfig, NpcProblemData, NpcSolution, NpcStatus, PastWindow};
use crate::plant::{PlantModel, PlantState};
use crate::seed;

/// `P^k(K) = K^k + ... + K + 1`.
pub fn poly_p(k: usize, big_k: f64) -> f64 {
    if big_k == 1.0 {
        (k + 1) as f64
    } else {
        (big_k.powi(k as i32 + 1) - 1.0) / (big_k - 1.0)
    }
}

/// Open-loop deviation bound for output `i` at prediction index `k`:
/// `P^{k+d_max-d_i}(K_Xi) (eps*(1+|alpha|_1) + (1+K_w) w* |alpha|_1
/// + (1+|G|_inf) |sigma|_inf)`.
#[allow(clippy::too_many_arguments)]
pub fn lemma1_bound(
    k: usize,
    d_i: usize,
    d_max: usize,
    constants: &DictionaryConstants,
    w_star: f64,
    alpha_l1: f64,
    sigma_inf: f64,
    g_inf_norm: f64,
) -> f64 {
    let bracket = constants.eps_star * (1.0 + alpha_l1)
        + (1.0 + constants.k_w) * w_star * alpha_l1
        + (1.0 + g_inf_norm) * sigma_inf;
    poly_p(k + d_max - d_i, constants.k_xi) * bracket
}

/// Deviation bound that also accounts for measurement noise in the past
/// window: the recursion behind [`lemma1_bound`] starts from a lifted-state
/// error of zero, whereas the window carries errors up to `w*`. With
/// `K = max(1, K_Xi)` and `s = k + d_max - d_i + 1` the recursion gives
/// `P^{s-1}(K) c + K^s w*`, `c` being the bracket of [`lemma1_bound`].
#[allow(clippy::too_many_arguments)]
pub fn window_noise_bound(
    k: usize,
    d_i: usize,
    d_max: usize,
    constants: &DictionaryConstants,
    w_star: f64,
    alpha_l1: f64,
    sigma_inf: f64,
    g_inf_norm: f64,
) -> f64 {
    let big_k = constants.k_xi.max(1.0);
    let widened = DictionaryConstants {
        k_xi: big_k,
        ..constants.clone()
    };
    lemma1_bound(k, d_i, d_max, &widened, w_star, alpha_l1, sigma_inf, g_inf_norm)
        + big_k.powi((k + d_max - d_i + 1) as i32) * w_star
}

/// Everything a closed-loop run needs besides the initial state.
#[derive(Clone, Debug)]
pub struct ClosedLoopSetup<'a> {
    pub plant: &'a PlantModel,
    pub dictionary: &'a Dictionary,
    pub constants: DictionaryConstants,
    pub hankels: DataHankels,
    pub config: NpcConfig,
    pub w_star: f64,
    pub c3: f64,
}

/// Options for building a [`ClosedLoopSetup`] from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub data_length: usize,
    pub w_star: f64,
    /// Replaces the estimated `eps*` when set.
    pub eps_star_override: Option<f64>,
    pub estimation: EstimationOptions,
    pub c3: f64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            data_length: 200,
            w_star: 0.0,
            eps_star_override: None,
            estimation: EstimationOptions::default(),
            c3: 1.0,
        }
    }
}

impl<'a> ClosedLoopSetup<'a> {
    /// Collects fit and validation data, estimates the (inflated) constants,
    /// corrupts the fit data by noise of bound `w*` and builds the data
    /// Hankel matrices from the noisy copy. Seed streams: 0 fit data,
    /// 1 validation data, 2 data noise, 3 constant estimation.
    pub fn prepare(
        plant: &'a PlantModel,
        dictionary: &'a Dictionary,
        config: NpcConfig,
        opts: &ExperimentOptions,
        seed_base: u64,
    ) -> Result<Self> {
        let clean = plant.collect(opts.data_length, seed::derive(seed_base, 0))?;
        let validation = plant.collect(opts.data_length, seed::derive(seed_base, 1))?;
        let noisy = add_noise(&clean, opts.w_star, seed::derive(seed_base, 2))?;
        let est = EstimationOptions {
            seed: seed::derive(seed_base, 3),
            ..opts.estimation.clone()
        };
        let mut constants =
            dictionary::estimate_constants(plant, dictionary, &clean, &validation, opts.w_star, &est)?;
        if let Some(e) = opts.eps_star_override {
            constants.eps_star = e;
        }
        Self::from_parts(plant, dictionary, constants, &noisy, config, opts.w_star, opts.c3)
    }

    pub fn from_parts(
        plant: &'a PlantModel,
        dictionary: &'a Dictionary,
        constants: DictionaryConstants,
        data: &Trajectory,
        config: NpcConfig,
        w_star: f64,
        c3: f64,
    ) -> Result<Self> {
        config.validate(plant.d_max())?;
        if !(c3 > 0.0) {
            return Err(Error::Argument(format!("c3 must be positive, got {c3}")));
        }
        let hankels = DataHankels::new(dictionary, data, config.horizon)?;
        Ok(Self {
            plant,
            dictionary,
            constants,
            hankels,
            config,
            w_star,
            c3,
        })
    }
}

/// Deviation check for one output sample of one MPC step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Check {
    pub t: usize,
    pub channel: usize,
    pub k: usize,
    pub measured: f64,
    pub bound: f64,
    /// [`window_noise_bound`] for the same sample.
    pub window_bound: f64,
}

impl Lemma1Check {
    pub fn margin(&self) -> f64 {
        self.bound - self.measured
    }

    pub fn window_margin(&self) -> f64 {
        self.window_bound - self.measured
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Plant time of the solve.
    pub t: usize,
    /// True plant state `x_t`.
    pub state: Vec<f64>,
    pub xi: Vec<f64>,
    /// Lifted state from the measured outputs, known once the applied
    /// inputs have run.
    pub xi_noisy: Option<Vec<f64>>,
    pub applied: Vec<DVector<f64>>,
    #[serde(with = "crate::nonfinite")]
    pub cost: f64,
    #[serde(with = "crate::nonfinite")]
    pub lyapunov: f64,
    pub alpha_l1: f64,
    pub alpha_l2: f64,
    pub sigma_inf: f64,
    pub status: NpcStatus,
    pub sqp_iters: usize,
    pub solve_ms: f64,
    pub lemma1: Vec<Lemma1Check>,
    pub solution: NpcSolution,
}

impl StepLog {
    pub fn xi_norm(&self) -> f64 {
        self.xi.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn feasible(&self) -> bool {
        self.status == NpcStatus::Optimal
    }

    pub fn lemma1_min_margin(&self) -> f64 {
        self.lemma1.iter().map(Lemma1Check::margin).fold(f64::INFINITY, f64::min)
    }

    pub fn window_min_margin(&self) -> f64 {
        self.lemma1.iter().map(Lemma1Check::window_margin).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRecord {
    pub plant: String,
    pub seed: u64,
    pub w_star: f64,
    pub eps_star: f64,
    pub d_max: usize,
    pub c3: f64,
    pub x0: Vec<f64>,
    /// Warm-up inputs and measured outputs before the first solve.
    pub warmup: PastWindow,
    pub steps: Vec<StepLog>,
    /// Status of the last solve; anything but `Optimal` halted the loop.
    pub final_status: NpcStatus,
}

impl ClosedLoopRecord {
    pub fn completed(&self) -> bool {
        self.final_status == NpcStatus::Optimal
    }

    pub fn lyapunov(&self) -> Vec<f64> {
        self.steps.iter().filter(|s| s.feasible()).map(|s| s.lyapunov).collect()
    }

    /// Ignores wall-clock times, which are the only nondeterministic field.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let strip = |r: &Self| {
            let mut r = r.clone();
            for s in &mut r.steps {
                s.solve_ms = 0.0;
            }
            r
        };
        strip(self) == strip(other)
    }

    /// One row per MPC step:
    /// `t,xi_norm,J,V,alpha_l1,sigma_inf,feasible,lemma1_min_margin,solve_ms`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "t",
            "xi_norm",
            "J",
            "V",
            "alpha_l1",
            "sigma_inf",
            "feasible",
            "lemma1_min_margin",
            "solve_ms",
        ])?;
        for s in &self.steps {
            w.write_record([
                s.t.to_string(),
                s.xi_norm().to_string(),
                s.cost.to_string(),
                s.lyapunov.to_string(),
                s.alpha_l1.to_string(),
                s.sigma_inf.to_string(),
                s.feasible().to_string(),
                s.lemma1_min_margin().to_string(),
                format!("{:.3}", s.solve_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn measure<R: Rng>(y: &DVector<f64>, w_star: f64, rng: &mut R) -> DVector<f64> {
    if w_star > 0.0 {
        y.map(|v| v + rng.gen_range(-w_star..=w_star))
    } else {
        y.clone()
    }
}

/// Runs `n_steps` plant steps (a multiple of `d_max`) after a zero-input
/// warm-up of `d_max` steps from `x0`. Measurement noise is uniform on
/// `[-w*, w*]`, drawn from `seed`. Halts at the first solve that does not
/// return an optimal solution.
pub fn run_closed_loop(
    setup: &ClosedLoopSetup<'_>,
    x0: &[f64],
    seed: u64,
    n_steps: usize,
) -> Result<ClosedLoopRecord> {
    let plant = setup.plant;
    let (m, d_max) = (plant.m(), plant.d_max());
    if !n_steps.is_multiple_of(d_max) {
        return Err(Error::Argument(format!(
            "n_steps = {n_steps} must be a multiple of d_max = {d_max}"
        )));
    }
    if x0.len() != plant.n() {
        return Err(Error::Dimension {
            what: "initial state",
            expected: plant.n(),
            got: x0.len(),
        });
    }
    let mut rng = seed::rng(seed);
    let mut x = PlantState::from_slice(x0);
    let mut past = PastWindow::zeros(m, d_max);
    let zero = DVector::zeros(m);
    for k in 0..d_max {
        let y = measure(&plant.output(&x)?, setup.w_star, &mut rng);
        for i in 0..m {
            past.outputs[i][k] = y[i];
        }
        x = plant.step(&x, &zero)?;
    }
    let mut record = ClosedLoopRecord {
        plant: plant.id().to_string(),
        seed,
        w_star: setup.w_star,
        eps_star: setup.constants.eps_star,
        d_max,
        c3: setup.c3,
        x0: x0.to_vec(),
        warmup: past.clone(),
        steps: Vec::new(),
        final_status: NpcStatus::Optimal,
    };
    let mut previous: Option<NpcSolution> = None;
    let mut t = d_max;
    for _ in 0..n_steps / d_max {
        let data = NpcProblemData {
            dictionary: setup.dictionary,
            hankels: &setup.hankels,
            constants: &setup.constants,
            w_star: setup.w_star,
            relative_degrees: plant.relative_degrees().to_vec(),
            past: past.clone(),
        };
        let problem = npc::assemble(data, &setup.config)?;
        let guess = previous
            .as_ref()
            .map(|p| p.shifted(&setup.config.u_setpoint, &setup.config.y_setpoint));
        let start = Instant::now();
        let sol = npc::solve(&problem, guess.as_ref())?;
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let xi = plant.lifted_state(&x)?.0;
        let mut log = StepLog {
            t,
            state: x.0.iter().copied().collect(),
            xi: xi.iter().copied().collect(),
            xi_noisy: None,
            applied: Vec::new(),
            cost: sol.cost,
            lyapunov: sol.cost + setup.c3 * xi.norm_squared(),
            alpha_l1: sol.alpha_l1(),
            alpha_l2: sol.alpha_l2(),
            sigma_inf: sol.sigma_inf_norm(),
            status: sol.status,
            sqp_iters: sol.sqp_iters,
            solve_ms,
            lemma1: Vec::new(),
            solution: sol.clone(),
        };
        if sol.status != NpcStatus::Optimal {
            record.final_status = sol.status;
            record.steps.push(log);
            break;
        }
        if let Err(e) = npc::check_solution(&problem, &sol, setup.config.qp_tol) {
            log::warn!("t = {t}: solution invariant violated: {e}");
            record.final_status = NpcStatus::NumericalError;
            log.status = NpcStatus::NumericalError;
            record.steps.push(log);
            break;
        }
        log.lemma1 = lemma1_checks(setup, &log)?;
        let mut next = PastWindow::zeros(m, d_max);
        for (k, u) in sol.first_inputs().iter().enumerate() {
            let y = measure(&plant.output(&x)?, setup.w_star, &mut rng);
            for i in 0..m {
                next.outputs[i][k] = y[i];
            }
            next.inputs[k] = u.clone();
            x = plant.step(&x, u)?;
        }
        log.applied = sol.first_inputs().to_vec();
        log.xi_noisy = Some(
            plant
                .relative_degrees()
                .iter()
                .enumerate()
                .flat_map(|(i, &di)| next.outputs[i][..di].to_vec())
                .collect(),
        );
        record.steps.push(log);
        past = next;
        previous = Some(sol);
        t += d_max;
    }
    Ok(record)
}

fn lemma1_checks(setup: &ClosedLoopSetup<'_>, log: &StepLog) -> Result<Vec<Lemma1Check>> {
    step_checks(setup.plant, &setup.constants, setup.w_star, log)
}

fn step_checks(
    plant: &PlantModel,
    constants: &DictionaryConstants,
    w_star: f64,
    log: &StepLog,
) -> Result<Vec<Lemma1Check>> {
    let sol = &log.solution;
    let d_max = plant.d_max();
    let x = PlantState(DVector::from_vec(log.state.clone()));
    let traj = plant.simulate(&x, sol.predicted_inputs())?;
    let mut out = Vec::new();
    for (i, &di) in plant.relative_degrees().iter().enumerate() {
        for k in 0..sol.horizon + di {
            let bound = |f: fn(usize, usize, usize, &DictionaryConstants, f64, f64, f64, f64) -> f64| {
                f(k, di, d_max, constants, w_star, log.alpha_l1, log.sigma_inf, constants.g_inf_norm)
            };
            out.push(Lemma1Check {
                t: log.t,
                channel: i,
                k,
                measured: (traj.output(i, k) - sol.y_at(i, k as isize)).abs(),
                bound: bound(lemma1_bound),
                window_bound: bound(window_noise_bound),
            });
        }
    }
    Ok(out)
}

/// Recomputes the deviation checks of a stored record: each step's full
/// optimal input is simulated open loop from the logged true state.
pub fn verify_lemma1(
    record: &ClosedLoopRecord,
    plant: &PlantModel,
    constants: &DictionaryConstants,
) -> Result<Vec<Lemma1Check>> {
    if plant.id() != record.plant {
        return Err(Error::Argument(format!(
            "record is for plant {} but {} was given",
            record.plant,
            plant.id()
        )));
    }
    let mut out = Vec::new();
    for s in record.steps.iter().filter(|s| s.feasible()) {
        out.extend(step_checks(plant, constants, record.w_star, s)?);
    }
    Ok(out)
}

/// Number of trailing MPC steps averaged for the plateau of `V`.
pub const PLATEAU_STEPS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub eps_star: f64,
    pub w_star: f64,
    pub completed: bool,
    pub steps: usize,
    pub feasible_steps: usize,
    #[serde(with = "crate::nonfinite")]
    pub terminal_xi_norm: f64,
    /// Mean of `V` over the last [`PLATEAU_STEPS`] steps.
    #[serde(with = "crate::nonfinite")]
    pub plateau: f64,
    /// Largest `V_{t+d_max} / V_t` while `V_t` is above ten times the
    /// plateau.
    pub contraction: f64,
    #[serde(with = "crate::nonfinite")]
    pub lemma1_min_margin: f64,
    #[serde(with = "crate::nonfinite")]
    pub window_min_margin: f64,
    pub lemma1_checks: usize,
}

impl RunSummary {
    pub fn from_record(record: &ClosedLoopRecord) -> Self {
        let v = record.lyapunov();
        let tail = &v[v.len().saturating_sub(PLATEAU_STEPS)..];
        let plateau = if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        };
        let floor = 10.0 * plateau.max(0.0) + 1e-12;
        let contraction = v
            .windows(2)
            .filter(|w| w[0] > floor)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max);
        let last = record.steps.iter().rev().find(|s| s.feasible());
        RunSummary {
            seed: record.seed,
            eps_star: record.eps_star,
            w_star: record.w_star,
            completed: record.completed(),
            steps: record.steps.len(),
            feasible_steps: record.steps.iter().filter(|s| s.feasible()).count(),
            terminal_xi_norm: last.map_or(f64::NAN, StepLog::xi_norm),
            plateau,
            contraction,
            lemma1_min_margin: record
                .steps
                .iter()
                .map(StepLog::lemma1_min_margin)
                .fold(f64::INFINITY, f64::min),
            window_min_margin: record
                .steps
                .iter()
                .map(StepLog::window_min_margin)
                .fold(f64::INFINITY, f64::min),
            lemma1_checks: record.steps.iter().map(|s| s.lemma1.len()).sum(),
        }
    }
}

/// Runs of one `(eps*, w*)` grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRuns {
    pub eps_star: f64,
    pub w_star: f64,
    pub runs: Vec<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub eps_star: f64,
    pub w_star: f64,
    pub runs: usize,
    #[serde(with = "crate::nonfinite")]
    pub median_terminal_xi_norm: f64,
    #[serde(with = "crate::nonfinite")]
    pub max_terminal_xi_norm: f64,
    pub rho_hat: f64,
    pub feasibility_rate: f64,
    #[serde(with = "crate::nonfinite")]
    pub beta_hat: f64,
    /// Some run stopped on a failed solve; excluded from verdicts.
    pub flagged: bool,
}

/// Whether `beta_hat` is non-decreasing along one grid line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityVerdict {
    /// `"w_star"` (varying noise at fixed `eps*`) or `"eps_star"`.
    pub axis: String,
    pub fixed: f64,
    pub values: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub non_decreasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub cells: Vec<CellReport>,
    pub verdicts: Vec<MonotonicityVerdict>,
    /// Weight of `W_t = |Xi_t|_P^2`.
    pub lyapunov_weight: String,
    pub c3: f64,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Minimum number of completed runs per cell.
pub const MIN_RUNS_PER_CELL: usize = 5;

pub fn estimate_beta(cells: &[CellRuns], c3: f64) -> Result<StabilityReport> {
    if cells.is_empty() {
        return Err(Error::Argument("empty sweep grid".into()));
    }
    let mut reports = Vec::new();
    for cell in cells {
        let completed: Vec<&RunSummary> = cell.runs.iter().filter(|r| r.completed).collect();
        if cell.runs.len() < MIN_RUNS_PER_CELL {
            return Err(Error::Precondition(format!(
                "cell (eps* = {}, w* = {}) has {} runs, need at least {MIN_RUNS_PER_CELL}",
                cell.eps_star,
                cell.w_star,
                cell.runs.len()
            )));
        }
        let mut plateaus: Vec<f64> = completed.iter().map(|r| r.plateau).collect();
        let mut terminal: Vec<f64> = completed.iter().map(|r| r.terminal_xi_norm).collect();
        let total_steps: usize = cell.runs.iter().map(|r| r.steps).sum();
        let feasible_steps: usize = cell.runs.iter().map(|r| r.feasible_steps).sum();
        reports.push(CellReport {
            eps_star: cell.eps_star,
            w_star: cell.w_star,
            runs: cell.runs.len(),
            median_terminal_xi_norm: median(&mut terminal),
            max_terminal_xi_norm: terminal.iter().copied().fold(f64::NAN, f64::max),
            rho_hat: completed.iter().map(|r| r.contraction).fold(0.0, f64::max),
            feasibility_rate: if total_steps == 0 {
                0.0
            } else {
                feasible_steps as f64 / total_steps as f64
            },
            beta_hat: median(&mut plateaus).max(0.0),
            flagged: completed.len() < cell.runs.len(),
        });
    }
    let mut verdicts = Vec::new();
    let mut axis = |name: &str, key: fn(&CellReport) -> f64, other: fn(&CellReport) -> f64| {
        let mut fixed: Vec<f64> = reports.iter().map(key).collect();
        fixed.sort_by(f64::total_cmp);
        fixed.dedup();
        for f in fixed {
            let mut line: Vec<&CellReport> =
                reports.iter().filter(|c| key(c) == f && !c.flagged).collect();
            if line.len() < 2 {
                continue;
            }
            line.sort_by(|a, b| other(a).total_cmp(&other(b)));
            let beta: Vec<f64> = line.iter().map(|c| c.beta_hat).collect();
            verdicts.push(MonotonicityVerdict {
                axis: name.to_string(),
                fixed: f,
                values: line.iter().map(|c| other(c)).collect(),
                non_decreasing: beta.windows(2).all(|w| w[1] >= w[0]),
                beta_hat: beta,
            });
        }
    };
    axis("w_star", |c| c.eps_star, |c| c.w_star);
    axis("eps_star", |c| c.w_star, |c| c.eps_star);
    Ok(StabilityReport {
        cells: reports,
        verdicts,
        lyapunov_weight: "identity".into(),
        c3,
    })
}

/// One grid cell: `seeds` independent runs (fresh data, noise and constants
/// per seed), in parallel.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    plant: &PlantModel,
    dictionary: &Dictionary,
    config: &NpcConfig,
    opts: &ExperimentOptions,
    x0: &[f64],
    n_steps: usize,
    seeds: &[u64],
) -> Result<(CellRuns, Vec<ClosedLoopRecord>)> {
    let records: Vec<ClosedLoopRecord> = seeds
        .par_iter()
        .map(|&s| {
            let setup = ClosedLoopSetup::prepare(plant, dictionary, config.clone(), opts, s)?;
            run_closed_loop(&setup, x0, seed::derive(s, 4), n_steps)
        })
        .collect::<Result<_>>()?;
    let eps_star = records.first().map_or(0.0, |r| r.eps_star);
    Ok((
        CellRuns {
            eps_star: opts.eps_star_override.unwrap_or(eps_star),
            w_star: opts.w_star,
            runs: records.iter().map(RunSummary::from_record).collect(),
        },
        records,
    ))
}
