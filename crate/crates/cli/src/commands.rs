use std::path::{Path, PathBuf};

use rdnpc_core::closedloop::{
    estimate_beta, run_cell, run_closed_loop, verify_lemma1, CellRuns, ClosedLoopRecord,
    ClosedLoopSetup, Lemma1Check, RunSummary, StabilityReport, MIN_RUNS_PER_CELL,
};
use rdnpc_core::dictionary::{compute_c_pe, estimate_constants, CpeReport, DictionaryConstants, EstimationOptions};
use rdnpc_core::lifting::{self, add_noise, is_persistently_exciting, PeCertificate, Trajectory};
use rdnpc_core::npc::NpcStatus;
use rdnpc_core::seed;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::files;
use crate::Failure;

/// Seed streams below the run seed. They match the ones used by
/// [`ClosedLoopSetup::prepare`], so `collect` → `fit` → `run` reproduces a
/// single-seed sweep exactly.
pub const STREAM_FIT_DATA: u64 = 0;
pub const STREAM_VALIDATION: u64 = 1;
pub const STREAM_DATA_NOISE: u64 = 2;
pub const STREAM_ESTIMATION: u64 = 3;
pub const STREAM_CLOSED_LOOP: u64 = 4;

/// Resolved inputs of one command.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    /// Seed of single-run commands; the first configured seed by default.
    pub seed: u64,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        let out = out.unwrap_or_else(|| config.output_dir.clone());
        let seed = seed.unwrap_or(config.seeds[0]);
        Self { config, out, seed }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectReport {
    pub plant: String,
    pub seed: u64,
    pub data_length: usize,
    pub amplitude: f64,
    pub w_star: f64,
    /// Synthetic input of the noisy data, order `L + d_max + n`.
    pub synthetic_input: PeCertificate,
    /// Dictionary sequence at the same order. Diagnostic only: it is rank
    /// deficient whenever the dictionary contains shifted lifted-state
    /// coordinates.
    pub dictionary: Option<PeCertificate>,
}

#[derive(Clone, Debug)]
pub struct CollectOutput {
    pub clean: Trajectory,
    pub validation: Trajectory,
    pub noisy: Trajectory,
    pub report: CollectReport,
}

/// Simulates fit and validation data under uniform excitation, adds
/// measurement noise to the fit data and certifies its excitation.
pub fn collect(ctx: &Context) -> anyhow::Result<CollectOutput> {
    let cfg = &ctx.config;
    let (w_star, _) = cfg.single_cell()?;
    let plant = cfg.plant()?;
    let dict = cfg.dictionary(&plant)?;
    let n = cfg.data_length;
    let clean = plant.collect(n, seed::derive(ctx.seed, STREAM_FIT_DATA))?;
    let validation = plant.collect(n, seed::derive(ctx.seed, STREAM_VALIDATION))?;
    if !clean.is_finite() || !validation.is_finite() {
        return Err(rdnpc_core::Error::Numerical("excitation drove the plant to non-finite outputs".into()).into());
    }
    let noisy = add_noise(&clean, w_star, seed::derive(ctx.seed, STREAM_DATA_NOISE))?;

    let order = cfg.pe_order(&plant);
    let synthetic_input = is_persistently_exciting(&lifting::synthetic_inputs(&noisy), order)?;
    let psi = lifting::columns(&dict.evaluate_sequence(&noisy, 0..n)?);
    let report = CollectReport {
        plant: plant.id().to_string(),
        seed: ctx.seed,
        data_length: n,
        amplitude: plant.excitation_amplitude(),
        w_star,
        synthetic_input,
        dictionary: is_persistently_exciting(&psi, order).ok(),
    };

    files::write_trajectory(&ctx.path(files::DATA), &noisy)?;
    files::write_trajectory(&ctx.path(files::DATA_CLEAN), &clean)?;
    files::write_trajectory(&ctx.path(files::VALIDATION), &validation)?;
    files::write_json(&ctx.path(files::PE_CERTIFICATE), &report)?;
    if !report.synthetic_input.satisfied {
        return Err(Failure::Config(format!(
            "data not persistently exciting of order {order} (rank {} of {}); raise data_length or the amplitude",
            report.synthetic_input.rank, report.synthetic_input.rows
        ))
        .into());
    }
    Ok(CollectOutput {
        clean,
        validation,
        noisy,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsFile {
    pub plant: String,
    pub seed: u64,
    pub w_star: f64,
    /// Sampled approximation error before any override.
    pub eps_star_estimated: f64,
    pub constants: DictionaryConstants,
    /// `None` when the stacked data matrix is numerically zero.
    pub c_pe: Option<CpeReport>,
}

/// Fits `G` on the clean data and estimates the constants against the
/// validation data; `c_pe` is computed on the noisy data.
pub fn fit(ctx: &Context) -> anyhow::Result<ConstantsFile> {
    let cfg = &ctx.config;
    let (w_star, eps_override) = cfg.single_cell()?;
    let plant = cfg.plant()?;
    let dict = cfg.dictionary(&plant)?;
    let clean = files::read_trajectory(&ctx.path(files::DATA_CLEAN))?;
    let validation = files::read_trajectory(&ctx.path(files::VALIDATION))?;
    let noisy = files::read_trajectory(&ctx.path(files::DATA))?;
    let est = EstimationOptions {
        seed: seed::derive(ctx.seed, STREAM_ESTIMATION),
        ..cfg.estimation.clone()
    };
    let mut constants = estimate_constants(&plant, &dict, &clean, &validation, w_star, &est)?;
    let eps_star_estimated = constants.eps_star;
    if let Some(e) = eps_override {
        constants.eps_star = e;
    }
    let c_pe = compute_c_pe(&noisy, &dict, cfg.horizon, plant.d_max()).ok();
    let file = ConstantsFile {
        plant: plant.id().to_string(),
        seed: ctx.seed,
        w_star,
        eps_star_estimated,
        constants,
        c_pe,
    };
    files::write_json(&ctx.path(files::CONSTANTS), &file)?;
    Ok(file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub final_status: NpcStatus,
    /// Plant time of the solve that stopped the loop.
    pub halted_at: Option<usize>,
    pub summary: RunSummary,
}

/// One closed-loop run from the stored data and constants. The files are
/// written whatever the final status; see [`check_completed`].
pub fn run(ctx: &Context) -> anyhow::Result<ClosedLoopRecord> {
    let cfg = &ctx.config;
    let (w_star, _) = cfg.single_cell()?;
    let plant = cfg.plant()?;
    let dict = cfg.dictionary(&plant)?;
    let data = files::read_trajectory(&ctx.path(files::DATA))?;
    let stored: ConstantsFile = files::read_json(&ctx.path(files::CONSTANTS))?;
    if stored.plant != plant.id() {
        return Err(Failure::Config(format!(
            "constants were fitted for plant {} but the config selects {}",
            stored.plant,
            plant.id()
        ))
        .into());
    }
    let setup = ClosedLoopSetup::from_parts(
        &plant,
        &dict,
        stored.constants,
        &data,
        cfg.npc_config(&plant),
        w_star,
        cfg.c3,
    )?;
    let record = run_closed_loop(&setup, &cfg.x0, seed::derive(ctx.seed, STREAM_CLOSED_LOOP), cfg.n_steps)?;
    let outcome = RunOutcome {
        final_status: record.final_status,
        halted_at: (!record.completed()).then(|| record.steps.last().map_or(0, |s| s.t)),
        summary: RunSummary::from_record(&record),
    };
    files::write_atomic(&ctx.path(files::RECORD_CSV), |w| Ok(record.write_csv(w)?))?;
    files::write_json(&ctx.path(files::RECORD_JSON), &record)?;
    files::write_json(&ctx.path(files::SUMMARY), &outcome)?;
    Ok(record)
}

/// Turns a halted run into a [`Failure::Halted`].
pub fn check_completed(record: &ClosedLoopRecord) -> anyhow::Result<()> {
    if record.completed() {
        return Ok(());
    }
    Err(Failure::Halted {
        status: record.final_status,
        t: record.steps.last().map_or(0, |s| s.t),
    }
    .into())
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub cells: Vec<CellRuns>,
    /// Run records per cell, in seed order.
    pub records: Vec<Vec<ClosedLoopRecord>>,
    /// `None` when some cell has fewer than [`MIN_RUNS_PER_CELL`] runs.
    pub report: Option<StabilityReport>,
}

/// Every `(eps*, w*)` cell of the grid over all configured seeds, each run
/// with fresh data, noise and constants. `jobs = 0` uses all cores.
pub fn sweep(ctx: &Context, jobs: usize) -> anyhow::Result<SweepOutput> {
    let cfg = &ctx.config;
    let plant = cfg.plant()?;
    let dict = cfg.dictionary(&plant)?;
    let npc = cfg.npc_config(&plant);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let mut cells = Vec::new();
    let mut records = Vec::new();
    for eps in cfg.eps_grid() {
        for &w in &cfg.w_star {
            let opts = cfg.experiment_options(w, eps);
            let (cell, recs) =
                pool.install(|| run_cell(&plant, &dict, &npc, &opts, &cfg.x0, cfg.n_steps, &cfg.seeds))?;
            files::write_rows(&ctx.path(&files::cell_csv(cells.len())), &cell.runs)?;
            cells.push(cell);
            records.push(recs);
        }
    }
    let rows: Vec<CellRow> = cells.iter().enumerate().map(|(i, c)| CellRow::new(i, c)).collect();
    files::write_rows(&ctx.path(files::CELLS), &rows)?;
    let report = if cfg.seeds.len() >= MIN_RUNS_PER_CELL {
        let report = estimate_beta(&cells, cfg.c3)?;
        files::write_json(&ctx.path(files::STABILITY_REPORT), &report)?;
        Some(report)
    } else {
        None
    };
    Ok(SweepOutput { cells, records, report })
}

/// Index of the per-cell CSV files.
#[derive(Clone, Debug, Serialize)]
struct CellRow {
    cell: usize,
    file: String,
    eps_star: f64,
    w_star: f64,
    runs: usize,
    completed: usize,
}

impl CellRow {
    fn new(cell: usize, c: &CellRuns) -> Self {
        Self {
            cell,
            file: files::cell_csv(cell),
            eps_star: c.eps_star,
            w_star: c.w_star,
            runs: c.runs.len(),
            completed: c.runs.iter().filter(|r| r.completed).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub checks: usize,
    /// Samples above the deviation bound.
    pub violations: usize,
    #[serde(with = "rdnpc_core::nonfinite")]
    pub worst_margin: f64,
    /// Samples above the bound that also accounts for noise in the measured
    /// past window.
    pub window_violations: usize,
    #[serde(with = "rdnpc_core::nonfinite")]
    pub worst_window_margin: f64,
}

impl BoundSummary {
    pub fn from_checks(checks: &[Lemma1Check]) -> Self {
        let min = |f: fn(&Lemma1Check) -> f64| checks.iter().map(f).fold(f64::INFINITY, f64::min);
        Self {
            checks: checks.len(),
            violations: checks.iter().filter(|c| c.margin() < 0.0).count(),
            worst_margin: min(Lemma1Check::margin),
            window_violations: checks.iter().filter(|c| c.window_margin() < 0.0).count(),
            worst_window_margin: min(Lemma1Check::window_margin),
        }
    }
}

/// Recomputes the open-loop deviation checks of the stored record.
pub fn verify_bound(ctx: &Context) -> anyhow::Result<(Vec<Lemma1Check>, BoundSummary)> {
    let plant = ctx.config.plant()?;
    let record: ClosedLoopRecord = files::read_json(&ctx.path(files::RECORD_JSON))?;
    let stored: ConstantsFile = files::read_json(&ctx.path(files::CONSTANTS))?;
    let checks = verify_lemma1(&record, &plant, &stored.constants)?;
    let summary = BoundSummary::from_checks(&checks);
    files::write_rows(&ctx.path(files::LEMMA1_CSV), &checks)?;
    files::write_json(&ctx.path(files::LEMMA1_SUMMARY), &summary)?;
    Ok((checks, summary))
}

/// `dir/name` for display.
pub fn shown(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}
