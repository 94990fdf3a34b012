use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rdnpc_cli::commands::{self, shown};
use rdnpc_cli::{exit_code, files, Context, ExperimentConfig, Failure};

#[derive(Debug, Parser)]
#[command(name = "rdnpc", version, about = "Data-driven nonlinear predictive control experiments")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` of the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run seed of collect/fit/run; the first configured seed by default.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads of `sweep` (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate excitation data and certify persistency of excitation.
    Collect,
    /// Fit the dictionary and estimate the constants.
    Fit,
    /// One closed-loop run from the collected data and fitted constants.
    Run,
    /// Runs over the (eps*, w*) grid and all seeds; stability report.
    Sweep,
    /// Recheck the open-loop deviation bound on the stored record.
    VerifyBound,
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config <PATH> is required".into()))?;
    let ctx = Context::new(ExperimentConfig::load(path)?, cli.out.clone(), cli.seed);
    let out = &ctx.out;
    match cli.command {
        Command::Collect => {
            let c = commands::collect(&ctx)?;
            let pe = &c.report.synthetic_input;
            println!(
                "wrote {} (N = {}, w* = {:e}); excitation order {}: rank {}/{}, sigma_min {:.3e}",
                shown(out, files::DATA),
                c.report.data_length,
                c.report.w_star,
                pe.order,
                pe.rank,
                pe.rows,
                pe.sigma_min
            );
        }
        Command::Fit => {
            let f = commands::fit(&ctx)?;
            let k = &f.constants;
            println!(
                "wrote {}: eps* = {:.3e}, K_Psi = {:.3}, K_Xi = {:.3}, K_w = {:.3}, |G^+|_inf = {:.3}",
                shown(out, files::CONSTANTS),
                k.eps_star,
                k.k_psi,
                k.k_xi,
                k.k_w,
                k.g_dagger_inf_norm
            );
            if let Some(c) = &f.c_pe {
                println!("c_pe = {:.3e} (rank {} of {})", c.c_pe, c.rank, c.rows);
            }
        }
        Command::Run => {
            let record = commands::run(&ctx)?;
            let last = record.steps.last();
            println!(
                "wrote {}: {} solves, final |Xi| = {:.3e}, status {:?}",
                shown(out, files::RECORD_CSV),
                record.steps.len(),
                last.map_or(f64::NAN, |s| s.xi_norm()),
                record.final_status
            );
            commands::check_completed(&record)?;
        }
        Command::Sweep => {
            let s = commands::sweep(&ctx, cli.jobs)?;
            for c in &s.cells {
                let done = c.runs.iter().filter(|r| r.completed).count();
                println!("eps* = {:e}, w* = {:e}: {done}/{} runs completed", c.eps_star, c.w_star, c.runs.len());
            }
            match &s.report {
                Some(report) => {
                    for v in &report.verdicts {
                        println!(
                            "{} at {:e}: beta = {:?} non-decreasing = {}",
                            v.axis, v.fixed, v.beta_hat, v.non_decreasing
                        );
                    }
                    println!("wrote {}", shown(out, files::STABILITY_REPORT));
                }
                None => println!(
                    "fewer than {} seeds per cell: no stability report, per-cell CSVs only",
                    rdnpc_core::closedloop::MIN_RUNS_PER_CELL
                ),
            }
        }
        Command::VerifyBound => {
            let (_, s) = commands::verify_bound(&ctx)?;
            println!(
                "{} checks: {} above the bound (worst margin {:.3e}), {} above the bound with past-window noise",
                s.checks, s.violations, s.worst_margin, s.window_violations
            );
            println!("wrote {}", shown(out, files::LEMMA1_CSV));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
