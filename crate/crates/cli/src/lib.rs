//! Experiment driver: config parsing, the `collect`, `fit`, `run`, `sweep`
//! and `verify-bound` commands, and the files they exchange.
//!
//! Every command reads and writes a single output directory:
//!
//! | file | written by |
//! |---|---|
//! | `data.csv` (noisy, used by the controller), `data_clean.csv`, `validation.csv`, `pe_certificate.json` | `collect` |
//! | `constants.json` | `fit` |
//! | `record.csv`, `record.json`, `summary.json` | `run` |
//! | `stability_report.json`, `cells.csv`, `cell_<i>.csv` | `sweep` |
//! | `lemma1.csv`, `lemma1_summary.json` | `verify-bound` |

use std::fmt;

use rdnpc_core::npc::NpcStatus;

pub mod commands;
pub mod config;
pub mod files;

pub use commands::Context;
pub use config::ExperimentConfig;

/// Failures with a dedicated exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Config(String),
    /// The closed loop stopped on a solve that was not optimal.
    Halted { status: NpcStatus, t: usize },
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(msg) => write!(f, "configuration error: {msg}"),
            Failure::Halted { status, t } => {
                write!(f, "closed loop halted at t = {t}: solver status {status:?}")
            }
        }
    }
}

impl std::error::Error for Failure {}

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// 2 for configuration errors, 3 for an infeasibility halt, 4 for numerical
/// failures, 1 for I/O and anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use rdnpc_core::Error as E;
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => EXIT_CONFIG,
                Failure::Halted { status: NpcStatus::Infeasible, .. } => EXIT_INFEASIBLE,
                Failure::Halted { .. } => EXIT_NUMERICAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::Csv(_) => EXIT_OTHER,
                E::Numerical(_) | E::RankDeficient(_) => EXIT_NUMERICAL,
                E::Dimension { .. }
                | E::Argument(_)
                | E::Index(_)
                | E::UnknownPlant(_)
                | E::Unsupported(_)
                | E::Precondition(_)
                | E::Assembly(_)
                | E::Parse(_) => EXIT_CONFIG,
            };
        }
    }
    EXIT_OTHER
}
