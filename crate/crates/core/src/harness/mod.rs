//! The experiment lifecycle behind the `crossnet` command line: a flat run
//! config, one function per subcommand, and the comparison report.

mod commands;
mod config;
mod report;

use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::distill::DistillError;
use crate::synth::SynthError;

pub use commands::{
    evaluate, gen_data, load_data, precompute_flow, sweep, train_fusion, train_student, train_teacher, EvalRow,
    ADAPTER_FILE, CHECKPOINT_FILE, CONFIG_FILE, EVAL_FILE, EVAL_HEADER, FUSION_FILE, LAST_GOOD_FILE, METRICS_FILE,
    STUDENT_FILE, SWEEP_BEST_FILE, SWEEP_DIR, SWEEP_SUMMARY_FILE, TEACHER_HASH_FILE,
};
pub use config::{RegimeChoice, RunConfig};
pub use report::{report, Report, ReportRow, REPORT_CSV, REPORT_HEADER, REPORT_TXT};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("missing run data: {0}")]
    MissingRunData(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl HarnessError {
    /// Process exit status: 3 for configuration problems, 4 for a missing
    /// checkpoint, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 3,
            HarnessError::MissingCheckpoint(_) => 4,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::MissingCheckpoint(_) => "missing-checkpoint",
            HarnessError::MissingRunData(_) => "missing-run-data",
            HarnessError::Io { .. } => "io",
            HarnessError::Synth(_) => "data",
            HarnessError::Distill(DistillError::Diverged { .. }) => "diverged",
            HarnessError::Distill(DistillError::Checksum { .. }) => "checksum",
            HarnessError::Distill(_) => "training",
            HarnessError::Checkpoint(_) => "checkpoint",
        }
    }

    /// `error[<kind>]: <message>` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {msg}", self.kind())
    }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}
