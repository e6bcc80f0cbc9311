//! Pipeline orchestration for the `qrw` command: configuration, stage
//! execution, run manifests and evaluation reports.

mod config;
mod manifest;
mod report;
mod stages;

use std::fmt;

pub use config::{
    AlignSection, DatasetSection, DecodeSection, FeedbackSection, ModelSection, PipelineConfig,
    ServeSection, TrainSection, WorldSection,
};
pub use manifest::{RunManifest, StageRecord};
pub use report::{render_report, REPORT_FIELDS, ROW_FIELDS};
pub use stages::{
    alignment_samples, compare_taus, generate_candidates, load_world, run_all, run_stage,
    score_candidate_records, top_rewrite, AlignEval, CandidateRecord, GeneratedCandidate, Paths,
    Stage, StageReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    MissingPrerequisite,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageError {
    pub kind: ErrorKind,
    pub message: String,
}

impl StageError {
    pub fn validation(message: impl Into<String>) -> Self {
        StageError {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn missing(message: impl Into<String>) -> Self {
        StageError {
            kind: ErrorKind::MissingPrerequisite,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        StageError {
            kind: ErrorKind::Runtime,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 1,
            ErrorKind::MissingPrerequisite => 2,
            ErrorKind::Runtime => 3,
        }
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for StageError {}

impl From<qrw_core::Error> for StageError {
    fn from(e: qrw_core::Error) -> Self {
        StageError::runtime(e.to_string())
    }
}
