use thiserror::Error;

use crate::formula::FormulaError;
use crate::harness::HarnessError;
use crate::linalg::LinalgError;
use crate::model::ModelError;
use crate::report::ReportError;
use crate::sampler::SamplerError;
use crate::simgen::SimError;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Fit,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("formula: {0}")]
    Formula(#[from] FormulaError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("sampler: {0}")]
    Sampler(#[from] SamplerError),
    #[error("simgen: {0}")]
    Sim(#[from] SimError),
    #[error("harness: {0}")]
    Harness(#[from] HarnessError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
    #[error("linalg: {0}")]
    Linalg(#[from] LinalgError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Formula(_) | Error::Linalg(_) => ErrorKind::Data,
            Error::Model(e) => e.kind(),
            Error::Sampler(_) => ErrorKind::Fit,
            Error::Sim(e) => e.kind(),
            Error::Harness(e) => e.kind(),
            Error::Report(e) => e.kind(),
            Error::Io(_) => ErrorKind::Io,
        }
    }
}
