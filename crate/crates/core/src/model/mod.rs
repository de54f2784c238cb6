//! The MELSM probability model.
//!
//! Location and scale are linear in their design matrices; the scale model
//! is on the log standard deviation. Random effects for both submodels share
//! one joint correlation matrix and are sampled non-centred:
//! `u_i = diag(sd) · L · z_i` with `z_i` standard normal (or Student-t).

mod corr;
mod data;
mod density;
mod layout;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorKind;
use crate::formula::{parse_formula, FormulaAst, FormulaError, Response};

pub use corr::{corr_cholesky, n_raw as n_corr_raw, CorrCholesky};
pub use data::{LongitudinalDataset, Row, COVARIATES, CSV_HEADER};
pub use density::{
    half_t_log_density, log_prior, normal_log_density, student_t_log_density, LinearPredictors,
    MelsmModel,
};
pub use layout::{Layout, ParameterVector};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite {what}{}", index.map(|i| format!(" at coordinate {i}")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        index: Option<usize>,
    },
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ModelError::Io(_) => ErrorKind::Io,
            ModelError::InvalidSpec(_) => ErrorKind::Config,
            ModelError::NonFinite { .. } => ErrorKind::Fit,
            _ => ErrorKind::Data,
        }
    }
}

/// Prior hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Normal(0, sd²) on every fixed effect.
    pub fixed_effect_sd: f64,
    /// half-Student-t(3, 0, scale) on every random-effect SD.
    pub re_sd_scale: f64,
    /// LKJ shape on the joint random-effect correlation.
    pub lkj_eta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            fixed_effect_sd: 10.0,
            re_sd_scale: 2.5,
            lkj_eta: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("fixed_effect_sd", self.fixed_effect_sd),
            ("re_sd_scale", self.re_sd_scale),
            ("lkj_eta", self.lkj_eta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidSpec(format!("prior {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

pub const DEFAULT_STUDENT_DF: f64 = 3.0;

/// A location formula, a scale formula and the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct MelsmSpec {
    pub location: FormulaAst,
    pub scale: FormulaAst,
    pub priors: PriorConfig,
    /// Degrees of freedom for Student random-effect families.
    pub student_df: Option<f64>,
}

impl MelsmSpec {
    pub fn new(location: FormulaAst, scale: FormulaAst) -> Result<Self, ModelError> {
        let spec = Self {
            location,
            scale,
            priors: PriorConfig::default(),
            student_df: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(location: &str, scale: &str) -> Result<Self, ModelError> {
        Self::new(parse_formula(location)?, parse_formula(scale)?)
    }

    pub fn with_priors(mut self, priors: PriorConfig) -> Self {
        self.priors = priors;
        self
    }

    pub fn with_student_df(mut self, df: Option<f64>) -> Self {
        self.student_df = df;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.location.response != Response::Y {
            return Err(ModelError::InvalidSpec("location formula must have response y".into()));
        }
        if self.scale.response != Response::LogOmega {
            return Err(ModelError::InvalidSpec(
                "scale formula must have response log(omega)".into(),
            ));
        }
        if let Some(df) = self.student_df {
            if !(df > 0.0 && df.is_finite()) {
                return Err(ModelError::InvalidSpec(format!("student df must be positive, got {df}")));
            }
        }
        self.priors.validate()
    }

    /// Student degrees of freedom in effect.
    pub fn df(&self) -> f64 {
        self.student_df.unwrap_or(DEFAULT_STUDENT_DF)
    }
}
