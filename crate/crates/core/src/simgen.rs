//! Synthetic longitudinal cohorts with heteroscedastic residuals.
//!
//! Baseline covariates (age, albumin, trig, platelet) are multivariate
//! normal on the standardized scale. Each subject has `J ~ U{1, 2M-1}`
//! encounters indexed `j = 0..J`; age advances by one unit per encounter and
//! the other covariates stay at baseline. Outcomes follow
//!
//! ```text
//! y     = beta_y · x + u_y + eps,     eps ~ N(0, omega²)
//! omega = exp(beta_w · x + u_w)
//! ```
//!
//! with variants replacing age by `sin(age)` in the location, adding
//! independent random age slopes, or drawing the random intercepts from a
//! scaled Student-t.
//!
//! All randomness is drawn from per-subject streams, so a subject's values
//! do not depend on how many other subjects exist or in which order they
//! are generated.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorKind;
use crate::linalg::{LinalgError, Matrix};
use crate::model::{LongitudinalDataset, ModelError, Row};
use crate::rng::{purpose, Streams};

/// Baseline covariance of standardized (age, albumin, trig, platelet).
pub const TABLE1_COVARIANCE: [[f64; 4]; 4] = [
    [1.02, -0.23, 0.02, -0.14],
    [-0.23, 0.90, -0.10, 0.18],
    [0.02, -0.10, 1.00, 0.10],
    [-0.14, 0.18, 0.10, 0.89],
];

pub const DEFAULT_BETA_Y: [f64; 4] = [0.5, 0.5, 0.0, 0.0];
pub const DEFAULT_BETA_W: [f64; 4] = [0.8, 0.0, 0.8, 0.0];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config at `{field}`: {message}")]
    InvalidConfig { field: String, message: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SimError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            SimError::InvalidConfig { .. } => ErrorKind::Config,
            SimError::Io(_) => ErrorKind::Io,
            SimError::Model(e) => e.kind(),
            _ => ErrorKind::Data,
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> SimError {
    SimError::InvalidConfig {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Generative variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    #[default]
    Base,
    /// `sin(age)` replaces age in the location.
    Sinus,
    /// Independent random age slopes in location and scale.
    RandomSlopes { sd_slope_y: f64, sd_slope_w: f64 },
    /// Random intercepts are `scale · t(df)`.
    StudentRe { df: f64 },
}

impl Variant {
    pub fn random_slopes() -> Self {
        Variant::RandomSlopes {
            sd_slope_y: 1.0,
            sd_slope_w: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_subjects: usize,
    pub mean_encounters: usize,
    pub cov_matrix: [[f64; 4]; 4],
    /// Over (age, albumin, trig, platelet).
    pub beta_y: [f64; 4],
    pub beta_w: [f64; 4],
    pub sd_y: f64,
    pub sd_w: f64,
    pub rho: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            mean_encounters: 15,
            cov_matrix: TABLE1_COVARIANCE,
            beta_y: DEFAULT_BETA_Y,
            beta_w: DEFAULT_BETA_W,
            sd_y: 2.0,
            sd_w: 1.0,
            rho: 0.0,
            variant: Variant::Base,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_subjects == 0 {
            return Err(invalid("n_subjects", "must be positive"));
        }
        if self.mean_encounters == 0 {
            return Err(invalid("mean_encounters", "must be positive"));
        }
        for (field, v) in [("sd_y", self.sd_y), ("sd_w", self.sd_w)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be non-negative, got {v}")));
            }
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(invalid("rho", format!("must lie in (-1, 1), got {}", self.rho)));
        }
        for (k, b) in self.beta_y.iter().chain(&self.beta_w).enumerate() {
            if !b.is_finite() {
                let field = if k < 4 { "beta_y" } else { "beta_w" };
                return Err(invalid(field, "must be finite"));
            }
        }
        match self.variant {
            Variant::RandomSlopes {
                sd_slope_y,
                sd_slope_w,
            } => {
                if !(sd_slope_y >= 0.0 && sd_slope_w >= 0.0) {
                    return Err(invalid("variant.sd_slope_y", "slope SDs must be non-negative"));
                }
            }
            Variant::StudentRe { df } => {
                if !(df > 0.0 && df.is_finite()) {
                    return Err(invalid("variant.df", format!("must be positive, got {df}")));
                }
            }
            _ => {}
        }
        self.cov()
            .cholesky()
            .map_err(|e| invalid("cov_matrix", e.to_string()))?;
        Ok(())
    }

    pub fn cov(&self) -> Matrix {
        Matrix::from_rows(&self.cov_matrix.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
            .expect("4x4")
    }
}

/// Rows i.i.d. MVN(0, cov) via the Cholesky factor; row `i` uses subject
/// stream `i`.
pub fn sample_baseline_covariates(
    n: usize,
    cov: &Matrix,
    streams: &Streams,
) -> Result<Matrix, SimError> {
    let l = cov.cholesky()?;
    let p = cov.rows();
    let mut out = Matrix::zeros(n, p);
    for i in 0..n {
        let mut rng = streams.stream(purpose::COVARIATES, i as u64);
        let e: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        out.row_mut(i).copy_from_slice(&l.mul_vec(&e)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encounters {
    /// Age at each encounter `j = 0..J_i`, per subject.
    pub ages: Vec<Vec<f64>>,
}

impl Encounters {
    pub fn counts(&self) -> Vec<usize> {
        self.ages.iter().map(Vec::len).collect()
    }
}

/// Number of encounters `J_i ~ U{1, ..., 2M-1}` and ages `age_0 + j`.
pub fn sample_encounters(mean_encounters: usize, baseline_age: &[f64], streams: &Streams) -> Encounters {
    let max = 2 * mean_encounters.max(1) - 1;
    let ages = baseline_age
        .iter()
        .enumerate()
        .map(|(i, &age0)| {
            let mut rng = streams.stream(purpose::ENCOUNTERS, i as u64);
            let count = rng.random_range(1..=max);
            (0..count).map(|j| age0 + j as f64).collect()
        })
        .collect();
    Encounters { ages }
}

/// Realised random effects of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SubjectEffects {
    pub u_y: f64,
    pub u_w: f64,
    pub u_y_age: f64,
    pub u_w_age: f64,
}

pub fn sample_random_effects(config: &ScenarioConfig, streams: &Streams) -> Vec<SubjectEffects> {
    let student = match config.variant {
        Variant::StudentRe { df } => Some(StudentT::new(df).expect("validated df")),
        _ => None,
    };
    let (sd_slope_y, sd_slope_w) = match config.variant {
        Variant::RandomSlopes {
            sd_slope_y,
            sd_slope_w,
        } => (sd_slope_y, sd_slope_w),
        _ => (0.0, 0.0),
    };
    let cross = (1.0 - config.rho * config.rho).sqrt();
    (0..config.n_subjects)
        .map(|i| {
            let mut rng = streams.stream(purpose::RANDOM_EFFECTS, i as u64);
            let (e1, e2): (f64, f64) = match &student {
                Some(t) => (t.sample(&mut rng), t.sample(&mut rng)),
                None => (rng.sample(StandardNormal), rng.sample(StandardNormal)),
            };
            let mut u = SubjectEffects {
                u_y: config.sd_y * e1,
                u_w: config.sd_w * (config.rho * e1 + cross * e2),
                ..Default::default()
            };
            if let Variant::RandomSlopes { .. } = config.variant {
                let s1: f64 = rng.sample(StandardNormal);
                let s2: f64 = rng.sample(StandardNormal);
                u.u_y_age = sd_slope_y * s1;
                u.u_w_age = sd_slope_w * s2;
            }
            u
        })
        .collect()
}

/// Outcomes for every encounter given covariates and random effects.
pub fn generate_outcome(
    config: &ScenarioConfig,
    covariates: &Matrix,
    encounters: &Encounters,
    effects: &[SubjectEffects],
    streams: &Streams,
) -> Result<LongitudinalDataset, SimError> {
    let mut rows = Vec::new();
    for (i, ages) in encounters.ages.iter().enumerate() {
        let base = covariates.row(i);
        let u = effects[i];
        let mut rng = streams.stream(purpose::NOISE, i as u64);
        for (j, &age) in ages.iter().enumerate() {
            let x = [age, base[1], base[2], base[3]];
            let age_term = match config.variant {
                Variant::Sinus => age.sin(),
                _ => age,
            };
            let loc = config.beta_y[0] * age_term
                + config.beta_y[1] * x[1]
                + config.beta_y[2] * x[2]
                + config.beta_y[3] * x[3]
                + u.u_y
                + u.u_y_age * age;
            let log_omega = config.beta_w.iter().zip(&x).map(|(b, v)| b * v).sum::<f64>()
                + u.u_w
                + u.u_w_age * age;
            let eps: f64 = rng.sample(StandardNormal);
            rows.push(Row {
                subject_id: i as u64,
                j: j as u32,
                age: x[0],
                albumin: x[1],
                trig: x[2],
                platelet: x[3],
                y: loc + log_omega.exp() * eps,
            });
        }
    }
    Ok(LongitudinalDataset::from_rows(rows)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: u64,
    #[serde(flatten)]
    pub effects: SubjectEffects,
}

/// Everything needed to reproduce and score a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub config: ScenarioConfig,
    /// How Student-t random intercepts are scaled.
    pub student_scaling: String,
    pub subjects: Vec<SubjectTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub data: LongitudinalDataset,
    pub truth: TruthManifest,
}

impl GeneratedDataset {
    /// Writes `<name>.csv` and `<name>.truth.json` into `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<(), SimError> {
        self.data.save(&dir.join(format!("{name}.csv")))?;
        let json = serde_json::to_string_pretty(&self.truth)?;
        std::fs::write(dir.join(format!("{name}.truth.json")), json)?;
        Ok(())
    }
}

pub fn generate(config: &ScenarioConfig) -> Result<GeneratedDataset, SimError> {
    config.validate()?;
    let streams = Streams::new(config.seed);
    let covariates = sample_baseline_covariates(config.n_subjects, &config.cov(), &streams)?;
    let encounters = sample_encounters(config.mean_encounters, &covariates.column(0), &streams);
    let effects = sample_random_effects(config, &streams);
    let data = generate_outcome(config, &covariates, &encounters, &effects, &streams)?;
    let truth = TruthManifest {
        config: config.clone(),
        student_scaling: "scale parameter of t(df) equals sd_y / sd_w".into(),
        subjects: effects
            .into_iter()
            .enumerate()
            .map(|(i, effects)| SubjectTruth {
                subject_id: i as u64,
                effects,
            })
            .collect(),
    };
    Ok(GeneratedDataset { data, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_scenario() {
        let c = ScenarioConfig::default();
        assert_eq!((c.n_subjects, c.mean_encounters), (200, 15));
        assert_eq!(c.beta_y, [0.5, 0.5, 0.0, 0.0]);
        assert_eq!(c.beta_w, [0.8, 0.0, 0.8, 0.0]);
        assert_eq!((c.sd_y, c.sd_w, c.rho), (2.0, 1.0, 0.0));
        assert_eq!(c.cov_matrix[0][1], -0.23);
    }

    #[test]
    fn zero_covariance_gives_zero_covariates() {
        let x = sample_baseline_covariates(50, &Matrix::zeros(4, 4), &Streams::new(3)).unwrap();
        assert!(x.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_mean_encounter_means_one_row_each() {
        let e = sample_encounters(1, &[0.0; 100], &Streams::new(1));
        assert!(e.counts().iter().all(|&c| c == 1));
    }

    #[test]
    fn ages_advance_by_one() {
        let e = sample_encounters(15, &[0.3; 50], &Streams::new(2));
        let ages = e.ages.iter().find(|a| a.len() >= 3).unwrap();
        assert_eq!(&ages[..3], &[0.3, 1.3, 2.3]);
    }

    #[test]
    fn null_model_is_standard_normal_noise() {
        let config = ScenarioConfig {
            n_subjects: 2000,
            mean_encounters: 5,
            beta_y: [0.0; 4],
            beta_w: [0.0; 4],
            sd_y: 0.0,
            sd_w: 0.0,
            ..Default::default()
        };
        let g = generate(&config).unwrap();
        let y = g.data.y();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let v = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
        assert!(m.abs() < 0.05 && (v - 1.0).abs() < 0.05, "{m} {v}");
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let err = ScenarioConfig {
            n_subjects: 0,
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        assert!(matches!(err, SimError::InvalidConfig { ref field, .. } if field == "n_subjects"));
        let mut c = ScenarioConfig::default();
        c.cov_matrix[0][0] = -1.0;
        assert!(matches!(c.validate(), Err(SimError::InvalidConfig { ref field, .. }) if field == "cov_matrix"));
        let c = ScenarioConfig {
            rho: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn truth_records_every_subject() {
        let g = generate(&ScenarioConfig {
            n_subjects: 7,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(g.truth.subjects.len(), 7);
        assert_eq!(g.data.n_subjects(), 7);
    }
}
