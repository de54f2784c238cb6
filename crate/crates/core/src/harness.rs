//! Simulation studies: scenario grids, replications, competing model
//! specifications, and the persisted record ledger.
//!
//! Every (scenario, replication) pair draws one dataset from a seed derived
//! from the plan's base seed; all model specifications are fitted to that
//! same dataset. Records are appended to `records.csv` as fits finish and
//! the file is rewritten in canonical order at the end, so it is
//! byte-identical across runs with equal plans regardless of scheduling.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorKind;
use crate::model::{LongitudinalDataset, MelsmModel, MelsmSpec, ModelError, PriorConfig};
use crate::rng::{derive_seed, purpose};
use crate::sampler::{nuts_sample, Fit, LogDensity, SamplerConfig, SamplerError};
use crate::simgen::{generate, ScenarioConfig, SimError, Variant};

pub const RECORDS_FILE: &str = "records.csv";
pub const PLAN_FILE: &str = "study.json";
pub const TIMINGS_FILE: &str = "timings.csv";

pub const RECORDS_HEADER: &str =
    "practice,scenario,model,rep,estimand,estimate,lower,upper,truth,rhat_max,divergences,flag,seconds";

/// Fraction of divergent sampling iterations above which a fit is flagged.
pub const UNRELIABLE_DIVERGENCE_RATE: f64 = 0.10;

pub const INTERVAL_LEVEL: f64 = 0.95;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown practice '{0}' (expected P1..P5)")]
    UnknownPractice(String),
    #[error("invalid study plan at `{field}`: {message}")]
    InvalidPlan { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("records line {line}: {message}")]
    Records { line: u64, message: String },
    #[error("model `{name}`: {source}")]
    Model {
        name: String,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            HarnessError::UnknownPractice(_) | HarnessError::InvalidPlan { .. } => ErrorKind::Config,
            HarnessError::Model { source, .. } => source.kind(),
            HarnessError::Io { .. } => ErrorKind::Io,
            HarnessError::Records { .. } | HarnessError::Json(_) => ErrorKind::Data,
            HarnessError::Sim(e) => e.kind(),
            HarnessError::Sampler(SamplerError::Io(_)) => ErrorKind::Io,
            HarnessError::Sampler(SamplerError::InvalidConfig(_)) => ErrorKind::Config,
            HarnessError::Sampler(_) => ErrorKind::Fit,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> HarnessError {
    HarnessError::InvalidPlan {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PracticeId {
    P1,
    P2,
    P3,
    P4,
    P5,
}

impl PracticeId {
    pub const ALL: [PracticeId; 5] = [Self::P1, Self::P2, Self::P3, Self::P4, Self::P5];
}

impl fmt::Display for PracticeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for PracticeId {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" | "1" => Ok(Self::P1),
            "P2" | "2" => Ok(Self::P2),
            "P3" | "3" => Ok(Self::P3),
            "P4" | "4" => Ok(Self::P4),
            "P5" | "5" => Ok(Self::P5),
            _ => Err(HarnessError::UnknownPractice(s.to_string())),
        }
    }
}

/// A competing model specification, kept as formula text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSpec {
    pub name: String,
    pub location: String,
    pub scale: String,
}

impl NamedSpec {
    fn new(name: &str, location: &str, scale: &str) -> Self {
        Self {
            name: name.into(),
            location: location.into(),
            scale: scale.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub config: ScenarioConfig,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Self {
        Self {
            id: format!("N{}_M{}", config.n_subjects, config.mean_encounters),
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyPlan {
    pub practice: PracticeId,
    pub scenarios: Vec<Scenario>,
    pub models: Vec<NamedSpec>,
    pub replications: usize,
    pub base_seed: u64,
    pub sampler: SamplerConfig,
    pub priors: PriorConfig,
    pub student_df: f64,
}

pub const DEFAULT_REPLICATIONS: usize = 100;

const CORRECT_LOCATION: &str = "y ~ age + albumin + (1|id)";
const CORRECT_SCALE: &str = "log(omega) ~ age + trig + (1|id)";

/// The formula pairs of each practice, verbatim.
pub fn builtin_models(practice: PracticeId) -> Vec<NamedSpec> {
    match practice {
        PracticeId::P1 => vec![
            NamedSpec::new("MELSM", CORRECT_LOCATION, CORRECT_SCALE),
            NamedSpec::new("LMM", "y ~  age + albumin + (1|id)", "log(omega) ~ 1"),
        ],
        PracticeId::P2 => vec![
            NamedSpec::new("Correct", CORRECT_LOCATION, CORRECT_SCALE),
            NamedSpec::new(
                "All",
                "y ~ age + albumin + trig + platelet + (1|id)",
                "log(omega) ~ age + albumin + trig + platelet + (1|id)",
            ),
            NamedSpec::new("Misspecified y", "y ~ albumin + (1|id)", CORRECT_SCALE),
            NamedSpec::new("Misspecified omega", CORRECT_LOCATION, "log(omega) ~ trig + (1|id)"),
            NamedSpec::new("No u_omega", CORRECT_LOCATION, "log(omega) ~ age + trig"),
            NamedSpec::new(
                "No u_omega and misspecified omega",
                CORRECT_LOCATION,
                "log(omega) ~ trig",
            ),
        ],
        PracticeId::P3 => vec![
            NamedSpec::new("Correct", "y ~ sin(age) + albumin + (1|id)", CORRECT_SCALE),
            NamedSpec::new("Non sinus", "y ~  age + albumin + (1|id)", CORRECT_SCALE),
        ],
        PracticeId::P4 => vec![
            NamedSpec::new(
                "Correct",
                "y ~ age + albumin + (1 + age|id)",
                "log(omega) ~ age + trig + (1 + age|id)",
            ),
            NamedSpec::new("No u_age_omega", "y ~ age + albumin + (1 + age|id)", CORRECT_SCALE),
            NamedSpec::new("No slopes", "y ~  age + albumin + (1|id)", CORRECT_SCALE),
        ],
        PracticeId::P5 => vec![
            NamedSpec::new(
                "Student",
                "y ~  age + albumin + (1|gr(id, dist=`student'))",
                "log(omega) ~ age + trig + (1|gr(id, dist=`student'))",
            ),
            NamedSpec::new("Gaussian", CORRECT_LOCATION, CORRECT_SCALE),
        ],
    }
}

pub fn practice_variant(practice: PracticeId) -> Variant {
    match practice {
        PracticeId::P1 | PracticeId::P2 => Variant::Base,
        PracticeId::P3 => Variant::Sinus,
        PracticeId::P4 => Variant::random_slopes(),
        PracticeId::P5 => Variant::StudentRe { df: 3.0 },
    }
}

pub fn builtin_plan(practice: PracticeId) -> StudyPlan {
    let base = ScenarioConfig {
        variant: practice_variant(practice),
        ..Default::default()
    };
    let scenarios = match practice {
        // Two one-dimensional sweeps around the reference scenario.
        PracticeId::P1 => {
            let mut grid: Vec<(usize, usize)> = [100, 300, 500, 1000].iter().map(|&n| (n, 15)).collect();
            grid.extend([5, 10, 20].iter().map(|&m| (200, m)));
            scenarios_from_grid(&base, &grid)
        }
        _ => vec![Scenario::new(base)],
    };
    StudyPlan {
        practice,
        scenarios,
        models: builtin_models(practice),
        replications: DEFAULT_REPLICATIONS,
        base_seed: 0,
        sampler: SamplerConfig::default(),
        priors: PriorConfig::default(),
        student_df: crate::model::DEFAULT_STUDENT_DF,
    }
}

fn scenarios_from_grid(base: &ScenarioConfig, grid: &[(usize, usize)]) -> Vec<Scenario> {
    grid.iter()
        .map(|&(n, m)| {
            Scenario::new(ScenarioConfig {
                n_subjects: n,
                mean_encounters: m,
                ..base.clone()
            })
        })
        .collect()
}

fn scale_count(v: usize, factor: f64) -> usize {
    ((v as f64 * factor).round() as usize).max(1)
}

impl StudyPlan {
    /// Replace the scenario grid with `(N, M)` pairs, keeping the generative
    /// settings of the first scenario.
    pub fn set_grid(&mut self, grid: &[(usize, usize)]) {
        let base = self.scenarios.first().map(|s| s.config.clone()).unwrap_or_default();
        self.scenarios = scenarios_from_grid(&base, grid);
    }

    /// Shrink S, N, M and sampler iterations proportionally.
    pub fn scale(&mut self, factor: f64) -> Result<(), HarnessError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(invalid("scale_factor", format!("must be positive, got {factor}")));
        }
        self.replications = scale_count(self.replications, factor);
        for s in &mut self.scenarios {
            s.config.n_subjects = scale_count(s.config.n_subjects, factor);
            s.config.mean_encounters = scale_count(s.config.mean_encounters, factor);
            *s = Scenario::new(s.config.clone());
        }
        self.sampler.warmup_iters = scale_count(self.sampler.warmup_iters, factor);
        self.sampler.sampling_iters = scale_count(self.sampler.sampling_iters, factor).max(2);
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.replications == 0 {
            return Err(invalid("replications", "must be positive"));
        }
        if self.scenarios.is_empty() {
            return Err(invalid("scenarios", "at least one scenario is required"));
        }
        if self.models.is_empty() {
            return Err(invalid("models", "at least one model is required"));
        }
        let mut ids = HashSet::new();
        for (i, s) in self.scenarios.iter().enumerate() {
            if !ids.insert(&s.id) {
                return Err(invalid(format!("scenarios[{i}].id"), format!("duplicate id '{}'", s.id)));
            }
            s.config.validate().map_err(|e| match e {
                SimError::InvalidConfig { field, message } => {
                    invalid(format!("scenarios[{i}].config.{field}"), message)
                }
                other => invalid(format!("scenarios[{i}].config"), other.to_string()),
            })?;
        }
        let mut names = HashSet::new();
        for (i, m) in self.models.iter().enumerate() {
            if !names.insert(&m.name) {
                return Err(invalid(format!("models[{i}].name"), format!("duplicate name '{}'", m.name)));
            }
            self.spec(m)?;
        }
        self.sampler
            .validate()
            .map_err(|e| invalid("sampler", e.to_string()))?;
        self.priors.validate().map_err(|e| invalid("priors", e.to_string()))?;
        Ok(())
    }

    pub fn spec(&self, model: &NamedSpec) -> Result<MelsmSpec, HarnessError> {
        let wrap = |source| HarnessError::Model {
            name: model.name.clone(),
            source,
        };
        let spec = MelsmSpec::parse(&model.location, &model.scale)
            .map_err(wrap)?
            .with_priors(self.priors.clone())
            .with_student_df(Some(self.student_df));
        spec.validate().map_err(wrap)?;
        Ok(spec)
    }

    /// Seed of the dataset for `(scenario, rep)`.
    pub fn dataset_seed(&self, scenario: usize, rep: usize) -> u64 {
        derive_seed(self.base_seed, &[purpose::COVARIATES, scenario as u64, rep as u64])
    }

    /// Sampler seed of `model` on the dataset for `(scenario, rep)`.
    pub fn fit_seed(&self, scenario: usize, rep: usize, model: usize) -> u64 {
        derive_seed(
            self.base_seed,
            &[purpose::CHAIN, scenario as u64, rep as u64, model as u64],
        )
    }

    pub fn dataset_config(&self, scenario: usize, rep: usize) -> ScenarioConfig {
        ScenarioConfig {
            seed: self.dataset_seed(scenario, rep),
            ..self.scenarios[scenario].config.clone()
        }
    }

    /// Number of records a complete run without failures produces.
    pub fn expected_records(&self) -> Result<usize, HarnessError> {
        let per_rep: usize = self
            .models
            .iter()
            .map(|m| Ok(estimands(&self.spec(m)?).len()))
            .sum::<Result<usize, HarnessError>>()?;
        Ok(per_rep * self.replications * self.scenarios.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Ok,
    /// More than [`UNRELIABLE_DIVERGENCE_RATE`] of the sampling iterations
    /// diverged.
    Unreliable,
    Failed,
}

/// One row of `records.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub practice: PracticeId,
    pub scenario: String,
    pub model: String,
    pub rep: usize,
    pub estimand: String,
    pub estimate: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub truth: f64,
    pub rhat_max: Option<f64>,
    pub divergences: Option<usize>,
    pub flag: Flag,
    pub seconds: Option<f64>,
}

/// A quantity reported by a fitted model: its canonical name and the
/// sampler output that estimates it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Estimand {
    pub name: String,
    pub output: String,
}

/// Non-intercept fixed effects keyed by covariate, then random-effect SDs.
pub fn estimands(spec: &MelsmSpec) -> Vec<Estimand> {
    let mut out = Vec::new();
    for (block, ast) in [("beta_y", &spec.location), ("beta_w", &spec.scale)] {
        for term in &ast.fixed_terms {
            out.push(Estimand {
                name: format!("{block}.{}", term.covariate),
                output: format!("{block}.{}", term.label()),
            });
        }
    }
    for (block, ast) in [("location", &spec.location), ("scale", &spec.scale)] {
        for r in &ast.random_terms {
            let mut names = vec![format!("sd_re_{block}")];
            names.extend(r.slope_covariates.iter().map(|c| format!("sd_re_{block}.{c}")));
            out.extend(names.into_iter().map(|n| Estimand {
                name: n.clone(),
                output: n,
            }));
        }
    }
    out
}

const COVARIATES: [&str; 4] = ["age", "albumin", "trig", "platelet"];

/// Data-generating value of `estimand`; zero for covariates that do not
/// enter the generator.
pub fn truth_value(config: &ScenarioConfig, estimand: &str) -> Option<f64> {
    let covariate = |name: &str| COVARIATES.iter().position(|c| *c == name);
    if let Some(c) = estimand.strip_prefix("beta_y.") {
        return covariate(c).map(|k| config.beta_y[k]);
    }
    if let Some(c) = estimand.strip_prefix("beta_w.") {
        return covariate(c).map(|k| config.beta_w[k]);
    }
    let (sd_slope_y, sd_slope_w) = match config.variant {
        Variant::RandomSlopes {
            sd_slope_y,
            sd_slope_w,
        } => (sd_slope_y, sd_slope_w),
        _ => (0.0, 0.0),
    };
    match estimand {
        "sd_re_location" => Some(config.sd_y),
        "sd_re_scale" => Some(config.sd_w),
        "sd_re_location.age" => Some(sd_slope_y),
        "sd_re_scale.age" => Some(sd_slope_w),
        _ if estimand.starts_with("sd_re_") => Some(0.0),
        _ => None,
    }
}

/// Fit `spec` to `data` from the origin of the unconstrained space.
pub fn fit_spec(
    spec: MelsmSpec,
    data: &LongitudinalDataset,
    sampler: &SamplerConfig,
) -> Result<(MelsmModel, Fit), HarnessError> {
    let model = MelsmModel::new(spec, data).map_err(|source| HarnessError::Model {
        name: "fit".into(),
        source,
    })?;
    let init = vec![0.0; model.dim()];
    let fit = nuts_sample(&model, &init, sampler)?;
    Ok((model, fit))
}

/// FNV-1a over the dataset's CSV encoding.
pub fn dataset_checksum(data: &LongitudinalDataset) -> u64 {
    data.to_csv_bytes().iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the available parallelism.
    pub jobs: Option<usize>,
    /// Fill the `seconds` column of `records.csv` (breaks byte-identity).
    pub record_timing: bool,
    /// Also write each fit's draws to `draws/`.
    pub save_draws: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// One fitted (scenario, rep, model) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub practice: PracticeId,
    pub scenario: String,
    pub model: String,
    pub rep: usize,
    pub dataset_checksum: String,
    pub seconds: f64,
}

struct Completed {
    records: Vec<StudyRecord>,
    timing: Timing,
}

fn run_one(
    plan: &StudyPlan,
    specs: &[MelsmSpec],
    scenario: usize,
    rep: usize,
    model_idx: usize,
    data: &LongitudinalDataset,
    checksum: u64,
    opts: &RunOptions,
    out_dir: &Path,
) -> Completed {
    let start = Instant::now();
    let sc = &plan.scenarios[scenario];
    let spec = specs[model_idx].clone();
    let wanted = estimands(&spec);
    let sampler = SamplerConfig {
        seed: plan.fit_seed(scenario, rep, model_idx),
        ..plan.sampler
    };
    let result = fit_spec(spec, data, &sampler);
    let seconds = start.elapsed().as_secs_f64();
    let model_name = &plan.models[model_idx].name;
    if opts.save_draws {
        if let Ok((_, fit)) = &result {
            let dir = out_dir.join("draws");
            let name = format!("{}_{}_{}.csv", sc.id, rep, sanitize(model_name));
            if let Err(e) = fs::create_dir_all(&dir).and_then(|_| {
                fit.save_draws_csv(&dir.join(name))
                    .map_err(|e| std::io::Error::other(e.to_string()))
            }) {
                eprintln!("warning: could not save draws: {e}");
            }
        }
    }
    if opts.verbose {
        match &result {
            Ok(_) => eprintln!("{} {} rep {rep} {model_name}: {seconds:.1}s", plan.practice, sc.id),
            Err(e) => eprintln!("{} {} rep {rep} {model_name}: failed: {e}", plan.practice, sc.id),
        }
    }
    let base = |estimand: &Estimand| StudyRecord {
        practice: plan.practice,
        scenario: sc.id.clone(),
        model: model_name.clone(),
        rep,
        estimand: estimand.name.clone(),
        estimate: None,
        lower: None,
        upper: None,
        truth: truth_value(&sc.config, &estimand.name).unwrap_or(f64::NAN),
        rhat_max: None,
        divergences: None,
        flag: Flag::Failed,
        seconds: opts.record_timing.then_some(seconds),
    };
    let records = match result {
        Ok((_, fit)) => {
            let draws = fit.n_chains() * fit.n_draws_per_chain();
            let flag = if fit.diagnostics.divergence_rate(draws) > UNRELIABLE_DIVERGENCE_RATE {
                Flag::Unreliable
            } else {
                Flag::Ok
            };
            wanted
                .iter()
                .map(|e| {
                    let mut r = base(e);
                    let summary = fit.summary(&e.output);
                    let interval = fit.interval(&e.output, INTERVAL_LEVEL).and_then(Result::ok);
                    match (summary, interval) {
                        (Some(s), Some((lo, hi))) => {
                            r.estimate = Some(s.mean);
                            r.lower = Some(lo);
                            r.upper = Some(hi);
                            r.rhat_max = fit.diagnostics.rhat_max;
                            r.divergences = Some(fit.diagnostics.divergences);
                            r.flag = flag;
                        }
                        _ => r.flag = Flag::Failed,
                    }
                    r
                })
                .collect()
        }
        Err(_) => wanted.iter().map(base).collect(),
    };
    Completed {
        records,
        timing: Timing {
            practice: plan.practice,
            scenario: sc.id.clone(),
            model: model_name.clone(),
            rep,
            dataset_checksum: format!("{checksum:016x}"),
            seconds,
        },
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Parse a records file, reporting the 1-based line of any malformed row.
pub fn read_records(path: &Path) -> Result<Vec<StudyRecord>, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_records_from(file)
}

pub fn read_records_from<R: std::io::Read>(input: R) -> Result<Vec<StudyRecord>, HarnessError> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| HarnessError::Records {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != RECORDS_HEADER {
        return Err(HarnessError::Records {
            line: 1,
            message: format!("expected header `{RECORDS_HEADER}`, found `{header}`"),
        });
    }
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let rec: StudyRecord = row.map_err(|e| HarnessError::Records {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(out: W, records: &[StudyRecord], header: bool) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let csv_err = |e: csv::Error| HarnessError::Records {
        line: 0,
        message: e.to_string(),
    };
    if header {
        w.write_record(RECORDS_HEADER.split(',')).map_err(csv_err)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::Records {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(())
}

/// Records already on disk, with any trailing partial line dropped.
fn load_existing(path: &Path) -> Result<Vec<StudyRecord>, HarnessError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    if bytes.last() != Some(&b'\n') {
        let cut = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        bytes.truncate(cut);
    }
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    read_records_from(bytes.as_slice())
}

fn canonical_sort(plan: &StudyPlan, records: &mut [StudyRecord]) {
    let scen: HashMap<&str, usize> = plan.scenarios.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let model: HashMap<&str, usize> = plan.models.iter().enumerate().map(|(i, m)| (m.name.as_str(), i)).collect();
    let est_order: HashMap<(String, String), usize> = plan
        .models
        .iter()
        .filter_map(|m| plan.spec(m).ok().map(|s| (m, s)))
        .flat_map(|(m, s)| {
            estimands(&s)
                .into_iter()
                .enumerate()
                .map(move |(k, e)| ((m.name.clone(), e.name), k))
                .collect::<Vec<_>>()
        })
        .collect();
    records.sort_by_key(|r| {
        (
            scen.get(r.scenario.as_str()).copied().unwrap_or(usize::MAX),
            r.rep,
            model.get(r.model.as_str()).copied().unwrap_or(usize::MAX),
            est_order
                .get(&(r.model.clone(), r.estimand.clone()))
                .copied()
                .unwrap_or(usize::MAX),
        )
    });
}

/// Run (or resume) `plan`, writing into `out_dir`. Returns all records in
/// canonical order.
pub fn run_study(plan: &StudyPlan, out_dir: &Path, opts: &RunOptions) -> Result<Vec<StudyRecord>, HarnessError> {
    plan.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let plan_path = out_dir.join(PLAN_FILE);
    if plan_path.exists() {
        let text = fs::read_to_string(&plan_path).map_err(io_err(&plan_path))?;
        let previous: StudyPlan = serde_json::from_str(&text)?;
        if &previous != plan {
            return Err(invalid(
                "plan",
                format!("{} holds a different plan; use a fresh output directory", plan_path.display()),
            ));
        }
    }
    fs::write(&plan_path, serde_json::to_string_pretty(plan)?).map_err(io_err(&plan_path))?;

    let records_path = out_dir.join(RECORDS_FILE);
    let existing = load_existing(&records_path)?;
    let done: HashSet<(String, usize, String)> = existing
        .iter()
        .map(|r| (r.scenario.clone(), r.rep, r.model.clone()))
        .collect();
    {
        // Rewrite without any partial trailing line.
        let f = File::create(&records_path).map_err(io_err(&records_path))?;
        write_records(BufWriter::new(f), &existing, true)?;
    }

    let timings_path = out_dir.join(TIMINGS_FILE);
    let timings_exist = timings_path.exists();
    let timings_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&timings_path)
        .map_err(io_err(&timings_path))?;

    let specs: Vec<MelsmSpec> = plan.models.iter().map(|m| plan.spec(m)).collect::<Result<_, _>>()?;
    let units: Vec<(usize, usize)> = (0..plan.scenarios.len())
        .flat_map(|s| (0..plan.replications).map(move |r| (s, r)))
        .filter(|&(s, r)| {
            plan.models
                .iter()
                .any(|m| !done.contains(&(plan.scenarios[s].id.clone(), r, m.name.clone())))
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| invalid("jobs", e.to_string()))?;

    let (tx, rx) = mpsc::channel::<Completed>();
    let writer_result = std::thread::scope(|scope| {
        let records_path = &records_path;
        let writer = scope.spawn(move || -> Result<(), HarnessError> {
            let file = OpenOptions::new()
                .append(true)
                .open(records_path)
                .map_err(io_err(records_path))?;
            let mut records_out = BufWriter::new(file);
            let mut timings = csv::WriterBuilder::new()
                .has_headers(!timings_exist)
                .from_writer(timings_file);
            for done in rx {
                write_records(&mut records_out, &done.records, false)?;
                records_out.flush().map_err(io_err(records_path))?;
                timings.serialize(&done.timing).map_err(|e| HarnessError::Records {
                    line: 0,
                    message: e.to_string(),
                })?;
                timings.flush().map_err(io_err(&timings_path))?;
            }
            Ok(())
        });

        let work = pool.install(|| {
            units.par_iter().try_for_each_with(tx, |tx, &(s, r)| {
                let generated = generate(&plan.dataset_config(s, r))?;
                let checksum = dataset_checksum(&generated.data);
                for (m, named) in plan.models.iter().enumerate() {
                    if done.contains(&(plan.scenarios[s].id.clone(), r, named.name.clone())) {
                        continue;
                    }
                    let completed = run_one(plan, &specs, s, r, m, &generated.data, checksum, opts, out_dir);
                    if tx.send(completed).is_err() {
                        // The writer stopped; its error is reported below.
                        return Ok(());
                    }
                }
                Ok::<(), HarnessError>(())
            })
        });
        let written = writer.join().expect("writer thread panicked");
        work.and(written)
    });
    writer_result?;

    let mut all = load_existing(&records_path)?;
    canonical_sort(plan, &mut all);
    let tmp = out_dir.join(format!("{RECORDS_FILE}.tmp"));
    {
        let f = File::create(&tmp).map_err(io_err(&tmp))?;
        write_records(BufWriter::new(f), &all, true)?;
    }
    fs::rename(&tmp, &records_path).map_err(io_err(&records_path))?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn practice_ids_parse() {
        assert_eq!("p3".parse::<PracticeId>().unwrap(), PracticeId::P3);
        assert!(matches!("P9".parse::<PracticeId>(), Err(HarnessError::UnknownPractice(_))));
    }

    #[test]
    fn builtin_plans_have_listed_sizes() {
        let sizes: Vec<(usize, usize)> = PracticeId::ALL
            .iter()
            .map(|&p| {
                let plan = builtin_plan(p);
                plan.validate().unwrap();
                (plan.scenarios.len(), plan.models.len())
            })
            .collect();
        assert_eq!(sizes, [(7, 2), (1, 6), (1, 2), (1, 3), (1, 2)]);
    }

    #[test]
    fn p1_sweeps_hold_the_other_dimension_fixed() {
        let ids: Vec<String> = builtin_plan(PracticeId::P1).scenarios.into_iter().map(|s| s.id).collect();
        assert_eq!(
            ids,
            ["N100_M15", "N300_M15", "N500_M15", "N1000_M15", "N200_M5", "N200_M10", "N200_M20"]
        );
    }

    #[test]
    fn correct_spec_has_six_estimands() {
        let plan = builtin_plan(PracticeId::P2);
        let spec = plan.spec(&plan.models[0]).unwrap();
        let names: Vec<String> = estimands(&spec).into_iter().map(|e| e.name).collect();
        assert_eq!(
            names,
            [
                "beta_y.age",
                "beta_y.albumin",
                "beta_w.age",
                "beta_w.trig",
                "sd_re_location",
                "sd_re_scale"
            ]
        );
    }

    #[test]
    fn sinus_estimand_is_keyed_by_covariate() {
        let plan = builtin_plan(PracticeId::P3);
        let spec = plan.spec(&plan.models[0]).unwrap();
        let e = &estimands(&spec)[0];
        assert_eq!((e.name.as_str(), e.output.as_str()), ("beta_y.age", "beta_y.sin(age)"));
    }

    #[test]
    fn truths_follow_the_generator() {
        let c = ScenarioConfig::default();
        assert_eq!(truth_value(&c, "beta_y.age"), Some(0.5));
        assert_eq!(truth_value(&c, "beta_w.trig"), Some(0.8));
        assert_eq!(truth_value(&c, "beta_y.platelet"), Some(0.0));
        assert_eq!(truth_value(&c, "sd_re_location"), Some(2.0));
        assert_eq!(truth_value(&c, "sd_re_scale"), Some(1.0));
        let c = ScenarioConfig {
            variant: Variant::random_slopes(),
            ..c
        };
        assert_eq!(truth_value(&c, "sd_re_scale.age"), Some(0.5));
    }

    #[test]
    fn scaling_shrinks_everything() {
        let mut plan = builtin_plan(PracticeId::P2);
        plan.scale(0.5).unwrap();
        assert_eq!(plan.replications, 50);
        assert_eq!(plan.scenarios[0].id, "N100_M8");
        assert_eq!((plan.sampler.warmup_iters, plan.sampler.sampling_iters), (500, 500));
        assert!(plan.scale(0.0).is_err());
    }

    #[test]
    fn seeds_differ_across_units() {
        let plan = builtin_plan(PracticeId::P1);
        let a = plan.dataset_seed(0, 0);
        assert_ne!(a, plan.dataset_seed(0, 1));
        assert_ne!(a, plan.dataset_seed(1, 0));
        assert_ne!(plan.fit_seed(0, 0, 0), plan.fit_seed(0, 0, 1));
    }

    #[test]
    fn records_round_trip() {
        let r = StudyRecord {
            practice: PracticeId::P2,
            scenario: "N200_M15".into(),
            model: "No u_omega and misspecified omega".into(),
            rep: 3,
            estimand: "beta_y.age".into(),
            estimate: Some(0.51),
            lower: Some(0.4),
            upper: Some(0.6),
            truth: 0.5,
            rhat_max: Some(1.01),
            divergences: Some(0),
            flag: Flag::Ok,
            seconds: None,
        };
        let failed = StudyRecord {
            estimate: None,
            lower: None,
            upper: None,
            flag: Flag::Failed,
            ..r.clone()
        };
        let mut buf = Vec::new();
        write_records(&mut buf, &[r.clone(), failed.clone()], true).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(RECORDS_HEADER));
        assert_eq!(read_records_from(buf.as_slice()).unwrap(), vec![r, failed]);
    }

    #[test]
    fn bad_record_reports_its_line() {
        let text = format!("{RECORDS_HEADER}\nP1,N1_M1,LMM,0,beta_y.age,x,0,1,0.5,,,ok,\n");
        match read_records_from(text.as_bytes()) {
            Err(HarnessError::Records { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
