//! `melsm`: simulate cohorts, fit location-scale models, run practice
//! studies, and summarize them.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or parse
//! error, 3 fit failure, 4 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use melsm_core::harness::{self, builtin_plan, PracticeId, RunOptions, StudyPlan};
use melsm_core::linalg::Matrix;
use melsm_core::model::{LongitudinalDataset, MelsmSpec, PriorConfig};
use melsm_core::report::{self, inflation_check};
use melsm_core::sampler::SamplerConfig;
use melsm_core::simgen::{self, ScenarioConfig, TABLE1_COVARIANCE};
use melsm_core::{Error, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "melsm", version, about = "Bayesian mixed-effects location-scale model laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate one synthetic dataset and its truth manifest.
    Simulate(SimulateArgs),
    /// Fit a location/scale formula pair to a dataset.
    Fit(FitArgs),
    /// Run a practice study (generate, fit every model, record).
    Study(StudyArgs),
    /// Coverage table and boxplots from a records file.
    Report(ReportArgs),
    /// Residual variance inflation from an omitted location term.
    Inflation(InflationArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// TOML file with scenario fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the generative variant of a practice (P1..P5).
    #[arg(long)]
    practice: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base name of the written files.
    #[arg(long, default_value = "dataset")]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
struct SamplerFlags {
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    sampling: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
}

impl SamplerFlags {
    fn apply(&self, c: &mut SamplerConfig) {
        if let Some(v) = self.chains {
            c.chains = v;
        }
        if let Some(v) = self.warmup {
            c.warmup_iters = v;
        }
        if let Some(v) = self.sampling {
            c.sampling_iters = v;
        }
        if let Some(v) = self.target_accept {
            c.target_accept = v;
        }
        if let Some(v) = self.max_depth {
            c.max_tree_depth = v;
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    location: String,
    #[arg(long)]
    scale: String,
    /// TOML file with `sampler`, `priors` and `student_df`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Degrees of freedom for `dist='student'` random effects.
    #[arg(long)]
    student_df: Option<f64>,
    /// Also write post-warmup draws to `draws.csv`.
    #[arg(long)]
    save_draws: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[arg(long)]
    practice: String,
    /// TOML file overriding plan fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replications S.
    #[arg(long)]
    reps: Option<usize>,
    /// Shrink S, N, M and sampler iterations by this factor.
    #[arg(long)]
    scale_factor: Option<f64>,
    /// Comma-separated N values; the grid is N x M.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Comma-separated M values.
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    sampler: SamplerFlags,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    jobs: Option<usize>,
    /// Write wall time into records.csv (makes it run-dependent).
    #[arg(long)]
    record_timing: bool,
    #[arg(long)]
    save_draws: bool,
    #[arg(long, short)]
    quiet: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InflationArgs {
    /// Omitted coefficients over (age, albumin, trig, platelet).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    delta: Vec<f64>,
    /// Residual sd of the correct model.
    #[arg(long, default_value_t = 1.0)]
    omega: f64,
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `inflation.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An error with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: 4,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e: Error = e.into();
        let code = match e.kind() {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Fit => 3,
            ErrorKind::Io => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::io(path, e))
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Failure::io(path, e))
}

fn parse_practice(s: &str) -> Result<PracticeId, Failure> {
    Ok(s.parse::<PracticeId>()?)
}

#[derive(Serialize)]
struct SimulateEcho<'a> {
    command: &'static str,
    scenario: &'a ScenarioConfig,
    files: [String; 2],
}

fn simulate(args: SimulateArgs) -> Outcome {
    let mut config = match &args.config {
        Some(path) => read_toml::<ScenarioConfig>(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(p) = &args.practice {
        config.variant = harness::practice_variant(parse_practice(p)?);
    }
    if let Some(n) = args.n {
        config.n_subjects = n;
    }
    if let Some(m) = args.m {
        config.mean_encounters = m;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let generated = simgen::generate(&config)?;
    create_dir(&args.out)?;
    generated.save(&args.out, &args.name)?;
    write_json(
        &args.out.join(format!("{}.config.json", args.name)),
        &SimulateEcho {
            command: "simulate",
            scenario: &config,
            files: [format!("{}.csv", args.name), format!("{}.truth.json", args.name)],
        },
    )?;
    println!(
        "wrote {} rows for {} subjects to {}",
        generated.data.n_obs(),
        generated.data.n_subjects(),
        args.out.join(format!("{}.csv", args.name)).display()
    );
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitFile {
    sampler: Option<SamplerConfig>,
    priors: Option<PriorConfig>,
    student_df: Option<f64>,
}

#[derive(Serialize)]
struct FitEcho<'a> {
    command: &'static str,
    data: String,
    location: &'a str,
    scale: &'a str,
    priors: &'a PriorConfig,
    student_df: f64,
    sampler: &'a SamplerConfig,
}

fn fit(args: FitArgs) -> Outcome {
    let file = match &args.config {
        Some(path) => read_toml::<FitFile>(path)?,
        None => FitFile::default(),
    };
    let mut sampler = file.sampler.unwrap_or_default();
    args.sampler.apply(&mut sampler);
    if let Some(seed) = args.seed {
        sampler.seed = seed;
    }
    sampler.validate()?;
    let priors = file.priors.unwrap_or_default();
    let df = args.student_df.or(file.student_df);
    let spec = MelsmSpec::parse(&args.location, &args.scale)?
        .with_priors(priors.clone())
        .with_student_df(df);
    spec.validate()?;
    let data = LongitudinalDataset::load(&args.data)?;

    create_dir(&args.out)?;
    let echo = FitEcho {
        command: "fit",
        data: args.data.display().to_string(),
        location: &args.location,
        scale: &args.scale,
        priors: &priors,
        student_df: spec.df(),
        sampler: &sampler,
    };
    write_json(&args.out.join("fit_config.json"), &echo)?;

    let (_, fit) = harness::fit_spec(spec, &data, &sampler)?;
    let path = args.out.join("fit.json");
    fs::write(&path, fit.to_json()?).map_err(|e| Failure::io(&path, e))?;
    if args.save_draws {
        fit.save_draws_csv(&args.out.join("draws.csv"))?;
    }
    println!(
        "{:<32} {:>10} {:>10} {:>10} {:>10} {:>7} {:>8}",
        "parameter", "mean", "sd", "q2.5", "q97.5", "rhat", "ess"
    );
    for s in &fit.summaries {
        println!(
            "{:<32} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>7} {:>8}",
            s.name,
            s.mean,
            s.sd,
            s.q025,
            s.q975,
            s.rhat.map_or("-".into(), |r| format!("{r:.3}")),
            s.ess.map_or("-".into(), |e| format!("{e:.0}")),
        );
    }
    let d = &fit.diagnostics;
    println!(
        "chains {} warmup {} sampling {} divergences {} step sizes {:?}",
        sampler.chains, sampler.warmup_iters, sampler.sampling_iters, d.divergences, d.step_sizes
    );
    Ok(())
}

/// Plan overrides readable from a TOML file; flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyFile {
    replications: Option<usize>,
    base_seed: Option<u64>,
    scale_factor: Option<f64>,
    n_subjects: Option<Vec<usize>>,
    mean_encounters: Option<Vec<usize>>,
    sampler: Option<SamplerConfig>,
    priors: Option<PriorConfig>,
    student_df: Option<f64>,
}

fn resolve_plan(args: &StudyArgs) -> Result<StudyPlan, Failure> {
    let mut plan = builtin_plan(parse_practice(&args.practice)?);
    let file = match &args.config {
        Some(path) => read_toml::<StudyFile>(path)?,
        None => StudyFile::default(),
    };
    if let Some(s) = file.sampler {
        plan.sampler = s;
    }
    if let Some(p) = file.priors {
        plan.priors = p;
    }
    if let Some(df) = file.student_df {
        plan.student_df = df;
    }
    let ns = args.n.clone().or(file.n_subjects);
    let ms = args.m.clone().or(file.mean_encounters);
    if ns.is_some() || ms.is_some() {
        let ns = ns.unwrap_or_else(|| vec![ScenarioConfig::default().n_subjects]);
        let ms = ms.unwrap_or_else(|| vec![ScenarioConfig::default().mean_encounters]);
        let grid: Vec<(usize, usize)> = ns.iter().flat_map(|&n| ms.iter().map(move |&m| (n, m))).collect();
        plan.set_grid(&grid);
    }
    if let Some(f) = args.scale_factor.or(file.scale_factor) {
        plan.scale(f)?;
    }
    if let Some(s) = args.reps.or(file.replications) {
        plan.replications = s;
    }
    if let Some(seed) = args.seed.or(file.base_seed) {
        plan.base_seed = seed;
    }
    args.sampler.apply(&mut plan.sampler);
    plan.validate()?;
    Ok(plan)
}

fn study(args: StudyArgs) -> Outcome {
    let plan = resolve_plan(&args)?;
    if args.jobs == Some(0) {
        return Err(Failure::config("--jobs must be positive"));
    }
    let opts = RunOptions {
        jobs: args.jobs,
        record_timing: args.record_timing,
        save_draws: args.save_draws,
        verbose: !args.quiet,
    };
    let records = harness::run_study(&plan, &args.out, &opts)?;
    let failed = records.iter().filter(|r| r.flag == harness::Flag::Failed).count();
    println!(
        "{}: {} records ({} failed) in {}",
        plan.practice,
        records.len(),
        failed,
        args.out.join(harness::RECORDS_FILE).display()
    );
    Ok(())
}

fn run_report(args: ReportArgs) -> Outcome {
    let out = report::report_from_file(&args.records, &args.out)?;
    write_json(
        &args.out.join("report.json"),
        &serde_json::json!({
            "command": "report",
            "records": args.records.display().to_string(),
            "coverage": out.coverage_csv.file_name().map(|f| f.to_string_lossy().to_string()),
            "figures": out.figures.iter().filter_map(|f| f.file_name()).map(|f| f.to_string_lossy().to_string()).collect::<Vec<_>>(),
        }),
    )?;
    println!("{:<10} {:<36} {:<22} {:>8} {:>9} {:>9} {:>4}", "scenario", "model", "estimand", "coverage", "mean", "bias", "n");
    for r in &out.table.rows {
        println!(
            "{:<10} {:<36} {:<22} {:>8} {:>9} {:>9} {:>4}",
            r.scenario,
            r.model,
            r.estimand,
            r.coverage.map_or("-".into(), |c| format!("{c:.1}")),
            r.mean.map_or("-".into(), |m| format!("{m:.4}")),
            r.bias.map_or("-".into(), |b| format!("{b:.4}")),
            r.n
        );
    }
    Ok(())
}

fn inflation(args: InflationArgs) -> Outcome {
    if args.delta.len() != TABLE1_COVARIANCE.len() {
        return Err(Failure::config(format!(
            "--delta needs {} values (age, albumin, trig, platelet), got {}",
            TABLE1_COVARIANCE.len(),
            args.delta.len()
        )));
    }
    let cov = Matrix::from_rows(&TABLE1_COVARIANCE.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
    let check = inflation_check(&args.delta, &cov, args.omega, args.draws, args.seed)?;
    println!("analytic inflation    {:.6}", check.analytic);
    println!("analytic variance     {:.6}", check.analytic_total_variance);
    println!(
        "monte carlo variance  {:.6} (se {:.6}, {} draws)",
        check.monte_carlo.variance, check.monte_carlo.std_error, check.monte_carlo.n_draws
    );
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("inflation.json"), &check)?;
    }
    Ok(())
}

/// Parse `args` and run the command, returning the process exit code.
fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Study(a) => study(a),
        Command::Report(a) => run_report(a),
        Command::Inflation(a) => inflation(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn melsm(args: &[&str]) -> u8 {
        run(std::iter::once("melsm").chain(args.iter().copied()))
    }

    fn path(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    fn json(p: &Path) -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
    }

    #[test]
    fn help_and_usage_errors() {
        assert_eq!(melsm(&["--help"]), 0);
        assert_eq!(melsm(&[]), 1);
        assert_eq!(melsm(&["simulate"]), 1);
        assert_eq!(melsm(&["frobnicate"]), 1);
    }

    #[test]
    fn simulate_writes_dataset_truth_and_echo() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a");
        let args = ["simulate", "--practice", "P2", "--n", "200", "--m", "15", "--seed", "1", "--out", path(&out)];
        assert_eq!(melsm(&args), 0);
        let data = LongitudinalDataset::load(&out.join("dataset.csv")).unwrap();
        assert_eq!(data.n_subjects(), 200);
        // E[rows] = N * M, with sd about sqrt(N * (4M^2 - 4M) / 12).
        assert!((data.n_obs() as f64 - 3000.0).abs() < 400.0, "{}", data.n_obs());
        assert_eq!(json(&out.join("dataset.config.json"))["scenario"]["seed"], 1);
        assert!(out.join("dataset.truth.json").exists());

        let again = dir.path().join("b");
        assert_eq!(melsm(&["simulate", "--practice", "P2", "--n", "200", "--m", "15", "--seed", "1", "--out", path(&again)]), 0);
        for f in ["dataset.csv", "dataset.truth.json", "dataset.config.json"] {
            assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn simulate_rejects_zero_subjects_and_bad_config() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(melsm(&["simulate", "--n", "0", "--out", path(dir.path())]), 1);
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "n_subjects = 10\nbogus = 1\n").unwrap();
        assert_eq!(melsm(&["simulate", "--config", path(&cfg), "--out", path(dir.path())]), 1);
        assert_eq!(melsm(&["simulate", "--practice", "P9", "--out", path(dir.path())]), 1);
        assert_eq!(melsm(&["simulate", "--config", path(&dir.path().join("none.toml")), "--out", path(dir.path())]), 4);
    }

    #[test]
    fn fit_echoes_defaults_and_separates_error_kinds() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(melsm(&["simulate", "--n", "12", "--m", "3", "--seed", "2", "--out", path(dir.path())]), 0);
        let data = dir.path().join("dataset.csv");
        let out = dir.path().join("fit");
        let lmm = [
            "fit", "--data", path(&data), "--location", "y ~ age + albumin + (1|id)", "--scale", "log(omega) ~ 1",
            "--warmup", "60", "--sampling", "40", "--save-draws", "--out", path(&out),
        ];
        assert_eq!(melsm(&lmm), 0);
        let echo = json(&out.join("fit_config.json"));
        assert_eq!(echo["sampler"]["chains"], 2);
        assert_eq!(echo["sampler"]["warmup_iters"], 60);
        let fit = json(&out.join("fit.json"));
        let names: Vec<String> = fit["parameter_names"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
        assert!(names.iter().any(|n| n.starts_with("beta_y")));
        assert!(!names.iter().any(|n| n.starts_with("sd_re_scale")));
        assert_eq!(fs::read_to_string(out.join("draws.csv")).unwrap().lines().count(), 81);

        let bad_formula = ["fit", "--data", path(&data), "--location", "y ~ age +", "--scale", "log(omega) ~ 1", "--out", path(&out)];
        assert_eq!(melsm(&bad_formula), 2);
        let missing = ["fit", "--data", "/nonexistent.csv", "--location", "y ~ 1", "--scale", "log(omega) ~ 1", "--out", path(&out)];
        assert_eq!(melsm(&missing), 4);
    }

    #[test]
    fn fit_defaults_match_the_protocol() {
        let args = Cli::try_parse_from(["melsm", "fit", "--data", "d.csv", "--location", "y ~ 1", "--scale", "log(omega) ~ 1", "--out", "o"]).unwrap();
        let Command::Fit(a) = args.command else { panic!() };
        let mut c = SamplerConfig::default();
        a.sampler.apply(&mut c);
        assert_eq!((c.chains, c.warmup_iters, c.sampling_iters), (2, 1000, 1000));
    }

    #[test]
    fn study_flags_shape_the_plan() {
        let args = Cli::try_parse_from([
            "melsm", "study", "--practice", "P1", "--reps", "20", "--scale-factor", "0.5", "--out", "o",
        ])
        .unwrap();
        let Command::Study(a) = args.command else { panic!() };
        let plan = resolve_plan(&a).unwrap();
        assert_eq!(plan.replications, 20);
        assert_eq!(plan.sampler.warmup_iters, 500);
        assert_eq!(plan.scenarios[0].id, "N50_M8");

        let args = Cli::try_parse_from(["melsm", "study", "--practice", "3", "--n", "100,300", "--m", "5", "--out", "o"]).unwrap();
        let Command::Study(a) = args.command else { panic!() };
        let ids: Vec<String> = resolve_plan(&a).unwrap().scenarios.into_iter().map(|s| s.id).collect();
        assert_eq!(ids, ["N100_M5", "N300_M5"]);
    }

    #[test]
    fn study_then_report() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("study");
        let study = [
            "study", "--practice", "P5", "--reps", "2", "--n", "8", "--m", "2", "--warmup", "30", "--sampling", "20",
            "--jobs", "1", "--quiet", "--out", path(&out),
        ];
        assert_eq!(melsm(&study), 0);
        let records = harness::read_records(&out.join(harness::RECORDS_FILE)).unwrap();
        assert_eq!(records.len(), 2 * 2 * 6);
        assert_eq!(melsm(&["study", "--practice", "P5", "--reps", "3", "--out", path(&out), "--quiet"]), 1);

        let rep = dir.path().join("report");
        assert_eq!(melsm(&["report", "--records", path(&out.join(harness::RECORDS_FILE)), "--out", path(&rep)]), 0);
        assert!(rep.join(report::COVERAGE_FILE).exists());
        assert!(rep.join("P5_beta_y.age.svg").exists());
        assert!(rep.join("report.json").exists());
        assert_eq!(melsm(&["report", "--records", path(&dir.path().join("none.csv")), "--out", path(&rep)]), 4);
    }

    #[test]
    fn inflation_reports_the_analytic_value() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(melsm(&["inflation", "--delta", "0.5,0,0,0", "--draws", "100000", "--out", path(dir.path())]), 0);
        let v = json(&dir.path().join("inflation.json"));
        assert!((v["analytic"].as_f64().unwrap() - 0.255).abs() < 1e-12);
        assert_eq!(melsm(&["inflation", "--delta", "0.5,0", "--draws", "100000"]), 1);
        assert_eq!(melsm(&["inflation", "--delta", "0.5,0,0,0", "--draws", "10"]), 1);
    }
}
