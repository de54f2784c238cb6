//! Coverage tables, boxplot figures, and the variance-inflation check.
//!
//! Coverage uses strict inequalities, `L < θ < U`, divided by the number of
//! non-failed replications and reported in percent.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::error::ErrorKind;
use crate::harness::{read_records, Flag, HarnessError, StudyRecord};
use crate::linalg::{LinalgError, Matrix};
use crate::rng::{purpose, Streams};
use crate::sampler::quantile_sorted;

pub const COVERAGE_FILE: &str = "coverage.csv";
pub const MIN_INFLATION_DRAWS: usize = 10_000;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no non-failed records for {0}")]
    Empty(String),
    #[error("records line {line}: {message}")]
    Schema { line: u64, message: String },
    #[error("{what}: expected length {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid argument `{name}`: {message}")]
    InvalidArgument { name: &'static str, message: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ReportError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ReportError::Io { .. } => ErrorKind::Io,
            ReportError::InvalidArgument { .. } => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl From<HarnessError> for ReportError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Records { line, message } => ReportError::Schema { line, message },
            HarnessError::Io { path, source } => ReportError::Io { path, source },
            other => ReportError::Schema {
                line: 0,
                message: other.to_string(),
            },
        }
    }
}

fn covers(r: &StudyRecord) -> bool {
    matches!((r.lower, r.upper), (Some(l), Some(u)) if l < r.truth && r.truth < u)
}

fn usable(r: &StudyRecord) -> bool {
    r.flag != Flag::Failed && r.estimate.is_some()
}

/// Percent of non-failed records whose interval strictly contains the truth.
pub fn coverage<'a, I>(records: I) -> Result<f64, ReportError>
where
    I: IntoIterator<Item = &'a StudyRecord>,
{
    let (mut hits, mut n) = (0usize, 0usize);
    for r in records.into_iter().filter(|r| usable(r)) {
        n += 1;
        hits += covers(r) as usize;
    }
    if n == 0 {
        return Err(ReportError::Empty("coverage".into()));
    }
    Ok(100.0 * hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub practice: String,
    pub scenario: String,
    pub model: String,
    pub estimand: String,
    pub truth: f64,
    pub coverage: Option<f64>,
    pub mean: Option<f64>,
    pub bias: Option<f64>,
    /// Sample sd of the point estimates; absent with fewer than two.
    pub sd: Option<f64>,
    pub n: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoverageTable {
    pub rows: Vec<CoverageRow>,
}

impl CoverageTable {
    pub fn get(&self, scenario: &str, model: &str, estimand: &str) -> Option<&CoverageRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.model == model && r.estimand == estimand)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ReportError> {
        let io = |source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| io(e.into()))?;
        }
        w.flush().map_err(io)
    }
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(m), sd)
}

type Key = (String, String, String, String);

fn key(r: &StudyRecord) -> Key {
    (
        r.practice.to_string(),
        r.scenario.clone(),
        r.model.clone(),
        r.estimand.clone(),
    )
}

/// Records grouped by key, in order of first appearance.
fn grouped(records: &[StudyRecord]) -> Vec<(Key, Vec<&StudyRecord>)> {
    let mut index: HashMap<Key, usize> = HashMap::new();
    let mut groups: Vec<(Key, Vec<&StudyRecord>)> = Vec::new();
    for r in records {
        let k = key(r);
        let slot = *index.entry(k.clone()).or_insert_with(|| {
            groups.push((k, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(r);
    }
    groups
}

pub fn summarize(records: &[StudyRecord]) -> CoverageTable {
    let rows = grouped(records)
        .into_iter()
        .map(|((practice, scenario, model, estimand), group)| {
            let truth = group[0].truth;
            let estimates: Vec<f64> = group.iter().filter(|r| usable(r)).filter_map(|r| r.estimate).collect();
            let (mean, sd) = mean_sd(&estimates);
            CoverageRow {
                practice,
                scenario,
                model,
                estimand,
                truth,
                coverage: coverage(group.iter().copied()).ok(),
                mean,
                bias: mean.map(|m| m - truth),
                sd,
                n: estimates.len(),
                n_excluded: group.len() - estimates.len(),
            }
        })
        .collect();
    CoverageTable { rows }
}

/// Geometry of the boxplot figures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxplotStyle {
    pub width: f64,
    pub label_width: f64,
    pub coverage_width: f64,
    pub margin: f64,
    pub title_height: f64,
    pub axis_height: f64,
    pub row_height: f64,
    pub box_height: f64,
    pub font_size: f64,
    pub outlier_radius: f64,
}

pub const BOXPLOT_STYLE: BoxplotStyle = BoxplotStyle {
    width: 720.0,
    label_width: 220.0,
    coverage_width: 70.0,
    margin: 10.0,
    title_height: 28.0,
    axis_height: 30.0,
    row_height: 36.0,
    box_height: 20.0,
    font_size: 12.0,
    outlier_radius: 2.5,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BoxGroup {
    pub label: String,
    pub values: Vec<f64>,
    pub truth: f64,
    pub coverage: Option<f64>,
}

/// Five-number summary with Tukey whiskers.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme observations within 1.5 IQR of the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&v, 0.25);
    let median = quantile_sorted(&v, 0.5);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|&x| x >= lo && x <= hi).collect();
    Some(BoxStats {
        q1,
        median,
        q3,
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: v.into_iter().filter(|&x| x < lo || x > hi).collect(),
    })
}

/// Affine map from data values to the plot's x range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub x0: f64,
    pub x1: f64,
}

impl Axis {
    pub fn map(&self, v: f64) -> f64 {
        self.x0 + (v - self.lo) / (self.hi - self.lo) * (self.x1 - self.x0)
    }
}

pub fn plot_axis(groups: &[BoxGroup], style: &BoxplotStyle) -> Axis {
    let finite = groups
        .iter()
        .flat_map(|g| g.values.iter().copied().chain([g.truth]))
        .filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    Axis {
        lo: lo - pad,
        hi: hi + pad,
        x0: style.margin + style.label_width,
        x1: style.width - style.margin - style.coverage_width,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal boxplots, one row per group, with the truth in red and the
/// coverage percentage to the right of each box.
pub fn boxplot_svg(title: &str, groups: &[BoxGroup], style: &BoxplotStyle) -> String {
    let axis = plot_axis(groups, style);
    let plot_top = style.margin + style.title_height;
    let height = plot_top + groups.len() as f64 * style.row_height + style.axis_height + style.margin;
    let mut s = String::new();
    let fs = style.font_size;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{height:.0}" viewBox="0 0 {w:.0} {height:.0}" font-family="sans-serif" font-size="{fs}">"#,
        w = style.width
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-weight="bold">{}</text>"#,
        style.margin,
        style.margin + fs,
        escape(title)
    );

    let same_truth = groups.windows(2).all(|w| w[0].truth == w[1].truth || (w[0].truth.is_nan() && w[1].truth.is_nan()));
    for (i, g) in groups.iter().enumerate() {
        let top = plot_top + i as f64 * style.row_height;
        let cy = top + style.row_height / 2.0;
        let (b0, b1) = (cy - style.box_height / 2.0, cy + style.box_height / 2.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            axis.x0 - 6.0,
            cy + fs / 3.0,
            escape(&g.label)
        );
        if let Some(b) = box_stats(&g.values) {
            let _ = writeln!(
                s,
                r#"<line class="whisker" x1="{:.2}" y1="{cy:.2}" x2="{:.2}" y2="{cy:.2}" stroke="black"/>"#,
                axis.map(b.whisker_low),
                axis.map(b.q1)
            );
            let _ = writeln!(
                s,
                r#"<line class="whisker" x1="{:.2}" y1="{cy:.2}" x2="{:.2}" y2="{cy:.2}" stroke="black"/>"#,
                axis.map(b.q3),
                axis.map(b.whisker_high)
            );
            for w in [b.whisker_low, b.whisker_high] {
                let x = axis.map(w);
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
                    cy - style.box_height / 4.0,
                    cy + style.box_height / 4.0
                );
            }
            let _ = writeln!(
                s,
                r#"<rect class="box" x="{:.2}" y="{b0:.2}" width="{:.2}" height="{:.2}" fill="lightsteelblue" stroke="black"/>"#,
                axis.map(b.q1),
                axis.map(b.q3) - axis.map(b.q1),
                style.box_height
            );
            let xm = axis.map(b.median);
            let _ = writeln!(
                s,
                r#"<line class="median" x1="{xm:.2}" y1="{b0:.2}" x2="{xm:.2}" y2="{b1:.2}" stroke="black" stroke-width="2"/>"#
            );
            for o in &b.outliers {
                let _ = writeln!(
                    s,
                    r#"<circle class="outlier" cx="{:.2}" cy="{cy:.2}" r="{}" fill="none" stroke="black"/>"#,
                    axis.map(*o),
                    style.outlier_radius
                );
            }
        }
        if !same_truth && g.truth.is_finite() {
            let xt = axis.map(g.truth);
            let _ = writeln!(
                s,
                r#"<line class="truth" x1="{xt:.2}" y1="{top:.2}" x2="{xt:.2}" y2="{:.2}" stroke="red" stroke-width="1.5"/>"#,
                top + style.row_height
            );
        }
        let text = g.coverage.map_or_else(|| "-".to_string(), |c| format!("{c:.0}%"));
        let _ = writeln!(
            s,
            r#"<text class="coverage" x="{:.2}" y="{:.2}">{text}</text>"#,
            axis.x1 + 8.0,
            cy + fs / 3.0
        );
    }

    let plot_bottom = plot_top + groups.len() as f64 * style.row_height;
    if same_truth {
        if let Some(t) = groups.first().map(|g| g.truth).filter(|t| t.is_finite()) {
            let xt = axis.map(t);
            let _ = writeln!(
                s,
                r#"<line class="truth" x1="{xt:.2}" y1="{plot_top:.2}" x2="{xt:.2}" y2="{plot_bottom:.2}" stroke="red" stroke-width="1.5"/>"#
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{plot_bottom:.2}" x2="{:.2}" y2="{plot_bottom:.2}" stroke="black"/>"#,
        axis.x0, axis.x1
    );
    for k in 0..=4 {
        let v = axis.lo + (axis.hi - axis.lo) * k as f64 / 4.0;
        let x = axis.map(v);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{plot_bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            plot_bottom + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            plot_bottom + 4.0 + fs,
            format_tick(v)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Files written by [`write_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub table: CoverageTable,
    pub coverage_csv: PathBuf,
    pub figures: Vec<PathBuf>,
}

/// `coverage.csv` plus one `<practice>_<estimand>.svg` per estimand.
pub fn write_report(records: &[StudyRecord], out_dir: &Path) -> Result<ReportOutput, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let table = summarize(records);
    let coverage_csv = out_dir.join(COVERAGE_FILE);
    table.write_csv(&coverage_csv)?;

    let multi_scenario = {
        let mut s: Vec<&str> = records.iter().map(|r| r.scenario.as_str()).collect();
        s.sort_unstable();
        s.dedup();
        s.len() > 1
    };
    let mut figure_keys: Vec<(String, String)> = Vec::new();
    for row in &table.rows {
        let k = (row.practice.clone(), row.estimand.clone());
        if !figure_keys.contains(&k) {
            figure_keys.push(k);
        }
    }
    let groups_by_key = grouped(records);
    let mut figures = Vec::new();
    for (practice, estimand) in figure_keys {
        let groups: Vec<BoxGroup> = table
            .rows
            .iter()
            .filter(|r| r.practice == practice && r.estimand == estimand)
            .map(|row| {
                let values = groups_by_key
                    .iter()
                    .find(|(k, _)| k.1 == row.scenario && k.2 == row.model && k.0 == practice && k.3 == estimand)
                    .map(|(_, g)| g.iter().filter(|r| usable(r)).filter_map(|r| r.estimate).collect())
                    .unwrap_or_default();
                BoxGroup {
                    label: if multi_scenario {
                        format!("{} ({})", row.model, row.scenario)
                    } else {
                        row.model.clone()
                    },
                    values,
                    truth: row.truth,
                    coverage: row.coverage,
                }
            })
            .collect();
        let svg = boxplot_svg(&format!("{practice}: {estimand}"), &groups, &BOXPLOT_STYLE);
        let path = out_dir.join(format!("{practice}_{estimand}.svg"));
        fs::write(&path, svg).map_err(io(&path))?;
        figures.push(path);
    }
    Ok(ReportOutput {
        table,
        coverage_csv,
        figures,
    })
}

pub fn report_from_file(records: &Path, out_dir: &Path) -> Result<ReportOutput, ReportError> {
    let records = read_records(records)?;
    write_report(&records, out_dir)
}

/// `δᵀ Σ δ`: the residual variance added by omitting `δᵀx` from the
/// location.
pub fn inflation_analytic(delta: &[f64], cov: &Matrix) -> Result<f64, ReportError> {
    check_inflation_inputs(delta, cov)?;
    Ok(cov.quadratic_form(delta)?)
}

fn check_inflation_inputs(delta: &[f64], cov: &Matrix) -> Result<(), ReportError> {
    if cov.rows() != cov.cols() {
        return Err(LinalgError::NotSquare {
            rows: cov.rows(),
            cols: cov.cols(),
        }
        .into());
    }
    if delta.len() != cov.rows() {
        return Err(ReportError::Dimension {
            what: "delta",
            expected: cov.rows(),
            actual: delta.len(),
        });
    }
    cov.check_symmetric(1e-12)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloVariance {
    pub variance: f64,
    /// Standard error of `variance`.
    pub std_error: f64,
    pub n_draws: usize,
}

/// Sample variance of `ε − δᵀX` with `X ~ MVN(0, Σ)`, `ε ~ N(0, ω²)`.
pub fn inflation_monte_carlo(
    delta: &[f64],
    cov: &Matrix,
    omega: f64,
    n_draws: usize,
    seed: u64,
) -> Result<MonteCarloVariance, ReportError> {
    check_inflation_inputs(delta, cov)?;
    if n_draws < MIN_INFLATION_DRAWS {
        return Err(ReportError::InvalidArgument {
            name: "n_draws",
            message: format!("need at least {MIN_INFLATION_DRAWS}, got {n_draws}"),
        });
    }
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(ReportError::InvalidArgument {
            name: "omega",
            message: format!("must be non-negative, got {omega}"),
        });
    }
    let l = cov.cholesky()?;
    // δᵀX = (Lᵀδ)ᵀe for e ~ N(0, I).
    let p = delta.len();
    let w: Vec<f64> = (0..p).map(|b| (b..p).map(|a| l[(a, b)] * delta[a]).sum()).collect();
    let mut rng = Streams::new(seed).stream(purpose::INFLATION, 0);
    let mut e = vec![0.0; p];
    let mut values = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        e.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let eps: f64 = omega * rng.sample::<f64, _>(StandardNormal);
        values.push(eps - crate::linalg::dot(&w, &e));
    }
    let n = n_draws as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in &values {
        let d2 = (v - mean).powi(2);
        m2 += d2;
        m4 += d2 * d2;
    }
    let variance = m2 / (n - 1.0);
    let m4 = m4 / n;
    let std_error = ((m4 - variance * variance).max(0.0) / n).sqrt();
    Ok(MonteCarloVariance {
        variance,
        std_error,
        n_draws,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InflationCheck {
    pub delta: Vec<f64>,
    pub sigma_cov: Vec<Vec<f64>>,
    pub omega: f64,
    /// ω², the residual variance of the correctly specified model.
    pub base_variance: f64,
    pub analytic: f64,
    /// `ω² + δᵀΣδ`.
    pub analytic_total_variance: f64,
    pub analytic_total_sd: f64,
    pub monte_carlo: MonteCarloVariance,
}

pub fn inflation_check(
    delta: &[f64],
    cov: &Matrix,
    omega: f64,
    n_draws: usize,
    seed: u64,
) -> Result<InflationCheck, ReportError> {
    let analytic = inflation_analytic(delta, cov)?;
    let monte_carlo = inflation_monte_carlo(delta, cov, omega, n_draws, seed)?;
    let total = omega * omega + analytic;
    Ok(InflationCheck {
        delta: delta.to_vec(),
        sigma_cov: cov.to_rows(),
        omega,
        base_variance: omega * omega,
        analytic,
        analytic_total_variance: total,
        analytic_total_sd: total.sqrt(),
        monte_carlo,
    })
}

/// Kolmogorov distance between `N(0, sd²)` and `scale · t(df)`.
///
/// Both are symmetric and unimodal at zero, so the supremum is attained on
/// the positive half-line; it is located on a fine grid and refined by
/// golden-section search.
pub fn ks_distance_normal_student(sd: f64, scale: f64, df: f64) -> Result<f64, ReportError> {
    for (name, v) in [("sd", sd), ("scale", scale), ("df", df)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ReportError::InvalidArgument {
                name,
                message: format!("must be positive, got {v}"),
            });
        }
    }
    let normal = Normal::new(0.0, sd).expect("positive sd");
    let student = StudentsT::new(0.0, scale, df).expect("positive scale and df");
    let gap = |x: f64| (normal.cdf(x) - student.cdf(x)).abs();
    let upper = 20.0 * sd.max(scale);
    let steps = 4000;
    let h = upper / steps as f64;
    let best = (0..=steps)
        .map(|k| k as f64 * h)
        .max_by(|a, b| gap(*a).total_cmp(&gap(*b)))
        .unwrap_or(0.0);
    let (mut a, mut b) = ((best - h).max(0.0), best + h);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if gap(c) > gap(d) {
            b = d;
        } else {
            a = c;
        }
    }
    Ok(gap(best).max(gap(0.5 * (a + b))))
}
