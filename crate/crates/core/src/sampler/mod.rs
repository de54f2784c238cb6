//! Posterior sampling with the No-U-Turn sampler.
//!
//! [`nuts_sample`] runs independent chains (concurrently when a rayon pool
//! is available) against any [`LogDensity`]. Each chain adapts its step
//! size by dual averaging and a diagonal metric over expanding windows
//! during warmup, then keeps exactly `sampling_iters` draws.

mod adapt;
mod diagnostics;
mod nuts;

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{purpose, Streams};

pub use adapt::{MetricAdapter, StepSizeAdapter};
pub use diagnostics::{
    compute_ess, compute_rhat, credible_interval, mean, quantile, quantile_sorted, variance,
};
use nuts::Hamiltonian;

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, DensityError>;

    /// Names of the quantities recorded per draw.
    fn output_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Quantities recorded per draw; the position itself by default.
    fn write_outputs(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(x);
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{message}")]
pub struct DensityError {
    pub message: String,
    pub coordinate: Option<usize>,
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("initial point has dimension {actual}, target has {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("chain {chain}: no finite initial point after {attempts} jittered attempts ({last})")]
    InitFailed {
        chain: usize,
        attempts: usize,
        last: String,
    },
    #[error("chain {chain}: every warmup transition diverged")]
    AllDivergent { chain: usize },
    #[error("interval level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("need at least 2 chains of at least 4 draws, got {chains} x {draws}")]
    TooFewDraws { chains: usize, draws: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_iters: usize,
    pub sampling_iters: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 2,
            warmup_iters: 1000,
            sampling_iters: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::InvalidConfig(m.to_string()));
        if self.chains == 0 {
            return bad("chains must be positive");
        }
        if self.warmup_iters == 0 {
            return bad("warmup_iters must be positive");
        }
        if self.sampling_iters == 0 {
            return bad("sampling_iters must be positive");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if self.max_tree_depth == 0 {
            return bad("max_tree_depth must be positive");
        }
        Ok(())
    }
}

/// Summary of one recorded quantity over all retained draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    /// `None` with fewer than 2 chains or 4 draws.
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub divergences: usize,
    pub max_depth_hits: usize,
    pub step_sizes: Vec<f64>,
    pub mean_accept_stat: Vec<f64>,
    pub total_leapfrog_steps: u64,
    pub rhat_max: Option<f64>,
}

impl Diagnostics {
    /// Fraction of post-warmup transitions that diverged.
    pub fn divergence_rate(&self, draws: usize) -> f64 {
        if draws == 0 {
            0.0
        } else {
            self.divergences as f64 / draws as f64
        }
    }
}

/// Posterior draws and their summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fit {
    pub parameter_names: Vec<String>,
    pub summaries: Vec<ParameterSummary>,
    pub diagnostics: Diagnostics,
    pub config: SamplerConfig,
    /// `draws[chain][iter * n_params + k]`; post-warmup only.
    #[serde(skip)]
    pub draws: Vec<Vec<f64>>,
}

impl Fit {
    pub fn n_params(&self) -> usize {
        self.parameter_names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.draws.len()
    }

    pub fn n_draws_per_chain(&self) -> usize {
        if self.n_params() == 0 {
            0
        } else {
            self.draws.first().map_or(0, |c| c.len() / self.n_params())
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.parameter_names.iter().position(|n| n == name)
    }

    pub fn summary(&self, name: &str) -> Option<&ParameterSummary> {
        self.index_of(name).map(|i| &self.summaries[i])
    }

    /// Per-chain draws of parameter `k`.
    pub fn chain_draws(&self, k: usize) -> Vec<Vec<f64>> {
        let p = self.n_params();
        self.draws
            .iter()
            .map(|c| c.iter().skip(k).step_by(p).copied().collect())
            .collect()
    }

    /// Draws of parameter `k` with chains concatenated.
    pub fn pooled(&self, k: usize) -> Vec<f64> {
        self.chain_draws(k).concat()
    }

    pub fn interval(&self, name: &str, level: f64) -> Option<Result<(f64, f64), SamplerError>> {
        self.index_of(name).map(|k| credible_interval(&self.pooled(k), level))
    }

    fn from_draws(
        parameter_names: Vec<String>,
        draws: Vec<Vec<f64>>,
        diagnostics: Diagnostics,
        config: SamplerConfig,
    ) -> Self {
        let mut fit = Fit {
            parameter_names,
            summaries: Vec::new(),
            diagnostics,
            config,
            draws,
        };
        fit.summaries = (0..fit.n_params())
            .map(|k| {
                let chains = fit.chain_draws(k);
                let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
                let mut all = chains.concat();
                all.sort_by(f64::total_cmp);
                ParameterSummary {
                    name: fit.parameter_names[k].clone(),
                    mean: mean(&all),
                    sd: if all.len() > 1 { variance(&all).sqrt() } else { 0.0 },
                    q025: quantile_sorted(&all, 0.025),
                    q50: quantile_sorted(&all, 0.5),
                    q975: quantile_sorted(&all, 0.975),
                    rhat: compute_rhat(&refs).ok(),
                    ess: compute_ess(&refs).ok(),
                }
            })
            .collect();
        fit.diagnostics.rhat_max = fit
            .summaries
            .iter()
            .filter_map(|s| s.rhat)
            .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
        fit
    }

    pub fn to_json(&self) -> Result<String, SamplerError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Draws as CSV: `chain,iter,<names...>`.
    pub fn write_draws_csv<W: Write>(&self, mut out: W) -> Result<(), SamplerError> {
        writeln!(out, "chain,iter,{}", self.parameter_names.join(","))?;
        let p = self.n_params();
        for (c, chain) in self.draws.iter().enumerate() {
            for (t, row) in chain.chunks(p.max(1)).enumerate() {
                let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{c},{t},{}", vals.join(","))?;
            }
        }
        Ok(())
    }

    pub fn save_draws_csv(&self, path: &Path) -> Result<(), SamplerError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_draws_csv(f)
    }
}

struct ChainResult {
    draws: Vec<f64>,
    divergences: usize,
    max_depth_hits: usize,
    step_size: f64,
    mean_accept: f64,
    leapfrog_steps: u64,
}

/// Jitter in (-2, 2) around `center` until the target is finite.
fn initial_point<T: LogDensity + ?Sized, R: Rng>(
    ham: &Hamiltonian<'_, T>,
    center: &[f64],
    chain: usize,
    rng: &mut R,
) -> Result<nuts::PhasePoint, SamplerError> {
    const ATTEMPTS: usize = 100;
    let mut last = String::from("non-finite log density or gradient");
    for _ in 0..ATTEMPTS {
        let q: Vec<f64> = center.iter().map(|c| c + rng.random_range(-2.0..2.0)).collect();
        let mut grad = vec![0.0; q.len()];
        match ham.target.log_density_grad(&q, &mut grad) {
            Ok(lp) if lp.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                if let Some(z) = ham.point(q) {
                    return Ok(z);
                }
            }
            Ok(_) => {}
            Err(e) => last = e.message,
        }
    }
    Err(SamplerError::InitFailed {
        chain,
        attempts: ATTEMPTS,
        last,
    })
}

fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    config: &SamplerConfig,
    chain: usize,
) -> Result<ChainResult, SamplerError> {
    let mut rng = Streams::new(config.seed).stream(purpose::CHAIN, chain as u64);
    let mut ham = Hamiltonian::new(target);
    let mut z = initial_point(&ham, init, chain, &mut rng)?;

    let mut eps = ham.init_step_size(&z, 1.0, &mut rng);
    let mut step_adapter = StepSizeAdapter::new(config.target_accept, eps);
    let mut metric_adapter = MetricAdapter::new(target.dim(), config.warmup_iters);
    let mut warmup_divergent = 0;
    for _ in 0..config.warmup_iters {
        let (next, stats) = ham.transition(&z, eps, config.max_tree_depth, &mut rng);
        z = next;
        if stats.divergent {
            warmup_divergent += 1;
        }
        eps = step_adapter.learn(stats.accept_stat);
        if let Some(inv_metric) = metric_adapter.learn(&z.q) {
            ham.inv_metric = inv_metric;
            eps = ham.init_step_size(&z, eps, &mut rng);
            step_adapter.restart(eps);
        }
    }
    if warmup_divergent == config.warmup_iters {
        return Err(SamplerError::AllDivergent { chain });
    }
    eps = step_adapter.final_step_size();

    let n_out = target.output_names().len();
    let mut draws = Vec::with_capacity(config.sampling_iters * n_out);
    let mut result = ChainResult {
        draws: Vec::new(),
        divergences: 0,
        max_depth_hits: 0,
        step_size: eps,
        mean_accept: 0.0,
        leapfrog_steps: 0,
    };
    for _ in 0..config.sampling_iters {
        let (next, stats) = ham.transition(&z, eps, config.max_tree_depth, &mut rng);
        z = next;
        result.divergences += usize::from(stats.divergent);
        result.max_depth_hits += usize::from(stats.depth >= config.max_tree_depth);
        result.mean_accept += stats.accept_stat;
        result.leapfrog_steps += stats.n_leapfrog as u64;
        target.write_outputs(&z.q, &mut draws);
    }
    result.mean_accept /= config.sampling_iters as f64;
    result.draws = draws;
    Ok(result)
}

/// Run `config.chains` NUTS chains from jittered copies of `init`.
pub fn nuts_sample<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    config: &SamplerConfig,
) -> Result<Fit, SamplerError> {
    config.validate()?;
    if init.len() != target.dim() {
        return Err(SamplerError::Dimension {
            expected: target.dim(),
            actual: init.len(),
        });
    }
    let results: Vec<ChainResult> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, init, config, c))
        .collect::<Result<_, _>>()?;

    let diagnostics = Diagnostics {
        divergences: results.iter().map(|r| r.divergences).sum(),
        max_depth_hits: results.iter().map(|r| r.max_depth_hits).sum(),
        step_sizes: results.iter().map(|r| r.step_size).collect(),
        mean_accept_stat: results.iter().map(|r| r.mean_accept).collect(),
        total_leapfrog_steps: results.iter().map(|r| r.leapfrog_steps).sum(),
        rhat_max: None,
    };
    let draws = results.into_iter().map(|r| r.draws).collect();
    Ok(Fit::from_draws(target.output_names(), draws, diagnostics, *config))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }

        fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, DensityError> {
            for (g, v) in grad.iter_mut().zip(x) {
                *g = -v;
            }
            Ok(-0.5 * x.iter().map(|v| v * v).sum::<f64>())
        }
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SamplerConfig {
            target_accept: 1.0,
            ..Default::default()
        };
        assert!(nuts_sample(&StdNormal(1), &[0.0], &bad).is_err());
        let bad = SamplerConfig {
            chains: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_config_matches_protocol() {
        let c = SamplerConfig::default();
        assert_eq!((c.chains, c.warmup_iters, c.sampling_iters), (2, 1000, 1000));
        assert_eq!((c.target_accept, c.max_tree_depth), (0.8, 10));
    }

    #[test]
    fn keeps_exactly_sampling_iters_draws() {
        let config = SamplerConfig {
            warmup_iters: 50,
            sampling_iters: 37,
            ..Default::default()
        };
        let fit = nuts_sample(&StdNormal(3), &[0.0; 3], &config).unwrap();
        assert_eq!(fit.n_chains(), 2);
        assert_eq!(fit.n_draws_per_chain(), 37);
        assert_eq!(fit.pooled(1).len(), 74);
    }

    struct Nowhere;

    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            1
        }

        fn log_density_grad(&self, _: &[f64], _: &mut [f64]) -> Result<f64, DensityError> {
            Err(DensityError {
                message: "always infinite".into(),
                coordinate: None,
            })
        }
    }

    #[test]
    fn init_failure_after_jitter_attempts() {
        let err = nuts_sample(&Nowhere, &[0.0], &SamplerConfig::default()).unwrap_err();
        assert!(matches!(err, SamplerError::InitFailed { attempts: 100, .. }));
    }
}
