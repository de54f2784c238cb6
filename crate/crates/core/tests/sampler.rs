use melsm_core::sampler::{
    compute_ess, credible_interval, mean, nuts_sample, variance, DensityError, LogDensity, SamplerConfig,
};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

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

/// Bivariate normal, unit variances, correlation `rho`.
struct Correlated(f64);

impl LogDensity for Correlated {
    fn dim(&self) -> usize {
        2
    }
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, DensityError> {
        let r = self.0;
        let c = 1.0 / (1.0 - r * r);
        grad[0] = -c * (x[0] - r * x[1]);
        grad[1] = -c * (x[1] - r * x[0]);
        Ok(-0.5 * c * (x[0] * x[0] - 2.0 * r * x[0] * x[1] + x[1] * x[1]))
    }
}

/// y_i ~ N(theta, sigma^2) with sigma known, theta ~ N(0, tau^2).
struct NormalMean {
    y: Vec<f64>,
    sigma: f64,
    tau: f64,
}

impl NormalMean {
    fn posterior(&self) -> (f64, f64) {
        let prec = 1.0 / (self.tau * self.tau) + self.y.len() as f64 / (self.sigma * self.sigma);
        let m = self.y.iter().sum::<f64>() / (self.sigma * self.sigma) / prec;
        (m, prec.sqrt().recip())
    }
}

impl LogDensity for NormalMean {
    fn dim(&self) -> usize {
        1
    }
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, DensityError> {
        let t = x[0];
        let s2 = self.sigma * self.sigma;
        let lp = -0.5 * t * t / (self.tau * self.tau) - 0.5 * self.y.iter().map(|y| (y - t).powi(2)).sum::<f64>() / s2;
        grad[0] = -t / (self.tau * self.tau) + self.y.iter().map(|y| y - t).sum::<f64>() / s2;
        Ok(lp)
    }
}

fn config(seed: u64) -> SamplerConfig {
    SamplerConfig { seed, ..Default::default() }
}

#[test]
fn standard_normal_in_five_dimensions() {
    let fit = nuts_sample(&StdNormal(5), &[0.0; 5], &config(1)).unwrap();
    assert_eq!(fit.n_chains(), 2);
    assert_eq!(fit.n_draws_per_chain(), 1000);
    for s in &fit.summaries {
        assert!(s.mean.abs() < 0.1, "{}: mean {}", s.name, s.mean);
        assert!((s.sd - 1.0).abs() < 0.1, "{}: sd {}", s.name, s.sd);
        assert!(s.rhat.unwrap() < 1.05, "{}: rhat {:?}", s.name, s.rhat);
    }
    assert_eq!(fit.diagnostics.divergences, 0);
}

#[test]
fn correlated_normal_recovers_correlation() {
    let fit = nuts_sample(&Correlated(0.9), &[0.0; 2], &config(2)).unwrap();
    let a = fit.pooled(0);
    let b = fit.pooled(1);
    let (ma, mb) = (mean(&a), mean(&b));
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64;
    let r = cov / (variance(&a) * variance(&b)).sqrt();
    assert!((r - 0.9).abs() < 0.05, "correlation {r}");
}

#[test]
fn conjugate_normal_mean_within_monte_carlo_error() {
    let y: Vec<f64> = (0..20).map(|i| 1.5 + ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
    let target = NormalMean { y, sigma: 1.0, tau: 2.0 };
    let (m, s) = target.posterior();
    let fit = nuts_sample(&target, &[0.0], &config(3)).unwrap();
    let chains = fit.chain_draws(0);
    let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
    let ess = compute_ess(&refs).unwrap();
    let draws = fit.pooled(0);
    let mcse_mean = s / ess.sqrt();
    let mcse_sd = s / (2.0 * ess).sqrt();
    assert!((mean(&draws) - m).abs() < 3.0 * mcse_mean, "mean {} vs {m}", mean(&draws));
    assert!((variance(&draws).sqrt() - s).abs() < 3.0 * mcse_sd, "sd {} vs {s}", variance(&draws).sqrt());
}

fn ks_statistic(draws: &[f64]) -> f64 {
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let phi = Normal::standard();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = phi.cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

#[test]
fn draws_pass_kolmogorov_smirnov_across_seeds() {
    let mut passed = 0;
    for seed in 0..20 {
        let cfg = SamplerConfig { chains: 1, seed, ..Default::default() };
        let fit = nuts_sample(&StdNormal(1), &[0.0], &cfg).unwrap();
        let draws = fit.pooled(0);
        let sn = (draws.len() as f64).sqrt();
        // Asymptotic 1% critical value with the Stephens small-sample correction.
        let critical = 1.628 / (sn + 0.12 + 0.11 / sn);
        if ks_statistic(&draws) < critical {
            passed += 1;
        }
    }
    assert!(passed >= 19, "{passed}/20 seeds passed");
}

#[test]
fn sampling_is_deterministic_given_seed() {
    let a = nuts_sample(&Correlated(0.5), &[0.1, -0.1], &config(9)).unwrap();
    let b = nuts_sample(&Correlated(0.5), &[0.1, -0.1], &config(9)).unwrap();
    let c = nuts_sample(&Correlated(0.5), &[0.1, -0.1], &config(10)).unwrap();
    assert_eq!(a.draws, b.draws);
    assert_ne!(a.draws, c.draws);
}

#[test]
fn fit_interval_matches_draw_quantiles() {
    let fit = nuts_sample(&StdNormal(2), &[0.0; 2], &config(4)).unwrap();
    let (lo, hi) = fit.interval("x[1]", 0.95).unwrap().unwrap();
    assert_eq!((lo, hi), credible_interval(&fit.pooled(1), 0.95).unwrap());
    assert!(lo < -1.5 && hi > 1.5);
    assert!(fit.interval("missing", 0.95).is_none());
    assert!(fit.interval("x[0]", 1.0).unwrap().is_err());
}

#[test]
fn draws_round_trip_through_csv() {
    let fit = nuts_sample(&StdNormal(2), &[0.0; 2], &SamplerConfig { warmup_iters: 50, sampling_iters: 20, ..config(5) }).unwrap();
    let mut buf = Vec::new();
    fit.write_draws_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().ends_with("x[0],x[1]"));
    assert_eq!(lines.count(), 40);
}

proptest! {
    #[test]
    fn intervals_are_nested(draws in prop::collection::vec(-100.0f64..100.0, 1..200), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (small, large) = if a < b { (a, b) } else { (b, a) };
        let (l1, u1) = credible_interval(&draws, small).unwrap();
        let (l2, u2) = credible_interval(&draws, large).unwrap();
        prop_assert!(l2 <= l1 && u1 <= u2);
        prop_assert!(l1 <= u1);
    }
}
