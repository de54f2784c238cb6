//! Interval and convergence summaries over post-warmup draws.

use super::SamplerError;

/// Type-7 (linear interpolation of order statistics) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(draws: &[f64], p: f64) -> f64 {
    quantile_sorted(&sorted_copy(draws), p)
}

fn sorted_copy(draws: &[f64]) -> Vec<f64> {
    let mut v = draws.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Equal-tailed credible interval at `level`.
pub fn credible_interval(draws: &[f64], level: f64) -> Result<(f64, f64), SamplerError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(SamplerError::InvalidLevel(level));
    }
    if draws.is_empty() {
        return Err(SamplerError::TooFewDraws {
            chains: 0,
            draws: 0,
        });
    }
    let sorted = sorted_copy(draws);
    let tail = 0.5 * (1.0 - level);
    Ok((quantile_sorted(&sorted, tail), quantile_sorted(&sorted, 1.0 - tail)))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with denominator n - 1.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn check_shape(chains: &[&[f64]]) -> Result<usize, SamplerError> {
    let n = chains.first().map_or(0, |c| c.len());
    if chains.len() < 2 || n < 4 || chains.iter().any(|c| c.len() != n) {
        return Err(SamplerError::TooFewDraws {
            chains: chains.len(),
            draws: n,
        });
    }
    Ok(n)
}

fn split<'a>(chains: &[&'a [f64]]) -> Vec<&'a [f64]> {
    let n = chains[0].len();
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [&c[..half], &c[n - half..]])
        .collect()
}

/// Split-chain potential scale reduction factor.
pub fn compute_rhat(chains: &[&[f64]]) -> Result<f64, SamplerError> {
    check_shape(chains)?;
    let halves = split(chains);
    let n = halves[0].len() as f64;
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let w = halves.iter().map(|c| variance(c)).sum::<f64>() / halves.len() as f64;
    let b = n * variance(&means);
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

fn autocovariance(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let centered: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..=max_lag.min(n - 1))
        .map(|lag| {
            centered[..n - lag]
                .iter()
                .zip(&centered[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// Effective sample size over split chains, using Geyer's initial
/// monotone sequence: autocorrelation pairs are summed until the first
/// negative pair.
pub fn compute_ess(chains: &[&[f64]]) -> Result<f64, SamplerError> {
    check_shape(chains)?;
    let halves = split(chains);
    let m = halves.len();
    let n = halves[0].len();
    let acov: Vec<Vec<f64>> = halves.iter().map(|c| autocovariance(c, n - 1)).collect();
    let chain_means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let mean_var = acov.iter().map(|a| a[0] * n as f64 / (n as f64 - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += variance(&chain_means);
    }
    if var_plus <= 0.0 || !var_plus.is_finite() {
        return Ok((m * n) as f64);
    }
    let mean_acov = |lag: usize| acov.iter().map(|a| a[lag]).sum::<f64>() / m as f64;

    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - mean_acov(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 1;
    while t + 4 < n && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - mean_acov(t + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - mean_acov(t + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t + 1] = rho_even;
    }
    // initial monotone sequence
    let mut t = 1;
    while t + 3 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1];
    let tau = tau.max(1.0 / total.log10());
    Ok(total / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn golden_interval_on_one_to_hundred() {
        let draws: Vec<f64> = (1..=100).map(f64::from).collect();
        let (l, u) = credible_interval(&draws, 0.95).unwrap();
        // h = 99 * 0.025 = 2.475 -> 3 + 0.475; h = 96.525 -> 97 + 0.525
        assert!((l - 3.475).abs() < 1e-12);
        assert!((u - 97.525).abs() < 1e-12);
    }

    #[test]
    fn constant_draws_give_point_interval() {
        assert_eq!(credible_interval(&[2.5; 40], 0.9).unwrap(), (2.5, 2.5));
    }

    #[test]
    fn tiny_level_collapses_to_median() {
        let draws: Vec<f64> = (0..101).map(f64::from).collect();
        let (l, u) = credible_interval(&draws, 1e-9).unwrap();
        assert!((l - 50.0).abs() < 1e-6 && (u - 50.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_level_and_empty_draws() {
        assert!(matches!(credible_interval(&[1.0], 0.0), Err(SamplerError::InvalidLevel(_))));
        assert!(matches!(credible_interval(&[1.0], 1.0), Err(SamplerError::InvalidLevel(_))));
        assert!(credible_interval(&[], 0.5).is_err());
    }

    #[test]
    fn rhat_identical_white_noise_chains() {
        let c = noise(1, 4000);
        let r = compute_rhat(&[&c, &c]).unwrap();
        assert!((r - 1.0).abs() < 0.01, "{r}");
    }

    #[test]
    fn rhat_detects_offset_chains() {
        let a = noise(1, 1000);
        let b: Vec<f64> = noise(2, 1000).iter().map(|v| v + 10.0).collect();
        assert!(compute_rhat(&[&a, &b]).unwrap() > 2.0);
    }

    #[test]
    fn ess_of_white_noise_is_near_draw_count() {
        let a = noise(3, 2000);
        let b = noise(4, 2000);
        let ess = compute_ess(&[&a, &b]).unwrap();
        assert!((ess / 4000.0 - 1.0).abs() < 0.2, "{ess}");
    }

    #[test]
    fn ess_of_ar1_matches_theory() {
        // AR(1) with phi = 0.9: ESS/n = (1 - phi) / (1 + phi) ~ 0.0526
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..20_000)
                    .map(|_| {
                        x = 0.9 * x + rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
        let ratio = compute_ess(&refs).unwrap() / 80_000.0;
        assert!((ratio - 0.0526).abs() < 0.012, "{ratio}");
    }

    #[test]
    fn too_few_draws_is_an_error() {
        let a = [1.0, 2.0, 3.0];
        assert!(compute_rhat(&[&a, &a]).is_err());
        let b = [1.0, 2.0, 3.0, 4.0];
        assert!(compute_ess(&[&b]).is_err());
    }
}
