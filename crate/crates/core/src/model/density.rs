use std::ops::Range;

use statrs::function::gamma::ln_gamma;

use super::corr::{corr_cholesky, CorrCholesky};
use super::layout::{Layout, ParameterVector};
use super::{LongitudinalDataset, MelsmSpec, ModelError, PriorConfig};
use crate::formula::{build_design, DesignMatrices, ReFamily};
use crate::linalg::{dot, Matrix};
use crate::sampler::{DensityError, LogDensity};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Degrees of freedom of the half-Student-t prior on random-effect SDs.
pub const RE_SD_PRIOR_DF: f64 = 3.0;

pub fn normal_log_density(x: f64, sd: f64) -> f64 {
    -HALF_LN_2PI - sd.ln() - 0.5 * (x / sd).powi(2)
}

/// Standard Student-t log density with `df` degrees of freedom.
pub fn student_t_log_density(x: f64, df: f64) -> f64 {
    ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (df * std::f64::consts::PI).ln()
        - 0.5 * (df + 1.0) * (x * x / df).ln_1p()
}

/// Half-Student-t(df, 0, scale) log density at `sd > 0`.
pub fn half_t_log_density(sd: f64, df: f64, scale: f64) -> f64 {
    std::f64::consts::LN_2 + student_t_log_density(sd / scale, df) - scale.ln()
}

/// Per-row location mean and residual SD.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictors {
    pub mu: Vec<f64>,
    pub omega: Vec<f64>,
}

/// The MELSM posterior for one dataset.
#[derive(Debug, Clone)]
pub struct MelsmModel {
    spec: MelsmSpec,
    layout: Layout,
    y: Vec<f64>,
    location: DesignMatrices,
    scale: DesignMatrices,
    subjects: Vec<Range<usize>>,
    /// Per random-effect column: `None` Gaussian, `Some(df)` Student-t.
    re_df: Vec<Option<f64>>,
}

impl MelsmModel {
    pub fn new(spec: MelsmSpec, data: &LongitudinalDataset) -> Result<Self, ModelError> {
        spec.validate()?;
        let location = build_design(&spec.location, data)?;
        let scale = build_design(&spec.scale, data)?;
        let family_df = |fam: Option<ReFamily>| match fam {
            Some(ReFamily::Student) => Some(spec.df()),
            _ => None,
        };
        let mut re_df = vec![family_df(location.re_family); location.q_random()];
        re_df.extend(vec![family_df(scale.re_family); scale.q_random()]);
        let layout = Layout {
            p_y: location.p_fixed(),
            p_w: scale.p_fixed(),
            q_y: location.q_random(),
            q_w: scale.q_random(),
            n_subjects: data.n_subjects(),
        };
        Ok(Self {
            spec,
            layout,
            y: data.y().to_vec(),
            location,
            scale,
            subjects: data.subject_ranges().to_vec(),
            re_df,
        })
    }

    pub fn spec(&self) -> &MelsmSpec {
        &self.spec
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn location_design(&self) -> &DesignMatrices {
        &self.location
    }

    pub fn scale_design(&self) -> &DesignMatrices {
        &self.scale
    }

    pub fn re_df(&self) -> &[Option<f64>] {
        &self.re_df
    }

    fn check(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.layout.dim() {
            return Err(ModelError::Dimension {
                what: "parameter vector",
                expected: self.layout.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn cholesky(&self, x: &[f64]) -> CorrCholesky {
        corr_cholesky(&x[self.layout.corr()], self.layout.k(), self.spec.priors.lkj_eta)
    }

    /// Subject random effects `u_i = diag(sd) L z_i`, location block first.
    pub fn random_effects(&self, params: &ParameterVector) -> Result<Vec<Vec<f64>>, ModelError> {
        let x = params.values();
        self.check(x)?;
        let chol = self.cholesky(x);
        let sd: Vec<f64> = x[self.layout.log_sd()].iter().map(|v| v.exp()).collect();
        Ok((0..self.layout.n_subjects)
            .map(|i| scaled_effects(&chol, &sd, &x[self.layout.z_subject(i)]).1)
            .collect())
    }

    /// Joint random-effect covariance `diag(sd) L Lᵀ diag(sd)`.
    pub fn re_covariance(&self, params: &ParameterVector) -> Result<Matrix, ModelError> {
        let x = params.values();
        self.check(x)?;
        let k = self.layout.k();
        let corr = self.cholesky(x).correlation();
        let sd: Vec<f64> = x[self.layout.log_sd()].iter().map(|v| v.exp()).collect();
        let mut m = Matrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                m[(a, b)] = sd[a] * corr[a * k + b] * sd[b];
            }
        }
        Ok(m)
    }

    pub fn predict_linear(&self, params: &ParameterVector) -> Result<LinearPredictors, ModelError> {
        let x = params.values();
        self.check(x)?;
        let lay = self.layout;
        let chol = self.cholesky(x);
        let sd: Vec<f64> = x[lay.log_sd()].iter().map(|v| v.exp()).collect();
        let (beta_y, beta_w) = (&x[lay.beta_y()], &x[lay.beta_w()]);
        let n = self.y.len();
        let mut mu = vec![0.0; n];
        let mut omega = vec![0.0; n];
        for (i, rows) in self.subjects.iter().enumerate() {
            let (_, u) = scaled_effects(&chol, &sd, &x[lay.z_subject(i)]);
            for r in rows.clone() {
                mu[r] = dot(self.location.x.row(r), beta_y) + dot(self.location.z.row(r), &u[..lay.q_y]);
                omega[r] = (dot(self.scale.x.row(r), beta_w) + dot(self.scale.z.row(r), &u[lay.q_y..])).exp();
            }
        }
        Ok(LinearPredictors { mu, omega })
    }

    pub fn log_likelihood(&self, params: &ParameterVector) -> Result<f64, ModelError> {
        let x = params.values();
        self.check(x)?;
        let mut scratch = vec![0.0; x.len()];
        let ll = self.likelihood_into(x, &self.cholesky(x), &mut scratch);
        if !ll.is_finite() {
            return Err(ModelError::NonFinite {
                what: "log likelihood",
                index: None,
            });
        }
        Ok(ll)
    }

    pub fn log_prior(&self, params: &ParameterVector) -> f64 {
        log_prior(params, &self.spec.priors, &self.re_df)
    }

    /// Log posterior (up to the LKJ normalising constant) and its exact
    /// gradient with respect to every unconstrained coordinate.
    pub fn log_posterior_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        let mut grad = vec![0.0; x.len()];
        let v = self.log_posterior_into(x, &mut grad)?;
        Ok((v, grad))
    }

    pub fn log_posterior_into(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, ModelError> {
        self.check(x)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let chol = self.cholesky(x);
        let ll = self.likelihood_into(x, &chol, grad);
        let lp = prior_into(x, &self.layout, &self.spec.priors, &self.re_df, &chol, Some(grad));
        let value = ll + lp;
        if !value.is_finite() {
            return Err(ModelError::NonFinite {
                what: "log posterior",
                index: None,
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite {
                what: "gradient",
                index: Some(i),
            });
        }
        Ok(value)
    }

    /// Adds the likelihood gradient into `grad` and returns the value.
    fn likelihood_into(&self, x: &[f64], chol: &CorrCholesky, grad: &mut [f64]) -> f64 {
        let lay = self.layout;
        let (k, q_y) = (lay.k(), lay.q_y);
        let beta_y = &x[lay.beta_y()];
        let beta_w = &x[lay.beta_w()];
        let sd: Vec<f64> = x[lay.log_sd()].iter().map(|v| v.exp()).collect();
        let mut g_beta_y = vec![0.0; lay.p_y];
        let mut g_beta_w = vec![0.0; lay.p_w];
        let mut g_log_sd = vec![0.0; k];
        let mut g_l = vec![0.0; k * k];
        let mut g_u = vec![0.0; k];
        let mut w = vec![0.0; k];
        let mut u = vec![0.0; k];
        let mut ll = 0.0;

        for (i, rows) in self.subjects.iter().enumerate() {
            let z = &x[lay.z_subject(i)];
            for a in 0..k {
                let lz: f64 = (0..=a).map(|b| chol.l[a * k + b] * z[b]).sum();
                u[a] = sd[a] * lz;
            }
            let (u_y, u_w) = u.split_at(q_y);
            g_u.iter_mut().for_each(|g| *g = 0.0);
            for r in rows.clone() {
                let xy = self.location.x.row(r);
                let xw = self.scale.x.row(r);
                let zy = self.location.z.row(r);
                let zw = self.scale.z.row(r);
                let mu = dot(xy, beta_y) + dot(zy, u_y);
                let eta = dot(xw, beta_w) + dot(zw, u_w);
                let resid = self.y[r] - mu;
                let inv_var = (-2.0 * eta).exp();
                let scaled_sq = resid * resid * inv_var;
                ll += -HALF_LN_2PI - eta - 0.5 * scaled_sq;
                let g_mu = resid * inv_var;
                let g_eta = scaled_sq - 1.0;
                for (g, v) in g_beta_y.iter_mut().zip(xy) {
                    *g += g_mu * v;
                }
                for (g, v) in g_beta_w.iter_mut().zip(xw) {
                    *g += g_eta * v;
                }
                for (g, v) in g_u[..q_y].iter_mut().zip(zy) {
                    *g += g_mu * v;
                }
                for (g, v) in g_u[q_y..].iter_mut().zip(zw) {
                    *g += g_eta * v;
                }
            }
            if k == 0 {
                continue;
            }
            // u = sd ⊙ (L z)
            for a in 0..k {
                w[a] = sd[a] * g_u[a];
                g_log_sd[a] += g_u[a] * u[a];
            }
            let z_grad = &mut grad[lay.z_subject(i)];
            for b in 0..k {
                let mut s = 0.0;
                for a in b..k {
                    s += chol.l[a * k + b] * w[a];
                    g_l[a * k + b] += w[a] * z[b];
                }
                z_grad[b] += s;
            }
        }

        for (g, v) in grad[lay.beta_y()].iter_mut().zip(&g_beta_y) {
            *g += v;
        }
        for (g, v) in grad[lay.beta_w()].iter_mut().zip(&g_beta_w) {
            *g += v;
        }
        for (g, v) in grad[lay.log_sd()].iter_mut().zip(&g_log_sd) {
            *g += v;
        }
        let n_corr = lay.n_corr();
        if n_corr > 0 {
            let gc = &mut grad[lay.corr()];
            for (ab, &gl) in g_l.iter().enumerate() {
                if gl == 0.0 {
                    continue;
                }
                for (r, g) in gc.iter_mut().enumerate() {
                    *g += gl * chol.dl[ab * n_corr + r];
                }
            }
        }
        ll
    }

    /// Names of [`Self::outputs`]: fixed effects, RE SDs, RE correlations.
    pub fn output_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.location.column_names {
            names.push(format!("beta_y.{c}"));
        }
        for c in &self.scale.column_names {
            names.push(format!("beta_w.{c}"));
        }
        let re = self.re_names();
        names.extend(re.iter().map(|r| format!("sd_re_{r}")));
        for a in 0..re.len() {
            for b in 0..a {
                names.push(format!("cor_re({}:{})", re[b], re[a]));
            }
        }
        names
    }

    fn re_names(&self) -> Vec<String> {
        let label = |block: &str, col: &String| {
            if col == "intercept" {
                block.to_string()
            } else {
                format!("{block}.{col}")
            }
        };
        let mut re: Vec<String> = self
            .location
            .re_column_names
            .iter()
            .map(|c| label("location", c))
            .collect();
        re.extend(self.scale.re_column_names.iter().map(|c| label("scale", c)));
        re
    }

    /// Constrained quantities of interest at `x`.
    pub fn outputs(&self, x: &[f64], out: &mut Vec<f64>) {
        let lay = self.layout;
        out.extend_from_slice(&x[lay.beta_y()]);
        out.extend_from_slice(&x[lay.beta_w()]);
        out.extend(x[lay.log_sd()].iter().map(|v| v.exp()));
        let k = lay.k();
        if k > 1 {
            let corr = self.cholesky(x).correlation();
            for a in 0..k {
                for b in 0..a {
                    out.push(corr[a * k + b]);
                }
            }
        }
    }
}

/// Returns `(L z, diag(sd) L z)`.
fn scaled_effects(chol: &CorrCholesky, sd: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = chol.k;
    let mut v = vec![0.0; k];
    for a in 0..k {
        v[a] = (0..=a).map(|b| chol.l[a * k + b] * z[b]).sum();
    }
    let u = v.iter().zip(sd).map(|(v, s)| v * s).collect();
    (v, u)
}

/// Log prior density at `params`.
///
/// Sum of Normal(0, fixed_effect_sd²) on fixed effects, half-Student-t(3, 0,
/// re_sd_scale) on RE SDs with the log-scale Jacobian, LKJ(lkj_eta) kernel
/// with the correlation transform Jacobian, and standard normal (or
/// standard Student-t(df)) on the standardized effects.
pub fn log_prior(params: &ParameterVector, priors: &PriorConfig, re_df: &[Option<f64>]) -> f64 {
    let lay = *params.layout();
    let x = params.values();
    let chol = corr_cholesky(&x[lay.corr()], lay.k(), priors.lkj_eta);
    prior_into(x, &lay, priors, re_df, &chol, None)
}

fn prior_into(
    x: &[f64],
    lay: &Layout,
    priors: &PriorConfig,
    re_df: &[Option<f64>],
    chol: &CorrCholesky,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let mut lp = 0.0;

    let s = priors.fixed_effect_sd;
    let inv_var = 1.0 / (s * s);
    let beta = lay.beta_y().start..lay.beta_w().end;
    for idx in beta {
        lp += normal_log_density(x[idx], s);
        if let Some(g) = grad.as_deref_mut() {
            g[idx] -= x[idx] * inv_var;
        }
    }

    let nu = RE_SD_PRIOR_DF;
    let scale = priors.re_sd_scale;
    for idx in lay.log_sd() {
        let theta = x[idx];
        let sd = theta.exp();
        lp += half_t_log_density(sd, nu, scale) + theta;
        if let Some(g) = grad.as_deref_mut() {
            let r = sd * sd / (nu * scale * scale);
            g[idx] += 1.0 - (nu + 1.0) * r / (1.0 + r);
        }
    }

    lp += chol.log_density;
    if let Some(g) = grad.as_deref_mut() {
        for (gi, v) in g[lay.corr()].iter_mut().zip(&chol.grad) {
            *gi += v;
        }
    }

    let k = lay.k();
    if k > 0 {
        let consts: Vec<f64> = re_df
            .iter()
            .map(|df| match df {
                None => -HALF_LN_2PI,
                Some(nu) => {
                    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln()
                }
            })
            .collect();
        let z_range = lay.z();
        for (off, &z) in x[z_range.clone()].iter().enumerate() {
            let col = off % k;
            let (v, dz) = match re_df[col] {
                None => (consts[col] - 0.5 * z * z, -z),
                Some(nu) => (
                    consts[col] - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p(),
                    -(nu + 1.0) * z / (nu + z * z),
                ),
            };
            lp += v;
            if let Some(g) = grad.as_deref_mut() {
                g[z_range.start + off] += dz;
            }
        }
    }
    lp
}

impl LogDensity for MelsmModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, DensityError> {
        self.log_posterior_into(x, grad).map_err(|e| DensityError {
            coordinate: match e {
                ModelError::NonFinite { index, .. } => index,
                _ => None,
            },
            message: e.to_string(),
        })
    }

    fn output_names(&self) -> Vec<String> {
        MelsmModel::output_names(self)
    }

    fn write_outputs(&self, x: &[f64], out: &mut Vec<f64>) {
        self.outputs(x, out)
    }
}
