//! Unconstrained coordinates -> Cholesky factor of a correlation matrix.
//!
//! Raw coordinates are mapped through `tanh` to canonical partial
//! correlations, which are stick-broken row by row into a lower-triangular
//! factor with unit-norm rows. The map is differentiated with forward-mode
//! dual numbers; with at most a handful of raw coordinates this is exact and
//! cheap.

/// Value with a dense tangent over the raw coordinates.
#[derive(Debug, Clone)]
struct Dual {
    v: f64,
    d: Vec<f64>,
}

impl Dual {
    fn constant(v: f64, n: usize) -> Self {
        Self { v, d: vec![0.0; n] }
    }

    fn mul(&self, o: &Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d.iter().zip(&o.d).map(|(a, b)| a * o.v + self.v * b).collect(),
        }
    }

    fn add(&self, o: &Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(),
        }
    }

    fn scale(&self, c: f64) -> Dual {
        Dual {
            v: self.v * c,
            d: self.d.iter().map(|a| a * c).collect(),
        }
    }

    /// `1 - self`.
    fn one_minus(&self) -> Dual {
        Dual {
            v: 1.0 - self.v,
            d: self.d.iter().map(|a| -a).collect(),
        }
    }

    fn sqrt(&self) -> Dual {
        let s = self.v.sqrt();
        Dual {
            v: s,
            d: self.d.iter().map(|a| a * 0.5 / s).collect(),
        }
    }

    fn ln(&self) -> Dual {
        Dual {
            v: self.v.ln(),
            d: self.d.iter().map(|a| a / self.v).collect(),
        }
    }
}

/// Cholesky factor `L` (row-major, k×k), its derivatives, and the log
/// density contribution of the correlation block.
#[derive(Debug, Clone)]
pub struct CorrCholesky {
    pub k: usize,
    pub l: Vec<f64>,
    /// `dl[(a * k + b) * n_raw + r]` = ∂L[a][b] / ∂raw[r].
    pub dl: Vec<f64>,
    /// LKJ(eta) log kernel plus the log Jacobian of the raw -> L map.
    /// The LKJ normalising constant is omitted.
    pub log_density: f64,
    pub grad: Vec<f64>,
}

pub fn n_raw(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

pub fn corr_cholesky(raw: &[f64], k: usize, eta: f64) -> CorrCholesky {
    let n = n_raw(k);
    assert_eq!(raw.len(), n, "raw correlation coordinate count");
    let mut l: Vec<Dual> = vec![Dual::constant(0.0, n); k * k];
    let mut log_density = Dual::constant(0.0, n);

    let mut cpc = Vec::with_capacity(n);
    for (r, &x) in raw.iter().enumerate() {
        let t = x.tanh();
        let mut d = vec![0.0; n];
        d[r] = 1.0 - t * t;
        cpc.push(Dual { v: t, d });
        // log(1 - tanh²x), written to stay finite for large |x|
        let ax = x.abs();
        log_density.v += 2.0 * (std::f64::consts::LN_2 - ax - (-2.0 * ax).exp().ln_1p());
        log_density.d[r] += -2.0 * t;
    }

    if k > 0 {
        l[0] = Dual::constant(1.0, n);
    }
    let mut next = 0;
    for i in 1..k {
        let first = cpc[next].clone();
        next += 1;
        let mut sum_sq = first.mul(&first);
        l[i * k] = first;
        for j in 1..i {
            let rest = sum_sq.one_minus();
            log_density = log_density.add(&rest.ln().scale(0.5));
            let lij = cpc[next].mul(&rest.sqrt());
            next += 1;
            sum_sq = sum_sq.add(&lij.mul(&lij));
            l[i * k + j] = lij;
        }
        let rest = sum_sq.one_minus();
        let lii = rest.sqrt();
        // LKJ on the Cholesky factor: sum_i (k - i - 1 + 2(eta - 1)) log L_ii
        let coef = (k - i - 1) as f64 + 2.0 * (eta - 1.0);
        if coef != 0.0 {
            log_density = log_density.add(&rest.ln().scale(0.5 * coef));
        }
        l[i * k + i] = lii;
    }

    let mut dl = vec![0.0; k * k * n];
    for (ab, entry) in l.iter().enumerate() {
        dl[ab * n..(ab + 1) * n].copy_from_slice(&entry.d);
    }
    CorrCholesky {
        k,
        l: l.iter().map(|d| d.v).collect(),
        dl,
        log_density: log_density.v,
        grad: log_density.d,
    }
}

impl CorrCholesky {
    /// Correlation matrix `L Lᵀ`, row-major.
    pub fn correlation(&self) -> Vec<f64> {
        let k = self.k;
        let mut c = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                c[a * k + b] = (0..k).map(|m| self.l[a * k + m] * self.l[b * k + m]).sum();
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_raw_gives_identity() {
        let c = corr_cholesky(&[0.0; 3], 3, 1.0);
        assert_eq!(c.l, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(c.log_density, 0.0);
    }

    #[test]
    fn two_by_two_correlation_is_tanh() {
        let c = corr_cholesky(&[0.7], 2, 1.0);
        let corr = c.correlation();
        assert!((corr[1] - 0.7_f64.tanh()).abs() < 1e-15);
        assert!((corr[0] - 1.0).abs() < 1e-15 && (corr[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rows_have_unit_norm_and_derivatives_match_finite_differences() {
        let raw = [0.3, -1.1, 0.8, 0.2, -0.4, 1.5];
        let eta = 2.0;
        let c = corr_cholesky(&raw, 4, eta);
        for a in 0..4 {
            let norm: f64 = (0..4).map(|b| c.l[a * 4 + b].powi(2)).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let h = 1e-6;
        for r in 0..raw.len() {
            let mut up = raw;
            let mut dn = raw;
            up[r] += h;
            dn[r] -= h;
            let (cu, cd) = (corr_cholesky(&up, 4, eta), corr_cholesky(&dn, 4, eta));
            let fd = (cu.log_density - cd.log_density) / (2.0 * h);
            assert!((fd - c.grad[r]).abs() < 1e-7, "log density coord {r}");
            for ab in 0..16 {
                let fd = (cu.l[ab] - cd.l[ab]) / (2.0 * h);
                assert!((fd - c.dl[ab * raw.len() + r]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn large_raw_stays_finite() {
        let c = corr_cholesky(&[40.0], 2, 1.0);
        assert!(c.log_density.is_finite());
        assert!(c.grad[0].is_finite());
    }
}
