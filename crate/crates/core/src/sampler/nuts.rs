//! Multinomial No-U-Turn transitions with a diagonal metric.
//!
//! Trajectories are doubled in a random direction; a state is drawn from
//! each new subtree in proportion to its Boltzmann weight (biased towards
//! the new subtree at the top level), and doubling stops at a U-turn
//! detected on the full tree or on either merged half.

use rand::Rng;
use rand_distr::StandardNormal;

use super::LogDensity;

const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone)]
pub(crate) struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct TransitionStats {
    pub accept_stat: f64,
    pub depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
}

pub(crate) struct Hamiltonian<'a, T: LogDensity + ?Sized> {
    pub target: &'a T,
    pub inv_metric: Vec<f64>,
}

struct TreeAcc {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

impl<'a, T: LogDensity + ?Sized> Hamiltonian<'a, T> {
    pub fn new(target: &'a T) -> Self {
        Self {
            target,
            inv_metric: vec![1.0; target.dim()],
        }
    }

    /// Evaluate log density and gradient at `q`; `None` when the target
    /// reports a non-finite value or an error.
    pub fn point(&self, q: Vec<f64>) -> Option<PhasePoint> {
        let mut grad = vec![0.0; q.len()];
        let logp = self.target.log_density_grad(&q, &mut grad).ok()?;
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some(PhasePoint {
            p: vec![0.0; q.len()],
            q,
            grad,
            logp,
        })
    }

    pub fn energy(&self, z: &PhasePoint) -> f64 {
        let kinetic: f64 = z
            .p
            .iter()
            .zip(&self.inv_metric)
            .map(|(p, m)| p * p * m)
            .sum();
        let h = -z.logp + 0.5 * kinetic;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, z: &PhasePoint) -> Vec<f64> {
        z.p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    pub fn sample_momentum<R: Rng>(&self, z: &mut PhasePoint, rng: &mut R) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    pub fn leapfrog(&self, z: &mut PhasePoint, eps: f64) {
        let half = 0.5 * eps;
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += half * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        match self.target.log_density_grad(&z.q, &mut z.grad) {
            Ok(lp) if lp.is_finite() && z.grad.iter().all(|g| g.is_finite()) => {
                z.logp = lp;
                for (p, g) in z.p.iter_mut().zip(&z.grad) {
                    *p += half * g;
                }
            }
            _ => {
                z.logp = f64::NEG_INFINITY;
                z.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    /// Heuristic initial step size: double or halve until the one-step
    /// acceptance crosses 0.8.
    pub fn init_step_size<R: Rng>(&self, z: &PhasePoint, mut eps: f64, rng: &mut R) -> f64 {
        let log_target = 0.8_f64.ln();
        let trial = |eps: f64, rng: &mut R| {
            let mut w = z.clone();
            self.sample_momentum(&mut w, rng);
            let h0 = self.energy(&w);
            self.leapfrog(&mut w, eps);
            h0 - self.energy(&w)
        };
        let direction = if trial(eps, rng) > log_target { 1.0 } else { -1.0 };
        for _ in 0..100 {
            let delta = trial(eps, rng);
            if (direction > 0.0 && delta <= log_target) || (direction < 0.0 && delta >= log_target) {
                break;
            }
            eps = if direction > 0.0 { 2.0 * eps } else { 0.5 * eps };
            if !(1e-10..=1e7).contains(&eps) {
                break;
            }
        }
        eps.clamp(1e-10, 1e7)
    }

    pub fn transition<R: Rng>(
        &self,
        start: &PhasePoint,
        eps: f64,
        max_depth: usize,
        rng: &mut R,
    ) -> (PhasePoint, TransitionStats) {
        let mut z = start.clone();
        self.sample_momentum(&mut z, rng);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let ps = self.p_sharp(&z);
        let (mut p_sharp_fwd_fwd, mut p_sharp_fwd_bck) = (ps.clone(), ps.clone());
        let (mut p_sharp_bck_fwd, mut p_sharp_bck_bck) = (ps.clone(), ps);
        let (mut p_fwd_fwd, mut p_fwd_bck) = (z.p.clone(), z.p.clone());
        let (mut p_bck_fwd, mut p_bck_bck) = (z.p.clone(), z.p.clone());
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let h0 = self.energy(&z);

        let mut acc = TreeAcc {
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
        };
        let dim = z.q.len();
        let mut depth = 0;
        while depth < max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if rng.random::<f64>() > 0.5 {
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                let v = self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    eps,
                    &mut lsw_subtree,
                    &mut acc,
                    rng,
                );
                v
            } else {
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -eps,
                    &mut lsw_subtree,
                    &mut acc,
                    rng,
                )
            };
            if !valid {
                break;
            }
            depth += 1;

            if lsw_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else if rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
                z_sample.clone_from(&z_propose);
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

            rho = sum(&rho_bck, &rho_fwd);
            let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let rho_ext = sum(&rho_bck, &p_fwd_bck);
            persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
            let rho_ext = sum(&rho_fwd, &p_bck_fwd);
            persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }

        let stats = TransitionStats {
            accept_stat: if acc.n_leapfrog > 0 {
                acc.sum_metro_prob / acc.n_leapfrog as f64
            } else {
                0.0
            },
            depth,
            n_leapfrog: acc.n_leapfrog,
            divergent: acc.divergent,
        };
        (z_sample, stats)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree<R: Rng>(
        &self,
        depth: usize,
        z: &mut PhasePoint,
        z_propose: &mut PhasePoint,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        eps: f64,
        log_sum_weight: &mut f64,
        acc: &mut TreeAcc,
        rng: &mut R,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, eps);
            acc.n_leapfrog += 1;
            let h = self.energy(z);
            if h - h0 > MAX_DELTA_H {
                acc.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            acc.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(z);
            p_sharp_end.clone_from(p_sharp_beg);
            add_into(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !acc.divergent;
        }

        let dim = z.q.len();
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut p_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        let valid_init = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            eps,
            &mut lsw_init,
            acc,
            rng,
        );
        if !valid_init {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        let valid_final = self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            eps,
            &mut lsw_final,
            acc,
            rng,
        );
        if !valid_final {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else if rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            *z_propose = z_propose_final;
        }

        let rho_subtree = sum(&rho_init, &rho_final);
        add_into(rho, &rho_subtree);
        let mut persist = no_u_turn(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext = sum(&rho_init, &p_final_beg);
        persist &= no_u_turn(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        let rho_ext = sum(&rho_final, &p_init_end);
        persist &= no_u_turn(&p_sharp_init_end, p_sharp_end, &rho_ext);
        persist
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::DensityError;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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
    fn leapfrog_conserves_energy_at_small_step() {
        let target = StdNormal(5);
        let ham = Hamiltonian::new(&target);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let mut z = ham.point(q).unwrap();
            ham.sample_momentum(&mut z, &mut rng);
            let h0 = ham.energy(&z);
            for _ in 0..200 {
                ham.leapfrog(&mut z, 0.05);
                assert!((ham.energy(&z) - h0).abs() < 0.1);
            }
        }
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = StdNormal(3);
        let ham = Hamiltonian::new(&target);
        let mut z = ham.point(vec![0.3, -1.2, 2.0]).unwrap();
        z.p = vec![0.5, 0.1, -0.7];
        let start = z.clone();
        for _ in 0..10 {
            ham.leapfrog(&mut z, 0.1);
        }
        z.p.iter_mut().for_each(|p| *p = -*p);
        for _ in 0..10 {
            ham.leapfrog(&mut z, 0.1);
        }
        for (a, b) in z.q.iter().zip(&start.q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(f64::NEG_INFINITY, 1.0), 1.0);
        assert!((log_sum_exp(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
