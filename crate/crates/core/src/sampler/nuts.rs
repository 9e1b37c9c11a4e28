//! Multinomial NUTS with the generalized U-turn criterion and a diagonal metric.

use rand::Rng;
use rand_distr::StandardNormal;

use super::LogDensity;
use crate::math::log_sum_exp;
use crate::Result;

/// Energy error beyond which a trajectory is declared divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

/// Position, momentum and cached density/gradient of one point in phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub lp: f64,
}

impl PhasePoint {
    /// Evaluates the target at `q`; momentum starts at zero.
    pub fn new<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Result<Self> {
        let mut grad = vec![0.0; q.len()];
        let lp = target.log_density_grad(&q, &mut grad)?;
        let p = vec![0.0; q.len()];
        Ok(PhasePoint { q, p, grad, lp })
    }

    pub fn kinetic(&self, inv_mass: &[f64]) -> f64 {
        0.5 * self.p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
    }

    /// Total energy `-lp + p'M⁻¹p/2`.
    pub fn hamiltonian(&self, inv_mass: &[f64]) -> f64 {
        -self.lp + self.kinetic(inv_mass)
    }

    /// Velocity `M⁻¹p`.
    pub fn p_sharp(&self, inv_mass: &[f64]) -> Vec<f64> {
        self.p.iter().zip(inv_mass).map(|(p, m)| p * m).collect()
    }

    pub fn sample_momentum<R: Rng + ?Sized>(&mut self, inv_mass: &[f64], rng: &mut R) {
        for (p, m) in self.p.iter_mut().zip(inv_mass) {
            let z: f64 = rng.sample(StandardNormal);
            *p = z / m.sqrt();
        }
    }
}

/// One velocity-Verlet step: half kick, drift, half kick. On a target error
/// the point is left partially updated and the error is returned.
pub fn leapfrog<T: LogDensity + ?Sized>(z: &mut PhasePoint, step: f64, inv_mass: &[f64], target: &T) -> Result<()> {
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * step * g;
    }
    for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(inv_mass) {
        *q += step * m * p;
    }
    z.lp = target.log_density_grad(&z.q, &mut z.grad)?;
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * step * g;
    }
    Ok(())
}

/// Per-iteration sampler telemetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub accept_stat: f64,
    pub n_leapfrog: usize,
    pub treedepth: usize,
    pub divergent: bool,
    pub energy: f64,
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    crate::math::dot(p_sharp_plus, rho) > 0.0 && crate::math::dot(p_sharp_minus, rho) > 0.0
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

struct Tree<'a, T: ?Sized, R: ?Sized> {
    target: &'a T,
    inv_mass: &'a [f64],
    step: f64,
    h0: f64,
    rng: &'a mut R,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<T: LogDensity + ?Sized, R: Rng + ?Sized> Tree<'_, T, R> {
    /// Extends the trajectory from `z` by `2^depth` steps in the direction of
    /// `self.step`. Returns `false` when the subtree diverged or U-turned.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        depth: usize,
        z: &mut PhasePoint,
        z_propose: &mut PhasePoint,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            let h = match leapfrog(z, self.step, self.inv_mass, self.target) {
                Ok(()) => {
                    let h = z.hamiltonian(self.inv_mass);
                    if h.is_nan() {
                        f64::INFINITY
                    } else {
                        h
                    }
                }
                Err(_) => f64::INFINITY,
            };
            self.n_leapfrog += 1;
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, self.h0 - h);
            self.sum_metro_prob += if self.h0 - h > 0.0 { 1.0 } else { (self.h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = z.p_sharp(self.inv_mass);
            p_sharp_end.clone_from(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        if !self.build(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            &mut lsw_init,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        if !self.build(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            &mut lsw_final,
        ) {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &add(&rho_init, &p_final_beg));
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &add(&rho_final, &p_init_end));
        persist
    }
}

/// One NUTS transition from `z` (whose momentum is resampled). Returns the
/// new point and its telemetry. Divergences are reported, not raised.
pub fn nuts_transition<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    z: &PhasePoint,
    target: &T,
    step: f64,
    inv_mass: &[f64],
    max_treedepth: usize,
    rng: &mut R,
) -> (PhasePoint, Transition) {
    let mut z0 = z.clone();
    z0.sample_momentum(inv_mass, rng);
    let h0 = z0.hamiltonian(inv_mass);

    let mut z_fwd = z0.clone();
    let mut z_bck = z0.clone();
    let mut z_sample = z0.clone();
    let mut z_propose = z0.clone();

    let mut p_fwd_fwd = z0.p.clone();
    let mut p_sharp_fwd_fwd = z0.p_sharp(inv_mass);
    let mut p_fwd_bck = z0.p.clone();
    let mut p_sharp_fwd_bck = p_sharp_fwd_fwd.clone();
    let mut p_bck_fwd = z0.p.clone();
    let mut p_sharp_bck_fwd = p_sharp_fwd_fwd.clone();
    let mut p_bck_bck = z0.p.clone();
    let mut p_sharp_bck_bck = p_sharp_fwd_fwd.clone();

    let mut rho = z0.p.clone();
    let mut log_sum_weight = 0.0;
    let mut depth = 0;
    let dim = z0.q.len();

    let mut tree = Tree {
        target,
        inv_mass,
        step,
        h0,
        rng,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    while depth < max_treedepth {
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid = if tree.rng.random::<f64>() > 0.5 {
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
            tree.step = step;
            tree.build(
                depth,
                &mut z_fwd,
                &mut z_propose,
                &mut p_sharp_fwd_bck,
                &mut p_sharp_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                &mut lsw_subtree,
            )
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
            tree.step = -step;
            tree.build(
                depth,
                &mut z_bck,
                &mut z_propose,
                &mut p_sharp_bck_fwd,
                &mut p_sharp_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                &mut lsw_subtree,
            )
        };
        if !valid {
            break;
        }
        depth += 1;

        if lsw_subtree > log_sum_weight {
            z_sample.clone_from(&z_propose);
        } else {
            let accept = (lsw_subtree - log_sum_weight).exp();
            if tree.rng.random::<f64>() < accept {
                z_sample.clone_from(&z_propose);
            }
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

        rho = add(&rho_bck, &rho_fwd);
        let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &add(&rho_bck, &p_fwd_bck));
        persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &add(&rho_fwd, &p_bck_fwd));
        if !persist {
            break;
        }
    }

    let telemetry = Transition {
        accept_stat: tree.sum_metro_prob / tree.n_leapfrog.max(1) as f64,
        n_leapfrog: tree.n_leapfrog,
        treedepth: depth,
        divergent: tree.divergent,
        energy: z_sample.hamiltonian(inv_mass),
    };
    (z_sample, telemetry)
}

/// Doubles or halves `step` until a single leapfrog step crosses an
/// acceptance probability of 0.8. Leaves `z` untouched.
pub fn init_stepsize<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    z: &PhasePoint,
    target: &T,
    step: f64,
    inv_mass: &[f64],
    rng: &mut R,
) -> Result<f64> {
    let threshold = 0.8f64.ln();
    let mut eps = step;
    let delta_h = |eps: f64, rng: &mut R| {
        let mut w = z.clone();
        w.sample_momentum(inv_mass, rng);
        let h0 = w.hamiltonian(inv_mass);
        let h = match leapfrog(&mut w, eps, inv_mass, target) {
            Ok(()) => w.hamiltonian(inv_mass),
            Err(_) => f64::INFINITY,
        };
        let h = if h.is_nan() { f64::INFINITY } else { h };
        h0 - h
    };
    let direction = if delta_h(eps, rng) > threshold { 1 } else { -1 };
    loop {
        let dh = delta_h(eps, rng);
        if (direction == 1 && !(dh > threshold)) || (direction == -1 && !(dh < threshold)) {
            return Ok(eps);
        }
        eps = if direction == 1 { 2.0 * eps } else { 0.5 * eps };
        if eps > 1e7 {
            return Err(crate::Error::Sampler("step size diverged to infinity; the posterior may be improper".into()));
        }
        if eps == 0.0 {
            return Err(crate::Error::Sampler("step size collapsed to zero; the posterior may be ill-conditioned".into()));
        }
    }
}
