//! No-U-Turn Hamiltonian Monte Carlo with warmup adaptation and parallel chains.

mod adapt;
mod nuts;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adapt::{StepSizeAdapter, Welford, WindowedVariance, MIN_WARMUP};
pub use nuts::{init_stepsize, leapfrog, nuts_transition, PhasePoint, Transition, MAX_DELTA_H};

use crate::{Error, Result};

/// Hard ceiling on tree depth (2^25 leapfrog steps per iteration).
pub const TREEDEPTH_CEILING: usize = 25;

/// A differentiable log-density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log-density at `position`, writing its gradient into `grad`.
    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Names of the columns produced by [`LogDensity::constrained`].
    fn param_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Output row for a position; by default the position itself.
    fn constrained(&self, position: &[f64]) -> Vec<f64> {
        position.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Total iterations per chain, warmup included.
    pub n_iter: usize,
    pub n_warmup: usize,
    pub thin: usize,
    pub seed: u64,
    pub max_treedepth: usize,
    pub target_accept: f64,
    /// Inits are drawn uniformly from `(-init_radius, init_radius)`.
    pub init_radius: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 4,
            n_iter: 2000,
            n_warmup: 1000,
            thin: 1,
            seed: 1,
            max_treedepth: 10,
            target_accept: 0.8,
            init_radius: 2.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Sampler(m));
        if self.n_chains == 0 {
            return fail("n_chains must be at least 1".into());
        }
        if self.n_warmup >= self.n_iter {
            return fail(format!("n_warmup ({}) must be below n_iter ({})", self.n_warmup, self.n_iter));
        }
        if self.n_warmup != 0 && self.n_warmup < MIN_WARMUP {
            return fail(format!("n_warmup must be 0 or at least {MIN_WARMUP}, got {}", self.n_warmup));
        }
        if self.thin == 0 {
            return fail("thin must be at least 1".into());
        }
        if self.max_treedepth == 0 || self.max_treedepth > TREEDEPTH_CEILING {
            return fail(format!("max_treedepth must lie in 1..={TREEDEPTH_CEILING}"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return fail(format!("target_accept {} must lie in (0, 1)", self.target_accept));
        }
        if !(self.init_radius >= 0.0 && self.init_radius.is_finite()) {
            return fail("init_radius must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Kept draws per chain.
    pub fn kept(&self) -> usize {
        (self.n_iter - self.n_warmup) / self.thin
    }
}

/// Output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub chain: usize,
    pub param_names: Vec<String>,
    /// Kept iterations × parameters, constrained scale.
    pub draws: Vec<Vec<f64>>,
    /// Unconstrained log-density (Jacobian included) per kept iteration.
    pub lp: Vec<f64>,
    pub divergent: Vec<bool>,
    pub treedepth: Vec<usize>,
    pub n_leapfrog: Vec<usize>,
    pub accept_stat: Vec<f64>,
    pub energy: Vec<f64>,
    pub step_size: f64,
    /// Diagonal of the inverse metric (variance scale).
    pub inv_mass: Vec<f64>,
    pub warmup_divergences: usize,
    pub warmup_seconds: f64,
    pub sampling_seconds: f64,
}

impl ChainDraws {
    pub fn n_kept(&self) -> usize {
        self.draws.len()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.draws.iter().map(|row| row[k]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.param_names.iter().position(|n| n == name).map(|k| self.column(k))
    }

    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|&&d| d).count()
    }
}

/// Independent generator for chain `chain`: the master seed with its own stream.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn initial_point<T: LogDensity + ?Sized, R: Rng + ?Sized>(target: &T, radius: f64, rng: &mut R) -> Result<PhasePoint> {
    const ATTEMPTS: usize = 100;
    let mut last = None;
    for _ in 0..ATTEMPTS {
        let q: Vec<f64> = (0..target.dim())
            .map(|_| if radius > 0.0 { rng.random_range(-radius..radius) } else { 0.0 })
            .collect();
        match PhasePoint::new(target, q) {
            Ok(z) if z.lp.is_finite() && z.grad.iter().all(|g| g.is_finite()) => return Ok(z),
            Ok(_) => last = Some("non-finite log-density".to_string()),
            Err(e) => last = Some(e.to_string()),
        }
    }
    Err(Error::Sampler(format!(
        "no valid initial point after {ATTEMPTS} attempts: {}",
        last.unwrap_or_default()
    )))
}

/// Runs one chain. `init` overrides the random initial position.
pub fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    chain: usize,
    init: Option<&[f64]>,
) -> Result<ChainDraws> {
    config.validate()?;
    let dim = target.dim();
    let mut rng = chain_rng(config.seed, chain);
    let mut z = match init {
        Some(q) => {
            if q.len() != dim {
                return Err(Error::Sampler(format!("init has {} values, expected {dim}", q.len())));
            }
            PhasePoint::new(target, q.to_vec())?
        }
        None => initial_point(target, config.init_radius, &mut rng)?,
    };

    let mut inv_mass = vec![1.0; dim];
    let mut step = init_stepsize(&z, target, 1.0, &inv_mass, &mut rng)?;
    let start = Instant::now();

    let mut warmup_divergences = 0;
    if config.n_warmup > 0 {
        let mut stepper = StepSizeAdapter::new(config.target_accept);
        stepper.restart(step);
        let mut windows = WindowedVariance::new(dim, config.n_warmup);
        for _ in 0..config.n_warmup {
            let (next, t) = nuts_transition(&z, target, step, &inv_mass, config.max_treedepth, &mut rng);
            z = next;
            if t.divergent {
                warmup_divergences += 1;
            }
            step = stepper.learn(t.accept_stat);
            if let Some(var) = windows.learn(&z.q) {
                inv_mass = var;
                step = init_stepsize(&z, target, step, &inv_mass, &mut rng)?;
                stepper.restart(step);
            }
        }
        if warmup_divergences == config.n_warmup {
            return Err(Error::Sampler(format!(
                "chain {}: every warmup iteration diverged (final step size {step:.3e})",
                chain + 1
            )));
        }
        step = stepper.final_step();
    }
    let warmup_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let kept = config.kept();
    let mut out = ChainDraws {
        chain,
        param_names: target.param_names(),
        draws: Vec::with_capacity(kept),
        lp: Vec::with_capacity(kept),
        divergent: Vec::with_capacity(kept),
        treedepth: Vec::with_capacity(kept),
        n_leapfrog: Vec::with_capacity(kept),
        accept_stat: Vec::with_capacity(kept),
        energy: Vec::with_capacity(kept),
        step_size: step,
        inv_mass: inv_mass.clone(),
        warmup_divergences,
        warmup_seconds,
        sampling_seconds: 0.0,
    };
    for k in 0..config.n_iter - config.n_warmup {
        let (next, t) = nuts_transition(&z, target, step, &inv_mass, config.max_treedepth, &mut rng);
        z = next;
        if (k + 1) % config.thin != 0 {
            continue;
        }
        let row = target.constrained(&z.q);
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Sampler(format!("chain {}: NaN in a kept draw", chain + 1)));
        }
        out.draws.push(row);
        out.lp.push(z.lp);
        out.divergent.push(t.divergent);
        out.treedepth.push(t.treedepth);
        out.n_leapfrog.push(t.n_leapfrog);
        out.accept_stat.push(t.accept_stat);
        out.energy.push(t.energy);
    }
    out.sampling_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Runs `config.n_chains` chains in parallel. Failures are reported per chain;
/// the remaining chains still complete. Results are in chain order.
pub fn run_chains<T: LogDensity + ?Sized>(target: &T, config: &SamplerConfig) -> Result<Vec<Result<ChainDraws>>> {
    config.validate()?;
    Ok((0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(target, config, c, None))
        .collect())
}
