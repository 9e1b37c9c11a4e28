//! Simulation study: a contaminated case-control data generator on lattice
//! maps, three competing estimators and point-estimate scoring.
//!
//! Models:
//! - `m1`: maximum-likelihood logit of `y` on `{1, x, area dummies}`.
//! - `m2`: `m1` with the classical prior correction of the intercept.
//! - `m3`: the Bayesian contaminated-controls model with BYM2 area effects.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sampling_correction, CaseControlData, DesignMatrix, INTERCEPT};
use crate::graph::{grid_graph, morans_i, scaling_factor, AdjacencyGraph, LaplacianSpectrum};
use crate::math::{inv_logit, mean};
use crate::posterior::{Bym2Model, ModelConfig};
use crate::sampler::{run_chains, SamplerConfig};
use crate::{Error, Result};

/// Bisection bracket for the calibrated intercept.
pub const INTERCEPT_BRACKET: (f64, f64) = (-50.0, 50.0);
/// Coefficients beyond this magnitude flag (quasi-)separation.
pub const SEPARATION_BOUND: f64 = 30.0;

/// Inputs of one simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub n: usize,
    pub pi: f64,
    pub pi_hat: f64,
    /// Target spatial share of the area-effect variance, in (0, 1).
    pub autocorrelation: f64,
    pub map_name: String,
    pub graph: AdjacencyGraph,
    pub seed: u64,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Simulation(m));
        if !(100..=2000).contains(&self.n) {
            return fail(format!("n = {} outside [100, 2000]", self.n));
        }
        if !(1e-6..=0.5).contains(&self.pi) {
            return fail(format!("pi = {} outside [1e-6, 0.5]", self.pi));
        }
        if !(0.01..=0.99).contains(&self.pi_hat) {
            return fail(format!("pi_hat = {} outside [0.01, 0.99]", self.pi_hat));
        }
        if !(self.autocorrelation > 0.0 && self.autocorrelation < 1.0) {
            return fail(format!("autocorrelation = {} outside (0, 1)", self.autocorrelation));
        }
        self.graph.ensure_connected()
    }
}

/// A generated dataset with every latent quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    /// Centred area effects.
    pub gamma_true: Vec<f64>,
    pub beta1_initial: f64,
    pub beta1_star: f64,
    pub beta2: f64,
    pub x: Vec<f64>,
    pub small_area: Vec<usize>,
    /// `log(P1 / P0)`.
    pub log_offset: f64,
    pub theta1: f64,
    /// Latent propensity without the offset.
    pub mu_star: Vec<f64>,
    pub rho: Vec<f64>,
    pub r: Vec<u8>,
    pub y: Vec<u8>,
    pub realized_morans_i: f64,
}

/// One draw from the sum-to-zero Gaussian with precision `D - W`.
pub fn sample_icar<R: Rng + ?Sized>(graph: &AdjacencyGraph, rng: &mut R) -> Result<Vec<f64>> {
    Ok(LaplacianSpectrum::new(graph)?.sample(rng))
}

/// Solves `mean(inv_logit(fixed + b)) = target` for `b` by bisection.
pub fn calibrate_intercept(target: f64, fixed: &[f64]) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Simulation(format!("target prevalence {target} must lie in (0, 1)")));
    }
    if fixed.is_empty() {
        return Err(Error::Simulation("no observations to calibrate".into()));
    }
    let gap = |b: f64| fixed.iter().map(|f| inv_logit(f + b)).sum::<f64>() / fixed.len() as f64 - target;
    let (mut lo, mut hi) = INTERCEPT_BRACKET;
    let (g_lo, g_hi) = (gap(lo), gap(hi));
    if g_lo > 0.0 || g_hi < 0.0 {
        return Err(Error::Simulation(format!(
            "target {target} unreachable: mean propensity spans [{}, {}] over the bracket",
            g_lo + target,
            g_hi + target
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let g = gap(mid);
        if g.abs() < 1e-12 || hi - lo < 1e-14 {
            return Ok(mid);
        }
        if g > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sampling quantities derived from the scenario inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignQuantities {
    pub n1: f64,
    pub n_u: f64,
    /// `P1 / P0 = ((n1 + pi * n_u) / pi) / n_u`.
    pub relative_risk: f64,
    pub theta0: f64,
    pub theta1: f64,
}

pub fn design_quantities(n: usize, pi: f64, pi_hat: f64) -> DesignQuantities {
    let n1 = n as f64 * pi_hat;
    let n_u = n as f64 - n1;
    DesignQuantities {
        n1,
        n_u,
        relative_risk: ((n1 + pi * n_u) / pi) / n_u,
        theta0: 0.0,
        theta1: n1 / (n1 + pi * n_u),
    }
}

/// Generates one dataset. Area effects blend iid and scaled ICAR draws as
/// `sqrt(1 - I) z + sqrt(I) psi / sqrt(s)` and are centred; individuals are
/// spread evenly over areas in random order.
pub fn generate_dataset(scenario: &SimScenario) -> Result<SimTruth> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let q = design_quantities(scenario.n, scenario.pi, scenario.pi_hat);
    let graph = &scenario.graph;
    let l = graph.len();

    let psi = sample_icar(graph, &mut rng)?;
    let s = scaling_factor(graph)?.value();
    let a = scenario.autocorrelation;
    let mut gamma: Vec<f64> = psi
        .iter()
        .map(|p| {
            let z: f64 = rng.sample(StandardNormal);
            (1.0 - a).sqrt() * z + a.sqrt() * p / s.sqrt()
        })
        .collect();
    let gbar = mean(&gamma);
    gamma.iter_mut().for_each(|g| *g -= gbar);

    let beta1_initial: f64 = rng.sample(StandardNormal);
    let x: Vec<f64> = (0..scenario.n).map(|_| rng.sample(StandardNormal)).collect();
    let beta2: f64 = rng.sample(StandardNormal);
    let mut small_area: Vec<usize> = (0..scenario.n).map(|i| i % l).collect();
    small_area.shuffle(&mut rng);

    let log_offset = q.relative_risk.ln();
    let fixed: Vec<f64> = (0..scenario.n).map(|i| log_offset + x[i] * beta2 + gamma[small_area[i]]).collect();
    let beta1_star = calibrate_intercept(scenario.pi_hat, &fixed)?;
    let mu_star: Vec<f64> = (0..scenario.n).map(|i| beta1_star + x[i] * beta2 + gamma[small_area[i]]).collect();
    let rho: Vec<f64> = mu_star.iter().map(|m| inv_logit(log_offset + m)).collect();
    let r: Vec<u8> = rho.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
    let y: Vec<u8> = r
        .iter()
        .map(|&ri| {
            let theta = if ri == 1 { q.theta1 } else { q.theta0 };
            u8::from(rng.random::<f64>() < theta)
        })
        .collect();
    let realized_morans_i = morans_i(&gamma, graph)?;
    Ok(SimTruth {
        gamma_true: gamma,
        beta1_initial,
        beta1_star,
        beta2,
        x,
        small_area,
        log_offset,
        theta1: q.theta1,
        mu_star,
        rho,
        r,
        y,
        realized_morans_i,
    })
}

/// Maximum-likelihood logistic fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub separated: bool,
}

/// Newton-Raphson (IRLS) logistic regression, stopping when the largest
/// coefficient change falls below 1e-8 or after 100 iterations. A
/// non-invertible information matrix gets a growing ridge.
pub fn fit_logit(x: &DMatrix<f64>, y: &[u8]) -> Result<LogitFit> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(Error::Simulation("design and labels differ in length".into()));
    }
    let yv = DVector::from_iterator(n, y.iter().map(|&v| f64::from(v)));
    let mut b = DVector::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < 100 {
        iterations += 1;
        let eta = x * &b;
        let mu = eta.map(inv_logit);
        let w = mu.map(|m| m * (1.0 - m));
        let score = x.transpose() * (&yv - &mu);
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let info = x.transpose() * xw;
        let step = solve_spd(&info, &score)?;
        b += &step;
        if step.amax() < 1e-8 {
            converged = true;
            break;
        }
    }
    let separated = !converged || b.amax() > SEPARATION_BOUND;
    Ok(LogitFit { coef: b.iter().copied().collect(), iterations, converged, separated })
}

fn solve_spd(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.solve(rhs));
    }
    let scale = (a.trace() / a.nrows() as f64).abs().max(1e-300);
    let mut ridge = 1e-10 * scale;
    for _ in 0..30 {
        let mut r = a.clone();
        for k in 0..r.nrows() {
            r[(k, k)] += ridge;
        }
        if let Some(c) = r.cholesky() {
            return Ok(c.solve(rhs));
        }
        ridge *= 10.0;
    }
    Err(Error::Simulation("information matrix is not positive definite".into()))
}

/// Point estimates of the scored quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub mu_star: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: Vec<f64>,
    pub separated: bool,
}

/// Design `{1, x, dummies}` with the first observed area as reference.
fn fixed_effects_design(truth: &SimTruth, n_areas: usize) -> (DMatrix<f64>, Vec<Option<usize>>) {
    let mut seen = vec![false; n_areas];
    for &a in &truth.small_area {
        seen[a] = true;
    }
    let observed: Vec<usize> = (0..n_areas).filter(|&a| seen[a]).collect();
    let mut column = vec![None; n_areas];
    for (k, &a) in observed.iter().enumerate().skip(1) {
        column[a] = Some(k + 1);
    }
    let p = 2 + observed.len().saturating_sub(1);
    let n = truth.y.len();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = truth.x[i];
        if let Some(c) = column[truth.small_area[i]] {
            x[(i, c)] = 1.0;
        }
    }
    (x, column)
}

fn fixed_effects_estimates(truth: &SimTruth, n_areas: usize, intercept_shift: f64) -> Result<Estimates> {
    let (x, column) = fixed_effects_design(truth, n_areas);
    let fit = fit_logit(&x, &truth.y)?;
    let mut seen = vec![false; n_areas];
    for &a in &truth.small_area {
        seen[a] = true;
    }
    let raw: Vec<f64> = (0..n_areas).map(|a| column[a].map_or(0.0, |c| fit.coef[c])).collect();
    let observed: Vec<f64> = (0..n_areas).filter(|&a| seen[a]).map(|a| raw[a]).collect();
    let centre = mean(&observed);
    let gamma: Vec<f64> = (0..n_areas).map(|a| if seen[a] { raw[a] - centre } else { 0.0 }).collect();
    let beta1 = fit.coef[0] + centre - intercept_shift;
    let beta2 = fit.coef[1];
    let mu_star = truth.x.iter().zip(&truth.small_area).map(|(xi, &a)| beta1 + xi * beta2 + gamma[a]).collect();
    Ok(Estimates { mu_star, beta1, beta2, gamma, separated: fit.separated })
}

/// Log prior-correction subtracted from the intercept: `log((ybar / (1 - ybar)) ((1 - pi) / pi))`.
pub fn prior_correction(sample_share: f64, pi: f64) -> f64 {
    // written as one ratio so that equal shares cancel exactly
    ((sample_share * (1.0 - pi)) / ((1.0 - sample_share) * pi)).ln()
}

/// A competing estimator in the study.
pub trait SimModel: Sync {
    fn name(&self) -> &str;
    /// Point estimates for one dataset. An error marks the run as failed,
    /// which triggers a redraw.
    fn estimate(&self, scenario: &SimScenario, truth: &SimTruth) -> Result<Estimates>;
}

/// Fixed-effects logit.
#[derive(Debug, Clone, Copy, Default)]
pub struct M1;

impl SimModel for M1 {
    fn name(&self) -> &str {
        "m1"
    }
    fn estimate(&self, scenario: &SimScenario, truth: &SimTruth) -> Result<Estimates> {
        fixed_effects_estimates(truth, scenario.graph.len(), 0.0)
    }
}

/// Fixed-effects logit with prior correction of the intercept.
#[derive(Debug, Clone, Copy, Default)]
pub struct M2;

impl SimModel for M2 {
    fn name(&self) -> &str {
        "m2"
    }
    fn estimate(&self, scenario: &SimScenario, truth: &SimTruth) -> Result<Estimates> {
        let share = truth.y.iter().map(|&v| f64::from(v)).sum::<f64>() / truth.y.len() as f64;
        if share == 0.0 || share == 1.0 {
            return Err(Error::Simulation("labels are all equal; prior correction undefined".into()));
        }
        fixed_effects_estimates(truth, scenario.graph.len(), prior_correction(share, scenario.pi))
    }
}

/// Settings of the Bayesian model in study mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct M3Settings {
    pub sampler: SamplerConfig,
    /// Runs whose post-warmup divergence share exceeds this are failures.
    pub max_divergence_rate: f64,
}

impl Default for M3Settings {
    fn default() -> Self {
        M3Settings {
            sampler: SamplerConfig { n_chains: 4, n_iter: 4000, n_warmup: 2667, thin: 4, ..SamplerConfig::default() },
            max_divergence_rate: 0.05,
        }
    }
}

/// The contaminated-controls BYM2 model (no large-area layer, raw `x`).
#[derive(Debug, Clone, Default)]
pub struct M3 {
    pub settings: M3Settings,
}

impl M3 {
    /// Model data for a simulated dataset: one large area, counts from the labels.
    pub fn model_data(scenario: &SimScenario, truth: &SimTruth) -> Result<CaseControlData> {
        let n = truth.y.len();
        let mut vals = Vec::with_capacity(2 * n);
        for &xi in &truth.x {
            vals.extend([1.0, xi]);
        }
        let x = DesignMatrix::new(vec![INTERCEPT.into(), "x".into()], n, vals)?;
        let n1 = truth.y.iter().filter(|&&v| v == 1).count();
        let corr = sampling_correction(n1, n - n1, scenario.pi)?;
        CaseControlData::new(truth.y.clone(), x, truth.small_area.clone(), scenario.graph.len(), vec![0; n], vec![corr])
    }
}

impl SimModel for M3 {
    fn name(&self) -> &str {
        "m3"
    }

    fn estimate(&self, scenario: &SimScenario, truth: &SimTruth) -> Result<Estimates> {
        let data = Self::model_data(scenario, truth)?;
        let config = ModelConfig { large_area: false, ..ModelConfig::default() };
        let model = Bym2Model::new(data, Some(scenario.graph.clone()), config)?;
        let sampler = SamplerConfig { seed: scenario.seed, ..self.settings.sampler.clone() };
        let chains = run_chains(&model, &sampler)?.into_iter().collect::<Result<Vec<_>>>()?;
        let kept: usize = chains.iter().map(|c| c.n_kept()).sum();
        let divergent: usize = chains.iter().map(|c| c.divergences()).sum();
        if divergent as f64 > self.settings.max_divergence_rate * kept as f64 {
            return Err(Error::Simulation(format!("{divergent} of {kept} kept iterations diverged")));
        }
        let names = &chains[0].param_names;
        let col = |name: &str| {
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Simulation(format!("draws lack {name}")))
        };
        let b1 = col("beta[1]")?;
        let b2 = col("beta[2]")?;
        let l = scenario.graph.len();
        let g0 = col("gamma[1]")?;
        let (mut beta1, mut beta2) = (0.0, 0.0);
        let mut gamma = vec![0.0; l];
        for row in chains.iter().flat_map(|c| &c.draws) {
            let g = &row[g0..g0 + l];
            let centre = mean(g);
            beta1 += row[b1] + centre;
            beta2 += row[b2];
            for (acc, v) in gamma.iter_mut().zip(g) {
                *acc += v - centre;
            }
        }
        let k = kept as f64;
        beta1 /= k;
        beta2 /= k;
        gamma.iter_mut().for_each(|g| *g /= k);
        let mu_star = truth.x.iter().zip(&truth.small_area).map(|(xi, &a)| beta1 + xi * beta2 + gamma[a]).collect();
        Ok(Estimates { mu_star, beta1, beta2, gamma, separated: false })
    }
}

/// Point-estimate scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    /// `mean(f̂ - f)`.
    pub bias: f64,
    /// `mean((f̂ - f)^2)`, the printed "RMSE" formula.
    pub rmse_paper: f64,
    /// `sqrt(rmse_paper)`.
    pub rmse_strict: f64,
    /// Missing for fewer than two values or zero variance.
    pub pearson: Option<f64>,
}

pub fn score(estimate: &[f64], truth: &[f64]) -> Result<Score> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return Err(Error::Simulation("score needs equal, non-empty lengths".into()));
    }
    let n = truth.len() as f64;
    let bias = estimate.iter().zip(truth).map(|(e, t)| e - t).sum::<f64>() / n;
    let mse = estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / n;
    let pearson = if truth.len() < 2 {
        None
    } else {
        let (me, mt) = (mean(estimate), mean(truth));
        let cov: f64 = estimate.iter().zip(truth).map(|(e, t)| (e - me) * (t - mt)).sum();
        let ve: f64 = estimate.iter().map(|e| (e - me).powi(2)).sum();
        let vt: f64 = truth.iter().map(|t| (t - mt).powi(2)).sum();
        (ve > 0.0 && vt > 0.0).then(|| (cov / (ve * vt).sqrt()).clamp(-1.0, 1.0))
    };
    Ok(Score { bias, rmse_paper: mse, rmse_strict: mse.sqrt(), pearson })
}

/// Named lattice standing in for a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl MapSpec {
    pub fn lattice(rows: usize, cols: usize) -> Self {
        MapSpec { name: format!("lattice_{rows}x{cols}"), rows, cols }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_sims: usize,
    pub seed: u64,
    pub n_range: [usize; 2],
    /// Prevalence ranges; simulations are split evenly across them in order.
    pub pi_stages: Vec<[f64; 2]>,
    pub pi_hat_range: [f64; 2],
    pub autocorrelation_range: [f64; 2],
    pub maps: Vec<MapSpec>,
    pub models: Vec<String>,
    pub m3: M3Settings,
    /// Datasets tried per simulation before it is recorded as failed.
    pub max_attempts: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_sims: 200,
            seed: 1,
            n_range: [100, 2000],
            pi_stages: vec![[1e-6, 0.1], [0.1, 0.5]],
            pi_hat_range: [0.01, 0.99],
            autocorrelation_range: [0.0, 1.0],
            maps: vec![MapSpec::lattice(5, 5), MapSpec::lattice(8, 8), MapSpec::lattice(10, 10)],
            models: vec!["m1".into(), "m2".into(), "m3".into()],
            m3: M3Settings::default(),
            max_attempts: 5,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Simulation(m.to_string()));
        if self.n_range[0] > self.n_range[1] || self.n_range[0] < 100 || self.n_range[1] > 2000 {
            return fail("n_range must lie within [100, 2000]");
        }
        if self.pi_stages.is_empty()
            || self.pi_stages.iter().any(|r| !(r[0] <= r[1] && r[0] >= 1e-6 && r[1] <= 0.5))
        {
            return fail("pi_stages must be non-empty ranges within [1e-6, 0.5]");
        }
        if !(self.pi_hat_range[0] <= self.pi_hat_range[1] && self.pi_hat_range[0] >= 0.01 && self.pi_hat_range[1] <= 0.99) {
            return fail("pi_hat_range must lie within [0.01, 0.99]");
        }
        let a = self.autocorrelation_range;
        if !(a[0] < a[1] && a[0] >= 0.0 && a[1] <= 1.0) {
            return fail("autocorrelation_range must be an increasing range within [0, 1]");
        }
        if self.maps.is_empty() || self.maps.iter().any(|m| m.rows * m.cols < 2) {
            return fail("maps must be non-empty lattices with at least two areas");
        }
        if self.max_attempts == 0 {
            return fail("max_attempts must be at least 1");
        }
        for m in &self.models {
            if !["m1", "m2", "m3"].contains(&m.as_str()) {
                return Err(Error::Simulation(format!("unknown model '{m}'")));
            }
        }
        self.m3.sampler.validate()
    }

    /// The configured models in order.
    pub fn build_models(&self) -> Vec<Box<dyn SimModel>> {
        self.models
            .iter()
            .map(|m| -> Box<dyn SimModel> {
                match m.as_str() {
                    "m1" => Box::new(M1),
                    "m2" => Box::new(M2),
                    _ => Box::new(M3 { settings: self.m3.clone() }),
                }
            })
            .collect()
    }
}

/// Scenario of simulation `sim` at redraw `attempt`; a pure function of the
/// config, so any row can be replayed.
pub fn scenario_for(config: &StudyConfig, sim: usize, attempt: usize) -> Result<SimScenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(sim as u64);
    let stage = &config.pi_stages[sim * config.pi_stages.len() / config.n_sims.max(1)];
    let n = rng.random_range(config.n_range[0]..=config.n_range[1]);
    let pi = uniform(&mut rng, stage[0], stage[1]);
    let pi_hat = uniform(&mut rng, config.pi_hat_range[0], config.pi_hat_range[1]);
    let mut autocorrelation;
    loop {
        autocorrelation = uniform(&mut rng, config.autocorrelation_range[0], config.autocorrelation_range[1]);
        if autocorrelation > 0.0 && autocorrelation < 1.0 {
            break;
        }
    }
    let map = &config.maps[rng.random_range(0..config.maps.len())];
    let mut seed = 0;
    for _ in 0..=attempt {
        seed = rng.next_u64();
    }
    Ok(SimScenario {
        n,
        pi,
        pi_hat,
        autocorrelation,
        map_name: map.name.clone(),
        graph: grid_graph(map.rows, map.cols)?,
        seed,
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub const QUANTITIES: [&str; 4] = ["mu_star", "beta1", "beta2", "gamma"];

/// One tidy output row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub sim: usize,
    pub attempt: usize,
    pub seed: u64,
    pub model: String,
    pub quantity: String,
    pub bias: f64,
    pub rmse_paper: f64,
    pub rmse_strict: f64,
    pub pearson: Option<f64>,
    pub separated: bool,
    pub n: usize,
    pub pi: f64,
    pub pi_hat: f64,
    pub pi_hat_minus_pi: f64,
    pub autocorrelation: f64,
    pub realized_morans_i: f64,
    pub map: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResults {
    pub rows: Vec<StudyRow>,
    /// Datasets discarded because a model failed, per simulation.
    pub redraws: Vec<usize>,
    /// Simulations that failed on every attempt, with the last error.
    pub failures: Vec<(usize, String)>,
}

/// Runs and scores one simulation, redrawing the dataset when any model fails.
pub fn run_simulation(config: &StudyConfig, models: &[&dyn SimModel], sim: usize) -> (Vec<StudyRow>, usize, Option<String>) {
    let mut last = String::new();
    for attempt in 0..config.max_attempts {
        let outcome = scenario_for(config, sim, attempt).and_then(|scenario| {
            let truth = generate_dataset(&scenario)?;
            let mut rows = Vec::with_capacity(models.len() * 4);
            for m in models {
                let est = m.estimate(&scenario, &truth).map_err(|e| Error::Simulation(format!("{}: {e}", m.name())))?;
                rows.extend(score_rows(sim, attempt, &scenario, &truth, m.name(), &est)?);
            }
            Ok(rows)
        });
        match outcome {
            Ok(rows) => return (rows, attempt, None),
            Err(e) => {
                log::warn!("simulation {sim} attempt {attempt} failed: {e}");
                last = e.to_string();
            }
        }
    }
    (Vec::new(), config.max_attempts, Some(last))
}

fn score_rows(
    sim: usize,
    attempt: usize,
    scenario: &SimScenario,
    truth: &SimTruth,
    model: &str,
    est: &Estimates,
) -> Result<Vec<StudyRow>> {
    let pairs: [(&[f64], &[f64]); 4] = [
        (&est.mu_star, &truth.mu_star),
        (std::slice::from_ref(&est.beta1), std::slice::from_ref(&truth.beta1_star)),
        (std::slice::from_ref(&est.beta2), std::slice::from_ref(&truth.beta2)),
        (&est.gamma, &truth.gamma_true),
    ];
    pairs
        .iter()
        .zip(QUANTITIES)
        .map(|((e, t), q)| {
            let s = score(e, t)?;
            Ok(StudyRow {
                sim,
                attempt,
                seed: scenario.seed,
                model: model.to_string(),
                quantity: q.to_string(),
                bias: s.bias,
                rmse_paper: s.rmse_paper,
                rmse_strict: s.rmse_strict,
                pearson: s.pearson,
                separated: est.separated,
                n: scenario.n,
                pi: scenario.pi,
                pi_hat: scenario.pi_hat,
                pi_hat_minus_pi: scenario.pi_hat - scenario.pi,
                autocorrelation: scenario.autocorrelation,
                realized_morans_i: truth.realized_morans_i,
                map: scenario.map_name.clone(),
            })
        })
        .collect()
}

/// Runs every simulation in parallel; rows are ordered by simulation, then
/// model, then quantity.
pub fn run_study(config: &StudyConfig, models: &[&dyn SimModel]) -> Result<StudyResults> {
    config.validate()?;
    let per_sim: Vec<_> = (0..config.n_sims).into_par_iter().map(|sim| run_simulation(config, models, sim)).collect();
    let mut out = StudyResults { rows: Vec::new(), redraws: Vec::new(), failures: Vec::new() };
    for (sim, (rows, attempts, failure)) in per_sim.into_iter().enumerate() {
        out.rows.extend(rows);
        out.redraws.push(attempts);
        if let Some(e) = failure {
            out.failures.push((sim, e));
        }
    }
    Ok(out)
}

/// Mean scores of one quantity per model and prevalence bucket.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendRow {
    pub model: String,
    pub pi_lower: f64,
    pub pi_upper: f64,
    pub n_sims: usize,
    pub mean_bias: f64,
    pub mean_rmse_paper: f64,
}

/// Buckets are `[edges[k], edges[k + 1])`, the last one closed.
pub fn trend_summary(rows: &[StudyRow], quantity: &str, edges: &[f64]) -> Vec<TrendRow> {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let mut out = Vec::new();
    for m in models {
        for (k, w) in edges.windows(2).enumerate() {
            let last = k + 2 == edges.len();
            let sel: Vec<&StudyRow> = rows
                .iter()
                .filter(|r| r.model == m && r.quantity == quantity && r.pi >= w[0] && (r.pi < w[1] || (last && r.pi <= w[1])))
                .collect();
            if sel.is_empty() {
                continue;
            }
            let n = sel.len() as f64;
            out.push(TrendRow {
                model: m.to_string(),
                pi_lower: w[0],
                pi_upper: w[1],
                n_sims: sel.len(),
                mean_bias: sel.iter().map(|r| r.bias).sum::<f64>() / n,
                mean_rmse_paper: sel.iter().map(|r| r.rmse_paper).sum::<f64>() / n,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scenario(n: usize, pi: f64, pi_hat: f64, seed: u64) -> SimScenario {
        SimScenario {
            n,
            pi,
            pi_hat,
            autocorrelation: 0.5,
            map_name: "lattice_5x5".into(),
            graph: grid_graph(5, 5).unwrap(),
            seed,
        }
    }

    #[test]
    fn calibration_examples() {
        assert_relative_eq!(calibrate_intercept(0.5, &[0.0; 10]).unwrap(), 0.0, epsilon = 1e-10);
        let b = calibrate_intercept(0.5, &[2f64.ln(); 10]).unwrap();
        assert_relative_eq!(b, -(2f64.ln()), epsilon = 1e-10);
        assert!(calibrate_intercept(0.5, &[1000.0; 3]).is_err());
    }

    #[test]
    fn design_quantity_examples() {
        let q = design_quantities(1000, 0.1, 0.5);
        assert_relative_eq!(q.n1, 500.0);
        assert_relative_eq!(q.theta1, 500.0 / 550.0, epsilon = 1e-15);
        assert_relative_eq!(q.relative_risk, 500.0 / (0.1 * 500.0) + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn generated_labels_respect_contamination() {
        for seed in 0..5 {
            let t = generate_dataset(&scenario(400, 0.2, 0.3, seed)).unwrap();
            assert!(t.y.iter().zip(&t.r).all(|(y, r)| y <= r));
            assert_relative_eq!(mean(&t.rho), 0.3, epsilon = 1e-8);
            assert!(mean(&t.gamma_true).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_closed_form() {
        let y = [1, 0, 1, 0, 1, 1, 0, 1];
        let x = DMatrix::from_element(8, 1, 1.0);
        let fit = fit_logit(&x, &y).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.coef[0], (5.0f64 / 3.0).ln(), epsilon = 1e-10);
    }

    #[test]
    fn separation_is_flagged() {
        let y = [0, 0, 0, 1, 1, 1];
        let x = DMatrix::from_row_slice(6, 2, &[1.0, -3.0, 1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        assert!(fit_logit(&x, &y).unwrap().separated);
    }

    #[test]
    fn prior_correction_examples() {
        assert_eq!(prior_correction(0.3, 0.3), 0.0);
        assert_relative_eq!(prior_correction(0.5, 0.1), 9f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn score_examples() {
        let t = [1.0, 2.0, 4.0];
        let same = score(&t, &t).unwrap();
        assert_eq!((same.bias, same.rmse_paper), (0.0, 0.0));
        let shifted: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        let s = score(&shifted, &t).unwrap();
        assert_relative_eq!(s.bias, 1.0);
        assert_relative_eq!(s.rmse_paper, 1.0);
        assert_relative_eq!(s.pearson.unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(score(&[1.0], &[2.0]).unwrap().pearson, None);
        assert_eq!(score(&[1.0, 1.0], &[2.0, 3.0]).unwrap().pearson, None);
    }

    #[test]
    fn scenarios_are_replayable() {
        let cfg = StudyConfig { n_sims: 4, ..StudyConfig::default() };
        let a = scenario_for(&cfg, 3, 1).unwrap();
        let b = scenario_for(&cfg, 3, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(scenario_for(&cfg, 3, 0).unwrap().seed, a.seed);
        assert!(scenario_for(&cfg, 0, 0).unwrap().pi <= 0.1);
        assert!(scenario_for(&cfg, 3, 0).unwrap().pi >= 0.1);
    }
}
