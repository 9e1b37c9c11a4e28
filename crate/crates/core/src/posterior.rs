//! Joint log-density of the contaminated case-control model and its gradient.
//!
//! Parameter blocks, in the order they appear in the unconstrained vector:
//!
//! | block         | size | constraint | transform |
//! |---------------|------|------------|-----------|
//! | `aux_a`       | p    | none       | identity  |
//! | `aux_b`       | p    | > 0        | log       |
//! | `phi`         | L    | none       | identity  |
//! | `psi`         | L    | none       | identity (spatial only) |
//! | `lambda`      | 1    | (0, 1)     | logit (spatial only) |
//! | `sigma_gamma` | 1    | > 0        | log       |
//! | `eta`         | J    | none       | identity (large-area only) |
//! | `sigma_eta`   | 1    | > 0        | log (large-area only) |
//!
//! Coefficients are the Gaussian scale mixture `beta = aux_a / sqrt(aux_b)`,
//! which is marginally Cauchy. Small-area effects follow the BYM2 convolution
//! `gamma = sigma_gamma * (phi * sqrt(1 - lambda) + psi * sqrt(lambda / s))`;
//! with the spatial layer off, `gamma = sigma_gamma * phi`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::CaseControlData;
use crate::graph::{scaling_factor, AdjacencyGraph};
use crate::math::{inv_logit, lgamma, ln_beta, log_inv_logit, normal_lpdf, LN_SQRT_2PI};
use crate::sampler::LogDensity;
use crate::{Error, Result};

/// Per-observation log-likelihood floor, `ln(1e-300)`.
pub const LOG_FLOOR: f64 = -690.775_527_898_213_7;

const MIX_SHAPE: f64 = 0.5;

/// Prior on the small- and large-area scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScalePrior {
    /// `sigma ~ half-N(0, 1)`.
    #[default]
    HalfNormal,
    /// Precision `1 / sigma^2 ~ Gamma(epsilon, epsilon)`.
    GammaPrecision { epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Mixture likelihood with θ₁ < 1; off forces θ₁ = 1.
    pub contamination: bool,
    /// BYM2 convolution with an ICAR component; off leaves iid small-area effects.
    pub spatial: bool,
    /// Large-area random effects `eta * sigma_eta`.
    pub large_area: bool,
    /// Cauchy scale of the intercept.
    pub intercept_scale: f64,
    /// Cauchy scale of the slopes.
    pub slope_scale: f64,
    /// Soft sum-to-zero sd per area: `sum(psi) ~ N(0, soft_sum_sd_per_area * L)`.
    pub soft_sum_sd_per_area: f64,
    pub scale_prior: ScalePrior,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            contamination: true,
            spatial: true,
            large_area: true,
            intercept_scale: 10.0,
            slope_scale: 1.0,
            soft_sum_sd_per_area: 0.01,
            scale_prior: ScalePrior::HalfNormal,
        }
    }
}

/// Index map of the unconstrained vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub p: usize,
    pub n_small: usize,
    pub n_large: usize,
    pub aux_a: Range<usize>,
    pub aux_b: Range<usize>,
    pub phi: Range<usize>,
    pub psi: Range<usize>,
    pub lambda: Option<usize>,
    pub sigma_gamma: usize,
    pub eta: Range<usize>,
    pub sigma_eta: Option<usize>,
    pub dim: usize,
}

impl ParamLayout {
    pub fn new(p: usize, n_small: usize, n_large: usize, config: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |k: usize| {
            let r = at..at + k;
            at += k;
            r
        };
        let aux_a = take(p);
        let aux_b = take(p);
        let phi = take(n_small);
        let psi = take(if config.spatial { n_small } else { 0 });
        let lambda = config.spatial.then(|| take(1).start);
        let sigma_gamma = take(1).start;
        let eta = take(if config.large_area { n_large } else { 0 });
        let sigma_eta = config.large_area.then(|| take(1).start);
        ParamLayout { p, n_small, n_large, aux_a, aux_b, phi, psi, lambda, sigma_gamma, eta, sigma_eta, dim: at }
    }

    /// Names of the sampled parameters followed by the derived `beta` and
    /// `gamma`, matching [`ModelParams::to_output_row`].
    pub fn output_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let block = |names: &mut Vec<String>, label: &str, n: usize| {
            names.extend((1..=n).map(|k| format!("{label}[{k}]")));
        };
        block(&mut names, "aux_a", self.p);
        block(&mut names, "aux_b", self.p);
        block(&mut names, "phi", self.phi.len());
        block(&mut names, "psi", self.psi.len());
        if self.lambda.is_some() {
            names.push("lambda".into());
        }
        names.push("sigma_gamma".into());
        block(&mut names, "eta", self.eta.len());
        if self.sigma_eta.is_some() {
            names.push("sigma_eta".into());
        }
        block(&mut names, "beta", self.p);
        block(&mut names, "gamma", self.n_small);
        names
    }
}

/// Parameters on their natural (constrained) scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub aux_a: Vec<f64>,
    pub aux_b: Vec<f64>,
    pub phi: Vec<f64>,
    /// Empty when the spatial layer is off.
    pub psi: Vec<f64>,
    /// Zero when the spatial layer is off.
    pub lambda: f64,
    pub sigma_gamma: f64,
    /// Empty when the large-area layer is off.
    pub eta: Vec<f64>,
    /// Zero when the large-area layer is off.
    pub sigma_eta: f64,
}

impl ModelParams {
    pub fn beta(&self) -> Vec<f64> {
        self.aux_a.iter().zip(&self.aux_b).map(|(a, b)| a / b.sqrt()).collect()
    }

    pub fn gamma(&self, scaling: f64) -> Vec<f64> {
        if self.psi.is_empty() {
            self.phi.iter().map(|f| self.sigma_gamma * f).collect()
        } else {
            convolved_effect(&self.phi, &self.psi, self.lambda, self.sigma_gamma, scaling)
        }
    }

    /// Flat row in the order of [`ParamLayout::output_names`].
    pub fn to_output_row(&self, layout: &ParamLayout, scaling: f64) -> Vec<f64> {
        let mut row = Vec::with_capacity(layout.dim + layout.p + layout.n_small);
        row.extend(&self.aux_a);
        row.extend(&self.aux_b);
        row.extend(&self.phi);
        row.extend(&self.psi);
        if layout.lambda.is_some() {
            row.push(self.lambda);
        }
        row.push(self.sigma_gamma);
        row.extend(&self.eta);
        if layout.sigma_eta.is_some() {
            row.push(self.sigma_eta);
        }
        row.extend(self.beta());
        row.extend(self.gamma(scaling));
        row
    }
}

/// Maps an unconstrained vector to [`ModelParams`], returning the log-Jacobian
/// of the transform.
pub fn constrain(theta: &[f64], layout: &ParamLayout) -> Result<(ModelParams, f64)> {
    if theta.len() != layout.dim {
        return Err(Error::Model(format!("expected {} parameters, got {}", layout.dim, theta.len())));
    }
    if theta.iter().any(|v| v.is_nan()) {
        return Err(Error::Model("NaN in unconstrained vector".into()));
    }
    let mut log_jac = 0.0;
    let mut positive = |u: f64| {
        log_jac += u;
        u.exp()
    };
    let aux_b: Vec<f64> = theta[layout.aux_b.clone()].iter().map(|&u| positive(u)).collect();
    let sigma_gamma = positive(theta[layout.sigma_gamma]);
    let sigma_eta = layout.sigma_eta.map_or(0.0, |i| positive(theta[i]));
    let lambda = match layout.lambda {
        Some(i) => {
            let v = theta[i];
            log_jac += log_inv_logit(v) + log_inv_logit(-v);
            inv_logit(v)
        }
        None => 0.0,
    };
    let params = ModelParams {
        aux_a: theta[layout.aux_a.clone()].to_vec(),
        aux_b,
        phi: theta[layout.phi.clone()].to_vec(),
        psi: theta[layout.psi.clone()].to_vec(),
        lambda,
        sigma_gamma,
        eta: theta[layout.eta.clone()].to_vec(),
        sigma_eta,
    };
    Ok((params, log_jac))
}

/// Inverse of [`constrain`].
pub fn unconstrain(params: &ModelParams, layout: &ParamLayout) -> Result<Vec<f64>> {
    let check = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::Model(format!("{what} is outside its support")))
        }
    };
    check(params.aux_a.len() == layout.p && params.aux_b.len() == layout.p, "coefficient block size")?;
    check(params.phi.len() == layout.phi.len() && params.psi.len() == layout.psi.len(), "small-area block size")?;
    check(params.eta.len() == layout.eta.len(), "large-area block size")?;
    check(params.aux_b.iter().all(|&b| b > 0.0), "aux_b")?;
    check(params.sigma_gamma > 0.0, "sigma_gamma")?;
    let mut theta = vec![0.0; layout.dim];
    theta[layout.aux_a.clone()].copy_from_slice(&params.aux_a);
    for (t, b) in theta[layout.aux_b.clone()].iter_mut().zip(&params.aux_b) {
        *t = b.ln();
    }
    theta[layout.phi.clone()].copy_from_slice(&params.phi);
    theta[layout.psi.clone()].copy_from_slice(&params.psi);
    if let Some(i) = layout.lambda {
        check(params.lambda > 0.0 && params.lambda < 1.0, "lambda")?;
        theta[i] = crate::math::logit(params.lambda);
    }
    theta[layout.sigma_gamma] = params.sigma_gamma.ln();
    theta[layout.eta.clone()].copy_from_slice(&params.eta);
    if let Some(i) = layout.sigma_eta {
        check(params.sigma_eta > 0.0, "sigma_eta")?;
        theta[i] = params.sigma_eta.ln();
    }
    if theta.iter().any(|v| v.is_nan()) {
        return Err(Error::Model("NaN in parameters".into()));
    }
    Ok(theta)
}

/// Log-likelihood of one label under the two-component Bernoulli mixture,
/// and its derivative with respect to `mu`.
///
/// With `ρ = inv_logit(mu)` an unlabelled record has probability
/// `1 - θ₁ρ = (1 + (1 - θ₁)e^mu) / (1 + e^mu)`; both branches share one
/// exponential of `-|mu|`.
#[inline]
fn mixture_term(mu: f64, y: u8, log_theta1: f64, theta1: f64) -> (f64, f64) {
    let q = (-mu.abs()).exp();
    if y == 1 {
        // ln ρ and 1 - ρ
        if mu >= 0.0 {
            (log_theta1 - q.ln_1p(), q / (1.0 + q))
        } else {
            (log_theta1 + mu - q.ln_1p(), 1.0 / (1.0 + q))
        }
    } else {
        let rest = 1.0 - theta1;
        if mu >= 0.0 {
            // q = e^-mu: 1 - θ₁ρ = (rest + q) / (1 + q)
            ((rest + q).ln() - q.ln_1p(), -theta1 * q / ((1.0 + q) * (rest + q)))
        } else {
            // q = e^mu: 1 - θ₁ρ = (1 + rest q) / (1 + q)
            ((rest * q).ln_1p() - q.ln_1p(), -theta1 * q / ((1.0 + q) * (1.0 + rest * q)))
        }
    }
}

/// Log-probability of label `y` given logit-scale propensity `mu` when a true
/// case is labelled with probability `theta1` and a true control never is.
pub fn log_likelihood_mixture(mu: f64, y: u8, theta1: f64) -> f64 {
    mixture_term(mu, y, theta1.ln(), theta1).0
}

/// Pairwise-difference ICAR log-density plus the soft sum-to-zero term.
pub fn icar_logpdf(psi: &[f64], edges: &[(usize, usize)], soft_sum_sd_per_area: f64) -> f64 {
    let pairwise: f64 = edges.iter().map(|&(a, b)| (psi[a] - psi[b]).powi(2)).sum();
    let sum: f64 = psi.iter().sum();
    -0.5 * pairwise + normal_lpdf(sum, 0.0, soft_sum_sd_per_area * psi.len() as f64)
}

/// BYM2 convolved small-area effect.
pub fn convolved_effect(phi: &[f64], psi: &[f64], lambda: f64, sigma_gamma: f64, scaling: f64) -> Vec<f64> {
    let a = (1.0 - lambda).sqrt();
    let b = (lambda / scaling).sqrt();
    phi.iter().zip(psi).map(|(f, s)| sigma_gamma * (f * a + s * b)).collect()
}

/// Log-density and log-Jacobian of a positive scale parameterized as `w = ln(sigma)`,
/// with the derivative in `w`.
fn scale_prior_term(w: f64, prior: ScalePrior) -> (f64, f64) {
    match prior {
        ScalePrior::HalfNormal => {
            let s2 = (2.0 * w).exp();
            (std::f64::consts::LN_2 - LN_SQRT_2PI - 0.5 * s2 + w, 1.0 - s2)
        }
        ScalePrior::GammaPrecision { epsilon: e } => {
            let tau = (-2.0 * w).exp();
            (
                e * e.ln() - lgamma(e) + std::f64::consts::LN_2 - 2.0 * e * w - e * tau,
                -2.0 * e + 2.0 * e * tau,
            )
        }
    }
}

/// Contributions to the log-density, for reporting and testing.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermLedger {
    pub likelihood: f64,
    /// Coefficient priors (both mixture components) including the `aux_b` Jacobian.
    pub coefficients: f64,
    pub phi: f64,
    /// ICAR pairwise term plus soft sum-to-zero.
    pub icar: f64,
    /// Beta prior on lambda plus its logit Jacobian.
    pub lambda: f64,
    pub sigma_gamma: f64,
    pub eta: f64,
    pub sigma_eta: f64,
}

impl TermLedger {
    pub fn total(&self) -> f64 {
        self.likelihood + self.coefficients + self.phi + self.icar + self.lambda + self.sigma_gamma + self.eta + self.sigma_eta
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("likelihood", self.likelihood),
            ("coefficient prior", self.coefficients),
            ("phi prior", self.phi),
            ("ICAR prior", self.icar),
            ("lambda prior", self.lambda),
            ("sigma_gamma prior", self.sigma_gamma),
            ("eta prior", self.eta),
            ("sigma_eta prior", self.sigma_eta),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// One evaluation of the log-posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub log_density: f64,
    pub terms: TermLedger,
    /// Observations whose log-likelihood was clamped at [`LOG_FLOOR`].
    pub floor_hits: usize,
}

/// The full model bound to its data and graph.
#[derive(Debug, Clone)]
pub struct Bym2Model {
    data: CaseControlData,
    graph: Option<AdjacencyGraph>,
    config: ModelConfig,
    scaling: f64,
    layout: ParamLayout,
    log_theta1: Vec<f64>,
    theta1: Vec<f64>,
}

impl Bym2Model {
    /// Validates the configuration against the data and precomputes the
    /// scaling factor. A graph is required (and must be connected) when the
    /// spatial layer is on.
    pub fn new(data: CaseControlData, graph: Option<AdjacencyGraph>, config: ModelConfig) -> Result<Self> {
        if !(config.intercept_scale > 0.0 && config.slope_scale > 0.0 && config.soft_sum_sd_per_area > 0.0) {
            return Err(Error::Model("prior scales must be positive".into()));
        }
        if let ScalePrior::GammaPrecision { epsilon } = config.scale_prior {
            if !(epsilon > 0.0) {
                return Err(Error::Model("gamma precision prior needs epsilon > 0".into()));
            }
        }
        if data.n_small == 0 {
            return Err(Error::Model("at least one small area is required".into()));
        }
        let scaling = if config.spatial {
            let g = graph
                .as_ref()
                .ok_or_else(|| Error::Model("the spatial layer needs an adjacency graph".into()))?;
            if data.n_small < 2 {
                return Err(Error::Model("the spatial layer needs at least two small areas".into()));
            }
            if g.len() != data.n_small {
                return Err(Error::Model(format!(
                    "graph has {} nodes but the data index {} small areas",
                    g.len(),
                    data.n_small
                )));
            }
            scaling_factor(g)?.value()
        } else {
            1.0
        };
        let layout = ParamLayout::new(data.x.ncols(), data.n_small, data.n_large, &config);
        let theta1: Vec<f64> =
            data.corrections.iter().map(|c| if config.contamination { c.theta1 } else { 1.0 }).collect();
        let log_theta1 = theta1.iter().map(|t| t.ln()).collect();
        Ok(Bym2Model { data, graph, config, scaling, layout, log_theta1, theta1 })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn data(&self) -> &CaseControlData {
        &self.data
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> Option<&AdjacencyGraph> {
        self.graph.as_ref()
    }

    /// BYM2 scaling factor (1 when the spatial layer is off).
    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    /// θ₁ used for large area `j` (1 with contamination off).
    pub fn theta1(&self, j: usize) -> f64 {
        self.theta1[j]
    }

    fn rate(&self, k: usize) -> f64 {
        let scale = if k == 0 { self.config.intercept_scale } else { self.config.slope_scale };
        MIX_SHAPE * scale * scale
    }

    /// Logit-scale propensity of every observation, including offset and area terms.
    pub fn linear_predictor(&self, params: &ModelParams) -> Vec<f64> {
        let beta = params.beta();
        let gamma = params.gamma(self.scaling);
        let d = &self.data;
        (0..d.len())
            .map(|i| {
                let j = d.large_area[i];
                let eta = if params.eta.is_empty() { 0.0 } else { params.eta[j] * params.sigma_eta };
                d.corrections[j].log_offset + eta + gamma[d.small_area[i]] + crate::math::dot(d.x.row(i), &beta)
            })
            .collect()
    }

    /// Log-posterior on the unconstrained scale with its exact gradient.
    pub fn log_posterior(&self, theta: &[f64], grad: &mut [f64]) -> Result<Evaluation> {
        let lay = &self.layout;
        if theta.len() != lay.dim || grad.len() != lay.dim {
            return Err(Error::Model(format!("expected {} parameters, got {}", lay.dim, theta.len())));
        }
        if theta.iter().any(|v| v.is_nan()) {
            return Err(Error::Model("NaN in unconstrained vector".into()));
        }
        grad.fill(0.0);
        let mut t = TermLedger::default();
        let p = lay.p;
        let l = lay.n_small;

        let mut beta = vec![0.0; p];
        for k in 0..p {
            let a = theta[lay.aux_a.start + k];
            let u = theta[lay.aux_b.start + k];
            let rate = self.rate(k);
            let b = u.exp();
            beta[k] = a * (-0.5 * u).exp();
            t.coefficients += -0.5 * a * a - LN_SQRT_2PI;
            t.coefficients += MIX_SHAPE * rate.ln() - lgamma(MIX_SHAPE) + MIX_SHAPE * u - rate * b;
            grad[lay.aux_a.start + k] = -a;
            grad[lay.aux_b.start + k] = MIX_SHAPE - rate * b;
        }

        let w = theta[lay.sigma_gamma];
        let sigma_g = w.exp();
        let (st, gw) = scale_prior_term(w, self.config.scale_prior);
        t.sigma_gamma = st;
        grad[lay.sigma_gamma] = gw;

        let (lambda, w_phi, w_psi) = match lay.lambda {
            Some(i) => {
                let v = theta[i];
                let lam = inv_logit(v);
                t.lambda = 0.5 * log_inv_logit(v) + 0.5 * log_inv_logit(-v) - ln_beta(0.5, 0.5);
                grad[i] = 0.5 - lam;
                (lam, (1.0 - lam).sqrt(), (lam / self.scaling).sqrt())
            }
            None => (0.0, 1.0, 0.0),
        };
        let phi = &theta[lay.phi.clone()];
        let psi = &theta[lay.psi.clone()];
        for (g, &f) in grad[lay.phi.clone()].iter_mut().zip(phi) {
            t.phi += -0.5 * f * f - LN_SQRT_2PI;
            *g = -f;
        }
        if let Some(graph) = &self.graph {
            if self.config.spatial {
                let off = lay.psi.start;
                let mut pairwise = 0.0;
                for &(a, b) in graph.edges() {
                    let d = psi[a] - psi[b];
                    pairwise += d * d;
                    grad[off + a] -= d;
                    grad[off + b] += d;
                }
                let sum: f64 = psi.iter().sum();
                let sd = self.config.soft_sum_sd_per_area * l as f64;
                t.icar = -0.5 * pairwise + normal_lpdf(sum, 0.0, sd);
                let gs = -sum / (sd * sd);
                for g in &mut grad[lay.psi.clone()] {
                    *g += gs;
                }
            }
        }
        let gamma: Vec<f64> = if psi.is_empty() {
            phi.iter().map(|f| sigma_g * f).collect()
        } else {
            phi.iter().zip(psi).map(|(f, s)| sigma_g * (f * w_phi + s * w_psi)).collect()
        };

        let (large_eff, sigma_eta) = match lay.sigma_eta {
            Some(i) => {
                let z = theta[i];
                let s = z.exp();
                let (st, gz) = scale_prior_term(z, self.config.scale_prior);
                t.sigma_eta = st;
                grad[i] = gz;
                let eta = &theta[lay.eta.clone()];
                for (g, &e) in grad[lay.eta.clone()].iter_mut().zip(eta) {
                    t.eta += -0.5 * e * e - LN_SQRT_2PI;
                    *g = -e;
                }
                (eta.iter().map(|e| e * s).collect::<Vec<_>>(), s)
            }
            None => (vec![0.0; lay.n_large], 0.0),
        };

        // likelihood
        let d = &self.data;
        let mut g_small = vec![0.0; l];
        let mut g_large = vec![0.0; lay.n_large];
        let mut g_beta = vec![0.0; p];
        let mut floor_hits = 0;
        for i in 0..d.len() {
            let j = d.large_area[i];
            let sa = d.small_area[i];
            let x = d.x.row(i);
            let mu = d.corrections[j].log_offset + large_eff[j] + gamma[sa] + crate::math::dot(x, &beta);
            let (mut ll, mut g) = mixture_term(mu, d.y[i], self.log_theta1[j], self.theta1[j]);
            if ll < LOG_FLOOR {
                ll = LOG_FLOOR;
                g = 0.0;
                floor_hits += 1;
            }
            t.likelihood += ll;
            g_small[sa] += g;
            g_large[j] += g;
            for (gb, &xk) in g_beta.iter_mut().zip(x) {
                *gb += g * xk;
            }
        }

        for k in 0..p {
            let u = theta[lay.aux_b.start + k];
            grad[lay.aux_a.start + k] += g_beta[k] * (-0.5 * u).exp();
            grad[lay.aux_b.start + k] += -0.5 * beta[k] * g_beta[k];
        }
        let mut d_sigma = 0.0;
        let mut d_v = 0.0;
        for s in 0..l {
            let gs = g_small[s];
            if gs == 0.0 {
                continue;
            }
            grad[lay.phi.start + s] += gs * sigma_g * w_phi;
            if !psi.is_empty() {
                grad[lay.psi.start + s] += gs * sigma_g * w_psi;
                // d/dv of sqrt(1-λ) and sqrt(λ/s) with λ = inv_logit(v)
                d_v += gs
                    * sigma_g
                    * (-0.5 * phi[s] * lambda * w_phi + 0.5 * psi[s] * (1.0 - lambda) * w_psi);
            }
            d_sigma += gs * gamma[s];
        }
        grad[lay.sigma_gamma] += d_sigma;
        if let Some(i) = lay.lambda {
            grad[i] += d_v;
        }
        if let Some(i) = lay.sigma_eta {
            let eta = &theta[lay.eta.clone()];
            let mut dz = 0.0;
            for j in 0..lay.n_large {
                grad[lay.eta.start + j] += g_large[j] * sigma_eta;
                dz += g_large[j] * eta[j] * sigma_eta;
            }
            grad[i] += dz;
        }

        let log_density = t.total();
        if !log_density.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let culprit = t.first_non_finite().unwrap_or("gradient");
            return Err(Error::Model(format!("non-finite log-density in {culprit}")));
        }
        Ok(Evaluation { log_density, terms: t, floor_hits })
    }

    /// Constrained parameters plus derived `beta` and `gamma` for one position.
    pub fn constrained_row(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (params, _) = constrain(theta, &self.layout)?;
        Ok(params.to_output_row(&self.layout, self.scaling))
    }

    /// Inverse of [`Bym2Model::constrained_row`]: parameters from a draw row.
    pub fn params_from_row(&self, row: &[f64]) -> Result<ModelParams> {
        let lay = &self.layout;
        let expected = lay.dim + lay.p + lay.n_small;
        if row.len() != expected {
            return Err(Error::Model(format!("draw row has {} values, expected {expected}", row.len())));
        }
        // constrained values sit at the same offsets as their unconstrained counterparts
        Ok(ModelParams {
            aux_a: row[lay.aux_a.clone()].to_vec(),
            aux_b: row[lay.aux_b.clone()].to_vec(),
            phi: row[lay.phi.clone()].to_vec(),
            psi: row[lay.psi.clone()].to_vec(),
            lambda: lay.lambda.map_or(0.0, |i| row[i]),
            sigma_gamma: row[lay.sigma_gamma],
            eta: row[lay.eta.clone()].to_vec(),
            sigma_eta: lay.sigma_eta.map_or(0.0, |i| row[i]),
        })
    }

    /// Expected label `θ₁ ρ` of every observation.
    pub fn expected_labels(&self, params: &ModelParams) -> Vec<f64> {
        let d = &self.data;
        self.linear_predictor(params)
            .iter()
            .zip(&d.large_area)
            .map(|(&mu, &j)| self.theta1[j] * inv_logit(mu))
            .collect()
    }
}

impl LogDensity for Bym2Model {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.log_posterior(position, grad).map(|e| e.log_density)
    }

    fn param_names(&self) -> Vec<String> {
        self.layout.output_names()
    }

    fn constrained(&self, position: &[f64]) -> Vec<f64> {
        self.constrained_row(position).unwrap_or_else(|_| vec![f64::NAN; self.param_names().len()])
    }
}
