//! Posterior predictions for covariate profiles, relative-deprivation
//! scenarios and area-level residuals.
//!
//! Profile predictions remove the sampling offset: they are propensities in
//! the population, not in the case-control sample.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Formula, StandardizationInfo, Term};
use crate::graph::{morans_i, AdjacencyGraph};
use crate::math::{dot, inv_logit, logit, mean, quantile_sorted_step, sorted};
use crate::sampler::ChainDraws;
use crate::{Error, Result};

/// Lower and upper probabilities of the reported central interval.
pub const INTERVAL: (f64, f64) = (0.05, 0.95);

/// Coefficient and small-area effect draws pooled over chains.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientDraws {
    /// Design column names, intercept first.
    pub names: Vec<String>,
    /// Draws × coefficients, on the standardized scale.
    pub beta: Vec<Vec<f64>>,
    /// Draws × small areas; empty if the fit had no `gamma` columns.
    pub gamma: Vec<Vec<f64>>,
}

impl CoefficientDraws {
    /// Collects `beta[k]` and `gamma[l]` columns from chain output.
    pub fn from_chains(chains: &[ChainDraws], design_names: &[String]) -> Result<Self> {
        let first = chains.first().ok_or_else(|| Error::Predict("no chains".into()))?;
        let col = |name: &str| first.param_names.iter().position(|n| n == name);
        let beta_cols: Vec<usize> = (1..=design_names.len())
            .map(|k| col(&format!("beta[{k}]")).ok_or_else(|| Error::Predict(format!("draws lack beta[{k}]"))))
            .collect::<Result<_>>()?;
        let gamma_cols: Vec<usize> = (1..).map_while(|l| col(&format!("gamma[{l}]"))).collect();
        let mut beta = Vec::new();
        let mut gamma = Vec::new();
        for c in chains {
            if c.param_names != first.param_names {
                return Err(Error::Predict("chains disagree on parameter names".into()));
            }
            for row in &c.draws {
                beta.push(beta_cols.iter().map(|&k| row[k]).collect());
                if !gamma_cols.is_empty() {
                    gamma.push(gamma_cols.iter().map(|&k| row[k]).collect());
                }
            }
        }
        Ok(CoefficientDraws { names: design_names.to_vec(), beta, gamma })
    }

    pub fn n_draws(&self) -> usize {
        self.beta.len()
    }
}

/// Which area effects enter a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AreaAssumption {
    /// All area effects zero.
    #[default]
    Average,
    /// Add the effect of this small area (0-based).
    Small(usize),
}

/// A covariate configuration on the raw scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub values: BTreeMap<String, f64>,
    pub area: AreaAssumption,
}

/// How a covariate enters profile enumeration.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateLevels {
    Binary(String),
    Grid(String, Vec<f64>),
}

/// `n` evenly spaced values from `min` to `max`, rounded to integers.
pub fn age_grid(min: f64, max_observed: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 || !(max_observed >= min) {
        return Err(Error::Predict(format!("bad age grid: {n} points on [{min}, {max_observed}]")));
    }
    if n == 1 {
        return Ok(vec![min.round()]);
    }
    let step = (max_observed - min) / (n - 1) as f64;
    Ok((0..n).map(|k| (min + step * k as f64).round()).collect())
}

/// Cartesian product of the covariate levels; the last covariate varies fastest.
pub fn enumerate_profiles(levels: &[CovariateLevels]) -> Result<Vec<Profile>> {
    let mut axes: Vec<(&str, Vec<f64>)> = Vec::with_capacity(levels.len());
    for l in levels {
        match l {
            CovariateLevels::Binary(name) => axes.push((name, vec![0.0, 1.0])),
            CovariateLevels::Grid(name, grid) if !grid.is_empty() => axes.push((name, grid.clone())),
            CovariateLevels::Grid(name, _) => {
                return Err(Error::Predict(format!("covariate '{name}' is not binary and has no grid")))
            }
        }
    }
    let mut out = vec![BTreeMap::new()];
    for (name, vals) in axes {
        out = out
            .into_iter()
            .flat_map(|m| {
                vals.iter().map(move |&v| {
                    let mut m = m.clone();
                    m.insert(name.to_string(), v);
                    m
                })
            })
            .collect();
    }
    Ok(out.into_iter().map(|values| Profile { values, area: AreaAssumption::Average }).collect())
}

/// Raw covariate values at their sample means for every main effect of `formula`.
pub fn average_values(formula: &Formula, info: &StandardizationInfo) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for t in &formula.terms {
        if let Term::Main(name) = t {
            if let Some(j) = info.names.iter().position(|n| n == name) {
                out.insert(name.clone(), info.mean[j]);
            }
        }
    }
    out
}

/// Central interval and point summary on one scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

fn step_interval(draws: &[f64], point: f64) -> Interval {
    let s = sorted(draws);
    Interval { point, lower: quantile_sorted_step(&s, INTERVAL.0), upper: quantile_sorted_step(&s, INTERVAL.1) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePrediction {
    pub profile: Profile,
    /// Per-draw log-odds without offset.
    pub logit: Vec<f64>,
    /// Posterior mean probability with the interval mapped from `log_odds`.
    pub probability: Interval,
    /// `logit(probability.point)` with the per-draw log-odds interval.
    pub log_odds: Interval,
    /// Per-draw odds relative to the average profile (median and interval).
    pub relative_odds: Interval,
    /// `round(probability * 10000)`.
    pub rate_per_10000: u64,
    pub warnings: Vec<String>,
}

impl ProfilePrediction {
    /// Rate in the "k/10000" display format.
    pub fn rate(&self) -> String {
        format!("{}/10000", self.rate_per_10000)
    }
}

fn standardized_row(profile: &Profile, formula: &Formula, info: &StandardizationInfo, names: &[String]) -> Result<(Vec<f64>, bool)> {
    let raw = formula.row(&profile.values).map_err(|e| Error::Predict(e.to_string()))?;
    if formula.column_names() != names || info.names != names {
        return Err(Error::Predict("formula, standardization and draws disagree on columns".into()));
    }
    Ok((info.apply(&raw), info.within_support(&raw)))
}

fn area_effect(draws: &CoefficientDraws, area: AreaAssumption, s: usize) -> Result<f64> {
    match area {
        AreaAssumption::Average => Ok(0.0),
        AreaAssumption::Small(l) => draws
            .gamma
            .get(s)
            .and_then(|g| g.get(l))
            .copied()
            .ok_or_else(|| Error::Predict(format!("no effect draws for small area {}", l + 1))),
    }
}

/// Offset-free posterior prediction for one profile. Profiles outside the
/// observed covariate ranges are still computed, with a warning.
pub fn predict_profile(
    draws: &CoefficientDraws,
    profile: &Profile,
    formula: &Formula,
    info: &StandardizationInfo,
) -> Result<ProfilePrediction> {
    if draws.n_draws() == 0 {
        return Err(Error::Predict("no draws".into()));
    }
    let (x, inside) = standardized_row(profile, formula, info, &draws.names)?;
    let mut warnings = Vec::new();
    if !inside {
        warnings.push("profile lies outside the observed covariate range".to_string());
    }
    let logit_draws: Vec<f64> = draws
        .beta
        .iter()
        .enumerate()
        .map(|(s, b)| Ok(dot(&x, b) + area_effect(draws, profile.area, s)?))
        .collect::<Result<_>>()?;
    // the average profile is the standardized zero vector, so its log-odds are the intercept
    let rel: Vec<f64> = logit_draws.iter().zip(&draws.beta).map(|(l, b)| (l - b[0]).exp()).collect();
    let p_mean = mean(&logit_draws.iter().map(|&l| inv_logit(l)).collect::<Vec<_>>());
    let log_odds = step_interval(&logit_draws, logit(p_mean));
    let probability = Interval { point: p_mean, lower: inv_logit(log_odds.lower), upper: inv_logit(log_odds.upper) };
    let rel_sorted = sorted(&rel);
    let relative_odds = step_interval(&rel, quantile_sorted_step(&rel_sorted, 0.5));
    Ok(ProfilePrediction {
        profile: profile.clone(),
        logit: logit_draws,
        probability,
        log_odds,
        relative_odds,
        rate_per_10000: (p_mean * 10_000.0).round() as u64,
        warnings,
    })
}

/// Predicts every profile and sorts by probability, highest first. Ties keep
/// enumeration order.
pub fn rank_profiles(
    draws: &CoefficientDraws,
    profiles: &[Profile],
    formula: &Formula,
    info: &StandardizationInfo,
) -> Result<Vec<ProfilePrediction>> {
    let mut out = profiles
        .iter()
        .map(|p| predict_profile(draws, p, formula, info))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.probability.point.total_cmp(&a.probability.point));
    Ok(out)
}

/// One cell of the education × status scenario table.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub education: bool,
    pub low_status: bool,
    /// Per-draw log-odds minus the average-profile log-odds.
    pub logit_effect: Interval,
    pub relative_odds: Interval,
    /// Expected recruits if all `population` people shared this profile.
    pub expected_count: Interval,
}

/// The four combinations of `education` and `low_status` with every other
/// covariate at its mean. The design must contain both main effects and
/// their interaction.
pub fn relative_deprivation_scenarios(
    draws: &CoefficientDraws,
    formula: &Formula,
    info: &StandardizationInfo,
    education: &str,
    low_status: &str,
    population: f64,
) -> Result<Vec<Scenario>> {
    let has = |name: String| draws.names.contains(&name);
    for main in [education, low_status] {
        if !has(main.to_string()) {
            return Err(Error::Predict(format!("design lacks '{main}'")));
        }
    }
    if !has(format!("{education}:{low_status}")) && !has(format!("{low_status}:{education}")) {
        return Err(Error::Predict(format!("design lacks the interaction {education}:{low_status}")));
    }
    let base = average_values(formula, info);
    let mut out = Vec::with_capacity(4);
    for (e, l) in [(false, false), (false, true), (true, false), (true, true)] {
        let mut values = base.clone();
        values.insert(education.to_string(), f64::from(u8::from(e)));
        values.insert(low_status.to_string(), f64::from(u8::from(l)));
        let profile = Profile { values, area: AreaAssumption::Average };
        let (x, _) = standardized_row(&profile, formula, info, &draws.names)?;
        let effect: Vec<f64> = draws.beta.iter().map(|b| dot(&x, b) - b[0]).collect();
        let rel: Vec<f64> = effect.iter().map(|v| v.exp()).collect();
        let count: Vec<f64> = draws.beta.iter().zip(&effect).map(|(b, v)| population * inv_logit(b[0] + v)).collect();
        let med = |v: &[f64]| quantile_sorted_step(&sorted(v), 0.5);
        out.push(Scenario {
            education: e,
            low_status: l,
            logit_effect: step_interval(&effect, med(&effect)),
            relative_odds: step_interval(&rel, med(&rel)),
            expected_count: step_interval(&count, mean(&count)),
        });
    }
    Ok(out)
}

/// Residual summary for one small area.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaResidual {
    pub area: usize,
    pub n_obs: usize,
    pub observed_cases: usize,
    /// Mean over draws of the within-area mean of `y - ŷ`; `None` without observations.
    pub residual: Option<f64>,
    pub gamma_mean: f64,
    pub prob_gamma_positive: f64,
}

/// Per-draw area means of `y - ŷ` (draws × areas, NaN where an area is empty).
pub fn residual_draws(y: &[u8], fitted: &[Vec<f64>], small_area: &[usize], n_small: usize) -> Result<Vec<Vec<f64>>> {
    if small_area.len() != y.len() || fitted.iter().any(|f| f.len() != y.len()) {
        return Err(Error::Predict("fitted values do not match the observations".into()));
    }
    let mut count = vec![0usize; n_small];
    for &l in small_area {
        count[l] += 1;
    }
    Ok(fitted
        .iter()
        .map(|f| {
            let mut sum = vec![0.0; n_small];
            for i in 0..y.len() {
                sum[small_area[i]] += f64::from(y[i]) - f[i];
            }
            sum.iter().zip(&count).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect()
        })
        .collect())
}

/// Area table from observed labels, fitted expected labels per draw
/// (draws × observations) and small-area effect draws (draws × areas).
pub fn residual_by_area(
    y: &[u8],
    fitted: &[Vec<f64>],
    small_area: &[usize],
    gamma: &[Vec<f64>],
    n_small: usize,
) -> Result<Vec<AreaResidual>> {
    if fitted.is_empty() {
        return Err(Error::Predict("no draws".into()));
    }
    if gamma.len() != fitted.len() || gamma.iter().any(|g| g.len() != n_small) {
        return Err(Error::Predict("effect draws do not match the areas".into()));
    }
    let res = residual_draws(y, fitted, small_area, n_small)?;
    let s = fitted.len() as f64;
    Ok((0..n_small)
        .map(|l| {
            let members: Vec<usize> = (0..y.len()).filter(|&i| small_area[i] == l).collect();
            let g: Vec<f64> = gamma.iter().map(|d| d[l]).collect();
            AreaResidual {
                area: l,
                n_obs: members.len(),
                observed_cases: members.iter().filter(|&&i| y[i] == 1).count(),
                residual: (!members.is_empty()).then(|| res.iter().map(|r| r[l]).sum::<f64>() / s),
                gamma_mean: mean(&g),
                prob_gamma_positive: g.iter().filter(|&&v| v > 0.0).count() as f64 / s,
            }
        })
        .collect())
}

/// Posterior distribution of Moran's I of the area residuals: one value per
/// draw, computed on the subgraph of areas with observations.
pub fn residual_morans_i(residuals: &[Vec<f64>], graph: &AdjacencyGraph) -> Result<Vec<f64>> {
    let first = residuals.first().ok_or_else(|| Error::Predict("no draws".into()))?;
    let observed: Vec<usize> = (0..first.len()).filter(|&l| !first[l].is_nan()).collect();
    let sub = if observed.len() == graph.len() { graph.clone() } else { graph.subgraph(&observed)? };
    residuals
        .iter()
        .map(|r| {
            let v: Vec<f64> = observed.iter().map(|&l| r[l]).collect();
            morans_i(&v, &sub)
        })
        .collect()
}
