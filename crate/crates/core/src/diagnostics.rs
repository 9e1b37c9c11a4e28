//! Convergence diagnostics over multi-chain draws: split, rank-normalized and
//! folded R̂; bulk, tail, mean, sd and median ESS; quantile ESS; rank histograms.
//!
//! All functions take one parameter as `chains × iterations`.

use serde::{Deserialize, Serialize};

use crate::math::{mean, normal_quantile, quantile_sorted, sorted, variance};
use crate::sampler::ChainDraws;
use crate::{Error, Result};

fn check_shape(chains: &[Vec<f64>], min_total: usize) -> Result<usize> {
    let n = chains.first().map_or(0, Vec::len);
    if chains.is_empty() || chains.iter().any(|c| c.len() != n) {
        return Err(Error::Diagnostics("chains must be non-empty and of equal length".into()));
    }
    if n * chains.len() < min_total {
        return Err(Error::Diagnostics(format!("need at least {min_total} draws, got {}", n * chains.len())));
    }
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Diagnostics("non-finite draws".into()));
    }
    Ok(n)
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|&v| v == first)
}

/// Splits every chain into two halves, dropping the middle draw of odd-length chains.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let n = c.len();
        if n < 2 {
            out.push(c.clone());
            continue;
        }
        let half = n / 2;
        out.push(c[..half].to_vec());
        out.push(c[n - half..].to_vec());
    }
    out
}

/// Potential scale reduction of already split chains.
fn rhat_of(chains: &[Vec<f64>]) -> Result<f64> {
    if is_constant(chains) {
        return Err(Error::Diagnostics("zero variance".into()));
    }
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| variance(c)).collect::<Vec<_>>());
    let b = n * variance(&means);
    if !(w > 0.0) {
        return Err(Error::Diagnostics("zero within-chain variance".into()));
    }
    Ok(((w * (n - 1.0) / n + b / n) / w).sqrt())
}

/// Classic split-chain R̂.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_shape(chains, 4)?;
    rhat_of(&split_chains(chains))
}

/// Replaces every draw by the normal score of its pooled fractional rank
/// `(r - 3/8) / (S + 1/4)`, ties getting their average rank.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let ranks = pooled_ranks(chains);
    let s = ranks.iter().map(Vec::len).sum::<usize>() as f64;
    ranks
        .into_iter()
        .map(|c| c.into_iter().map(|r| normal_quantile((r - 0.375) / (s + 0.25))).collect())
        .collect()
}

/// Average ranks (1-based) over all draws, in the input layout.
fn pooled_ranks(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = chains.iter().flatten().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]));
    let mut rank = vec![0.0; flat.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && flat[order[j + 1]] == flat[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let mut at = 0;
    chains
        .iter()
        .map(|c| {
            let r = rank[at..at + c.len()].to_vec();
            at += c.len();
            r
        })
        .collect()
}

/// Split R̂ of the rank-normalized draws.
pub fn rank_normalized_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_shape(chains, 4)?;
    let split = split_chains(chains);
    if is_constant(&split) {
        return Err(Error::Diagnostics("zero variance".into()));
    }
    rhat_of(&rank_normalize(&split))
}

fn fold(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let med = quantile_sorted(&sorted(&all), 0.5);
    chains.iter().map(|c| c.iter().map(|v| (v - med).abs()).collect()).collect()
}

/// Split R̂ of rank-normalized `|x - median(x)|`; sensitive to differences in scale.
pub fn folded_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_shape(chains, 4)?;
    let split = split_chains(chains);
    let folded = fold(&split);
    if is_constant(&folded) {
        return Err(Error::Diagnostics("zero variance".into()));
    }
    rhat_of(&rank_normalize(&folded))
}

/// Lag-`lag` autocovariance with the `1/n` denominator.
fn autocov(c: &[f64], m: f64, lag: usize) -> f64 {
    let n = c.len();
    (0..n - lag).map(|i| (c[i] - m) * (c[i + lag] - m)).sum::<f64>() / n as f64
}

/// ESS of (already transformed and split) chains via Geyer's initial
/// monotone sequence on the combined autocorrelation.
fn ess_of(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    let n = chains[0].len();
    if n < 3 {
        return Err(Error::Diagnostics("too few draws per chain".into()));
    }
    if is_constant(chains) {
        return Err(Error::Diagnostics("zero variance".into()));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let mean_acov = |lag: usize| chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, lag)).sum::<f64>() / m as f64;
    let mean_var = mean_acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += variance(&means);
    }
    if !(var_plus > 0.0) {
        return Err(Error::Diagnostics("zero variance".into()));
    }
    let rho_at = |lag: usize| 1.0 - (mean_var - mean_acov(lag)) / var_plus;

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut t = 0;
    while t + 5 < n && !(even + odd).is_nan() && even + odd > 0.0 {
        t += 2;
        even = rho_at(t);
        odd = rho_at(t + 1);
        if even + odd >= 0.0 {
            rho[t] = even;
            rho[t + 1] = odd;
        }
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t] = even;
    }
    let mut t = 0;
    while t + 4 <= max_t {
        t += 2;
        if rho[t] + rho[t + 1] > rho[t - 2] + rho[t - 1] {
            rho[t] = (rho[t - 2] + rho[t - 1]) / 2.0;
            rho[t + 1] = rho[t];
        }
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t]).max(1.0 / total.log10());
    Ok(total / tau)
}

/// Which ESS to compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EssKind {
    /// Rank-normalized split chains.
    Bulk,
    /// Minimum of the 5% and 95% quantile ESS.
    Tail,
    /// Raw split chains.
    Mean,
    /// Minimum of the mean ESS of `x` and of `(x - mean)^2`.
    Sd,
    /// Indicator `x <= q-quantile`.
    Quantile(f64),
}

pub fn ess(chains: &[Vec<f64>], kind: EssKind) -> Result<f64> {
    check_shape(chains, 8)?;
    let split = split_chains(chains);
    match kind {
        EssKind::Bulk => {
            if is_constant(&split) {
                return Err(Error::Diagnostics("zero variance".into()));
            }
            ess_of(&rank_normalize(&split))
        }
        EssKind::Tail => Ok(quantile_ess(&split, 0.05)?.min(quantile_ess(&split, 0.95)?)),
        EssKind::Mean => ess_of(&split),
        EssKind::Sd => {
            let mu = mean(&split.iter().flatten().copied().collect::<Vec<_>>());
            let sq: Vec<Vec<f64>> = split.iter().map(|c| c.iter().map(|v| (v - mu).powi(2)).collect()).collect();
            Ok(ess_of(&split)?.min(ess_of(&sq)?))
        }
        EssKind::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Diagnostics(format!("quantile {q} outside [0, 1]")));
            }
            quantile_ess(&split, q)
        }
    }
}

fn quantile_ess(split: &[Vec<f64>], q: f64) -> Result<f64> {
    let all: Vec<f64> = split.iter().flatten().copied().collect();
    let cut = quantile_sorted(&sorted(&all), q);
    let ind: Vec<Vec<f64>> = split.iter().map(|c| c.iter().map(|&v| f64::from(u8::from(v <= cut))).collect()).collect();
    ess_of(&ind)
}

/// Quantile ESS at each probability in `probs`.
pub fn quantile_ess_curve(chains: &[Vec<f64>], probs: &[f64]) -> Vec<(f64, f64)> {
    probs
        .iter()
        .map(|&q| (q, ess(chains, EssKind::Quantile(q)).unwrap_or(f64::NAN)))
        .collect()
}

/// Per-chain counts of pooled ranks in `bins` equal-width bins.
pub fn rank_histogram(chains: &[Vec<f64>], bins: usize) -> Vec<Vec<usize>> {
    let ranks = pooled_ranks(chains);
    let s = ranks.iter().map(Vec::len).sum::<usize>() as f64;
    ranks
        .iter()
        .map(|c| {
            let mut counts = vec![0; bins.max(1)];
            for r in c {
                let b = (((r - 1.0) / s) * bins as f64).floor() as usize;
                counts[b.min(bins.saturating_sub(1))] += 1;
            }
            counts
        })
        .collect()
}

/// R̂ thresholds for the convergence gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateThresholds {
    pub fail_rhat: f64,
    pub warn_rhat: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds { fail_rhat: 1.05, warn_rhat: 1.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDiagnostics {
    pub name: String,
    pub rhat_classic: f64,
    pub rhat_rank_normalized: f64,
    pub rhat_folded: f64,
    /// Largest of the three variants (NaN only if all are undefined).
    pub rhat_max: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
    pub ess_mean: f64,
    pub ess_sd: f64,
    pub ess_median: f64,
    /// Filled for parameters that trip the warn threshold or have bulk ESS below 400.
    pub quantile_ess: Option<Vec<(f64, f64)>>,
    /// Why a statistic is NaN, or estimator warnings.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticReport {
    pub params: Vec<ParamDiagnostics>,
    pub divergences: usize,
    pub n_chains: usize,
    pub n_kept: usize,
    pub status: GateStatus,
}

/// Probabilities of the quantile-ESS curve.
pub const CURVE_PROBS: [f64; 19] = [
    0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95,
];

/// All diagnostics for one parameter.
pub fn diagnose_param(name: &str, chains: &[Vec<f64>], thresholds: &GateThresholds) -> ParamDiagnostics {
    let mut notes = Vec::new();
    let mut take = |label: &str, r: Result<f64>| match r {
        Ok(v) => v,
        Err(e) => {
            notes.push(format!("{label}: {}", e.to_string().trim_start_matches("diagnostics: ")));
            f64::NAN
        }
    };
    let rhat_classic = take("rhat_classic", split_rhat(chains));
    let rhat_rank_normalized = take("rhat_rank_normalized", rank_normalized_rhat(chains));
    let rhat_folded = take("rhat_folded", folded_rhat(chains));
    let ess_bulk = take("ess_bulk", ess(chains, EssKind::Bulk));
    let ess_tail = take("ess_tail", ess(chains, EssKind::Tail));
    let ess_mean = take("ess_mean", ess(chains, EssKind::Mean));
    let ess_sd = take("ess_sd", ess(chains, EssKind::Sd));
    let ess_median = take("ess_median", ess(chains, EssKind::Quantile(0.5)));
    let rhat_max = [rhat_classic, rhat_rank_normalized, rhat_folded]
        .into_iter()
        .filter(|v| !v.is_nan())
        .fold(f64::NAN, f64::max);
    let total = chains.iter().map(Vec::len).sum::<usize>() as f64;
    for (label, v) in [("ess_bulk", ess_bulk), ("ess_tail", ess_tail), ("ess_mean", ess_mean), ("ess_sd", ess_sd), ("ess_median", ess_median)] {
        if v > 1.5 * total {
            notes.push(format!("{label} {v:.0} exceeds 1.5x the {total:.0} draws"));
        }
    }
    let flagged = rhat_max > thresholds.warn_rhat || ess_bulk < 400.0;
    ParamDiagnostics {
        name: name.to_string(),
        rhat_classic,
        rhat_rank_normalized,
        rhat_folded,
        rhat_max,
        ess_bulk,
        ess_tail,
        ess_mean,
        ess_sd,
        ess_median,
        quantile_ess: flagged.then(|| quantile_ess_curve(chains, &CURVE_PROBS)),
        notes,
    }
}

/// Gate status from the headline R̂ values. Undefined R̂ (constant draws) does
/// not fail the gate.
pub fn gate(params: &[ParamDiagnostics], thresholds: &GateThresholds) -> GateStatus {
    params.iter().fold(GateStatus::Pass, |acc, p| {
        let s = if p.rhat_max > thresholds.fail_rhat {
            GateStatus::Fail
        } else if p.rhat_max > thresholds.warn_rhat {
            GateStatus::Warn
        } else {
            GateStatus::Pass
        };
        acc.max(s)
    })
}

/// Parameter `k` of every chain, as `chains × kept`.
pub fn param_chains(chains: &[ChainDraws], k: usize) -> Vec<Vec<f64>> {
    chains.iter().map(|c| c.column(k)).collect()
}

pub fn diagnose(chains: &[ChainDraws], thresholds: &GateThresholds) -> Result<DiagnosticReport> {
    let first = chains.first().ok_or_else(|| Error::Diagnostics("no chains".into()))?;
    if chains.iter().any(|c| c.param_names != first.param_names) {
        return Err(Error::Diagnostics("chains disagree on parameter names".into()));
    }
    let params: Vec<ParamDiagnostics> = first
        .param_names
        .iter()
        .enumerate()
        .map(|(k, name)| diagnose_param(name, &param_chains(chains, k), thresholds))
        .collect();
    Ok(DiagnosticReport {
        status: gate(&params, thresholds),
        divergences: chains.iter().map(ChainDraws::divergences).sum(),
        n_chains: chains.len(),
        n_kept: first.n_kept(),
        params,
    })
}

/// Posterior summary of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub q05: f64,
    pub q95: f64,
    pub rhat_max: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
}

pub fn summarize_param(name: &str, chains: &[Vec<f64>]) -> ParamSummary {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = sorted(&all);
    let rhat_max = [split_rhat(chains), rank_normalized_rhat(chains), folded_rhat(chains)]
        .into_iter()
        .filter_map(|r| r.ok())
        .fold(f64::NAN, f64::max);
    ParamSummary {
        name: name.to_string(),
        mean: mean(&all),
        sd: variance(&all).sqrt(),
        median: quantile_sorted(&s, 0.5),
        q05: quantile_sorted(&s, 0.05),
        q95: quantile_sorted(&s, 0.95),
        rhat_max,
        ess_bulk: ess(chains, EssKind::Bulk).unwrap_or(f64::NAN),
        ess_tail: ess(chains, EssKind::Tail).unwrap_or(f64::NAN),
    }
}

pub fn summarize(chains: &[ChainDraws]) -> Result<Vec<ParamSummary>> {
    let first = chains.first().ok_or_else(|| Error::Diagnostics("no chains".into()))?;
    if first.n_kept() == 0 {
        return Err(Error::Diagnostics("no kept draws".into()));
    }
    Ok(first
        .param_names
        .iter()
        .enumerate()
        .map(|(k, name)| summarize_param(name, &param_chains(chains, k)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn split_drops_middle_of_odd_chains() {
        let s = split_chains(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        assert_eq!(s, vec![vec![1.0, 2.0], vec![4.0, 5.0]]);
    }

    #[test]
    fn split_rhat_hand_example() {
        // halves [0,1,2,3] and [10,11,12,13]: W = 5/3, B = 4 * 50 = 200
        let x = vec![vec![0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]];
        let w: f64 = 5.0 / 3.0;
        let b = 200.0;
        let expect = ((w * 3.0 / 4.0 + b / 4.0) / w).sqrt();
        assert_relative_eq!(split_rhat(&x).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn constant_draws_are_undefined() {
        let x = vec![vec![2.0; 10], vec![2.0; 10]];
        assert!(split_rhat(&x).is_err());
        assert!(folded_rhat(&x).is_err());
        assert!(ess(&x, EssKind::Bulk).is_err());
        let d = diagnose_param("c", &x, &GateThresholds::default());
        assert!(d.rhat_max.is_nan());
        assert!(!d.notes.is_empty());
    }

    #[test]
    fn rank_normalize_hand_example() {
        let x = vec![vec![3.0, 1.0, 4.0, 1.0, 5.0]];
        let z = rank_normalize(&x);
        let ranks = [3.0, 1.5, 4.0, 1.5, 5.0];
        for (zi, r) in z[0].iter().zip(ranks) {
            let p: f64 = (r - 0.375) / 5.25;
            let expect = statrs::distribution::ContinuousCDF::inverse_cdf(
                &statrs::distribution::Normal::new(0.0, 1.0).unwrap(),
                p,
            );
            assert_relative_eq!(*zi, expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn rank_histogram_counts_everything() {
        let x = vec![(0..40).map(f64::from).collect::<Vec<_>>(), (40..80).map(f64::from).collect()];
        let h = rank_histogram(&x, 4);
        assert_eq!(h[0], vec![20, 20, 0, 0]);
        assert_eq!(h[1], vec![0, 0, 20, 20]);
    }

    #[test]
    fn gate_levels() {
        let mk = |r: f64| ParamDiagnostics {
            name: "a".into(),
            rhat_classic: r,
            rhat_rank_normalized: r,
            rhat_folded: r,
            rhat_max: r,
            ess_bulk: 1000.0,
            ess_tail: 1000.0,
            ess_mean: 1000.0,
            ess_sd: 1000.0,
            ess_median: 1000.0,
            quantile_ess: None,
            notes: vec![],
        };
        let t = GateThresholds::default();
        assert_eq!(gate(&[mk(1.0)], &t), GateStatus::Pass);
        assert_eq!(gate(&[mk(1.0), mk(1.02)], &t), GateStatus::Warn);
        assert_eq!(gate(&[mk(1.02), mk(1.2)], &t), GateStatus::Fail);
        assert_eq!(gate(&[mk(f64::NAN)], &t), GateStatus::Pass);
    }
}
