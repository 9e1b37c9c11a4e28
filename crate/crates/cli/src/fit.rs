//! `fit`: config → data → model → chains → tables and manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use ccbym2::data::{load_dataset, prepare, unstandardize_coefficients, Formula, SamplingCorrection, StandardizationInfo};
use ccbym2::diagnostics::{diagnose, summarize, GateStatus};
use ccbym2::draws_io::write_chains;
use ccbym2::graph::scaling_factor;
use ccbym2::math::{mean, quantile_sorted, sorted};
use ccbym2::posterior::Bym2Model;
use ccbym2::predict::{residual_by_area, residual_draws, residual_morans_i, CoefficientDraws};
use ccbym2::sampler::{run_chains, ChainDraws};
use serde::{Deserialize, Serialize};

use crate::config::{self, Loaded, RunConfig};
use crate::manifest::{hash_files, Manifest};
use crate::tables::{self, diagnostic_rows, gate_lines, write_rows};
use crate::{Classify, Failure, FitArgs, Outcome};

/// Draws used for residual tables; longer runs are thinned evenly.
const RESIDUAL_DRAWS: usize = 1000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionDetail {
    pub large_area: String,
    #[serde(flatten)]
    pub correction: SamplingCorrection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDetail {
    pub chain: usize,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub warmup_divergences: usize,
    pub divergences: usize,
}

/// What `predict` needs to interpret the draws of a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDetails {
    pub n_chains: usize,
    pub terms: Vec<String>,
    pub design_names: Vec<String>,
    /// Intercept range is stored as 1..1 so that the JSON stays finite.
    pub standardization: StandardizationInfo,
    pub small_areas: Vec<String>,
    pub large_areas: Vec<String>,
    pub n_obs: usize,
    pub dropped_rows: usize,
    pub corrections: Vec<CorrectionDetail>,
    pub scaling_factor: Option<f64>,
    pub gate: GateStatus,
    pub divergences: usize,
    pub chains: Vec<ChainDetail>,
    pub residual_morans_i: Option<[f64; 3]>,
}

#[derive(Debug, Serialize)]
struct CoefficientRow<'a> {
    term: &'a str,
    mean_standardized: f64,
    mean: f64,
    sd: f64,
    q05: f64,
    q95: f64,
}

#[derive(Debug, Serialize)]
struct ResidualRow<'a> {
    area: &'a str,
    n_obs: usize,
    observed_cases: usize,
    residual: Option<f64>,
    gamma_mean: f64,
    prob_gamma_positive: f64,
}

fn apply_overrides(cfg: &mut RunConfig, args: &FitArgs) {
    let s = &mut cfg.sampler;
    s.seed = args.seed.unwrap_or(s.seed);
    s.n_chains = args.chains.unwrap_or(s.n_chains);
    s.n_iter = args.iter.unwrap_or(s.n_iter);
    s.n_warmup = args.warmup.unwrap_or(s.n_warmup);
    s.thin = args.thin.unwrap_or(s.thin);
    if args.no_gate {
        cfg.gate.enforce = false;
    }
}

fn raw_coefficients<'a>(draws: &'a CoefficientDraws, info: &StandardizationInfo) -> anyhow::Result<Vec<CoefficientRow<'a>>> {
    let raw: Vec<Vec<f64>> = draws
        .beta
        .iter()
        .map(|b| unstandardize_coefficients(b, info))
        .collect::<Result<_, _>>()?;
    Ok(draws
        .names
        .iter()
        .enumerate()
        .map(|(k, term)| {
            let col: Vec<f64> = raw.iter().map(|r| r[k]).collect();
            let s = sorted(&col);
            let m = mean(&col);
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (col.len().max(2) - 1) as f64;
            CoefficientRow {
                term,
                mean_standardized: mean(&draws.beta.iter().map(|b| b[k]).collect::<Vec<_>>()),
                mean: m,
                sd: var.sqrt(),
                q05: quantile_sorted(&s, 0.05),
                q95: quantile_sorted(&s, 0.95),
            }
        })
        .collect())
}

/// Evenly spaced rows from the pooled draws, at most `limit` of them.
fn thinned_rows(chains: &[ChainDraws], limit: usize) -> Vec<&[f64]> {
    let all: Vec<&[f64]> = chains.iter().flat_map(|c| c.draws.iter().map(Vec::as_slice)).collect();
    if all.len() <= limit {
        return all;
    }
    (0..limit).map(|k| all[k * all.len() / limit]).collect()
}

pub fn run(args: &FitArgs) -> Outcome {
    let total = Instant::now();
    let mut cfg: Loaded<RunConfig> = config::load(&args.config).config()?;
    apply_overrides(&mut cfg.value, args);
    cfg.validate().config()?;
    let c = &cfg.value;
    let formula = Formula::parse(&c.data.terms()).config()?;
    let prevalence = c.prevalence.prevalence().config()?;
    let out = args.out.clone().unwrap_or_else(|| cfg.resolve(&c.output_dir));
    std::fs::create_dir_all(&out).runtime()?;

    let mut inputs: Vec<PathBuf> = vec![cfg.path.clone(), cfg.resolve(&c.data.path)];
    let graph = match &c.graph {
        Some(g) => {
            let path = g.path.as_ref().map(|p| cfg.resolve(p));
            let roster = g.roster.as_ref().map(|p| cfg.resolve(p));
            let (graph, files) = crate::graph::load(path.as_deref(), roster.as_deref(), g.lattice).runtime()?;
            inputs.extend(files);
            Some(graph)
        }
        None => None,
    };

    let loaded = load_dataset(&cfg.resolve(&c.data.path), &c.data.schema()).runtime()?;
    if loaded.dropped > 0 {
        log::info!("dropped {} incomplete rows", loaded.dropped);
    }
    let roster = graph.as_ref().map(|g| g.names().to_vec());
    let prepared = prepare(&loaded.records, &formula, roster.as_deref(), &prevalence, c.prevalence.mode).runtime()?;
    let scaling = match (&graph, c.model.spatial) {
        (Some(g), true) => Some(scaling_factor(g).runtime()?.value()),
        _ => None,
    };
    let model = Bym2Model::new(prepared.data.clone(), graph.clone(), c.model.clone()).runtime()?;
    log::info!(
        "{} observations, {} small areas, {} large areas, {} parameters",
        prepared.data.len(),
        prepared.small_areas.len(),
        prepared.large_areas.len(),
        model.layout().dim
    );

    let sampling = Instant::now();
    let mut chains = Vec::with_capacity(c.sampler.n_chains);
    for (k, r) in run_chains(&model, &c.sampler).runtime()?.into_iter().enumerate() {
        chains.push(r.map_err(|e| Failure::Runtime(anyhow!("chain {}: {e}", k + 1)))?);
    }
    let sampling_seconds = sampling.elapsed().as_secs_f64();

    let mut outputs = write_chains(&out, &chains).runtime()?;
    let summary = summarize(&chains).runtime()?;
    outputs.push(write_rows(&out.join(tables::SUMMARY), &summary).runtime()?);
    let thresholds = c.gate.thresholds();
    let report = diagnose(&chains, &thresholds).runtime()?;
    outputs.push(write_rows(&out.join(tables::DIAGNOSTICS), &diagnostic_rows(&report.params, &thresholds)).runtime()?);

    let design_names = prepared.data.x.names().to_vec();
    let coef = CoefficientDraws::from_chains(&chains, &design_names).runtime()?;
    let coef_rows = raw_coefficients(&coef, &prepared.standardization).runtime()?;
    outputs.push(write_rows(&out.join("coefficients.csv"), &coef_rows).runtime()?);

    let residual_moran = write_residuals(&model, &chains, prepared.small_areas.names(), &out, &mut outputs)?;

    let mut standardization = prepared.standardization.clone();
    standardization.min[0] = 1.0;
    standardization.max[0] = 1.0;
    let details = FitDetails {
        n_chains: chains.len(),
        terms: c.data.terms(),
        design_names,
        standardization,
        small_areas: prepared.small_areas.names().to_vec(),
        large_areas: prepared.large_areas.names().to_vec(),
        n_obs: prepared.data.len(),
        dropped_rows: loaded.dropped,
        corrections: prepared
            .large_areas
            .names()
            .iter()
            .zip(&prepared.data.corrections)
            .map(|(n, c)| CorrectionDetail { large_area: n.clone(), correction: *c })
            .collect(),
        scaling_factor: scaling,
        gate: report.status,
        divergences: report.divergences,
        chains: chains
            .iter()
            .map(|ch| ChainDetail {
                chain: ch.chain + 1,
                step_size: ch.step_size,
                inv_mass: ch.inv_mass.clone(),
                warmup_divergences: ch.warmup_divergences,
                divergences: ch.divergences(),
            })
            .collect(),
        residual_morans_i: residual_moran,
    };

    let effective = serde_json::to_value(c).runtime()?;
    let mut manifest = Manifest::new("fit", &cfg.text, effective, c.sampler.seed);
    manifest.inputs = hash_files(inputs.iter().map(PathBuf::as_path), None).runtime()?;
    manifest.outputs = hash_files(outputs.iter().map(PathBuf::as_path), Some(&out)).runtime()?;
    manifest.details = serde_json::to_value(&details).runtime()?;
    manifest.timings = serde_json::json!({
        "chains": chains.iter().map(|ch| serde_json::json!({
            "chain": ch.chain + 1,
            "warmup_seconds": ch.warmup_seconds,
            "sampling_seconds": ch.sampling_seconds,
        })).collect::<Vec<_>>(),
        "sampling_wall_seconds": sampling_seconds,
        "total_seconds": total.elapsed().as_secs_f64(),
    });
    manifest.write(&out).runtime()?;

    report_status(&out, &details, &report.params, &thresholds);
    if report.status == GateStatus::Fail && c.gate.enforce {
        let worst = gate_lines(&report.params, &thresholds, 1).join("");
        return Err(Failure::Gate(format!("R-hat above {} ({worst})", thresholds.fail_rhat)));
    }
    Ok(())
}

fn report_status(out: &Path, d: &FitDetails, params: &[ccbym2::diagnostics::ParamDiagnostics], t: &ccbym2::diagnostics::GateThresholds) {
    let status = match d.gate {
        GateStatus::Pass => "pass",
        GateStatus::Warn => "warn",
        GateStatus::Fail => "fail",
    };
    println!("wrote {}", out.display());
    println!("gate: {status}; divergences: {}", d.divergences);
    for line in gate_lines(params, t, 10) {
        println!("  {line}");
    }
    if let Some([m, lo, hi]) = d.residual_morans_i {
        println!("residual Moran's I: {m:.4} [{lo:.4}, {hi:.4}]");
    }
}

/// Writes `residuals.csv` when there are several small areas and returns the
/// posterior mean and 90% interval of the residual Moran's I when a graph exists.
fn write_residuals(
    model: &Bym2Model,
    chains: &[ChainDraws],
    area_names: &[String],
    out: &Path,
    outputs: &mut Vec<PathBuf>,
) -> Outcome<Option<[f64; 3]>> {
    let d = model.data();
    if d.n_small < 2 {
        return Ok(None);
    }
    let rows = thinned_rows(chains, RESIDUAL_DRAWS);
    let mut fitted = Vec::with_capacity(rows.len());
    let mut gamma = Vec::with_capacity(rows.len());
    let gamma_start = model.layout().dim + model.layout().p;
    for r in &rows {
        let params = model.params_from_row(r).runtime()?;
        fitted.push(model.expected_labels(&params));
        gamma.push(r[gamma_start..].to_vec());
    }
    let table = residual_by_area(&d.y, &fitted, &d.small_area, &gamma, d.n_small).runtime()?;
    let named: Vec<ResidualRow> = table
        .iter()
        .map(|a| ResidualRow {
            area: &area_names[a.area],
            n_obs: a.n_obs,
            observed_cases: a.observed_cases,
            residual: a.residual,
            gamma_mean: a.gamma_mean,
            prob_gamma_positive: a.prob_gamma_positive,
        })
        .collect();
    outputs.push(write_rows(&out.join(tables::RESIDUALS), &named).runtime()?);
    let Some(graph) = model.graph() else { return Ok(None) };
    let res = residual_draws(&d.y, &fitted, &d.small_area, d.n_small).runtime()?;
    let observed = res[0].iter().filter(|v| !v.is_nan()).count();
    if observed < 3 {
        return Ok(None);
    }
    let i = residual_morans_i(&res, graph).runtime()?;
    let s = sorted(&i);
    Ok(Some([mean(&i), quantile_sorted(&s, 0.05), quantile_sorted(&s, 0.95)]))
}
