//! `predict`: ranked profile predictions from the draws of a fit.

use std::path::PathBuf;

use anyhow::{anyhow, ensure, Result};
use ccbym2::data::Formula;
use ccbym2::draws_io::{chain_file_name, read_chain};
use ccbym2::predict::{
    age_grid, average_values, enumerate_profiles, rank_profiles, relative_deprivation_scenarios, AreaAssumption,
    CoefficientDraws, CovariateLevels, ProfilePrediction,
};
use serde::Serialize;

use crate::config::{self, Loaded, RunConfig};
use crate::fit::FitDetails;
use crate::manifest::{hash_files, Manifest};
use crate::tables::{self, write_rows};
use crate::{Classify, Failure, Outcome, PredictArgs};

#[derive(Debug, Serialize)]
struct ScenarioRow {
    education: u8,
    low_status: u8,
    logit_effect: f64,
    logit_effect_lower: f64,
    logit_effect_upper: f64,
    relative_odds: f64,
    relative_odds_lower: f64,
    relative_odds_upper: f64,
    expected_count: f64,
    expected_count_lower: f64,
    expected_count_upper: f64,
}

/// Fails with "manifest mismatch" unless the draws were written by `fit`
/// with a model that uses the same design as this config.
fn check_manifest(manifest: &Manifest, details: &FitDetails, formula: &Formula) -> Result<()> {
    ensure!(manifest.command == "fit", "manifest mismatch: draws were written by '{}', not 'fit'", manifest.command);
    ensure!(
        formula.column_names() == details.design_names,
        "manifest mismatch: config design {:?} differs from the fitted design {:?}",
        formula.column_names(),
        details.design_names
    );
    Ok(())
}

fn levels(cfg: &RunConfig, details: &FitDetails) -> Result<Vec<CovariateLevels>> {
    let p = &cfg.predict;
    for name in p.binary.iter().chain(p.grid.keys()) {
        ensure!(cfg.data.covariates.contains(name), "predict: '{name}' is not a covariate");
    }
    let info = &details.standardization;
    let mut out = Vec::new();
    // enumeration follows the covariate order of the data section
    for name in &cfg.data.covariates {
        if p.binary.contains(name) {
            ensure!(!p.grid.contains_key(name), "predict: '{name}' is both binary and on a grid");
            out.push(CovariateLevels::Binary(name.clone()));
        } else if let Some(&n) = p.grid.get(name) {
            let j = info
                .names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| anyhow!("predict: '{name}' is not a main effect of the design"))?;
            out.push(CovariateLevels::Grid(name.clone(), age_grid(info.min[j], info.max[j], n)?));
        }
    }
    ensure!(!out.is_empty(), "predict: list covariates under 'binary' or 'grid'");
    Ok(out)
}

fn profile_header(covariates: &[String]) -> Vec<String> {
    let mut h = vec!["rank".to_string()];
    h.extend(covariates.iter().cloned());
    for s in ["area", "probability", "probability_lower", "probability_upper", "log_odds", "log_odds_lower", "log_odds_upper"] {
        h.push(s.into());
    }
    for s in ["relative_odds", "relative_odds_lower", "relative_odds_upper", "rate", "warnings"] {
        h.push(s.into());
    }
    h
}

fn write_profiles(path: &std::path::Path, ranked: &[ProfilePrediction], covariates: &[String], areas: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(profile_header(covariates))?;
    for (k, r) in ranked.iter().enumerate() {
        let mut rec = vec![(k + 1).to_string()];
        rec.extend(covariates.iter().map(|c| r.profile.values[c].to_string()));
        rec.push(match r.profile.area {
            AreaAssumption::Average => "average".to_string(),
            AreaAssumption::Small(l) => areas[l].clone(),
        });
        for i in [r.probability, r.log_odds, r.relative_odds] {
            rec.extend([i.point, i.lower, i.upper].map(|v| v.to_string()));
        }
        rec.push(r.rate());
        rec.push(r.warnings.join("; "));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &PredictArgs) -> Outcome {
    let cfg: Loaded<RunConfig> = config::load(&args.config).config()?;
    let c = &cfg.value;
    let formula = Formula::parse(&c.data.terms()).config()?;
    let manifest = Manifest::read(&args.draws).runtime()?;
    let details: FitDetails = serde_json::from_value(manifest.details.clone())
        .map_err(|e| Failure::Runtime(anyhow!("manifest mismatch: fit details unreadable ({e})")))?;
    check_manifest(&manifest, &details, &formula).config()?;
    let chain_files: Vec<String> = (0..details.n_chains).map(chain_file_name).collect();
    manifest.verify_outputs(&args.draws, |p| chain_files.iter().any(|f| f == p)).config()?;

    let chains = (0..details.n_chains)
        .map(|k| read_chain(&args.draws.join(chain_file_name(k)), k))
        .collect::<Result<Vec<_>, _>>()
        .runtime()?;
    let draws = CoefficientDraws::from_chains(&chains, &details.design_names).runtime()?;
    let info = &details.standardization;

    let area = match c.predict.area.as_str() {
        "average" => AreaAssumption::Average,
        id => match details.small_areas.iter().position(|a| a == id) {
            Some(l) => AreaAssumption::Small(l),
            None => return Err(Failure::Config(anyhow!("predict: unknown small area '{id}'"))),
        },
    };
    let levels = levels(c, &details).config()?;
    let base = average_values(&formula, info);
    let mut profiles = enumerate_profiles(&levels).config()?;
    for p in &mut profiles {
        let mut values = base.clone();
        values.extend(std::mem::take(&mut p.values));
        p.values = values;
        p.area = area;
    }
    let ranked = rank_profiles(&draws, &profiles, &formula, info).runtime()?;
    let shown: Vec<String> = c.data.covariates.iter().filter(|n| base.contains_key(*n)).cloned().collect();

    std::fs::create_dir_all(&args.out).runtime()?;
    let mut outputs = vec![args.out.join(tables::PROFILES)];
    write_profiles(&outputs[0], &ranked, &shown, &details.small_areas).runtime()?;

    if let (Some(e), Some(l)) = (&c.predict.education, &c.predict.low_status) {
        let scen = relative_deprivation_scenarios(&draws, &formula, info, e, l, c.predict.population).runtime()?;
        let rows: Vec<ScenarioRow> = scen
            .iter()
            .map(|s| ScenarioRow {
                education: u8::from(s.education),
                low_status: u8::from(s.low_status),
                logit_effect: s.logit_effect.point,
                logit_effect_lower: s.logit_effect.lower,
                logit_effect_upper: s.logit_effect.upper,
                relative_odds: s.relative_odds.point,
                relative_odds_lower: s.relative_odds.lower,
                relative_odds_upper: s.relative_odds.upper,
                expected_count: s.expected_count.point,
                expected_count_lower: s.expected_count.lower,
                expected_count_upper: s.expected_count.upper,
            })
            .collect();
        outputs.push(write_rows(&args.out.join(tables::SCENARIOS), &rows).runtime()?);
    } else if c.predict.education.is_some() != c.predict.low_status.is_some() {
        return Err(Failure::Config(anyhow!("predict: 'education' and 'low_status' go together")));
    }

    let warned = ranked.iter().filter(|r| !r.warnings.is_empty()).count();
    if warned > 0 {
        log::warn!("{warned} profiles lie outside the observed covariate range");
    }
    let effective = serde_json::to_value(c).runtime()?;
    let mut m = Manifest::new("predict", &cfg.text, effective, manifest.seed);
    let chain_paths: Vec<PathBuf> = chain_files.iter().map(|f| args.draws.join(f)).collect();
    let mut inputs = vec![cfg.path.clone(), args.draws.join(crate::manifest::MANIFEST)];
    inputs.extend(chain_paths);
    m.inputs = hash_files(inputs.iter().map(PathBuf::as_path), None).runtime()?;
    m.outputs = hash_files(outputs.iter().map(PathBuf::as_path), Some(&args.out)).runtime()?;
    m.details = serde_json::json!({ "profiles": ranked.len(), "draws": draws.n_draws(), "out_of_support": warned });
    m.write(&args.out).runtime()?;

    for (k, r) in ranked.iter().take(5).enumerate() {
        let desc: Vec<String> = shown.iter().map(|n| format!("{n}={}", r.profile.values[n])).collect();
        println!("{:>2}. {} {}", k + 1, r.rate(), desc.join(" "));
    }
    println!("wrote {} profiles to {}", ranked.len(), args.out.display());
    Ok(())
}

