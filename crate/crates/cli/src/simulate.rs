//! `simulate`: the simulation study with tidy per-row output.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::anyhow;
use ccbym2::simulation::{run_simulation, run_study, trend_summary, SimModel, StudyConfig, StudyRow, TrendRow, QUANTITIES};
use serde::{Deserialize, Serialize};

use crate::config::{self, Loaded};
use crate::manifest::{hash_files, Manifest};
use crate::tables::{self, write_rows, write_rows_or_header};
use crate::{Classify, Failure, Outcome, SimulateArgs};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub study: StudyConfig,
}

#[derive(Debug, Serialize)]
struct QuantityTrend<'a> {
    quantity: &'a str,
    model: String,
    pi_lower: f64,
    pi_upper: f64,
    n_sims: usize,
    mean_bias: f64,
    mean_rmse_paper: f64,
}

impl<'a> QuantityTrend<'a> {
    fn new(quantity: &'a str, r: TrendRow) -> Self {
        QuantityTrend {
            quantity,
            model: r.model,
            pi_lower: r.pi_lower,
            pi_upper: r.pi_upper,
            n_sims: r.n_sims,
            mean_bias: r.mean_bias,
            mean_rmse_paper: r.mean_rmse_paper,
        }
    }
}

#[derive(Debug, Serialize)]
struct FailureRow<'a> {
    sim: usize,
    error: &'a str,
}

/// Trend rows per prevalence stage, one block per quantity.
fn trends(rows: &[StudyRow], study: &StudyConfig) -> Vec<QuantityTrend<'static>> {
    let mut out = Vec::new();
    for q in QUANTITIES {
        for stage in &study.pi_stages {
            out.extend(trend_summary(rows, q, stage).into_iter().map(|row| QuantityTrend::new(q, row)));
        }
    }
    out
}

pub fn run(args: &SimulateArgs) -> Outcome {
    let total = Instant::now();
    let cfg: Loaded<SimulateFile> = config::load(&args.config).config()?;
    let mut study = cfg.value.study.clone();
    study.seed = args.seed.unwrap_or(study.seed);
    study.n_sims = args.n_sims.unwrap_or(study.n_sims);
    study.validate().config()?;
    let boxed = study.build_models();
    let models: Vec<&dyn SimModel> = boxed.iter().map(|b| b.as_ref()).collect();

    if let Some(sim) = args.replay {
        if sim >= study.n_sims {
            return Err(Failure::Config(anyhow!("replay index {sim} is not below n_sims = {}", study.n_sims)));
        }
        let (rows, attempts, failure) = run_simulation(&study, &models, sim);
        if let Some(e) = failure {
            return Err(Failure::Runtime(anyhow!("simulation {sim} failed after {attempts} attempts: {e}")));
        }
        let mut w = csv::Writer::from_writer(std::io::stdout());
        for r in &rows {
            w.serialize(r).runtime()?;
        }
        w.flush().runtime()?;
        return Ok(());
    }

    let out = args.out.clone().unwrap_or_else(|| cfg.resolve(&cfg.value.output_dir));
    std::fs::create_dir_all(&out).runtime()?;
    let results = run_study(&study, &models).runtime()?;
    let mut outputs = vec![write_rows(&out.join(tables::STUDY), &results.rows).runtime()?];
    outputs.push(write_rows(&out.join(tables::TREND), &trends(&results.rows, &study)).runtime()?);
    let failures: Vec<FailureRow> = results.failures.iter().map(|(sim, e)| FailureRow { sim: *sim, error: e }).collect();
    outputs.push(write_rows_or_header(&out.join(tables::FAILURES), &failures, &["sim", "error"]).runtime()?);

    let effective = serde_json::to_value(&study).runtime()?;
    let mut m = Manifest::new("simulate", &cfg.text, effective, study.seed);
    m.inputs = hash_files([cfg.path.as_path()], None).runtime()?;
    m.outputs = hash_files(outputs.iter().map(PathBuf::as_path), Some(&out)).runtime()?;
    m.details = serde_json::json!({
        "rows": results.rows.len(),
        "redraws": results.redraws,
        "failed_simulations": results.failures.len(),
    });
    m.timings = serde_json::json!({ "total_seconds": total.elapsed().as_secs_f64() });
    m.write(&out).runtime()?;

    println!(
        "{} simulations, {} rows, {} failed; wrote {}",
        study.n_sims,
        results.rows.len(),
        results.failures.len(),
        out.display()
    );
    Ok(())
}
