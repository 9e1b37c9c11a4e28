//! `diagnose`: convergence diagnostics for existing draw files.

use std::path::PathBuf;

use anyhow::{anyhow, Result};
use ccbym2::diagnostics::{diagnose, GateStatus, GateThresholds};
use ccbym2::draws_io::{chain_file_name, read_chain};
use ccbym2::sampler::ChainDraws;

use crate::tables::{self, diagnostic_rows, gate_lines, write_rows};
use crate::{Classify, DiagnoseArgs, Failure, Outcome};

/// Reads `chain_1.csv`, `chain_2.csv`, ... until the first gap.
fn read_all(dir: &std::path::Path) -> Result<Vec<ChainDraws>> {
    let mut chains = Vec::new();
    loop {
        let path = dir.join(chain_file_name(chains.len()));
        if !path.is_file() {
            break;
        }
        chains.push(read_chain(&path, chains.len())?);
    }
    if chains.is_empty() {
        return Err(anyhow!("no chain_<k>.csv files in {}", dir.display()));
    }
    Ok(chains)
}

pub fn run(args: &DiagnoseArgs) -> Outcome {
    let t = GateThresholds { fail_rhat: args.fail_rhat, warn_rhat: args.warn_rhat };
    if !(t.warn_rhat <= t.fail_rhat) {
        return Err(Failure::Config(anyhow!("warn_rhat must not exceed fail_rhat")));
    }
    let chains = read_all(&args.draws).runtime()?;
    let report = diagnose(&chains, &t).runtime()?;
    println!(
        "{} chains x {} draws, {} parameters, {} divergences",
        report.n_chains,
        report.n_kept,
        report.params.len(),
        report.divergences
    );
    for line in gate_lines(&report.params, &t, 20) {
        println!("  {line}");
    }
    for p in report.params.iter().filter(|p| !p.notes.is_empty()) {
        println!("  {}: {}", p.name, p.notes.join("; "));
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).runtime()?;
        let path: PathBuf = out.join(tables::DIAGNOSTICS);
        write_rows(&path, &diagnostic_rows(&report.params, &t)).runtime()?;
        println!("wrote {}", path.display());
    }
    match report.status {
        GateStatus::Pass => println!("gate: pass"),
        GateStatus::Warn => println!("gate: warn"),
        GateStatus::Fail => {
            println!("gate: fail");
            let worst = gate_lines(&report.params, &t, 1).join("");
            return Err(Failure::Gate(format!("R-hat above {} ({worst})", t.fail_rhat)));
        }
    }
    Ok(())
}
