//! CSV output tables.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ccbym2::diagnostics::{GateStatus, GateThresholds, ParamDiagnostics};
use serde::Serialize;

pub const SUMMARY: &str = "summary.csv";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const RESIDUALS: &str = "residuals.csv";
pub const PROFILES: &str = "profiles.csv";
pub const SCENARIOS: &str = "scenarios.csv";
pub const STUDY: &str = "study.csv";
pub const TREND: &str = "trend.csv";
pub const FAILURES: &str = "failures.csv";

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<PathBuf> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    for r in rows {
        w.serialize(r).with_context(|| format!("cannot write {}", path.display()))?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

/// Writes a header-only file when there are no rows.
pub fn write_rows_or_header<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<PathBuf> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
        w.write_record(header)?;
        w.flush()?;
        return Ok(path.to_path_buf());
    }
    write_rows(path, rows)
}

#[derive(Debug, Serialize)]
pub struct DiagnosticRow<'a> {
    pub name: &'a str,
    pub rhat_classic: f64,
    pub rhat_rank_normalized: f64,
    pub rhat_folded: f64,
    pub rhat_max: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
    pub ess_mean: f64,
    pub ess_sd: f64,
    pub ess_median: f64,
    pub status: GateStatus,
    pub notes: String,
}

pub fn diagnostic_rows<'a>(params: &'a [ParamDiagnostics], t: &GateThresholds) -> Vec<DiagnosticRow<'a>> {
    params
        .iter()
        .map(|p| DiagnosticRow {
            name: &p.name,
            rhat_classic: p.rhat_classic,
            rhat_rank_normalized: p.rhat_rank_normalized,
            rhat_folded: p.rhat_folded,
            rhat_max: p.rhat_max,
            ess_bulk: p.ess_bulk,
            ess_tail: p.ess_tail,
            ess_mean: p.ess_mean,
            ess_sd: p.ess_sd,
            ess_median: p.ess_median,
            status: ccbym2::diagnostics::gate(std::slice::from_ref(p), t),
            notes: p.notes.join("; "),
        })
        .collect()
}

/// One line per gate-relevant problem, worst first, at most `limit` lines.
pub fn gate_lines(params: &[ParamDiagnostics], t: &GateThresholds, limit: usize) -> Vec<String> {
    let mut flagged: Vec<&ParamDiagnostics> = params.iter().filter(|p| p.rhat_max > t.warn_rhat).collect();
    flagged.sort_by(|a, b| b.rhat_max.total_cmp(&a.rhat_max));
    flagged
        .iter()
        .take(limit)
        .map(|p| format!("{}: rhat {:.3}, bulk ESS {:.0}", p.name, p.rhat_max, p.ess_bulk))
        .collect()
}
