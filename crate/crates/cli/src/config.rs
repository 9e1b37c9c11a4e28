//! Run configuration read from a single TOML file.
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ccbym2::data::{CorrectionMode, Prevalence, Schema};
use ccbym2::diagnostics::GateThresholds;
use ccbym2::posterior::ModelConfig;
use ccbym2::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub label: String,
    #[serde(default)]
    pub small_area: Option<String>,
    #[serde(default)]
    pub large_area: Option<String>,
    pub covariates: Vec<String>,
    /// Design terms; defaults to the covariates as main effects.
    #[serde(default)]
    pub formula: Option<Vec<String>>,
    #[serde(default = "comma")]
    pub delimiter: char,
}

fn comma() -> char {
    ','
}

impl DataSection {
    pub fn schema(&self) -> Schema {
        Schema {
            label: self.label.clone(),
            small_area: self.small_area.clone(),
            large_area: self.large_area.clone(),
            covariates: self.covariates.clone(),
            delimiter: self.delimiter,
        }
    }

    pub fn terms(&self) -> Vec<String> {
        self.formula.clone().unwrap_or_else(|| self.covariates.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    /// `idA,idB` edge list.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Node order; ids must match the small-area column.
    #[serde(default)]
    pub roster: Option<PathBuf>,
    /// `[rows, cols]` lattice with ids `1..=rows*cols`.
    #[serde(default)]
    pub lattice: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrevalenceSection {
    #[serde(default)]
    pub global: Option<f64>,
    #[serde(default)]
    pub per_area: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub mode: CorrectionMode,
}

impl PrevalenceSection {
    pub fn prevalence(&self) -> Result<Prevalence> {
        let p = match (&self.global, &self.per_area) {
            (Some(p), None) => Prevalence::Global(*p),
            (None, Some(m)) => Prevalence::PerArea(m.clone()),
            _ => bail!("prevalence: give exactly one of 'global' or 'per_area'"),
        };
        let values: Vec<f64> = match &p {
            Prevalence::Global(v) => vec![*v],
            Prevalence::PerArea(m) => m.values().copied().collect(),
        };
        ensure!(values.iter().all(|v| *v > 0.0 && *v < 1.0), "prevalence: values must lie in (0, 1)");
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub fail_rhat: f64,
    pub warn_rhat: f64,
    /// Exit with code 3 when the gate fails.
    pub enforce: bool,
}

impl Default for GateSection {
    fn default() -> Self {
        let t = GateThresholds::default();
        GateSection { fail_rhat: t.fail_rhat, warn_rhat: t.warn_rhat, enforce: true }
    }
}

impl GateSection {
    pub fn thresholds(&self) -> GateThresholds {
        GateThresholds { fail_rhat: self.fail_rhat, warn_rhat: self.warn_rhat }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// Covariates enumerated at 0 and 1.
    pub binary: Vec<String>,
    /// Covariates enumerated on an integer grid of this many points over
    /// their observed range.
    pub grid: BTreeMap<String, usize>,
    /// `"average"` or a small-area id.
    pub area: String,
    /// Covariate names of the relative-deprivation table, if wanted.
    pub education: Option<String>,
    pub low_status: Option<String>,
    pub population: f64,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            binary: Vec::new(),
            grid: BTreeMap::new(),
            area: "average".into(),
            education: None,
            low_status: None,
            population: 100_000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub graph: Option<GraphSection>,
    pub prevalence: PrevalenceSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub gate: GateSection,
    #[serde(default)]
    pub predict: PredictSection,
    pub output_dir: PathBuf,
}

/// A parsed config with its verbatim text and base directory.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub value: T,
    pub text: String,
    pub path: PathBuf,
    pub base: PathBuf,
}

impl<T> Loaded<T> {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

pub fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Loaded<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let value = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { value, text, path: path.to_path_buf(), base })
}

impl Loaded<RunConfig> {
    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        let c = &self.value;
        ensure!(!c.data.covariates.is_empty(), "data: at least one covariate is required");
        ensure!(self.resolve(&c.data.path).is_file(), "data: file {} not found", self.resolve(&c.data.path).display());
        match &c.graph {
            None => ensure!(!c.model.spatial, "graph: model.spatial = true needs a [graph] section"),
            Some(g) => {
                match (&g.path, &g.lattice) {
                    (Some(p), None) => ensure!(self.resolve(p).is_file(), "graph: file {} not found", self.resolve(p).display()),
                    (None, Some([r, k])) => ensure!(r * k >= 2, "graph: lattice needs at least two areas"),
                    _ => bail!("graph: give exactly one of 'path' or 'lattice'"),
                }
                if let Some(r) = &g.roster {
                    ensure!(g.path.is_some(), "graph: a roster only applies to an edge-list file");
                    ensure!(self.resolve(r).is_file(), "graph: roster {} not found", self.resolve(r).display());
                }
                ensure!(c.data.small_area.is_some(), "data: a graph needs a small_area column");
            }
        }
        c.prevalence.prevalence()?;
        c.sampler.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        ensure!(c.gate.warn_rhat <= c.gate.fail_rhat, "gate: warn_rhat must not exceed fail_rhat");
        ensure!(c.model.soft_sum_sd_per_area > 0.0, "model: soft_sum_sd_per_area must be positive");
        ensure!(c.model.intercept_scale > 0.0 && c.model.slope_scale > 0.0, "model: prior scales must be positive");
        ensure!(c.predict.population > 0.0, "predict: population must be positive");
        Ok(())
    }
}
