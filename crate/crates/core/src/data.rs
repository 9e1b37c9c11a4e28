//! Case-control records, design matrices and sampling corrections.
//!
//! Records are read from delimited text with listwise deletion, expanded into
//! a design matrix (intercept first, interactions formed on raw values) and
//! standardized column by column. [`sampling_correction`] derives θ₁ and the
//! log offset of the contaminated case-control design from label counts and
//! the population prevalence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const INTERCEPT: &str = "(Intercept)";

/// One complete record after listwise deletion.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub y: u8,
    pub covariates: BTreeMap<String, f64>,
    pub small_area: String,
    pub large_area: String,
}

/// Column mapping for [`load_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub label: String,
    /// Small-area id column. When absent every record shares one area.
    #[serde(default)]
    pub small_area: Option<String>,
    /// Large-area id column. When absent every record shares one area.
    #[serde(default)]
    pub large_area: Option<String>,
    pub covariates: Vec<String>,
    /// Field delimiter, `,` by default; `\t` for tab separated files.
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, Default)]
pub struct LoadedRecords {
    pub records: Vec<RawRecord>,
    /// Rows removed because a mapped field was missing.
    pub dropped: usize,
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f == "NA"
}

/// Reads delimited records, dropping any row with a missing mapped field.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<LoadedRecords> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(LoadedRecords::default());
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("column '{name}' not found in {}", path.display())))
    };
    let label_col = column(&schema.label)?;
    let small_col = schema.small_area.as_deref().map(column).transpose()?;
    let large_col = schema.large_area.as_deref().map(column).transpose()?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| column(c).map(|i| (c.clone(), i)))
        .collect::<Result<Vec<_>>>()?;

    let mut out = LoadedRecords::default();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let mut mapped = vec![label_col];
        mapped.extend(small_col);
        mapped.extend(large_col);
        mapped.extend(cov_cols.iter().map(|(_, i)| *i));
        if mapped.iter().any(|&i| is_missing(field(i))) {
            out.dropped += 1;
            continue;
        }
        let line = row + 2;
        let y = match field(label_col).trim().parse::<f64>() {
            Ok(v) if v == 0.0 => 0,
            Ok(v) if v == 1.0 => 1,
            _ => {
                return Err(Error::Data(format!(
                    "line {line}: label '{}' is not binary",
                    field(label_col)
                )))
            }
        };
        let mut covariates = BTreeMap::new();
        for (name, i) in &cov_cols {
            let v = field(*i).trim().parse::<f64>().map_err(|_| {
                Error::Data(format!("line {line}: covariate '{name}' = '{}' is not numeric", field(*i)))
            })?;
            covariates.insert(name.clone(), v);
        }
        out.records.push(RawRecord {
            y,
            covariates,
            small_area: small_col.map_or_else(|| "1".to_string(), |i| field(i).trim().to_string()),
            large_area: large_col.map_or_else(|| "1".to_string(), |i| field(i).trim().to_string()),
        });
    }
    Ok(out)
}

/// Main effects plus pairwise interactions, e.g. `["age", "coledu", "coledu:lowstat"]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formula {
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Main(String),
    Interaction(String, String),
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Main(a) => a.clone(),
            Term::Interaction(a, b) => format!("{a}:{b}"),
        }
    }

    /// Evaluates the term on raw covariate values.
    pub fn evaluate(&self, values: &BTreeMap<String, f64>) -> Result<f64> {
        let get = |k: &String| {
            values
                .get(k)
                .copied()
                .ok_or_else(|| Error::Data(format!("unknown term '{k}'")))
        };
        match self {
            Term::Main(a) => get(a),
            Term::Interaction(a, b) => Ok(get(a)? * get(b)?),
        }
    }
}

impl Formula {
    pub fn parse<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        let terms = terms
            .iter()
            .map(|t| {
                let t = t.as_ref().trim();
                match t.split_once(':') {
                    Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
                        Ok(Term::Interaction(a.trim().to_string(), b.trim().to_string()))
                    }
                    Some(_) => Err(Error::Data(format!("malformed interaction '{t}'"))),
                    None if t.is_empty() => Err(Error::Data("empty formula term".into())),
                    None => Ok(Term::Main(t.to_string())),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Formula { terms })
    }

    pub fn column_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT.to_string())
            .chain(self.terms.iter().map(Term::name))
            .collect()
    }

    /// Raw design row (intercept first) for one set of covariate values.
    pub fn row(&self, values: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        std::iter::once(Ok(1.0))
            .chain(self.terms.iter().map(|t| t.evaluate(values)))
            .collect()
    }
}

/// Dense row-major design matrix whose first column is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    names: Vec<String>,
    n: usize,
    values: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, n: usize, values: Vec<f64>) -> Result<Self> {
        let p = names.len();
        if p == 0 {
            return Err(Error::Data("design matrix needs at least one column".into()));
        }
        if names[0] != INTERCEPT || names.iter().skip(1).any(|n| n == INTERCEPT) {
            return Err(Error::Data("intercept column must appear exactly once, first".into()));
        }
        if values.len() != n * p {
            return Err(Error::Data(format!("expected {} values, got {}", n * p, values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("design matrix contains non-finite entries".into()));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != p {
            return Err(Error::Data("duplicate design column names".into()));
        }
        Ok(DesignMatrix { names, n, values })
    }

    /// An intercept-only design for `n` rows.
    pub fn intercept_only(n: usize) -> Self {
        DesignMatrix { names: vec![INTERCEPT.to_string()], n, values: vec![1.0; n] }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.ncols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ncols() + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Expands records into a raw (unstandardized) design matrix.
pub fn build_design(records: &[RawRecord], formula: &Formula) -> Result<DesignMatrix> {
    let names = formula.column_names();
    let unique: BTreeSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(Error::Data("formula produces duplicate column names".into()));
    }
    let mut values = Vec::with_capacity(records.len() * names.len());
    for r in records {
        values.extend(formula.row(&r.covariates)?);
    }
    DesignMatrix::new(names, records.len(), values)
}

/// Per-column centring and scaling. The intercept column has mean 0 and sd 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationInfo {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Observed raw range, used to flag predictions outside the data support.
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl StandardizationInfo {
    pub fn identity(names: Vec<String>) -> Self {
        let p = names.len();
        StandardizationInfo {
            names,
            mean: vec![0.0; p],
            sd: vec![1.0; p],
            min: vec![f64::NEG_INFINITY; p],
            max: vec![f64::INFINITY; p],
        }
    }

    /// Standardizes one raw design row (intercept first).
    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(j, &v)| if j == 0 { v } else { (v - self.mean[j]) / self.sd[j] })
            .collect()
    }

    pub fn invert(&self, standardized: &[f64]) -> Vec<f64> {
        standardized
            .iter()
            .enumerate()
            .map(|(j, &v)| if j == 0 { v } else { v * self.sd[j] + self.mean[j] })
            .collect()
    }

    /// True when every raw value lies in the observed range.
    pub fn within_support(&self, raw: &[f64]) -> bool {
        raw.iter()
            .enumerate()
            .skip(1)
            .all(|(j, &v)| v >= self.min[j] && v <= self.max[j])
    }
}

/// Centres and scales every non-intercept column (sd with `n - 1` denominator).
pub fn standardize(x: &DesignMatrix) -> Result<(DesignMatrix, StandardizationInfo)> {
    let p = x.ncols();
    let n = x.nrows();
    let mut info = StandardizationInfo::identity(x.names.clone());
    for j in 1..p {
        let col = x.column(j);
        let m = crate::math::mean(&col);
        let s = crate::math::sd(&col);
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Data(format!("column '{}' has zero variance", x.names[j])));
        }
        info.mean[j] = m;
        info.sd[j] = s;
        info.min[j] = col.iter().copied().fold(f64::INFINITY, f64::min);
        info.max[j] = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let mut values = Vec::with_capacity(n * p);
    for i in 0..n {
        values.extend(info.apply(x.row(i)));
    }
    Ok((DesignMatrix { names: x.names.clone(), n, values }, info))
}

/// Maps coefficients fitted on standardized columns back to the raw scale.
pub fn unstandardize_coefficients(beta_std: &[f64], info: &StandardizationInfo) -> Result<Vec<f64>> {
    if beta_std.len() != info.mean.len() {
        return Err(Error::Data(format!(
            "coefficient length {} does not match {} design columns",
            beta_std.len(),
            info.mean.len()
        )));
    }
    let mut out = vec![0.0; beta_std.len()];
    let mut intercept = beta_std[0];
    for k in 1..beta_std.len() {
        out[k] = beta_std[k] / info.sd[k];
        intercept -= beta_std[k] * info.mean[k] / info.sd[k];
    }
    out[0] = intercept;
    Ok(out)
}

/// Sampling quantities of the contaminated case-control design for one
/// population (one large area in bird's-eye mode).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingCorrection {
    pub n1: usize,
    pub n_u: usize,
    pub pi: f64,
    /// Pr(labelled case | true case, sampled).
    pub theta1: f64,
    /// Pr(labelled case | true control, sampled); always zero.
    pub theta0: f64,
    /// `log(n1 / (pi * n_u) + 1)`.
    pub log_offset: f64,
}

pub fn sampling_correction(n1: usize, n_u: usize, pi: f64) -> Result<SamplingCorrection> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Data(format!("prevalence {pi} must lie in (0, 1)")));
    }
    if n1 == 0 || n_u == 0 {
        return Err(Error::Data(format!(
            "sampling correction needs at least one case and one unlabelled record (n1 = {n1}, n_u = {n_u})"
        )));
    }
    let n1f = n1 as f64;
    let hidden = pi * n_u as f64;
    Ok(SamplingCorrection {
        n1,
        n_u,
        pi,
        theta1: n1f / (n1f + hidden),
        theta0: 0.0,
        log_offset: (n1f / hidden).ln_1p(),
    })
}

/// Population prevalence, either shared or given per large area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prevalence {
    Global(f64),
    PerArea(BTreeMap<String, f64>),
}

/// Whether each large area gets its own offset (bird's-eye) or one offset is
/// computed from pooled counts (worm's-eye).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    #[default]
    PerLargeArea,
    Global,
}

/// Ordered id registry mapping area names to 0-based indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AreaIndex {
    names: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl AreaIndex {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if lookup.insert(n.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate area id '{n}'")));
            }
        }
        Ok(AreaIndex { names, lookup })
    }

    /// Sorted unique ids.
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = ids.into_iter().collect();
        let names: Vec<String> = set.into_iter().map(str::to_string).collect();
        let lookup = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        AreaIndex { names, lookup }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }
}

/// Everything the log-posterior needs about the observations.
#[derive(Debug, Clone)]
pub struct CaseControlData {
    pub y: Vec<u8>,
    pub x: DesignMatrix,
    /// 0-based small-area index per observation.
    pub small_area: Vec<usize>,
    /// 0-based large-area index per observation.
    pub large_area: Vec<usize>,
    pub n_small: usize,
    pub n_large: usize,
    /// One correction per large area.
    pub corrections: Vec<SamplingCorrection>,
}

impl CaseControlData {
    pub fn new(
        y: Vec<u8>,
        x: DesignMatrix,
        small_area: Vec<usize>,
        n_small: usize,
        large_area: Vec<usize>,
        corrections: Vec<SamplingCorrection>,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || small_area.len() != n || large_area.len() != n {
            return Err(Error::Data("observation vectors have inconsistent lengths".into()));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        let n_large = corrections.len();
        if let Some(&l) = small_area.iter().find(|&&l| l >= n_small) {
            return Err(Error::Data(format!("small-area index {} out of range 1..{n_small}", l + 1)));
        }
        if let Some(&j) = large_area.iter().find(|&&j| j >= n_large) {
            return Err(Error::Data(format!("large-area index {} has no sampling correction", j + 1)));
        }
        Ok(CaseControlData { y, x, small_area, large_area, n_small, n_large, corrections })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn theta1(&self, large: usize) -> f64 {
        self.corrections[large].theta1
    }
}

/// Assembled data plus the registries needed to interpret indices.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub data: CaseControlData,
    pub standardization: StandardizationInfo,
    pub small_areas: AreaIndex,
    pub large_areas: AreaIndex,
}

/// Builds standardized model data from loaded records.
///
/// `small_roster` fixes the small-area order (normally the graph's node
/// list); without it the sorted unique ids in the data are used.
pub fn prepare(
    records: &[RawRecord],
    formula: &Formula,
    small_roster: Option<&[String]>,
    prevalence: &Prevalence,
    mode: CorrectionMode,
) -> Result<PreparedData> {
    if records.is_empty() {
        return Err(Error::Data("no complete records".into()));
    }
    let raw = build_design(records, formula)?;
    let (x, standardization) = standardize(&raw)?;
    let small_areas = match small_roster {
        Some(names) => AreaIndex::new(names.to_vec())?,
        None => AreaIndex::from_ids(records.iter().map(|r| r.small_area.as_str())),
    };
    let large_areas = AreaIndex::from_ids(records.iter().map(|r| r.large_area.as_str()));
    let small_area = records
        .iter()
        .map(|r| {
            small_areas
                .index(&r.small_area)
                .ok_or_else(|| Error::Data(format!("small area '{}' is not in the roster", r.small_area)))
        })
        .collect::<Result<Vec<_>>>()?;
    let large_area: Vec<usize> = records
        .iter()
        .map(|r| large_areas.index(&r.large_area).expect("registry built from records"))
        .collect();
    let y: Vec<u8> = records.iter().map(|r| r.y).collect();

    let pi_for = |name: &str| -> Result<f64> {
        match prevalence {
            Prevalence::Global(p) => Ok(*p),
            Prevalence::PerArea(map) => map
                .get(name)
                .copied()
                .ok_or_else(|| Error::Data(format!("no prevalence given for large area '{name}'"))),
        }
    };
    let corrections = match mode {
        CorrectionMode::PerLargeArea => large_areas
            .names()
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let n1 = (0..y.len()).filter(|&i| large_area[i] == j && y[i] == 1).count();
                let nu = (0..y.len()).filter(|&i| large_area[i] == j && y[i] == 0).count();
                sampling_correction(n1, nu, pi_for(name)?)
                    .map_err(|e| Error::Data(format!("large area '{name}': {e}")))
            })
            .collect::<Result<Vec<_>>>()?,
        CorrectionMode::Global => {
            let pi = match prevalence {
                Prevalence::Global(p) => *p,
                Prevalence::PerArea(_) => {
                    return Err(Error::Data("global correction needs a single prevalence".into()))
                }
            };
            let n1 = y.iter().filter(|&&v| v == 1).count();
            let c = sampling_correction(n1, y.len() - n1, pi)?;
            vec![c; large_areas.len()]
        }
    };
    let data = CaseControlData::new(y, x, small_area, small_areas.len(), large_area, corrections)?;
    Ok(PreparedData { data, standardization, small_areas, large_areas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn schema() -> Schema {
        Schema {
            label: "y".into(),
            small_area: Some("district".into()),
            large_area: Some("country".into()),
            covariates: vec!["age".into(), "married".into()],
            delimiter: ',',
        }
    }

    fn record(y: u8, covs: &[(&str, f64)]) -> RawRecord {
        RawRecord {
            y,
            covariates: covs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            small_area: "a".into(),
            large_area: "A".into(),
        }
    }

    #[test]
    fn listwise_deletion_counts_dropped_rows() {
        let f = write_tmp(
            "y,age,married,district,country\n\
             1,25,1,d1,EG\n0,31,0,d2,EG\n0,,1,d1,EG\n1,44,1,d3,TN\n0,52,0,d2,TN\n\
             0,NA,0,d1,TN\n1,19,0,d3,EG\n0,60,1,d1,EG\n0,38,1,d2,TN\n1,29,0,d3,TN\n",
        );
        let loaded = load_dataset(f.path(), &schema()).unwrap();
        assert_eq!(loaded.records.len(), 8);
        assert_eq!(loaded.dropped, 2);
        assert_eq!(loaded.records[2].covariates["age"], 44.0);
        assert_eq!(loaded.records[2].small_area, "d3");
    }

    #[test]
    fn empty_file_gives_no_records() {
        let f = write_tmp("");
        let loaded = load_dataset(f.path(), &schema()).unwrap();
        assert!(loaded.records.is_empty());
        assert_eq!(loaded.dropped, 0);
    }

    #[test]
    fn tab_delimited_and_error_paths() {
        let f = write_tmp("y\tage\tmarried\tdistrict\tcountry\n1\t20\t0\td\tc\n");
        let mut s = schema();
        s.delimiter = '\t';
        assert_eq!(load_dataset(f.path(), &s).unwrap().records.len(), 1);

        let f = write_tmp("y,age,married,district,country\n2,20,0,d,c\n");
        assert!(matches!(load_dataset(f.path(), &schema()), Err(Error::Data(m)) if m.contains("not binary")));

        let f = write_tmp("y,age,district,country\n1,20,d,c\n");
        assert!(matches!(load_dataset(f.path(), &schema()), Err(Error::Data(m)) if m.contains("married")));

        assert!(matches!(
            load_dataset(Path::new("/nonexistent/file.csv"), &schema()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn interaction_cells_are_products() {
        let f = Formula::parse(&["coledu", "lowstat", "coledu:lowstat"]).unwrap();
        let r1 = record(1, &[("coledu", 1.0), ("lowstat", 1.0)]);
        let r2 = record(0, &[("coledu", 1.0), ("lowstat", 0.0)]);
        let x = build_design(&[r1, r2], &f).unwrap();
        assert_eq!(x.get(0, 3), 1.0);
        assert_eq!(x.get(1, 3), 0.0);
    }

    #[test]
    fn three_record_fixture_matches_hand_expansion() {
        let f = Formula::parse(&["age", "married", "age:married"]).unwrap();
        let recs = [
            record(1, &[("age", 20.0), ("married", 0.0)]),
            record(0, &[("age", 35.0), ("married", 1.0)]),
            record(0, &[("age", 50.0), ("married", 1.0)]),
        ];
        let x = build_design(&recs, &f).unwrap();
        assert_eq!(x.names(), &[INTERCEPT, "age", "married", "age:married"]);
        assert_eq!(x.row(0), &[1.0, 20.0, 0.0, 0.0]);
        assert_eq!(x.row(1), &[1.0, 35.0, 1.0, 35.0]);
        assert_eq!(x.row(2), &[1.0, 50.0, 1.0, 50.0]);
    }

    #[test]
    fn design_errors() {
        let f = Formula::parse(&["age", "height"]).unwrap();
        let recs = [record(1, &[("age", 20.0)])];
        assert!(build_design(&recs, &f).is_err());
        let dup = Formula::parse(&["age", "age"]).unwrap();
        assert!(build_design(&[record(1, &[("age", 1.0)])], &dup).is_err());
        assert!(Formula::parse(&["a:"]).is_err());
    }

    #[test]
    fn standardize_unit_column() {
        let x = DesignMatrix::new(
            vec![INTERCEPT.into(), "v".into()],
            3,
            vec![1.0, 1.0, 1.0, 2.0, 1.0, 3.0],
        )
        .unwrap();
        let (xs, info) = standardize(&x).unwrap();
        let col = xs.column(1);
        assert_relative_eq!(crate::math::mean(&col), 0.0, epsilon = 1e-12);
        assert_relative_eq!(crate::math::sd(&col), 1.0, epsilon = 1e-12);
        assert_eq!(xs.column(0), vec![1.0; 3]);
        assert_eq!(info.mean[1], 2.0);
        // idempotence
        let (xss, _) = standardize(&xs).unwrap();
        for (a, b) in xs.column(1).iter().zip(xss.column(1)) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn standardize_binary_column_against_two_pass_oracle() {
        let raw: Vec<f64> = (0..10).map(|i| if i < 3 { 1.0 } else { 0.0 }).collect();
        let mut vals = Vec::new();
        for v in &raw {
            vals.extend([1.0, *v]);
        }
        let x = DesignMatrix::new(vec![INTERCEPT.into(), "b".into()], 10, vals).unwrap();
        let (xs, _) = standardize(&x).unwrap();
        // two-pass oracle
        let m: f64 = raw.iter().sum::<f64>() / 10.0;
        let ss: f64 = raw.iter().map(|v| (v - m).powi(2)).sum();
        let s = (ss / 9.0).sqrt();
        assert_relative_eq!(xs.get(0, 1), (1.0 - m) / s, epsilon = 1e-14);
        assert_relative_eq!(xs.get(9, 1), (0.0 - m) / s, epsilon = 1e-14);
        assert_relative_eq!(xs.get(9, 1), -0.621_059_5, epsilon = 1e-6);
    }

    #[test]
    fn zero_variance_column_is_rejected_by_name() {
        let x = DesignMatrix::new(vec![INTERCEPT.into(), "flat".into()], 2, vec![1.0, 3.0, 1.0, 3.0])
            .unwrap();
        assert!(matches!(standardize(&x), Err(Error::Data(m)) if m.contains("flat")));
    }

    #[test]
    fn standardization_round_trip() {
        let info = StandardizationInfo {
            names: vec![INTERCEPT.into(), "a".into(), "b".into()],
            mean: vec![0.0, 3.5, -1.0],
            sd: vec![1.0, 2.0, 0.25],
            min: vec![0.0; 3],
            max: vec![0.0; 3],
        };
        let raw = [1.0, 7.25, 0.125];
        let back = info.invert(&info.apply(&raw));
        for (a, b) in raw.iter().zip(back) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampling_correction_examples() {
        let c = sampling_correction(100, 900, 1.0 / 9.0).unwrap();
        assert_relative_eq!(c.theta1, 0.5, epsilon = 1e-15);
        assert_relative_eq!(c.log_offset, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(c.theta0, 0.0);

        let c = sampling_correction(100, 100, 1.0 - 1e-12).unwrap();
        assert_relative_eq!(c.theta1, 0.5, epsilon = 1e-10);
        assert_relative_eq!(c.log_offset, std::f64::consts::LN_2, epsilon = 1e-10);

        let c = sampling_correction(426, 589, 0.002).unwrap();
        let hidden = 0.002 * 589.0;
        assert_relative_eq!(c.theta1, 426.0 / (426.0 + hidden), epsilon = 1e-14);
        assert_relative_eq!(c.theta1, 0.99724, epsilon = 1e-5);
        assert_relative_eq!(c.log_offset, (426.0 / hidden + 1.0).ln(), epsilon = 1e-12);
        assert_relative_eq!(c.log_offset, 5.8935, epsilon = 1e-3);
    }

    #[test]
    fn sampling_correction_errors() {
        assert!(sampling_correction(1, 1, 0.0).is_err());
        assert!(sampling_correction(1, 1, 1.0).is_err());
        assert!(sampling_correction(0, 10, 0.1).is_err());
        assert!(sampling_correction(10, 0, 0.1).is_err());
    }

    #[test]
    fn theta1_and_offset_monotonicity() {
        let pis: Vec<f64> = (1..50).map(|k| k as f64 / 50.0).collect();
        for w in pis.windows(2) {
            let a = sampling_correction(50, 400, w[0]).unwrap();
            let b = sampling_correction(50, 400, w[1]).unwrap();
            assert!(b.theta1 < a.theta1);
            assert!(b.log_offset < a.log_offset);
            assert!(b.log_offset > 0.0);
        }
        for n1 in 1..40 {
            let a = sampling_correction(n1, 300, 0.2).unwrap();
            let b = sampling_correction(n1 + 1, 300, 0.2).unwrap();
            assert!(b.theta1 > a.theta1);
        }
        let tiny = sampling_correction(50, 400, 1e-12).unwrap();
        assert!(tiny.log_offset > 25.0);
    }

    #[test]
    fn unstandardize_examples() {
        let id = StandardizationInfo::identity(vec![INTERCEPT.into(), "a".into()]);
        assert_eq!(unstandardize_coefficients(&[0.3, -1.2], &id).unwrap(), vec![0.3, -1.2]);

        let mut info = StandardizationInfo::identity(vec![INTERCEPT.into(), "a".into()]);
        info.mean[1] = 2.0;
        info.sd[1] = 4.0;
        let b = unstandardize_coefficients(&[1.0, 2.0], &info).unwrap();
        assert_relative_eq!(b[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(b[1], 0.5, epsilon = 1e-15);
        assert!(unstandardize_coefficients(&[1.0], &info).is_err());
    }

    #[test]
    fn prepare_builds_per_area_corrections() {
        let mut recs = Vec::new();
        for i in 0..12 {
            let mut r = record(u8::from(i % 3 == 0), &[("age", 20.0 + i as f64), ("married", (i % 2) as f64)]);
            r.large_area = if i < 6 { "EG".into() } else { "TN".into() };
            r.small_area = format!("d{}", i % 4);
            recs.push(r);
        }
        let f = Formula::parse(&["age", "married"]).unwrap();
        let prev = Prevalence::PerArea([("EG".to_string(), 0.01), ("TN".to_string(), 0.002)].into());
        let p = prepare(&recs, &f, None, &prev, CorrectionMode::PerLargeArea).unwrap();
        assert_eq!(p.data.n_large, 2);
        assert_eq!(p.data.n_small, 4);
        assert_eq!(p.data.corrections[0].n1, 2);
        assert_eq!(p.data.corrections[0].n_u, 4);
        assert_eq!(p.data.corrections[1].pi, 0.002);

        let g = prepare(&recs, &f, None, &Prevalence::Global(0.01), CorrectionMode::Global).unwrap();
        assert_eq!(g.data.corrections[0], g.data.corrections[1]);
        assert_eq!(g.data.corrections[0].n1, 4);

        let roster: Vec<String> = vec!["d0".into(), "d1".into()];
        assert!(prepare(&recs, &f, Some(&roster), &prev, CorrectionMode::PerLargeArea).is_err());
    }
}
