//! Datasets, CSV ingestion, dose standardization and reward coding.
//!
//! A [`Dataset`] holds one stage of observations `(X, A, Y)`. Multi-stage
//! studies are stored as a [`StageData`], one `Dataset` per stage, with the
//! stage-`t` reward in the `outcomes` vector of stage `t`.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether larger or smaller outcomes are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    #[default]
    Maximize,
}

impl Direction {
    /// Multiplier mapping raw outcomes onto the internal "larger is better" scale.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Minimize => -1.0,
            Direction::Maximize => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    covariates: Array2<f64>,
    doses: Vec<f64>,
    outcomes: Vec<f64>,
    feature_names: Vec<String>,
    direction: Direction,
}

impl Dataset {
    pub fn new(
        covariates: Array2<f64>,
        doses: Vec<f64>,
        outcomes: Vec<f64>,
        feature_names: Vec<String>,
        direction: Direction,
    ) -> Result<Self> {
        let (n, p) = covariates.dim();
        if n < 2 {
            return Err(Error::InvalidData(format!("need n >= 2 samples, got {n}")));
        }
        if p < 1 {
            return Err(Error::InvalidData("need at least one covariate".into()));
        }
        if doses.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: doses.len(),
            });
        }
        if outcomes.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: outcomes.len(),
            });
        }
        if feature_names.len() != p {
            return Err(Error::Shape {
                expected: p,
                got: feature_names.len(),
            });
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite covariate value".into()));
        }
        if doses.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite dose value".into()));
        }
        if outcomes.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite outcome value".into()));
        }
        Ok(Self {
            covariates: covariates.as_standard_layout().into_owned(),
            doses,
            outcomes,
            feature_names,
            direction,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.doses.len()
    }

    pub fn n_features(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }

    /// Covariate row `i` as a contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_features();
        &self.covariates.as_slice().expect("standard layout")[i * p..(i + 1) * p]
    }

    pub fn column(&self, k: usize) -> ArrayView1<'_, f64> {
        self.covariates.column(k)
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    /// Raw outcomes, as observed.
    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Outcomes on the internal "larger is better" scale.
    pub fn internal_outcomes(&self) -> Vec<f64> {
        let s = self.direction.sign();
        self.outcomes.iter().map(|y| s * y).collect()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn with_outcomes(&self, outcomes: Vec<f64>) -> Result<Self> {
        Self::new(
            self.covariates.clone(),
            self.doses.clone(),
            outcomes,
            self.feature_names.clone(),
            self.direction,
        )
    }

    pub fn with_doses(&self, doses: Vec<f64>) -> Result<Self> {
        Self::new(
            self.covariates.clone(),
            doses,
            self.outcomes.clone(),
            self.feature_names.clone(),
            self.direction,
        )
    }

    /// Subset (or permutation) of rows, in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = self.covariates.select(ndarray::Axis(0), rows);
        Self::new(
            x,
            rows.iter().map(|&i| self.doses[i]).collect(),
            rows.iter().map(|&i| self.outcomes[i]).collect(),
            self.feature_names.clone(),
            self.direction,
        )
    }
}

/// Affine map between the observed dose range and the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseScaler {
    pub a_min: f64,
    pub a_max: f64,
}

impl DoseScaler {
    pub fn new(a_min: f64, a_max: f64) -> Result<Self> {
        if !(a_min.is_finite() && a_max.is_finite()) {
            return Err(Error::Domain("dose bounds must be finite".into()));
        }
        if a_min >= a_max {
            return Err(Error::DegenerateDose(a_min));
        }
        Ok(Self { a_min, a_max })
    }

    pub fn identity() -> Self {
        Self {
            a_min: 0.0,
            a_max: 1.0,
        }
    }

    pub fn scale(&self, a: f64) -> f64 {
        (a - self.a_min) / (self.a_max - self.a_min)
    }

    pub fn unscale(&self, u: f64) -> f64 {
        self.a_min + u * (self.a_max - self.a_min)
    }
}

/// Maps doses onto `[0, 1]`. Doses already inside the unit interval are kept
/// as they are, with the identity scaler.
pub fn standardize_doses(ds: &Dataset) -> Result<(Dataset, DoseScaler)> {
    let lo = ds.doses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ds.doses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::DegenerateDose(lo));
    }
    if lo >= 0.0 && hi <= 1.0 {
        return Ok((ds.clone(), DoseScaler::identity()));
    }
    let scaler = DoseScaler::new(lo, hi)?;
    let scaled = ds
        .doses
        .iter()
        .map(|&a| scaler.scale(a).clamp(0.0, 1.0))
        .collect();
    Ok((ds.with_doses(scaled)?, scaler))
}

/// Warfarin reward: `-100 |INR - 2| - 100 |INR - 3|`, flat at -100 inside the
/// therapeutic band [2, 3].
pub fn warfarin_reward(inr: f64) -> Result<f64> {
    if !inr.is_finite() {
        return Err(Error::Domain(format!("INR must be finite, got {inr}")));
    }
    Ok(-100.0 * (inr - 2.0).abs() - 100.0 * (inr - 3.0).abs())
}

/// Transform applied to the raw outcome column after parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardTransform {
    #[default]
    None,
    /// Outcome column holds INR; replaced by [`warfarin_reward`] and maximized.
    WarfarinInr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    /// Missing cells are parse errors.
    #[default]
    Error,
    /// Rows with a missing required cell are dropped and reported.
    Drop,
}

/// Column roles for a single-stage CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Covariate columns; empty means every column except dose and outcome.
    #[serde(default)]
    pub covariates: Vec<String>,
    pub dose: String,
    pub outcome: String,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub missing: MissingPolicy,
}

/// Column roles for a wide multi-stage CSV file. Stage `t` columns are named
/// `<base>_t<t>`, e.g. `x1_t1`, `a_t1`, `r_t1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchema {
    pub stages: usize,
    pub covariates: Vec<String>,
    pub dose: String,
    pub reward: String,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub missing: MissingPolicy,
}

pub fn stage_column(base: &str, stage: usize) -> String {
    format!("{base}_t{stage}")
}

/// Rows dropped during ingestion (1-based data row numbers, header excluded).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped_rows: Vec<usize>,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    Ok(RawTable { header, rows })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{}: malformed CSV: {other:?}", path.display())),
    }
}

fn column_index(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
}

/// Parses the requested columns into a row-major numeric table, honoring the
/// missing-value policy. Returns the kept rows and the report.
fn extract(
    table: &RawTable,
    columns: &[usize],
    missing: MissingPolicy,
) -> Result<(Vec<Vec<f64>>, LoadReport)> {
    let mut out = Vec::with_capacity(table.rows.len());
    let mut report = LoadReport {
        rows_read: table.rows.len(),
        dropped_rows: Vec::new(),
    };
    'rows: for (r, row) in table.rows.iter().enumerate() {
        let row_no = r + 1;
        let mut vals = Vec::with_capacity(columns.len());
        for &c in columns {
            let cell = row.get(c).map(String::as_str).unwrap_or("");
            if is_missing(cell) {
                match missing {
                    MissingPolicy::Drop => {
                        report.dropped_rows.push(row_no);
                        continue 'rows;
                    }
                    MissingPolicy::Error => {
                        return Err(Error::Parse {
                            row: row_no,
                            column: table.header[c].clone(),
                            message: format!("missing value `{cell}`"),
                        })
                    }
                }
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: row_no,
                column: table.header[c].clone(),
                message: format!("not a number: `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: row_no,
                    column: table.header[c].clone(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            vals.push(v);
        }
        out.push(vals);
    }
    if !report.dropped_rows.is_empty() {
        log::warn!(
            "dropped {} rows with missing values: {:?}",
            report.dropped_rows.len(),
            report.dropped_rows
        );
    }
    Ok((out, report))
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<(Dataset, LoadReport)> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let dose_col = column_index(&table.header, &schema.dose)?;
    let outcome_col = column_index(&table.header, &schema.outcome)?;
    let cov_names: Vec<String> = if schema.covariates.is_empty() {
        table
            .header
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != dose_col && i != outcome_col)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        schema.covariates.clone()
    };
    if cov_names.is_empty() {
        return Err(Error::Schema("schema names no covariate columns".into()));
    }
    let mut cols = Vec::with_capacity(cov_names.len() + 2);
    for name in &cov_names {
        cols.push(column_index(&table.header, name)?);
    }
    cols.push(dose_col);
    cols.push(outcome_col);

    let (rows, report) = extract(&table, &cols, schema.missing)?;
    let p = cov_names.len();
    let n = rows.len();
    let mut x = Array2::zeros((n, p));
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (i, r) in rows.iter().enumerate() {
        for k in 0..p {
            x[[i, k]] = r[k];
        }
        a.push(r[p]);
        y.push(r[p + 1]);
    }
    let ds = Dataset::new(x, a, y, cov_names, schema.direction)?;
    Ok((ds, report))
}

/// Writes a single-stage dataset with columns `<features>, dose, outcome`.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, dose: &str, outcome: &str) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<&str> = ds.feature_names.iter().map(String::as_str).collect();
    header.push(dose);
    header.push(outcome);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..ds.n_samples() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| format_float(*v)).collect();
        rec.push(format_float(ds.doses[i]));
        rec.push(format_float(ds.outcomes[i]));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Per-stage observations for a T-stage study.
#[derive(Debug, Clone)]
pub struct StageData {
    stages: Vec<Dataset>,
}

impl StageData {
    pub fn new(stages: Vec<Dataset>) -> Result<Self> {
        let first = stages
            .first()
            .ok_or_else(|| Error::InvalidData("stage data needs at least one stage".into()))?;
        let n = first.n_samples();
        if let Some(bad) = stages.iter().find(|s| s.n_samples() != n) {
            return Err(Error::Shape {
                expected: n,
                got: bad.n_samples(),
            });
        }
        Ok(Self { stages })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn n_samples(&self) -> usize {
        self.stages[0].n_samples()
    }

    /// Stage `t`, 1-based.
    pub fn stage(&self, t: usize) -> &Dataset {
        &self.stages[t - 1]
    }

    pub fn stages(&self) -> &[Dataset] {
        &self.stages
    }

    /// History matrix `H_t` = (X_1, A_1, R_1, ..., X_{t-1}, A_{t-1}, R_{t-1}, X_t).
    pub fn build_history(&self, t: usize) -> Result<(Array2<f64>, Vec<String>)> {
        if t == 0 || t > self.n_stages() {
            return Err(Error::Domain(format!(
                "stage index {t} outside 1..={}",
                self.n_stages()
            )));
        }
        let names = history_names(
            &self
                .stages
                .iter()
                .map(|s| s.feature_names().to_vec())
                .collect::<Vec<_>>(),
            t,
        );
        let n = self.n_samples();
        let mut h = Array2::zeros((n, names.len()));
        for i in 0..n {
            let rows: Vec<HistoryStep<'_>> = (1..t)
                .map(|v| {
                    let s = self.stage(v);
                    HistoryStep {
                        covariates: s.row(i),
                        dose: s.doses()[i],
                        reward: s.outcomes()[i],
                    }
                })
                .collect();
            let row = history_row(&rows, self.stage(t).row(i));
            for (k, v) in row.into_iter().enumerate() {
                h[[i, k]] = v;
            }
        }
        Ok((h, names))
    }
}

/// One completed stage of a subject's history.
#[derive(Debug, Clone, Copy)]
pub struct HistoryStep<'a> {
    pub covariates: &'a [f64],
    pub dose: f64,
    pub reward: f64,
}

/// Flattens completed stages plus the current covariates into a history row.
pub fn history_row(past: &[HistoryStep<'_>], current: &[f64]) -> Vec<f64> {
    let mut row = Vec::new();
    for step in past {
        row.extend_from_slice(step.covariates);
        row.push(step.dose);
        row.push(step.reward);
    }
    row.extend_from_slice(current);
    row
}

/// Column names of `H_t` given each stage's covariate names.
pub fn history_names(stage_features: &[Vec<String>], t: usize) -> Vec<String> {
    let mut names = Vec::new();
    for v in 1..t {
        names.extend(stage_features[v - 1].iter().map(|f| stage_column(f, v)));
        names.push(stage_column("A", v));
        names.push(stage_column("R", v));
    }
    names.extend(stage_features[t - 1].iter().map(|f| stage_column(f, t)));
    names
}

pub fn load_stage_csv(
    path: impl AsRef<Path>,
    schema: &StageSchema,
) -> Result<(StageData, LoadReport)> {
    let path = path.as_ref();
    if schema.stages == 0 {
        return Err(Error::Schema("stage count must be at least 1".into()));
    }
    if schema.covariates.is_empty() {
        return Err(Error::Schema("schema names no covariate columns".into()));
    }
    let table = read_table(path)?;
    let mut cols = Vec::new();
    for t in 1..=schema.stages {
        for base in &schema.covariates {
            cols.push(column_index(&table.header, &stage_column(base, t))?);
        }
        cols.push(column_index(&table.header, &stage_column(&schema.dose, t))?);
        cols.push(column_index(
            &table.header,
            &stage_column(&schema.reward, t),
        )?);
    }
    let (rows, report) = extract(&table, &cols, schema.missing)?;
    let p = schema.covariates.len();
    let width = p + 2;
    let n = rows.len();
    let mut stages = Vec::with_capacity(schema.stages);
    for t in 0..schema.stages {
        let off = t * width;
        let mut x = Array2::zeros((n, p));
        let mut a = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            for k in 0..p {
                x[[i, k]] = row[off + k];
            }
            a.push(row[off + p]);
            r.push(row[off + p + 1]);
        }
        stages.push(Dataset::new(
            x,
            a,
            r,
            schema.covariates.clone(),
            schema.direction,
        )?);
    }
    Ok((StageData::new(stages)?, report))
}

/// Indexes header names for quick lookups.
pub(crate) fn header_map(header: &[String]) -> HashMap<&str, usize> {
    header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect()
}

/// Reads a CSV as a header plus string rows.
pub(crate) fn read_raw(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let t = read_table(path)?;
    Ok((t.header, t.rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema() -> Schema {
        Schema {
            covariates: vec!["x1".into(), "x2".into()],
            dose: "a".into(),
            outcome: "y".into(),
            direction: Direction::Maximize,
            missing: MissingPolicy::Error,
        }
    }

    #[test]
    fn loads_three_rows() {
        let f = write_tmp("x1,x2,a,y\n1,2,0.1,5\n3,4,0.2,6\n5,6,0.3,7\n");
        let (ds, report) = load_csv(f.path(), &schema()).unwrap();
        assert_eq!(ds.n_samples(), 3);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.row(1), &[3.0, 4.0]);
        assert_eq!(ds.doses(), &[0.1, 0.2, 0.3]);
        assert!(report.dropped_rows.is_empty());
    }

    #[test]
    fn missing_dose_cites_row() {
        let f = write_tmp("x1,x2,a,y\n1,2,0.1,5\n3,4,NA,6\n5,6,0.3,7\n");
        match load_csv(f.path(), &schema()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn drop_policy_reports_rows() {
        let f = write_tmp("x1,x2,a,y\n1,2,0.1,5\n3,4,NA,6\n5,6,0.3,7\n7,8,0.4,\n");
        let mut s = schema();
        s.missing = MissingPolicy::Drop;
        let (ds, report) = load_csv(f.path(), &s).unwrap();
        assert_eq!(ds.n_samples(), 2);
        assert_eq!(report.dropped_rows, vec![2, 4]);
    }

    #[test]
    fn non_numeric_cell_is_parse_error() {
        let f = write_tmp("x1,x2,a,y\n1,abc,0.1,5\n3,4,0.2,6\n");
        assert!(matches!(
            load_csv(f.path(), &schema()),
            Err(Error::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let f = write_tmp("x1,a,y\n1,0.1,5\n3,0.2,6\n");
        assert!(matches!(
            load_csv(f.path(), &schema()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn warfarin_columns_keep_raw_inr() {
        let f = write_tmp(
            "weight,height,age,vkorc1,dose,inr\n\
             70,170,50,1,35.0,2.4\n\
             80,180,60,0,42.5,3.1\n\
             65,160,70,2,21.0,1.8\n",
        );
        let s = Schema {
            covariates: vec![],
            dose: "dose".into(),
            outcome: "inr".into(),
            direction: Direction::Maximize,
            missing: MissingPolicy::Error,
        };
        let (ds, _) = load_csv(f.path(), &s).unwrap();
        assert_eq!(ds.feature_names(), &["weight", "height", "age", "vkorc1"]);
        assert_eq!(ds.outcomes(), &[2.4, 3.1, 1.8]);
    }

    #[test]
    fn warfarin_reward_values() {
        assert_eq!(warfarin_reward(2.5).unwrap(), -100.0);
        assert_eq!(warfarin_reward(2.0).unwrap(), -100.0);
        assert_eq!(warfarin_reward(3.0).unwrap(), -100.0);
        assert_eq!(warfarin_reward(4.0).unwrap(), -300.0);
        assert!(matches!(warfarin_reward(f64::NAN), Err(Error::Domain(_))));
        assert!(warfarin_reward(f64::INFINITY).is_err());
    }

    fn ds_with_doses(doses: Vec<f64>) -> Dataset {
        let n = doses.len();
        Dataset::new(
            Array2::from_shape_fn((n, 1), |(i, _)| i as f64),
            doses,
            vec![0.0; n],
            vec!["x".into()],
            Direction::Maximize,
        )
        .unwrap()
    }

    #[test]
    fn standardize_affine() {
        let (ds, sc) = standardize_doses(&ds_with_doses(vec![2.0, 4.0, 6.0])).unwrap();
        assert_eq!(ds.doses(), &[0.0, 0.5, 1.0]);
        assert_eq!((sc.a_min, sc.a_max), (2.0, 6.0));
    }

    #[test]
    fn standardize_unit_interval_is_identity() {
        let doses = vec![0.1, 0.7, 0.35];
        let (ds, sc) = standardize_doses(&ds_with_doses(doses.clone())).unwrap();
        assert_eq!(ds.doses(), doses.as_slice());
        assert_eq!(sc, DoseScaler::identity());
    }

    #[test]
    fn standardize_constant_is_error() {
        assert!(matches!(
            standardize_doses(&ds_with_doses(vec![5.0, 5.0, 5.0])),
            Err(Error::DegenerateDose(_))
        ));
    }

    #[test]
    fn history_column_counts() {
        let mk = |p: usize| {
            Dataset::new(
                Array2::from_shape_fn((4, p), |(i, k)| (i * 10 + k) as f64),
                vec![0.1, 0.2, 0.3, 0.4],
                vec![1.0, 2.0, 3.0, 4.0],
                (0..p).map(|k| format!("x{}", k + 1)).collect(),
                Direction::Minimize,
            )
            .unwrap()
        };
        let sd = StageData::new(vec![mk(2), mk(2)]).unwrap();
        let (h1, n1) = sd.build_history(1).unwrap();
        assert_eq!(h1, sd.stage(1).covariates().clone());
        assert_eq!(n1, vec!["x1_t1", "x2_t1"]);
        let (h2, n2) = sd.build_history(2).unwrap();
        assert_eq!(h2.ncols(), 6);
        assert_eq!(n2, vec!["x1_t1", "x2_t1", "A_t1", "R_t1", "x1_t2", "x2_t2"]);
        assert_eq!(h2.row(2).to_vec(), vec![20.0, 21.0, 0.3, 3.0, 20.0, 21.0]);
        assert!(sd.build_history(3).is_err());
    }

    #[test]
    fn loads_stage_file() {
        let f = write_tmp(
            "x1_t1,a_t1,r_t1,x1_t2,a_t2,r_t2\n\
             0.1,0.2,1.0,0.3,0.4,2.0\n\
             0.5,0.6,3.0,0.7,0.8,4.0\n",
        );
        let schema = StageSchema {
            stages: 2,
            covariates: vec!["x1".into()],
            dose: "a".into(),
            reward: "r".into(),
            direction: Direction::Minimize,
            missing: MissingPolicy::Error,
        };
        let (sd, _) = load_stage_csv(f.path(), &schema).unwrap();
        assert_eq!(sd.n_stages(), 2);
        assert_eq!(sd.stage(2).doses(), &[0.4, 0.8]);
        assert_eq!(sd.stage(1).outcomes(), &[1.0, 3.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scaler_round_trip(lo in -1e3f64..1e3, width in 1e-3f64..1e3, u in 0.0f64..1.0) {
                let sc = DoseScaler::new(lo, lo + width).unwrap();
                let a = sc.unscale(u);
                prop_assert!((sc.unscale(sc.scale(a)) - a).abs() <= 1e-12 * (1.0 + a.abs()));
            }

            #[test]
            fn warfarin_reward_concave(u in -5.0f64..10.0, v in -5.0f64..10.0, lam in 0.0f64..1.0) {
                let r = |x: f64| warfarin_reward(x).unwrap();
                let mix = r(lam * u + (1.0 - lam) * v);
                prop_assert!(mix >= lam * r(u) + (1.0 - lam) * r(v) - 1e-9);
            }

            #[test]
            fn csv_round_trip(rows in proptest::collection::vec(
                (-1e6f64..1e6, -1e6f64..1e6, 0.0f64..1.0, -1e6f64..1e6), 2..20)) {
                let n = rows.len();
                let x = Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { rows[i].0 } else { rows[i].1 });
                let ds = Dataset::new(
                    x,
                    rows.iter().map(|r| r.2).collect(),
                    rows.iter().map(|r| r.3).collect(),
                    vec!["x1".into(), "x2".into()],
                    Direction::Maximize,
                ).unwrap();
                let f = tempfile::NamedTempFile::new().unwrap();
                write_csv(&ds, f.path(), "a", "y").unwrap();
                let (back, _) = load_csv(f.path(), &schema()).unwrap();
                prop_assert_eq!(back.covariates(), ds.covariates());
                prop_assert_eq!(back.doses(), ds.doses());
                prop_assert_eq!(back.outcomes(), ds.outcomes());
                let g = tempfile::NamedTempFile::new().unwrap();
                write_csv(&back, g.path(), "a", "y").unwrap();
                prop_assert_eq!(std::fs::read(f.path()).unwrap(), std::fs::read(g.path()).unwrap());
            }
        }
    }
}
