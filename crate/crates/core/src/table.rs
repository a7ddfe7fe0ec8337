//! Schema-aware ingestion of heterogeneous cohort tables.
//!
//! Categorical cells become their 0-based category index, continuous columns
//! are z-scored over observed cells only, and missing cells hold exactly 0.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Standard deviations below this are treated as a constant column.
pub const MIN_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl ColumnSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: ColumnKind::Continuous, categories: Vec::new() }
    }

    pub fn categorical(name: impl Into<String>, categories: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories: categories.iter().map(|c| c.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSchema {
    pub cohort_id: String,
    pub columns: Vec<ColumnSpec>,
}

impl CohortSchema {
    pub fn new(cohort_id: impl Into<String>, columns: Vec<ColumnSpec>) -> Result<Self> {
        let schema = Self { cohort_id: cohort_id.into(), columns };
        schema.validate(None)?;
        Ok(schema)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: Self = toml::from_str(text)?;
        schema.validate(None)?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema is always serializable")
    }

    /// Checks structural invariants; `max_columns` is the padded length limit.
    pub fn validate(&self, max_columns: Option<usize>) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema(format!("cohort `{}` has no columns", self.cohort_id)));
        }
        if let Some(max) = max_columns {
            if self.columns.len() > max {
                return Err(Error::Config(format!(
                    "cohort `{}` has {} columns, more than the maximum padded length {max}",
                    self.cohort_id,
                    self.columns.len()
                )));
            }
        }
        let mut seen = HashSet::new();
        for col in &self.columns {
            if col.name.trim().is_empty() {
                return Err(Error::Schema("empty column name".into()));
            }
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", col.name)));
            }
            if col.kind == ColumnKind::Categorical {
                let distinct: HashSet<_> = col.categories.iter().collect();
                if col.categories.len() < 2 || distinct.len() != col.categories.len() {
                    return Err(Error::Schema(format!(
                        "categorical column `{}` needs at least 2 distinct categories",
                        col.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// One heterogeneous table: `n_rows × C_t` values plus a presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    schema: CohortSchema,
    n_rows: usize,
    values: Vec<f64>,
    presence: Vec<bool>,
    labels: Option<Vec<usize>>,
    norm_stats: Option<Vec<Option<NormStats>>>,
}

impl Cohort {
    /// Builds a cohort from already-encoded cells. Missing cells are forced to 0.
    pub fn from_parts(schema: CohortSchema, values: Vec<f64>, presence: Vec<bool>) -> Result<Self> {
        schema.validate(None)?;
        let c = schema.len();
        if values.len() != presence.len() || values.len() % c != 0 {
            return Err(Error::Shape(format!(
                "{} values / {} presence flags for {c} columns",
                values.len(),
                presence.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value {
                row: i / c,
                column: schema.columns[i % c].name.clone(),
                msg: "non-finite value".into(),
            });
        }
        let values = values.into_iter().zip(&presence).map(|(v, &p)| if p { v } else { 0.0 }).collect();
        Ok(Self { n_rows: presence.len() / c, schema, values, presence, labels: None, norm_stats: None })
    }

    pub fn schema(&self) -> &CohortSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_columns(&self) -> usize {
        self.schema.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_columns() + col]
    }

    pub fn is_present(&self, row: usize, col: usize) -> bool {
        self.presence[row * self.n_columns() + col]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn norm_stats(&self) -> Option<&[Option<NormStats>]> {
        self.norm_stats.as_deref()
    }

    pub fn is_normalized(&self) -> bool {
        self.norm_stats.is_some()
    }

    /// Attaches class labels, each of which must lie in `0..n_classes`.
    pub fn with_labels(mut self, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != self.n_rows {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), self.n_rows)));
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(Error::Value {
                row,
                column: "label".into(),
                msg: format!("class {l} outside 0..{n_classes}"),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Z-scores every continuous column over its observed cells using the
    /// population standard deviation. Categorical codes and missing cells are
    /// left untouched.
    pub fn normalize(mut self) -> Result<Self> {
        if self.norm_stats.is_some() {
            return Err(Error::State(format!(
                "cohort `{}` is already normalized",
                self.schema.cohort_id
            )));
        }
        let c = self.n_columns();
        let mut stats = Vec::with_capacity(c);
        for (j, col) in self.schema.columns.iter().enumerate() {
            if col.kind == ColumnKind::Categorical {
                stats.push(None);
                continue;
            }
            let observed: Vec<f64> =
                (0..self.n_rows).filter(|&i| self.presence[i * c + j]).map(|i| self.values[i * c + j]).collect();
            let (s, constant) = if observed.is_empty() {
                (NormStats { mean: 0.0, std: 1.0 }, false)
            } else {
                let n = observed.len() as f64;
                let mean = observed.iter().sum::<f64>() / n;
                let std = (observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                if std < MIN_STD {
                    (NormStats { mean, std: 1.0 }, true)
                } else {
                    (NormStats { mean, std }, false)
                }
            };
            for i in 0..self.n_rows {
                let k = i * c + j;
                if self.presence[k] {
                    self.values[k] = if constant { 0.0 } else { (self.values[k] - s.mean) / s.std };
                }
            }
            stats.push(Some(s));
        }
        self.norm_stats = Some(stats);
        Ok(self)
    }

    /// Values and presence flags of one row, in schema order.
    pub fn encode_row(&self, row: usize) -> Result<(Vec<f64>, Vec<bool>)> {
        if row >= self.n_rows {
            return Err(Error::OutOfRange { index: row, len: self.n_rows });
        }
        let c = self.n_columns();
        Ok((self.values[row * c..(row + 1) * c].to_vec(), self.presence[row * c..(row + 1) * c].to_vec()))
    }

    /// Restricts the cohort to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let c = self.n_columns();
        let mut values = Vec::with_capacity(rows.len() * c);
        let mut presence = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= self.n_rows {
                return Err(Error::OutOfRange { index: r, len: self.n_rows });
            }
            values.extend_from_slice(&self.values[r * c..(r + 1) * c]);
            presence.extend_from_slice(&self.presence[r * c..(r + 1) * c]);
        }
        Ok(Self {
            schema: self.schema.clone(),
            n_rows: rows.len(),
            values,
            presence,
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
            norm_stats: self.norm_stats.clone(),
        })
    }

    /// Writes the raw (un-normalized) cells as CSV; missing cells are empty and
    /// categorical codes are written as their category strings.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.is_normalized() {
            return Err(Error::State("only raw cohorts can be written back to CSV".into()));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.schema.column_names())?;
        let c = self.n_columns();
        for i in 0..self.n_rows {
            let record: Vec<String> = (0..c)
                .map(|j| {
                    if !self.presence[i * c + j] {
                        return String::new();
                    }
                    let v = self.values[i * c + j];
                    let col = &self.schema.columns[j];
                    match col.kind {
                        ColumnKind::Continuous => format!("{v:?}"),
                        ColumnKind::Categorical => col.categories[v as usize].clone(),
                    }
                })
                .collect();
            w.write_record(&record)?;
        }
        w.flush().at(path)?;
        Ok(())
    }
}

/// Reads a comma-separated table whose header names match the schema columns
/// in any order. Columns are rearranged into schema order.
pub fn load_cohort(path: &Path, schema: &CohortSchema) -> Result<Cohort> {
    schema.validate(None)?;
    let file = std::fs::File::open(path).at(path)?;
    read_cohort(file, schema)
}

pub fn read_cohort<R: std::io::Read>(reader: R, schema: &CohortSchema) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let position: HashMap<&str, usize> =
        schema.columns.iter().enumerate().map(|(i, c)| (c.name.as_str(), i)).collect();
    let mut file_to_schema = Vec::with_capacity(header.len());
    let mut seen = HashSet::new();
    for name in header.iter() {
        let name = name.trim();
        match position.get(name) {
            Some(&j) if seen.insert(j) => file_to_schema.push(j),
            Some(_) => return Err(Error::Schema(format!("column `{name}` appears twice in file"))),
            None => {
                return Err(Error::Schema(format!(
                    "file column `{name}` is not in schema `{}`",
                    schema.cohort_id
                )))
            }
        }
    }
    if let Some(missing) = schema.columns.iter().enumerate().find(|(j, _)| !seen.contains(j)) {
        return Err(Error::Schema(format!("schema column `{}` absent from file", missing.1.name)));
    }
    let c = schema.len();
    let mut values = Vec::new();
    let mut presence = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let mut vals = vec![0.0; c];
        let mut pres = vec![false; c];
        for (cell, &j) in record.iter().zip(&file_to_schema) {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            let col = &schema.columns[j];
            let value_err = |msg: String| Error::Value { row, column: col.name.clone(), msg };
            vals[j] = match col.kind {
                ColumnKind::Categorical => col
                    .categories
                    .iter()
                    .position(|c| c == cell)
                    .ok_or_else(|| value_err(format!("unknown category `{cell}`")))? as f64,
                ColumnKind::Continuous => {
                    let v: f64 = cell.parse().map_err(|_| value_err(format!("cannot parse `{cell}`")))?;
                    if !v.is_finite() {
                        return Err(value_err(format!("non-finite number `{cell}`")));
                    }
                    v
                }
            };
            pres[j] = true;
        }
        values.extend(vals);
        presence.extend(pres);
    }
    if presence.is_empty() {
        return Err(Error::Data(format!("cohort `{}` has no rows", schema.cohort_id)));
    }
    Cohort::from_parts(schema.clone(), values, presence)
}

/// Reads one class index per non-empty line.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("not a class index: `{l}`"),
            })
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CohortSchema {
        CohortSchema::new(
            "A",
            vec![
                ColumnSpec::continuous("age"),
                ColumnSpec::categorical("sex", &["M", "F"]),
                ColumnSpec::continuous("mmse"),
            ],
        )
        .unwrap()
    }

    fn read(text: &str) -> Result<Cohort> {
        read_cohort(text.as_bytes(), &schema())
    }

    #[test]
    fn loads_matching_file_in_any_order() {
        let c = read("mmse,age,sex\n28,70,M\n25,81,F\n").unwrap();
        assert_eq!((c.n_rows(), c.n_columns()), (2, 3));
        assert!(c.presence().iter().all(|&p| p));
        assert_eq!(c.encode_row(1).unwrap().0, vec![81.0, 1.0, 25.0]);
    }

    #[test]
    fn empty_cell_is_missing_zero() {
        let c = read("age,sex,mmse\n,M,28\n").unwrap();
        assert!(!c.is_present(0, 0));
        assert_eq!(c.value(0, 0), 0.0);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(read("age,sex,height\n1,M,2\n"), Err(Error::Schema(_))));
        assert!(matches!(read("age,sex\n1,M\n"), Err(Error::Schema(_))));
        match read("age,sex,mmse\n1,M,2\n3,X,4\n") {
            Err(Error::Value { row, column, .. }) => assert_eq!((row, column.as_str()), (1, "sex")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read("age,sex,mmse\nold,M,2\n"), Err(Error::Value { .. })));
    }

    #[test]
    fn schema_invariants() {
        assert!(CohortSchema::new("A", vec![]).is_err());
        assert!(CohortSchema::new("A", vec![ColumnSpec::categorical("x", &["a"])]).is_err());
        assert!(CohortSchema::new("A", vec![ColumnSpec::continuous("x"), ColumnSpec::continuous("x")]).is_err());
        assert!(matches!(schema().validate(Some(2)), Err(Error::Config(_))));
    }

    #[test]
    fn schema_toml_round_trip() {
        let s = schema();
        assert_eq!(CohortSchema::from_toml_str(&s.to_toml_string()).unwrap(), s);
    }

    #[test]
    fn normalize_population_std() {
        let c = read("age,sex,mmse\n1,M,5\n2,F,5\n3,F,\n").unwrap().normalize().unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (i, e) in expected.iter().enumerate() {
            assert!((c.value(i, 0) - e).abs() < 1e-4);
        }
        let stats = c.norm_stats().unwrap();
        assert!((stats[0].unwrap().std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        // categorical codes untouched
        assert_eq!((c.value(0, 1), c.value(1, 1)), (0.0, 1.0));
        // constant observed column
        assert_eq!(stats[2].unwrap(), NormStats { mean: 5.0, std: 1.0 });
        assert_eq!((c.value(0, 2), c.value(1, 2), c.value(2, 2)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn all_missing_column_stats() {
        let c = read("age,sex,mmse\n,M,1\n,F,2\n").unwrap().normalize().unwrap();
        assert_eq!(c.norm_stats().unwrap()[0].unwrap(), NormStats { mean: 0.0, std: 1.0 });
        assert_eq!((c.value(0, 0), c.value(1, 0)), (0.0, 0.0));
    }

    #[test]
    fn double_normalization_is_state_error() {
        let c = read("age,sex,mmse\n1,M,2\n").unwrap().normalize().unwrap();
        assert!(matches!(c.normalize(), Err(Error::State(_))));
    }

    #[test]
    fn encode_row_bounds_and_missing() {
        let c = read("age,sex,mmse\n,,\n").unwrap().normalize().unwrap();
        assert_eq!(c.encode_row(0).unwrap(), (vec![0.0; 3], vec![false; 3]));
        assert!(matches!(c.encode_row(1), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn labels_must_be_in_range() {
        let c = read("age,sex,mmse\n1,M,2\n").unwrap();
        assert!(c.clone().with_labels(vec![3], 3).is_err());
        assert_eq!(c.with_labels(vec![2], 3).unwrap().labels(), Some(&[2usize][..]));
    }
}
