//! Column schemas, tables with a missing-indicator matrix, and CSV I/O.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Category labels in level order; level `l` is `levels[l - 1]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
}

impl ColumnSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Continuous,
            levels: Vec::new(),
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, levels: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            levels: levels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_continuous(&self) -> bool {
        self.kind == ColumnKind::Continuous
    }

    /// Number of categories; zero for continuous columns.
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let schema = Self { columns };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema("no columns".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name '{}'", c.name)));
            }
            match c.kind {
                ColumnKind::Categorical if c.levels.len() < 2 => {
                    return Err(Error::Schema(format!(
                        "categorical column '{}' needs at least 2 levels",
                        c.name
                    )))
                }
                ColumnKind::Categorical => {
                    let distinct: HashSet<_> = c.levels.iter().collect();
                    if distinct.len() != c.levels.len() {
                        return Err(Error::Schema(format!("column '{}' repeats a level", c.name)));
                    }
                }
                ColumnKind::Continuous if !c.levels.is_empty() => {
                    return Err(Error::Schema(format!(
                        "continuous column '{}' must not declare levels",
                        c.name
                    )))
                }
                ColumnKind::Continuous => {}
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn continuous_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.columns[j].is_continuous()).collect()
    }
}

/// An `n x p` grid of cells plus the observed indicator `r`.
///
/// Continuous cells hold finite reals; categorical cells hold a level index
/// in `1..=num_levels` stored as an integral `f64`. Cells with `r = 0` are
/// never exposed through the accessors.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    schema: Schema,
    n_rows: usize,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl Table {
    pub fn new(schema: Schema, values: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        let p = schema.len();
        if values.len() != observed.len() || !values.len().is_multiple_of(p) {
            return Err(Error::LengthMismatch(values.len(), observed.len()));
        }
        let n_rows = values.len() / p;
        for (idx, (&v, &r)) in values.iter().zip(&observed).enumerate() {
            if !r {
                continue;
            }
            let col = &schema.columns[idx % p];
            let ok = match col.kind {
                ColumnKind::Continuous => v.is_finite(),
                ColumnKind::Categorical => v.fract() == 0.0 && v >= 1.0 && v <= col.num_levels() as f64,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "cell ({}, '{}') holds invalid value {v}",
                    idx / p,
                    col.name
                )));
            }
        }
        Ok(Self {
            schema,
            n_rows,
            values,
            observed,
        })
    }

    /// Fully observed table from row-major values.
    pub fn complete(schema: Schema, values: Vec<f64>) -> Result<Self> {
        let observed = vec![true; values.len()];
        Self::new(schema, values, observed)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.observed[row * self.n_cols() + col]
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        let idx = row * self.n_cols() + col;
        self.observed[idx].then(|| self.values[idx])
    }

    /// Observed categorical level (1-based).
    pub fn level(&self, row: usize, col: usize) -> Option<usize> {
        self.value(row, col).map(|v| v as usize)
    }

    pub fn observed_mask(&self) -> &[bool] {
        &self.observed
    }

    /// Observed cells of one column, in row order.
    pub fn observed_column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows).filter_map(|i| self.value(i, col)).collect()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.observed.iter().all(|&r| r)
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|&&r| !r).count()
    }

    pub fn row_is_complete(&self, row: usize) -> bool {
        let p = self.n_cols();
        self.observed[row * p..(row + 1) * p].iter().all(|&r| r)
    }

    pub(crate) fn set_missing(&mut self, row: usize, col: usize) {
        let p = self.n_cols();
        self.observed[row * p + col] = false;
    }

    /// Copy of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Table {
        let p = self.n_cols();
        let mut values = Vec::with_capacity(rows.len() * p);
        let mut observed = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            values.extend_from_slice(&self.values[i * p..(i + 1) * p]);
            observed.extend_from_slice(&self.observed[i * p..(i + 1) * p]);
        }
        Table {
            schema: self.schema.clone(),
            n_rows: rows.len(),
            values,
            observed,
        }
    }
}

const MISSING_TOKEN: &str = "NA";

/// Reads a headered CSV against `schema`. Empty cells and `NA` are missing.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let expected = schema.names();
    if header != expected {
        return Err(Error::HeaderMismatch {
            expected,
            found: header,
        });
    }
    let dictionaries: Vec<HashMap<&str, usize>> = schema
        .columns
        .iter()
        .map(|c| c.levels.iter().enumerate().map(|(i, s)| (s.as_str(), i + 1)).collect())
        .collect();

    let p = schema.len();
    let mut values = Vec::new();
    let mut observed = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |pos| pos.line());
        if record.len() != p {
            return Err(Error::Parse {
                line,
                column: String::new(),
                message: format!("expected {p} fields, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let col = &schema.columns[j];
            if cell.is_empty() || cell == MISSING_TOKEN {
                values.push(f64::NAN);
                observed.push(false);
                continue;
            }
            let v = match col.kind {
                ColumnKind::Continuous => match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(Error::Parse {
                            line,
                            column: col.name.clone(),
                            message: format!("'{cell}' is not a finite number"),
                        })
                    }
                },
                ColumnKind::Categorical => match dictionaries[j].get(cell) {
                    Some(&l) => l as f64,
                    None => {
                        return Err(Error::UnknownCategory {
                            line,
                            column: col.name.clone(),
                            value: cell.to_owned(),
                        })
                    }
                },
            };
            values.push(v);
            observed.push(true);
        }
    }
    if values.is_empty() {
        return Err(Error::Parse {
            line: 1,
            column: String::new(),
            message: "no data rows".into(),
        });
    }
    Table::new(schema.clone(), values, observed)
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file), schema)
}

/// Writes the table as CSV; missing cells become empty fields and
/// categorical levels are written as their labels.
pub fn write_csv<W: Write>(table: &Table, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(table.schema().names())?;
    let mut fields = Vec::with_capacity(table.n_cols());
    for i in 0..table.n_rows() {
        fields.clear();
        for (j, col) in table.schema().columns.iter().enumerate() {
            let field = match (table.value(i, j), col.kind) {
                (None, _) => String::new(),
                (Some(v), ColumnKind::Continuous) => format!("{v}"),
                (Some(v), ColumnKind::Categorical) => col.levels[v as usize - 1].clone(),
            };
            fields.push(field);
        }
        wtr.write_record(&fields)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_csv(table: &Table, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(table, std::io::BufWriter::new(file))
}

/// Seeded shuffle then prefix split; each part keeps the original row order.
pub fn split(table: &Table, train_fraction: f64, seed: u64) -> Result<(Table, Table)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = table.n_rows();
    if n < 2 {
        return Err(Error::InvalidArgument("split needs at least 2 rows".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * n as f64).round() as usize;
    let (train, test) = order.split_at_mut(n_train);
    train.sort_unstable();
    test.sort_unstable();
    Ok((table.select_rows(train), table.select_rows(test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab_schema() -> Schema {
        Schema::new(vec![
            ColumnSpec::continuous("a"),
            ColumnSpec::categorical("b", ["x", "y"]),
        ])
        .unwrap()
    }

    #[test]
    fn parses_missing_and_categories() {
        let t = read_csv("a,b\n1.5,x\n,y".as_bytes(), &ab_schema()).unwrap();
        assert_eq!(t.n_rows(), 2);
        assert_eq!(t.observed_mask(), &[true, true, false, true]);
        assert_eq!(t.value(0, 0), Some(1.5));
        assert_eq!(t.level(0, 1), Some(1));
        assert_eq!(t.value(1, 0), None);
        assert_eq!(t.level(1, 1), Some(2));
    }

    #[test]
    fn na_token_is_missing() {
        let t = read_csv("a,b\nNA,NA\n2,y".as_bytes(), &ab_schema()).unwrap();
        assert_eq!(t.missing_count(), 2);
    }

    #[test]
    fn header_order_is_enforced() {
        let err = read_csv("b,a\nx,1".as_bytes(), &ab_schema()).unwrap_err();
        assert!(matches!(err, Error::HeaderMismatch { .. }));
    }

    #[test]
    fn single_cell_table() {
        let schema = Schema::new(vec![ColumnSpec::continuous("a")]).unwrap();
        let t = read_csv("a\n3.0".as_bytes(), &schema).unwrap();
        assert_eq!((t.n_rows(), t.n_cols()), (1, 1));
        assert_eq!(t.observed_mask(), &[true]);
    }

    #[test]
    fn bad_number_reports_line_and_column() {
        let err = read_csv("a,b\n1,x\nfoo,y".as_bytes(), &ab_schema()).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_category_is_rejected() {
        let err = read_csv("a,b\n1,z".as_bytes(), &ab_schema()).unwrap_err();
        assert!(matches!(err, Error::UnknownCategory { .. }));
    }

    #[test]
    fn schema_rules() {
        assert!(Schema::new(vec![ColumnSpec::categorical("c", ["only"])]).is_err());
        assert!(Schema::new(vec![ColumnSpec::continuous("a"), ColumnSpec::continuous("a")]).is_err());
        let json = r#"{"columns":[{"name":"a","kind":"continuous"},{"name":"b","kind":"categorical","levels":["x","y"]}]}"#;
        assert_eq!(Schema::from_json(json).unwrap(), ab_schema());
        assert!(Schema::from_json(r#"{"columns":[{"name":"a","kind":"continuous","oops":1}]}"#).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let schema = Schema::new(vec![ColumnSpec::continuous("a")]).unwrap();
        let t = Table::complete(schema, (0..10).map(f64::from).collect()).unwrap();
        let (train, test) = split(&t, 0.8, 42).unwrap();
        assert_eq!((train.n_rows(), test.n_rows()), (8, 2));
        let mut all: Vec<f64> = train.observed_column(0);
        all.extend(test.observed_column(0));
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(f64::from).collect::<Vec<_>>());
        // relative order preserved
        let tr = train.observed_column(0);
        assert!(tr.windows(2).all(|w| w[0] < w[1]));
        let (train2, _) = split(&t, 0.8, 42).unwrap();
        assert_eq!(train, train2);
    }

    #[test]
    fn split_of_two_rows() {
        let schema = Schema::new(vec![ColumnSpec::continuous("a")]).unwrap();
        let t = Table::complete(schema, vec![1.0, 2.0]).unwrap();
        let (a, b) = split(&t, 0.5, 0).unwrap();
        assert_eq!((a.n_rows(), b.n_rows()), (1, 1));
    }
}
