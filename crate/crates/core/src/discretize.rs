//! Bin grids on `[0, 1]` and the discretization of table cells into labels.
//!
//! Continuous cells map to `y = #{s < L : b_s <= F(x)}`, i.e. the bin
//! `[b_{y-1}, b_y)` holding their CDF value (the top bin also holds 1).
//! Categorical cells keep their level. Label 0 is the mask/missing token.

use serde::{Deserialize, Serialize};

use crate::cdf::EmpiricalCdf;
use crate::dataset::{ColumnKind, Schema, Table};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    cuts: Vec<f64>,
}

impl BinGrid {
    pub fn uniform(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
        }
        let cuts = (0..=bins).map(|s| s as f64 / bins as f64).collect();
        Ok(Self { cuts })
    }

    /// Arbitrary strictly increasing cut-points from exactly 0 to exactly 1.
    pub fn from_cuts(cuts: Vec<f64>) -> Result<Self> {
        let ok = cuts.len() >= 3
            && cuts[0] == 0.0
            && *cuts.last().unwrap() == 1.0
            && cuts.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidArgument(
                "cut-points must increase strictly from 0 to 1 with at least 2 bins".into(),
            ));
        }
        Ok(Self { cuts })
    }

    pub fn num_bins(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    /// `(b_{l-1}, b_l)` for bin `l` in `1..=L`.
    pub fn interval(&self, l: usize) -> Result<(f64, f64)> {
        if l == 0 || l > self.num_bins() {
            return Err(Error::IndexOutOfRange {
                index: l,
                max: self.num_bins(),
            });
        }
        Ok((self.cuts[l - 1], self.cuts[l]))
    }

    /// Number of cuts `b_0..b_{L-1}` that are `<= u`.
    pub fn bin_of(&self, u: f64) -> usize {
        self.cuts[..self.num_bins()].partition_point(|&b| b <= u)
    }
}

/// Per-column marginal CDFs; `None` for categorical columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    cdfs: Vec<Option<EmpiricalCdf>>,
}

impl Marginals {
    /// Fits an empirical CDF on the observed cells of every continuous column.
    pub fn fit(table: &Table) -> Result<Self> {
        let mut cdfs = Vec::with_capacity(table.n_cols());
        for (j, col) in table.schema().columns.iter().enumerate() {
            if col.kind == ColumnKind::Categorical {
                cdfs.push(None);
                continue;
            }
            let values = table.observed_column(j);
            let cdf = EmpiricalCdf::fit(&values, &vec![true; values.len()]).map_err(|e| match e {
                Error::DegenerateColumn { reason, .. } => Error::DegenerateColumn {
                    column: col.name.clone(),
                    reason,
                },
                other => other,
            })?;
            cdfs.push(Some(cdf));
        }
        Ok(Self { cdfs })
    }

    pub fn from_cdfs(schema: &Schema, cdfs: Vec<Option<EmpiricalCdf>>) -> Result<Self> {
        let consistent = cdfs.len() == schema.len()
            && schema
                .columns
                .iter()
                .zip(&cdfs)
                .all(|(c, f)| c.is_continuous() == f.is_some());
        if !consistent {
            return Err(Error::SchemaMismatch("CDFs do not line up with continuous columns".into()));
        }
        Ok(Self { cdfs })
    }

    pub fn get(&self, col: usize) -> Option<&EmpiricalCdf> {
        self.cdfs[col].as_ref()
    }

    pub fn as_slice(&self) -> &[Option<EmpiricalCdf>] {
        &self.cdfs
    }
}

/// Label vocabulary size `L_j` of every column.
pub fn cardinalities(schema: &Schema, grid: &BinGrid) -> Vec<usize> {
    schema
        .columns
        .iter()
        .map(|c| match c.kind {
            ColumnKind::Continuous => grid.num_bins(),
            ColumnKind::Categorical => c.num_levels(),
        })
        .collect()
}

/// `n x p` labels in `{0} ∪ 1..=L_j`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    n_rows: usize,
    cards: Vec<usize>,
    labels: Vec<u32>,
}

impl LabelMatrix {
    pub fn new(cards: Vec<usize>, labels: Vec<u32>) -> Result<Self> {
        let p = cards.len();
        if p == 0 || !labels.len().is_multiple_of(p) {
            return Err(Error::LengthMismatch(labels.len(), p));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y as usize > cards[i % p] {
                return Err(Error::IndexOutOfRange {
                    index: y as usize,
                    max: cards[i % p],
                });
            }
        }
        Ok(Self {
            n_rows: labels.len() / p,
            cards,
            labels,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.cards.len()
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[u32] {
        let p = self.n_cols();
        &self.labels[row * p..(row + 1) * p]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }
}

/// Label of one continuous value under `cdf` and `grid`.
pub fn continuous_label(cdf: &EmpiricalCdf, grid: &BinGrid, x: f64) -> u32 {
    grid.bin_of(cdf.eval(x)) as u32
}

pub fn discretize(table: &Table, marginals: &Marginals, grid: &BinGrid) -> Result<LabelMatrix> {
    let schema = table.schema();
    if marginals.as_slice().len() != schema.len() {
        return Err(Error::SchemaMismatch("marginals and table differ in width".into()));
    }
    let p = schema.len();
    let mut labels = Vec::with_capacity(table.n_rows() * p);
    for i in 0..table.n_rows() {
        for (j, col) in schema.columns.iter().enumerate() {
            let y = match (table.value(i, j), col.kind) {
                (None, _) => 0,
                (Some(v), ColumnKind::Categorical) => v as u32,
                (Some(v), ColumnKind::Continuous) => {
                    let cdf = marginals
                        .get(j)
                        .ok_or_else(|| Error::SchemaMismatch(format!("no CDF for column '{}'", col.name)))?;
                    continuous_label(cdf, grid, v)
                }
            };
            labels.push(y);
        }
    }
    LabelMatrix::new(cardinalities(schema, grid), labels)
}
