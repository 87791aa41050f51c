//! Training masks and missingness mechanisms.
//!
//! [`sample_mask`] draws `u ~ U(0, 1)` and then each bit independently with
//! `P(m_j = 1) = u`, which gives every pattern with `k` ones the probability
//! `k! (p - k)! / (p + 1)!`. It takes no table, so masks can never depend on
//! data values.
//!
//! The corruptors produce MCAR, MAR (logistic on fully observed anchor
//! columns), MNAR-logistic (MAR whose anchors are then MCAR-masked) and
//! MNAR-quantile (tail cells of selected columns) missingness. Observed
//! cells are never modified.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::Table;
use crate::error::{Error, Result};

/// Bit `j` is `true` when column `j` is visible (unmasked).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskVector(pub Vec<bool>);

impl MaskVector {
    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

pub fn sample_mask<R: Rng + ?Sized>(p: usize, rng: &mut R) -> MaskVector {
    let u: f64 = rng.random();
    MaskVector((0..p).map(|_| rng.random::<f64>() < u).collect())
}

/// Probability of any single pattern with `k` ones out of `p` bits.
pub fn pattern_probability(p: usize, k: usize) -> f64 {
    // k! (p-k)! / (p+1)! = 1 / ((p + 1) * C(p, k))
    let mut binom = 1.0f64;
    for i in 0..k {
        binom = binom * (p - i) as f64 / (i + 1) as f64;
    }
    1.0 / ((p + 1) as f64 * binom)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("missing rate {rate} outside [0, 1)")));
    }
    Ok(())
}

fn require_complete(table: &Table, what: &'static str) -> Result<()> {
    if table.is_fully_observed() {
        Ok(())
    } else {
        Err(Error::NotFullyObserved(what))
    }
}

fn mcar_columns<R: Rng + ?Sized>(table: &mut Table, cols: &[usize], rate: f64, rng: &mut R) {
    for i in 0..table.n_rows() {
        for &j in cols {
            if rng.random::<f64>() < rate && table.is_observed(i, j) {
                table.set_missing(i, j);
            }
        }
    }
}

pub fn corrupt_mcar<R: Rng + ?Sized>(table: &Table, rate: f64, rng: &mut R) -> Result<Table> {
    check_rate(rate)?;
    require_complete(table, "MCAR corruption")?;
    let mut out = table.clone();
    let cols: Vec<usize> = (0..table.n_cols()).collect();
    mcar_columns(&mut out, &cols, rate, rng);
    Ok(out)
}

/// Default number of always-observed anchor columns: `ceil(p / 3)`.
pub fn default_anchor_count(p: usize) -> usize {
    p.div_ceil(3)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bias `b` with `mean_i sigmoid(a_i + b) = rate`.
fn fit_bias(logits: &[f64], rate: f64) -> Option<f64> {
    let mean = |b: f64| logits.iter().map(|&a| sigmoid(a + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while mean(lo) > rate {
        lo *= 2.0;
        if lo < -1e6 {
            return None;
        }
    }
    while mean(hi) < rate {
        hi *= 2.0;
        if hi > 1e6 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let m = mean(mid);
        if (m - rate).abs() <= 1e-6 {
            return Some(mid);
        }
        if m < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Logistic missingness driven by a random set of always-observed anchors.
///
/// Each non-anchor column gets i.i.d. standard normal weights on the
/// standardized anchors (scaled by `weight_scale`) and a bias fitted by
/// bisection so its expected missing fraction equals `rate`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogisticMissingness {
    pub rate: f64,
    pub n_anchor: usize,
    pub weight_scale: f64,
}

impl LogisticMissingness {
    pub fn new(rate: f64, n_anchor: usize) -> Self {
        Self {
            rate,
            n_anchor,
            weight_scale: 1.0,
        }
    }

    /// Returns the corrupted table and the anchor column indices.
    pub fn apply<R: Rng + ?Sized>(&self, table: &Table, rng: &mut R) -> Result<(Table, Vec<usize>)> {
        check_rate(self.rate)?;
        require_complete(table, "MAR corruption")?;
        let (n, p) = (table.n_rows(), table.n_cols());
        if self.n_anchor == 0 || self.n_anchor >= p {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= n_anchor < p, got n_anchor = {} with p = {p}",
                self.n_anchor
            )));
        }
        let mut cols: Vec<usize> = (0..p).collect();
        cols.shuffle(rng);
        let mut anchors = cols[..self.n_anchor].to_vec();
        anchors.sort_unstable();
        let mut targets = cols[self.n_anchor..].to_vec();
        targets.sort_unstable();

        let mut out = table.clone();
        if self.rate == 0.0 || n == 0 {
            return Ok((out, anchors));
        }

        let standardized: Vec<Vec<f64>> = anchors
            .iter()
            .map(|&j| {
                let xs = table.observed_column(j);
                let mean = xs.iter().sum::<f64>() / n as f64;
                let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                let sd = if sd > 0.0 { sd } else { 1.0 };
                xs.iter().map(|x| (x - mean) / sd).collect()
            })
            .collect();

        for &j in &targets {
            let weights: Vec<f64> = (0..anchors.len())
                .map(|_| self.weight_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let logits: Vec<f64> = (0..n)
                .map(|i| weights.iter().zip(&standardized).map(|(w, z)| w * z[i]).sum())
                .collect();
            let bias = fit_bias(&logits, self.rate).ok_or_else(|| Error::LineSearchFailed {
                column: table.schema().columns[j].name.clone(),
            })?;
            for (i, a) in logits.iter().enumerate() {
                if rng.random::<f64>() < sigmoid(a + bias) {
                    out.set_missing(i, j);
                }
            }
        }
        Ok((out, anchors))
    }
}

pub fn corrupt_mar<R: Rng + ?Sized>(table: &Table, rate: f64, n_anchor: usize, rng: &mut R) -> Result<Table> {
    LogisticMissingness::new(rate, n_anchor).apply(table, rng).map(|(t, _)| t)
}

/// MAR as above, after which the anchor columns are MCAR-masked at the same rate
/// using the continuation of the same random stream.
pub fn corrupt_mnar_logistic<R: Rng + ?Sized>(
    table: &Table,
    rate: f64,
    n_anchor: usize,
    rng: &mut R,
) -> Result<Table> {
    let (mut out, anchors) = LogisticMissingness::new(rate, n_anchor).apply(table, rng)?;
    mcar_columns(&mut out, &anchors, rate, rng);
    Ok(out)
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Masks tail cells (below the `quantile` or above the `1 - quantile`
/// empirical percentile) of a random `subset_fraction` of the columns.
///
/// Each tail cell goes missing with probability `rate * p / (2 * quantile * k)`
/// for `k` selected columns, so the expected overall missing fraction is `rate`.
pub fn corrupt_mnar_quantile<R: Rng + ?Sized>(
    table: &Table,
    rate: f64,
    quantile: f64,
    subset_fraction: f64,
    rng: &mut R,
) -> Result<Table> {
    check_rate(rate)?;
    require_complete(table, "MNAR quantile corruption")?;
    if !(quantile > 0.0 && quantile < 0.5) {
        return Err(Error::InvalidArgument(format!("quantile {quantile} outside (0, 0.5)")));
    }
    if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subset fraction {subset_fraction} outside (0, 1]"
        )));
    }
    let p = table.n_cols();
    let k = ((subset_fraction * p as f64).round() as usize).clamp(1, p);
    let max = 2.0 * quantile * k as f64 / p as f64;
    if rate > max + 1e-12 {
        return Err(Error::InfeasibleRate { rate, max });
    }
    let mut out = table.clone();
    if rate == 0.0 || table.n_rows() == 0 {
        return Ok(out);
    }
    let prob = (rate / max).min(1.0);
    let mut cols: Vec<usize> = (0..p).collect();
    cols.shuffle(rng);
    let mut selected = cols[..k].to_vec();
    selected.sort_unstable();
    for &j in &selected {
        let mut sorted = table.observed_column(j);
        sorted.sort_by(f64::total_cmp);
        let lower = quantile_sorted(&sorted, quantile);
        let upper = quantile_sorted(&sorted, 1.0 - quantile);
        for i in 0..table.n_rows() {
            let v = table.value(i, j).expect("fully observed");
            if (v < lower || v > upper) && rng.random::<f64>() < prob {
                out.set_missing(i, j);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnarl,
    Mnarq,
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Self::Mcar),
            "mar" => Ok(Self::Mar),
            "mnarl" => Ok(Self::Mnarl),
            "mnarq" => Ok(Self::Mnarq),
            other => Err(Error::InvalidArgument(format!(
                "unknown mechanism '{other}' (expected mcar, mar, mnarl or mnarq)"
            ))),
        }
    }
}

/// Mechanism parameters beyond the rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionOptions {
    /// Anchor count for MAR / MNARL; `None` means `ceil(p / 3)`.
    pub n_anchor: Option<usize>,
    pub quantile: f64,
    pub subset_fraction: f64,
}

impl Default for CorruptionOptions {
    fn default() -> Self {
        Self {
            n_anchor: None,
            quantile: 0.25,
            subset_fraction: 1.0,
        }
    }
}

pub fn corrupt<R: Rng + ?Sized>(
    table: &Table,
    mechanism: Mechanism,
    rate: f64,
    options: &CorruptionOptions,
    rng: &mut R,
) -> Result<Table> {
    let n_anchor = options
        .n_anchor
        .unwrap_or_else(|| default_anchor_count(table.n_cols()));
    match mechanism {
        Mechanism::Mcar => corrupt_mcar(table, rate, rng),
        Mechanism::Mar => corrupt_mar(table, rate, n_anchor, rng),
        Mechanism::Mnarl => corrupt_mnar_logistic(table, rate, n_anchor, rng),
        Mechanism::Mnarq => corrupt_mnar_quantile(table, rate, options.quantile, options.subset_fraction, rng),
    }
}
