//! Fidelity, privacy and utility metrics for synthetic tables.
//!
//! Marginal metrics (KL, KS, chi-square, Wasserstein) use every observed cell
//! of a column. Row-based metrics (MMD, DCR, the k-NN utility proxies) use
//! only rows with no missing cell.
//!
//! The Wasserstein figure is a column-wise average (exact 1-D distance for
//! continuous columns, total variation of level frequencies for categorical
//! ones), and the utility numbers come from a 5-nearest-neighbour learner.
//! Report keys carry `_columnwise` and `_proxy` suffixes to say so.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::dataset::{ColumnKind, Table};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const KL_EPSILON: f64 = 1e-6;
pub const DEFAULT_KL_BINS: usize = 10;
pub const DEFAULT_MMD_ROWS: usize = 1000;
pub const KNN_K: usize = 5;
const DCR_PERCENTILE: f64 = 0.05;

fn same_schema(real: &Table, synth: &Table) -> Result<()> {
    if real.schema() != synth.schema() {
        return Err(Error::SchemaMismatch("real and synthetic tables differ in schema".into()));
    }
    Ok(())
}

fn smoothed(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if total > 0.0 { c / total } else { 1.0 / counts.len() as f64 } + KL_EPSILON)
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// `KL(p || q)` between count vectors after epsilon smoothing.
pub fn kl_divergence(p_counts: &[f64], q_counts: &[f64]) -> f64 {
    let p = smoothed(p_counts);
    let q = smoothed(q_counts);
    p.iter().zip(&q).map(|(&a, &b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

fn level_counts(t: &Table, col: usize, levels: usize) -> Vec<f64> {
    let mut counts = vec![0.0; levels];
    for i in 0..t.n_rows() {
        if let Some(l) = t.level(i, col) {
            counts[l - 1] += 1.0;
        }
    }
    counts
}

fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &x in xs {
        let b = if width > 0.0 {
            (((x - lo) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1.0;
    }
    counts
}

/// Mean over columns of `KL(real || synth)` between marginal histograms:
/// `bins` equal-width cells over the pooled range for continuous columns,
/// level frequencies for categorical ones.
pub fn kl_marginal(real: &Table, synth: &Table, bins: usize) -> Result<f64> {
    same_schema(real, synth)?;
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one histogram bin".into()));
    }
    let mut total = 0.0;
    for (j, col) in real.schema().columns.iter().enumerate() {
        let (p, q) = match col.kind {
            ColumnKind::Categorical => (level_counts(real, j, col.num_levels()), level_counts(synth, j, col.num_levels())),
            ColumnKind::Continuous => {
                let (a, b) = (real.observed_column(j), synth.observed_column(j));
                let lo = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
                let hi = a.iter().chain(&b).copied().fold(f64::NEG_INFINITY, f64::max);
                (histogram(&a, lo, hi, bins), histogram(&b, lo, hi, bins))
            }
        };
        total += kl_divergence(&p, &q);
    }
    Ok(total / real.n_cols() as f64)
}

fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a.to_vec()), sorted(b.to_vec()));
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Pearson chi-square of synthetic level counts against real frequencies
/// scaled to the synthetic size; expected counts are floored at epsilon.
pub fn chi_square(real_counts: &[f64], synth_counts: &[f64]) -> f64 {
    let nr: f64 = real_counts.iter().sum();
    let ns: f64 = synth_counts.iter().sum();
    if nr == 0.0 {
        return 0.0;
    }
    real_counts
        .iter()
        .zip(synth_counts)
        .map(|(&r, &o)| {
            let e = (r / nr * ns).max(KL_EPSILON);
            (o - e).powi(2) / e
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gof {
    /// Mean KS over continuous columns.
    pub ks: Option<f64>,
    /// Mean chi-square over categorical columns.
    pub chi2: Option<f64>,
}

pub fn gof(real: &Table, synth: &Table) -> Result<Gof> {
    same_schema(real, synth)?;
    let (mut ks, mut nk, mut chi, mut nc) = (0.0, 0, 0.0, 0);
    for (j, col) in real.schema().columns.iter().enumerate() {
        match col.kind {
            ColumnKind::Continuous => {
                ks += ks_statistic(&real.observed_column(j), &synth.observed_column(j));
                nk += 1;
            }
            ColumnKind::Categorical => {
                let l = col.num_levels();
                chi += chi_square(&level_counts(real, j, l), &level_counts(synth, j, l));
                nc += 1;
            }
        }
    }
    Ok(Gof {
        ks: (nk > 0).then(|| ks / nk as f64),
        chi2: (nc > 0).then(|| chi / nc as f64),
    })
}

/// Exact 1-Wasserstein distance between two samples: the area between their
/// empirical CDFs.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a.to_vec()), sorted(b.to_vec()));
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut points: Vec<f64> = a.iter().chain(&b).copied().collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let (mut i, mut j, mut area) = (0, 0, 0.0);
    for w in points.windows(2) {
        while i < a.len() && a[i] <= w[0] {
            i += 1;
        }
        while j < b.len() && b[j] <= w[0] {
            j += 1;
        }
        area += (i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs() * (w[1] - w[0]);
    }
    area
}

fn total_variation_counts(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    0.5 * a.iter().zip(b).map(|(x, y)| (x / na - y / nb).abs()).sum::<f64>()
}

/// Mean over columns of the 1-D Wasserstein distance (continuous, raw units)
/// or the total variation of level frequencies (categorical).
pub fn wasserstein1(real: &Table, synth: &Table) -> Result<f64> {
    same_schema(real, synth)?;
    let mut total = 0.0;
    for (j, col) in real.schema().columns.iter().enumerate() {
        total += match col.kind {
            ColumnKind::Continuous => wasserstein_1d(&real.observed_column(j), &synth.observed_column(j)),
            ColumnKind::Categorical => {
                let l = col.num_levels();
                total_variation_counts(&level_counts(real, j, l), &level_counts(synth, j, l))
            }
        };
    }
    Ok(total / real.n_cols() as f64)
}

fn complete_rows(t: &Table) -> Vec<usize> {
    (0..t.n_rows()).filter(|&i| t.row_is_complete(i)).collect()
}

/// Mean and standard deviation (population; 1 when zero) of observed cells.
/// Mean and population sd; summed in sorted order so row order cannot change them.
fn moments(t: &Table, col: usize) -> (f64, f64) {
    let xs = sorted(t.observed_column(col));
    if xs.is_empty() {
        return (0.0, 1.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

/// Row encoder: standardized continuous columns plus one-hot categorical
/// columns, with statistics taken from a reference table.
struct Encoder {
    cols: Vec<(usize, ColumnKind, f64, f64, usize)>,
}

impl Encoder {
    fn new(reference: &Table, columns: &[usize], one_hot: bool) -> Self {
        let schema = reference.schema();
        let cols = columns
            .iter()
            .filter(|&&j| one_hot || schema.columns[j].is_continuous())
            .map(|&j| {
                let c = &schema.columns[j];
                let (m, s) = if c.is_continuous() { moments(reference, j) } else { (0.0, 1.0) };
                (j, c.kind, m, s, c.num_levels())
            })
            .collect();
        Self { cols }
    }

    fn width(&self) -> usize {
        self.cols
            .iter()
            .map(|&(_, k, _, _, l)| if k == ColumnKind::Continuous { 1 } else { l })
            .sum()
    }

    fn encode(&self, t: &Table, rows: &[usize]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&i| {
                let mut v = Vec::with_capacity(self.width());
                for &(j, kind, m, s, l) in &self.cols {
                    let x = t.value(i, j).expect("complete row");
                    match kind {
                        ColumnKind::Continuous => v.push((x - m) / s),
                        ColumnKind::Categorical => {
                            let start = v.len();
                            v.resize(start + l, 0.0);
                            v[start + x as usize - 1] = 1.0;
                        }
                    }
                }
                v
            })
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Linear-interpolation quantile of unsorted data.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let s = sorted(xs.to_vec());
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Unbiased MMD^2 with a Gaussian kernel of bandwidth `sigma`, clamped at 0.
pub fn mmd_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    if x.len() < 2 || y.len() < 2 {
        return 0.0;
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += k(&s[i], &s[j]);
            }
        }
        2.0 * acc
    };
    let kxx = within(x) / (m * (m - 1.0));
    let kyy = within(y) / (n * (n - 1.0));
    let mut kxy = 0.0;
    for a in x {
        for b in y {
            kxy += k(a, b);
        }
    }
    (kxx + kyy - 2.0 * kxy / (m * n)).max(0.0)
}

/// Median pairwise Euclidean distance (1 if it is zero).
pub fn median_distance(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let med = percentile(&d, 0.5);
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn subsample(rows: Vec<usize>, max_rows: usize, seed: u64, name: &str) -> Vec<usize> {
    if rows.len() <= max_rows {
        return rows;
    }
    let mut rows = rows;
    rows.shuffle(&mut substream(seed, name));
    rows.truncate(max_rows);
    rows.sort_unstable();
    rows
}

/// MMD^2 between complete rows of both tables, encoded with the real table's
/// statistics and subsampled to `max_rows` each with a seed-fixed draw. The
/// bandwidth is the median pairwise distance of the pooled subsample.
pub fn mmd(real: &Table, synth: &Table, max_rows: usize, seed: u64) -> Result<f64> {
    same_schema(real, synth)?;
    let all: Vec<usize> = (0..real.n_cols()).collect();
    let enc = Encoder::new(real, &all, true);
    let x = enc.encode(real, &subsample(complete_rows(real), max_rows, seed, "mmd/real"));
    let y = enc.encode(synth, &subsample(complete_rows(synth), max_rows, seed, "mmd/synth"));
    let pooled: Vec<Vec<f64>> = x.iter().chain(&y).cloned().collect();
    Ok(mmd_unbiased(&x, &y, median_distance(&pooled)))
}

/// Distance to closest record: for every synthetic row the Euclidean distance
/// to its nearest real row over standardized continuous columns, then the 5th
/// percentile of those distances.
pub fn dcr(real: &Table, synth: &Table) -> Result<f64> {
    same_schema(real, synth)?;
    let cont = real.schema().continuous_indices();
    if cont.is_empty() {
        return Err(Error::NoContinuousColumns);
    }
    let enc = Encoder::new(real, &cont, false);
    let x = enc.encode(real, &complete_rows(real));
    let y = enc.encode(synth, &complete_rows(synth));
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("DCR needs complete rows in both tables".into()));
    }
    let nearest: Vec<f64> = y
        .iter()
        .map(|b| x.iter().map(|a| sq_dist(a, b)).fold(f64::INFINITY, f64::min).sqrt())
        .collect();
    Ok(percentile(&nearest, DCR_PERCENTILE))
}

pub fn smape(pred: &[f64], truth: &[f64]) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &y)| {
            let den = p.abs() + y.abs();
            if den == 0.0 {
                0.0
            } else {
                2.0 * (p - y).abs() / den
            }
        })
        .sum();
    total / pred.len() as f64
}

/// Macro F1 over the classes that occur in either labels or predictions.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let mut classes: Vec<usize> = pred.iter().chain(truth).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let f1s: f64 = classes
        .iter()
        .map(|&c| {
            let tp = pred.iter().zip(truth).filter(|&(&p, &y)| p == c && y == c).count() as f64;
            let fp = pred.iter().zip(truth).filter(|&(&p, &y)| p == c && y != c).count() as f64;
            let fneg = pred.iter().zip(truth).filter(|&(&p, &y)| p != c && y == c).count() as f64;
            let den = 2.0 * tp + fp + fneg;
            if den == 0.0 {
                0.0
            } else {
                2.0 * tp / den
            }
        })
        .sum();
    f1s / classes.len() as f64
}

/// Indices of the `k` nearest rows of `train` to `q`, ties broken by index.
fn nearest(train: &[Vec<f64>], q: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, t)| (sq_dist(t, q), i)).collect();
    let k = k.min(d.len());
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, i)| i).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Utility {
    Smape(f64),
    F1Macro(f64),
}

/// Fits a 5-NN predictor of `target` on `synth`, scores it on `test`.
///
/// Features are all other columns (continuous standardized with `real_train`
/// statistics, categorical one-hot). Regression predicts the neighbour mean
/// and reports SMAPE; classification takes a majority vote (ties go to the
/// class of the nearer neighbour) and reports macro F1.
pub fn utility_proxy(real_train: &Table, synth: &Table, test: &Table, target: usize) -> Result<Utility> {
    same_schema(real_train, synth)?;
    same_schema(real_train, test)?;
    if target >= real_train.n_cols() {
        return Err(Error::IndexOutOfRange {
            index: target,
            max: real_train.n_cols() - 1,
        });
    }
    let features: Vec<usize> = (0..real_train.n_cols()).filter(|&j| j != target).collect();
    let enc = Encoder::new(real_train, &features, true);
    let train_rows = complete_rows(synth);
    if train_rows.is_empty() {
        return Err(Error::EmptyTrain);
    }
    let test_rows = complete_rows(test);
    if test_rows.is_empty() {
        return Err(Error::InvalidArgument("test table has no complete rows".into()));
    }
    let xs = enc.encode(synth, &train_rows);
    let ys: Vec<f64> = train_rows.iter().map(|&i| synth.value(i, target).unwrap()).collect();
    let xt = enc.encode(test, &test_rows);
    let yt: Vec<f64> = test_rows.iter().map(|&i| test.value(i, target).unwrap()).collect();
    let neighbours: Vec<Vec<usize>> = xt.iter().map(|q| nearest(&xs, q, KNN_K)).collect();

    if real_train.schema().columns[target].is_continuous() {
        let pred: Vec<f64> = neighbours
            .iter()
            .map(|nb| nb.iter().map(|&i| ys[i]).sum::<f64>() / nb.len() as f64)
            .collect();
        Ok(Utility::Smape(smape(&pred, &yt)))
    } else {
        let pred: Vec<usize> = neighbours
            .iter()
            .map(|nb| {
                let mut votes: Vec<(usize, usize, usize)> = Vec::new(); // (class, count, first rank)
                for (rank, &i) in nb.iter().enumerate() {
                    let c = ys[i] as usize;
                    match votes.iter_mut().find(|v| v.0 == c) {
                        Some(v) => v.1 += 1,
                        None => votes.push((c, 1, rank)),
                    }
                }
                votes
                    .into_iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
                    .map(|v| v.0)
                    .unwrap()
            })
            .collect();
        let truth: Vec<usize> = yt.iter().map(|&y| y as usize).collect();
        Ok(Utility::F1Macro(macro_f1(&pred, &truth)))
    }
}

/// Evaluation output; fields are absent when the metric does not apply.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gof_ks: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gof_chi2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmd: Option<f64>,
    #[serde(rename = "wd_columnwise", skip_serializing_if = "Option::is_none")]
    pub wd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dcr: Option<f64>,
    #[serde(rename = "smape_proxy", skip_serializing_if = "Option::is_none")]
    pub smape: Option<f64>,
    #[serde(rename = "f1_macro_proxy", skip_serializing_if = "Option::is_none")]
    pub f1_macro: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions<'a> {
    pub kl_bins: usize,
    pub mmd_rows: usize,
    pub seed: u64,
    /// Held-out table and target column for the utility proxies.
    pub test: Option<(&'a Table, usize)>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            kl_bins: DEFAULT_KL_BINS,
            mmd_rows: DEFAULT_MMD_ROWS,
            seed: 0,
            test: None,
        }
    }
}

pub fn evaluate(real: &Table, synth: &Table, options: &EvalOptions) -> Result<MetricsReport> {
    same_schema(real, synth)?;
    let g = gof(real, synth)?;
    let mut report = MetricsReport {
        kl: Some(kl_marginal(real, synth, options.kl_bins)?),
        gof_ks: g.ks,
        gof_chi2: g.chi2,
        mmd: Some(mmd(real, synth, options.mmd_rows, options.seed)?),
        wd: Some(wasserstein1(real, synth)?),
        dcr: match dcr(real, synth) {
            Ok(v) => Some(v),
            Err(Error::NoContinuousColumns) => None,
            Err(e) => return Err(e),
        },
        ..MetricsReport::default()
    };
    if let Some((test, target)) = options.test {
        match utility_proxy(real, synth, test, target)? {
            Utility::Smape(v) => report.smape = Some(v),
            Utility::F1Macro(v) => report.f1_macro = Some(v),
        }
    }
    Ok(report)
}
