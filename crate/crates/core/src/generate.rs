//! Synthesis, conditional completion, multiple imputation and Rubin pooling.
//!
//! A row is filled one column at a time in a fresh random order. At each step
//! the network sees the labels drawn so far (0 elsewhere) and the next label is
//! drawn from `softmax(z / tau)` of that column's head logits. Continuous
//! labels are then decoded by drawing a quantile level inside the bin and
//! inverting the column's empirical CDF.
//!
//! Every row owns a random stream keyed by its index, so results do not depend
//! on how rows are batched.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use macode_tensor::Real;

use crate::cdf::EmpiricalCdf;
use crate::dataset::{ColumnKind, Table};
use crate::discretize::{BinGrid, LabelMatrix};
use crate::error::{Error, Result};
use crate::model::FittedModel;
use crate::rng::{derive_seed, row_stream, ChaCha8Rng};

/// Rows pushed through the network together.
const ROW_BATCH: usize = 512;
const MAX_BIN_DRAWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub n_samples: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl SynthesisConfig {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            temperature: 1.0,
            seed,
        }
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// `softmax(z / tau)` in f64.
pub fn tempered_probabilities<T: Real>(logits: &[T], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z.as_f64() / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Index drawn from the categorical distribution `probs`.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the running total; take the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Decodes bin `label` of a continuous column to a value.
///
/// The quantile level is drawn uniformly from `[max(b_{l-1}, s), b_l)` where
/// `s` is the first CDF level at or above `b_{l-1}`: levels below `s` would
/// invert to a value whose CDF lands in the previous bin. Draws that still
/// fail to re-bin to `label` are retried; after that the node at level `s` is
/// returned. Bins that hold no node fall back to the full interval.
pub fn sample_in_bin<R: Rng + ?Sized>(cdf: &EmpiricalCdf, grid: &BinGrid, label: usize, rng: &mut R) -> Result<f64> {
    let (lo, hi) = grid.interval(label)?;
    let start = match cdf.level_at_or_above(lo) {
        Some(s) if s < hi || hi == 1.0 => {
            // the first node also covers every level below its own
            if s == cdf.level(0) {
                lo
            } else {
                s
            }
        }
        _ => {
            let u = lo + rng.random::<f64>() * (hi - lo);
            return Ok(cdf.inverse(u.min(hi)));
        }
    };
    for _ in 0..MAX_BIN_DRAWS {
        let u = start + rng.random::<f64>() * (hi - start);
        if u >= hi && hi < 1.0 {
            continue;
        }
        let x = cdf.inverse(u);
        if grid.bin_of(cdf.eval(x)) == label {
            return Ok(x);
        }
    }
    Ok(cdf.inverse(cdf.level_at_or_above(lo).expect("occupied bin")))
}

/// Result of filling one batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub labels: LabelMatrix,
    /// Columns visited per row, in visiting order.
    pub orders: Vec<Vec<usize>>,
    pub table: Table,
}

/// Fills every zero label of `partial` (row-major `n x p`).
///
/// Cells observed in `source` are copied unchanged; all other cells are
/// decoded from their sampled labels. Row `i` draws from the stream
/// `(stream_seed, i)`.
fn complete_labels(
    model: &FittedModel,
    partial: Vec<u32>,
    source: Option<&Table>,
    tau: f64,
    stream_seed: u64,
) -> Result<Completion> {
    check_temperature(tau)?;
    let schema = &model.schema;
    let p = schema.len();
    let n = partial.len() / p;
    let mut labels = partial;
    let mut orders = Vec::with_capacity(n);
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| row_stream(stream_seed, i as u64)).collect();
    for (i, rng) in rngs.iter_mut().enumerate() {
        let mut order: Vec<usize> = (0..p).filter(|&j| labels[i * p + j] == 0).collect();
        order.shuffle(rng);
        orders.push(order);
    }

    for start in (0..n).step_by(ROW_BATCH) {
        let end = (start + ROW_BATCH).min(n);
        let steps = orders[start..end].iter().map(Vec::len).max().unwrap_or(0);
        for t in 0..steps {
            let active: Vec<usize> = (start..end).filter(|&i| orders[i].len() > t).collect();
            let mut batch = Vec::with_capacity(active.len() * p);
            for &i in &active {
                batch.extend_from_slice(&labels[i * p..(i + 1) * p]);
            }
            let logits = model.params.logits(&batch)?;
            for (b, &i) in active.iter().enumerate() {
                let j = orders[i][t];
                let probs = tempered_probabilities(logits[j].row(b), tau);
                labels[i * p + j] = sample_index(&probs, &mut rngs[i]) as u32 + 1;
            }
        }
    }

    let mut values = vec![0.0; n * p];
    for i in 0..n {
        for (j, col) in schema.columns.iter().enumerate() {
            let k = i * p + j;
            if let Some(v) = source.and_then(|s| s.value(i, j)) {
                values[k] = v;
                continue;
            }
            values[k] = match col.kind {
                ColumnKind::Categorical => labels[k] as f64,
                ColumnKind::Continuous => {
                    let cdf = model.marginals.get(j).expect("continuous column has a CDF");
                    sample_in_bin(cdf, &model.grid, labels[k] as usize, &mut rngs[i])?
                }
            };
        }
    }
    let table = Table::complete(schema.clone(), values)?;
    let labels = LabelMatrix::new(model.params.cards().to_vec(), labels)?;
    Ok(Completion { labels, orders, table })
}

/// Synthesizes rows and also returns their labels and column orders.
pub fn synthesize_traced(model: &FittedModel, config: &SynthesisConfig) -> Result<Completion> {
    check_temperature(config.temperature)?;
    let p = model.schema.len();
    if config.n_samples == 0 {
        let table = Table::new(model.schema.clone(), Vec::new(), Vec::new())?;
        let labels = LabelMatrix::new(model.params.cards().to_vec(), Vec::new())?;
        return Ok(Completion {
            labels,
            orders: Vec::new(),
            table,
        });
    }
    let seed = derive_seed(config.seed, "generate");
    complete_labels(model, vec![0; config.n_samples * p], None, config.temperature, seed)
}

pub fn synthesize(model: &FittedModel, config: &SynthesisConfig) -> Result<Table> {
    synthesize_traced(model, config).map(|c| c.table)
}

/// Completes one row given its labels (0 = to fill). Observed labels are
/// kept; missing ones are visited in random order. Returns the full label
/// row and the decoded values.
pub fn complete_row<R: Rng + ?Sized>(
    model: &FittedModel,
    partial: &[u32],
    tau: f64,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<f64>)> {
    check_temperature(tau)?;
    let p = model.schema.len();
    if partial.len() != p {
        return Err(Error::LengthMismatch(partial.len(), p));
    }
    let mut labels = partial.to_vec();
    let mut order: Vec<usize> = (0..p).filter(|&j| labels[j] == 0).collect();
    order.shuffle(rng);
    for &j in &order {
        let logits = model.params.logits(&labels)?;
        let probs = tempered_probabilities(logits[j].row(0), tau);
        labels[j] = sample_index(&probs, rng) as u32 + 1;
    }
    let mut values = Vec::with_capacity(p);
    for (j, col) in model.schema.columns.iter().enumerate() {
        values.push(match col.kind {
            ColumnKind::Categorical => labels[j] as f64,
            ColumnKind::Continuous => {
                let cdf = model.marginals.get(j).expect("continuous column has a CDF");
                sample_in_bin(cdf, &model.grid, labels[j] as usize, rng)?
            }
        });
    }
    Ok((labels, values))
}

/// `M` completed copies of a table with missing cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationPool {
    pub tables: Vec<Table>,
}

impl ImputationPool {
    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

/// Completes `corrupted` independently `m` times. Observed cells are copied
/// bit for bit; draw `k` uses its own family of row streams.
pub fn multiple_impute(model: &FittedModel, corrupted: &Table, m: usize, tau: f64, seed: u64) -> Result<ImputationPool> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one imputation".into()));
    }
    let labels = model.labels(corrupted)?;
    let mut tables = Vec::with_capacity(m);
    for k in 0..m {
        let stream = derive_seed(seed, &format!("impute/{k}"));
        let done = complete_labels(model, labels.as_slice().to_vec(), Some(corrupted), tau, stream)?;
        tables.push(done.table);
    }
    Ok(ImputationPool { tables })
}

/// Rubin-pooled inference for the share of a column above its mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RubinResult {
    pub column: String,
    pub q_star: f64,
    pub q_hat: f64,
    pub within: f64,
    pub between: f64,
    pub total_variance: f64,
    pub bias: f64,
    pub covered: bool,
    pub width: f64,
}

fn share_above_mean(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().filter(|&&x| x > mean).count() as f64 / xs.len() as f64
}

/// Pools point estimates `q_hats` for a sample of size `n` against `q_star`.
pub fn rubin_pool(q_hats: &[f64], n: usize, q_star: f64) -> RubinResult {
    let m = q_hats.len() as f64;
    let q_hat = q_hats.iter().sum::<f64>() / m;
    let within = q_hats.iter().map(|q| q * (1.0 - q) / n as f64).sum::<f64>() / m;
    let between = if q_hats.len() > 1 {
        q_hats.iter().map(|q| (q - q_hat).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let total = within + (m + 1.0) / m * between;
    let half = 1.96 * total.sqrt();
    RubinResult {
        column: String::new(),
        q_star,
        q_hat,
        within,
        between,
        total_variance: total,
        bias: (q_hat - q_star).abs(),
        covered: q_star > q_hat - half && q_star < q_hat + half,
        width: 2.0 * half,
    }
}

pub fn rubin_evaluate(pool: &ImputationPool, complete: &Table, column: usize) -> Result<RubinResult> {
    let schema = complete.schema();
    let col = schema
        .columns
        .get(column)
        .ok_or(Error::IndexOutOfRange {
            index: column,
            max: schema.len().saturating_sub(1),
        })?;
    if !col.is_continuous() {
        return Err(Error::InvalidArgument(format!("column '{}' is not continuous", col.name)));
    }
    if !complete.is_fully_observed() {
        return Err(Error::NotFullyObserved("Rubin evaluation ground truth"));
    }
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty imputation pool".into()));
    }
    let truth = complete.observed_column(column);
    if truth.iter().all(|&x| x == truth[0]) {
        return Err(Error::DegenerateColumn {
            column: col.name.clone(),
            reason: "constant ground-truth column".into(),
        });
    }
    let mut q_hats = Vec::with_capacity(pool.len());
    for t in &pool.tables {
        if t.schema() != schema || t.n_rows() != complete.n_rows() || !t.is_fully_observed() {
            return Err(Error::SchemaMismatch("imputed table does not match the ground truth".into()));
        }
        q_hats.push(share_above_mean(&t.observed_column(column)));
    }
    let mut out = rubin_pool(&q_hats, complete.n_rows(), share_above_mean(&truth));
    out.column = col.name.clone();
    Ok(out)
}
