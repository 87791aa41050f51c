//! The masked conditional density network and its training loop.
//!
//! Each cell's label indexes a per-column embedding table whose row 0 is the
//! mask token. The `p` token embeddings of a row go through a stack of
//! pre-norm transformer encoder blocks, and the final hidden state of column
//! `j` feeds a per-column linear head with `L_j` outputs. There are no
//! positional encodings: the distinct tables already tell columns apart.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use macode_tensor::{AdamState, AdamW, Real, Tape, Tensor, TensorError, Var};

use crate::dataset::{Schema, Table};
use crate::discretize::{cardinalities, discretize, BinGrid, LabelMatrix, Marginals};
use crate::error::{Error, Result};
use crate::masking::sample_mask;
use crate::rng::{substream, ChaCha8Rng};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Hidden width of the feed-forward sublayer; `None` means `4 * embed_dim`.
    pub ffn_dim: Option<usize>,
    pub dropout: f64,
    pub bins: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: None,
            dropout: 0.0,
            bins: 50,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            batch_size: 1024,
            epochs: 500,
        }
    }
}

impl ModelConfig {
    pub fn ffn_width(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.embed_dim == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn_width() == 0 {
            return bad("embed_dim, n_heads, n_layers and ffn_dim must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.bins < 2 {
            return bad(format!("bins must be at least 2, got {}", self.bins));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

// Tensors per encoder layer, in storage order.
const LAYER_PARTS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "qkv.weight", "qkv.bias", "out.weight", "out.bias", "ln2.gain", "ln2.bias",
    "ffn1.weight", "ffn1.bias", "ffn2.weight", "ffn2.bias",
];

/// All trainable tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    cards: Vec<usize>,
    offsets: Vec<usize>,
    dim: usize,
    heads: usize,
    layers: usize,
    ffn: usize,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

fn layout(cards: &[usize], d: usize, layers: usize, f: usize) -> Vec<(String, Vec<usize>)> {
    let vocab: usize = cards.iter().map(|l| l + 1).sum();
    let mut out = vec![("embed".to_string(), vec![vocab, d])];
    for l in 0..layers {
        let shapes = [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ];
        for (part, shape) in LAYER_PARTS.iter().zip(shapes) {
            out.push((format!("layer{l}.{part}"), shape));
        }
    }
    out.push(("final_ln.gain".into(), vec![d]));
    out.push(("final_ln.bias".into(), vec![d]));
    for (j, &l) in cards.iter().enumerate() {
        out.push((format!("head{j}.weight"), vec![d, l]));
        out.push((format!("head{j}.bias"), vec![l]));
    }
    out
}

impl<T: Real> ModelParams<T> {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit norm gains.
    pub fn init(cards: &[usize], config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if cards.is_empty() || cards.iter().any(|&l| l < 2) {
            return Err(Error::InvalidArgument("every column needs at least 2 labels".into()));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let (d, f) = (config.embed_dim, config.ffn_width());
        let entries = layout(cards, d, config.n_layers, f);
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape) in entries {
            let t = if name.ends_with(".gain") {
                Tensor::from_fn(&shape, |_| T::one())
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(rng)))
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(cards, config, names, tensors))
    }

    fn assemble(cards: &[usize], config: &ModelConfig, names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let mut offsets = Vec::with_capacity(cards.len());
        let mut acc = 0;
        for &l in cards {
            offsets.push(acc);
            acc += l + 1;
        }
        Self {
            cards: cards.to_vec(),
            offsets,
            dim: config.embed_dim,
            heads: config.n_heads,
            layers: config.n_layers,
            ffn: config.ffn_width(),
            names,
            tensors,
        }
    }

    /// Rebuilds from named tensors, checking names and shapes against `config`.
    pub fn from_named(cards: &[usize], config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(cards, config.embed_dim, config.n_layers, config.ffn_width());
        if expected.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape), (got_name, t)) in expected.into_iter().zip(named) {
            if name != got_name || shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{got_name}' {:?} does not match expected '{name}' {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(cards, config, names, tensors))
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn n_cols(&self) -> usize {
        self.cards.len()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            cards: self.cards.clone(),
            offsets: self.offsets.clone(),
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            ffn: self.ffn,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_labels(&self, labels: &[u32]) -> Result<usize> {
        let p = self.n_cols();
        if labels.is_empty() || !labels.len().is_multiple_of(p) {
            return Err(Error::LengthMismatch(labels.len(), p));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y as usize > self.cards[i % p] {
                return Err(Error::IndexOutOfRange {
                    index: y as usize,
                    max: self.cards[i % p],
                });
            }
        }
        Ok(labels.len() / p)
    }

    /// Records the forward pass on `tape`. Returns the parameter leaves and
    /// the per-column logits `[B, L_j]`.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        labels: &[u32],
        requires_grad: bool,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let batch = self.check_labels(labels)?;
        let p = self.n_cols();
        let d = self.dim;
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();

        let tokens: Vec<usize> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| self.offsets[i % p] + y as usize)
            .collect();
        let mut x = tape.embedding_gather(vars[0], &tokens)?;

        let mut drop = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            match dropout.as_mut() {
                Some((rate, rng)) if *rate > 0.0 => {
                    let keep = T::from_f64_lossy(1.0 / (1.0 - *rate));
                    let n = tape.value(v).numel();
                    let mask = (0..n)
                        .map(|_| if rng.random::<f64>() < *rate { T::zero() } else { keep })
                        .collect();
                    Ok(tape.dropout(v, mask)?)
                }
                _ => Ok(v),
            }
        };

        for l in 0..self.layers {
            let w = &vars[1 + 12 * l..1 + 12 * (l + 1)];
            let h = affine_norm(tape, x, w[0], w[1])?;
            let qkv = tape.matmul(h, w[2])?;
            let qkv = tape.add_row(qkv, w[3])?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, d)?;
            let v = tape.slice_cols(qkv, 2 * d, d)?;
            let a = tape.attention(q, k, v, p, self.heads)?;
            let o = tape.matmul(a, w[4])?;
            let o = tape.add_row(o, w[5])?;
            let o = drop(tape, o)?;
            x = tape.add(x, o)?;

            let h = affine_norm(tape, x, w[6], w[7])?;
            let f = tape.matmul(h, w[8])?;
            let f = tape.add_row(f, w[9])?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w[10])?;
            let f = tape.add_row(f, w[11])?;
            let f = drop(tape, f)?;
            x = tape.add(x, f)?;
        }
        let fin = 1 + 12 * self.layers;
        x = affine_norm(tape, x, vars[fin], vars[fin + 1])?;

        let mut logits = Vec::with_capacity(p);
        for j in 0..p {
            let rows: Vec<usize> = (0..batch).map(|b| b * p + j).collect();
            let hj = tape.embedding_gather(x, &rows)?;
            let z = tape.matmul(hj, vars[fin + 2 + 2 * j])?;
            logits.push(tape.add_row(z, vars[fin + 3 + 2 * j])?);
        }
        Ok((vars, logits))
    }

    /// Per-column head logits for a batch of label rows (row-major, `B x p`).
    pub fn logits(&self, labels: &[u32]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let (_, out) = self.record(&mut tape, labels, false, None)?;
        Ok(out.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Per-column probabilities `pi_j`, each `[B, L_j]` with rows on the simplex.
    pub fn forward(&self, labels: &[u32]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let (_, out) = self.record(&mut tape, labels, false, None)?;
        out.into_iter()
            .map(|v| {
                let s = tape.softmax(v)?;
                Ok(tape.value(s).clone())
            })
            .collect()
    }
}

fn affine_norm<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
    let h = tape.layer_norm(x, LN_EPS)?;
    let h = tape.mul_row(h, gain)?;
    tape.add_row(h, bias)
}

/// Model input under mask `m` and observation indicator `r`: the label where
/// both are 1, the mask token 0 otherwise.
pub fn masked_input(labels: &[u32], mask: &[bool], observed: &[bool]) -> Vec<u32> {
    labels
        .iter()
        .zip(mask.iter().zip(observed))
        .map(|(&y, (&m, &r))| if m && r { y } else { 0 })
        .collect()
}

/// Per-cell loss weights for a batch of `batch` rows: `1 / batch` where the
/// cell is masked but observed, 0 elsewhere.
pub fn loss_weights(mask: &[bool], observed: &[bool], batch: usize) -> Vec<f64> {
    mask.iter()
        .zip(observed)
        .map(|(&m, &r)| if !m && r { 1.0 / batch as f64 } else { 0.0 })
        .collect()
}

fn masked_nll<T: Real>(probs: &[Tensor<T>], labels: &[u32], include: impl Fn(usize) -> bool) -> f64 {
    let p = probs.len();
    let batch = labels.len() / p;
    let mut total = 0.0;
    for b in 0..batch {
        for (j, pj) in probs.iter().enumerate() {
            let i = b * p + j;
            if include(i) {
                total -= pj.row(b)[labels[i] as usize - 1].as_f64().ln();
            }
        }
    }
    total / batch as f64
}

/// Batch-averaged negative log-likelihood of the masked cells
/// (`mask == false`). All labels at masked positions must be >= 1.
pub fn loss_complete<T: Real>(probs: &[Tensor<T>], labels: &[u32], mask: &[bool]) -> f64 {
    masked_nll(probs, labels, |i| !mask[i])
}

/// As [`loss_complete`] but only over cells that are masked and observed.
pub fn loss_missing<T: Real>(probs: &[Tensor<T>], labels: &[u32], mask: &[bool], observed: &[bool]) -> f64 {
    masked_nll(probs, labels, |i| !mask[i] && observed[i])
}

/// Records the weighted masked cross-entropy of the model on `tape`.
pub fn record_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &[Var],
    labels: &[u32],
    weights: &[f64],
) -> Result<Var, TensorError> {
    let p = logits.len();
    let batch = labels.len() / p;
    let mut total: Option<Var> = None;
    for (j, &z) in logits.iter().enumerate() {
        let targets: Vec<usize> = (0..batch).map(|b| (labels[b * p + j] as usize).saturating_sub(1)).collect();
        let w: Vec<T> = (0..batch).map(|b| T::from_f64_lossy(weights[b * p + j])).collect();
        let ce = tape.cross_entropy(z, &targets, &w)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    Ok(total.expect("at least one column"))
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Trains a fresh model on `table` (which may contain missing cells).
///
/// Every epoch shuffles the rows; every row of every batch gets a fresh mask
/// from [`sample_mask`]. The network sees `y * min(m, r)` and is scored on
/// cells with `m = 0` and `r = 1`.
pub fn train(
    table: &Table,
    config: &ModelConfig,
    grid: &BinGrid,
    marginals: &Marginals,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    if grid.num_bins() != config.bins {
        return Err(Error::InvalidArgument(format!(
            "grid has {} bins but the config asks for {}",
            grid.num_bins(),
            config.bins
        )));
    }
    let labels = discretize(table, marginals, grid)?;
    let cards = cardinalities(table.schema(), grid);
    let mut params = ModelParams::<f32>::init(&cards, config, &mut substream(seed, "init"))?;
    let report = train_labels(&mut params, &labels, table.observed_mask(), config, seed, &mut on_epoch)?;
    Ok((params, report))
}

/// Training loop over an already discretized label matrix.
pub fn train_labels(
    params: &mut ModelParams,
    labels: &LabelMatrix,
    observed: &[bool],
    config: &ModelConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    let (n, p) = (labels.n_rows(), labels.n_cols());
    if n == 0 || observed.len() != n * p || params.cards() != labels.cards() {
        return Err(Error::SchemaMismatch("labels, observed mask and model disagree".into()));
    }
    let mut order_rng = substream(seed, "train");
    let mut mask_rng = substream(seed, "mask");
    let mut drop_rng = substream(seed, "dropout");
    let opt = config.optimizer();
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, rows) in order.chunks(config.batch_size).enumerate() {
            let bsz = rows.len();
            let mut y = Vec::with_capacity(bsz * p);
            let mut r = Vec::with_capacity(bsz * p);
            let mut m = Vec::with_capacity(bsz * p);
            for &i in rows {
                y.extend_from_slice(labels.row(i));
                r.extend_from_slice(&observed[i * p..(i + 1) * p]);
                m.extend(sample_mask(p, &mut mask_rng).0);
            }
            let input = masked_input(&y, &m, &r);
            let weights = loss_weights(&m, &r, bsz);

            let diverged = |source| Error::TrainingDiverged {
                epoch,
                batch: bi + 1,
                source,
            };
            let mut tape = Tape::new();
            let dropout = (config.dropout > 0.0).then_some((config.dropout, &mut drop_rng));
            let (vars, logits) = params.record(&mut tape, &input, true, dropout).map_err(|e| match e {
                Error::Tensor(t) => diverged(t),
                other => other,
            })?;
            let loss = record_loss(&mut tape, &logits, &y, &weights).map_err(diverged)?;
            let mut grads = tape.backward(loss).map_err(diverged)?;
            let grads: Vec<Tensor<f32>> = vars
                .iter()
                .zip(params.tensors())
                .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            opt.step(&mut state, params.tensors_mut().iter_mut(), &grads)?;
            if params.tensors().iter().any(|t| !t.is_finite()) {
                return Err(diverged(TensorError::NonFinite { op: "adamw_step" }));
            }
            loss_sum += tape.value(loss).item() as f64 * bsz as f64;
            batches += 1;
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / n as f64,
            batches,
        };
        on_epoch(&log);
        report.epoch_losses.push(log.loss);
    }
    report.steps = state.steps();
    Ok(report)
}

/// Everything needed to sample from or impute with a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub schema: Schema,
    pub config: ModelConfig,
    pub grid: BinGrid,
    pub marginals: Marginals,
    pub params: ModelParams,
    pub seed: u64,
}

impl FittedModel {
    /// Fits marginal CDFs on the observed cells, then trains on a uniform grid.
    pub fn fit(table: &Table, config: &ModelConfig, seed: u64, on_epoch: impl FnMut(&EpochLog)) -> Result<(Self, TrainReport)> {
        config.validate()?;
        let grid = BinGrid::uniform(config.bins)?;
        let marginals = Marginals::fit(table)?;
        let (params, report) = train(table, config, &grid, &marginals, seed, on_epoch)?;
        let model = Self {
            schema: table.schema().clone(),
            config: config.clone(),
            grid,
            marginals,
            params,
            seed,
        };
        Ok((model, report))
    }

    /// Labels of `table` under this model's marginals and grid.
    pub fn labels(&self, table: &Table) -> Result<LabelMatrix> {
        if table.schema() != &self.schema {
            return Err(Error::SchemaMismatch("table schema differs from the model's".into()));
        }
        discretize(table, &self.marginals, &self.grid)
    }
}
