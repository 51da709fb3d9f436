//! Reference network and training loop.
//!
//! The model embeds each of the 11 input digits, concatenates the embeddings,
//! applies a stack of rectified dense layers and a final linear classifier.
//! Gradients are written out by hand. Optimization is SGD with momentum,
//! coupled weight decay and a linear-warmup cosine learning-rate schedule.
//!
//! All reductions run in a fixed order, so a run is a pure function of its
//! configs, data and seed.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::map_indexed;
use crate::rng::{derive_seed, RngStream};
use crate::task::Sequence;
use crate::taskgen::{Dataset, Example};

const INIT_DOMAIN: u64 = 0x1417;
const SHUFFLE_DOMAIN: u64 = 0x5a0f;
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn new(embed_dim: usize, hidden: &[usize]) -> Self {
        Self {
            vocab: 10,
            embed_dim,
            hidden: hidden.to_vec(),
            classes: 10,
            seq_len: crate::task::SEQ_LEN,
        }
    }

    /// The full-size MLP: embedding 64, hidden 512-1024-512-64.
    pub fn full() -> Self {
        Self::new(64, &[512, 1024, 512, 64])
    }

    pub fn full_2x() -> Self {
        Self::new(64, &[1024, 2048, 1024, 128])
    }

    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self::new(16, &[64, 128, 64, 32])
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.embed_dim == 0 || self.classes == 0 || self.seq_len == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.seq_len * self.embed_dim
    }

    /// `(in, out)` of every dense layer, classifier last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut width = self.input_width();
        for &h in &self.hidden {
            dims.push((width, h));
            width = h;
        }
        dims.push((width, self.classes));
        dims
    }

    pub fn count_params(&self) -> usize {
        self.vocab * self.embed_dim + self.layer_dims().iter().map(|&(i, o)| i * o + o).sum::<usize>()
    }
}

pub fn count_params(cfg: &ModelConfig) -> usize {
    cfg.count_params()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Embedding matrix, then `(weight, bias)` per dense layer, classifier last.
/// Weights are stored `in x out`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub embedding: Segment,
    pub layers: Vec<(Segment, Segment)>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let embedding = Segment {
            name: "embedding".into(),
            offset: 0,
            rows: cfg.vocab,
            cols: cfg.embed_dim,
        };
        let mut offset = embedding.len();
        let dims = cfg.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(i, o))| {
                let name = if l == last {
                    "classifier".to_string()
                } else {
                    format!("dense{l}")
                };
                let w = Segment {
                    name: format!("{name}.weight"),
                    offset,
                    rows: i,
                    cols: o,
                };
                offset += w.len();
                let b = Segment {
                    name: format!("{name}.bias"),
                    offset,
                    rows: 1,
                    cols: o,
                };
                offset += b.len();
                (w, b)
            })
            .collect();
        Self {
            embedding,
            layers,
            total: offset,
        }
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        std::iter::once(&self.embedding).chain(self.layers.iter().flat_map(|(w, b)| [w, b]))
    }
}

/// Flat parameter store. Gradients share the same type and layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub config: ModelConfig,
    pub layout: Layout,
    pub values: Vec<f64>,
}

pub type Grads = Params;

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layout = Layout::new(cfg);
        Self {
            config: cfg.clone(),
            values: vec![0.0; layout.total],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn segment(&self, s: &Segment) -> &[f64] {
        &self.values[s.range()]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases and
/// uniform `(-1, 1)` embeddings.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut p = Params::zeros(cfg);
    let mut rng = RngStream::new(derive_seed(seed, &[INIT_DOMAIN]), 0);
    for v in &mut p.values[p.layout.embedding.range()] {
        *v = rng.uniform(-1.0, 1.0);
    }
    for (w, _) in p.layout.layers.clone() {
        let scale = 1.0 / (w.rows as f64).sqrt();
        for v in &mut p.values[w.range()] {
            *v = rng.uniform(-scale, scale);
        }
    }
    Ok(p)
}

/// `out[b, o] = bias[o] + sum_i x[b, i] * w[i, o]`
fn affine(x: &[f64], w: &[f64], bias: &[f64], batch: usize, fan_in: usize, out: &mut [f64]) {
    let fan_out = bias.len();
    for b in 0..batch {
        let row = &mut out[b * fan_out..(b + 1) * fan_out];
        row.copy_from_slice(bias);
        for (i, &xi) in x[b * fan_in..(b + 1) * fan_in].iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wr = &w[i * fan_out..(i + 1) * fan_out];
            for (r, &wv) in row.iter_mut().zip(wr) {
                *r += xi * wv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut tail = 0.0;
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

struct Activations {
    batch: usize,
    /// Layer inputs: `inputs[0]` is the embedding concat, `inputs[l]` the
    /// rectified output of dense layer `l - 1`.
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn forward_cached(params: &Params, batch: &[Sequence]) -> Result<Activations> {
    let cfg = &params.config;
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let e = cfg.embed_dim;
    let emb = params.segment(&params.layout.embedding);
    let mut x0 = vec![0.0; n * cfg.input_width()];
    for (b, seq) in batch.iter().enumerate() {
        for (pos, &tok) in seq.digits().iter().enumerate() {
            let tok = tok as usize;
            if tok >= cfg.vocab {
                return Err(Error::InvalidDigit {
                    value: tok as u8,
                    vocab: cfg.vocab as u8,
                });
            }
            let dst = b * cfg.input_width() + pos * e;
            x0[dst..dst + e].copy_from_slice(&emb[tok * e..(tok + 1) * e]);
        }
    }
    let mut inputs = vec![x0];
    let last = params.layout.layers.len() - 1;
    let mut logits = Vec::new();
    for (l, (w, bias)) in params.layout.layers.iter().enumerate() {
        let mut out = vec![0.0; n * w.cols];
        affine(
            inputs.last().expect("input"),
            params.segment(w),
            params.segment(bias),
            n,
            w.rows,
            &mut out,
        );
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure { layer: l });
        }
        if l == last {
            logits = out;
        } else {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            inputs.push(out);
        }
    }
    Ok(Activations {
        batch: n,
        inputs,
        logits,
    })
}

/// Logits, `batch x classes`, row-major.
pub fn forward(params: &Params, batch: &[Sequence]) -> Result<Vec<f64>> {
    Ok(forward_cached(params, batch)?.logits)
}

fn log_softmax_row(row: &[f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
    (max, sum.ln())
}

/// Mean cross-entropy of the rows of `logits` against `labels`.
pub fn cross_entropy(logits: &[f64], labels: &[u8], classes: usize) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            let row = &logits[b * classes..(b + 1) * classes];
            let (max, lse) = log_softmax_row(row);
            lse + max - row[y as usize]
        })
        .sum();
    total / labels.len() as f64
}

/// Objective `mean CE + (weight_decay / 2) * |params|^2` and its exact gradient.
pub fn loss_and_grad(params: &Params, batch: &[Sequence], labels: &[u8], weight_decay: f64) -> Result<(f64, Grads)> {
    if batch.len() != labels.len() {
        return Err(Error::InvalidArgument("batch and label counts differ".into()));
    }
    let cfg = &params.config;
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= cfg.classes) {
        return Err(Error::InvalidDigit {
            value: y,
            vocab: cfg.classes as u8,
        });
    }
    let acts = forward_cached(params, batch)?;
    let n = acts.batch;
    let c = cfg.classes;
    let mut loss = 0.0;
    let mut delta = vec![0.0; n * c];
    for b in 0..n {
        let row = &acts.logits[b * c..(b + 1) * c];
        let (max, lse) = log_softmax_row(row);
        let y = labels[b] as usize;
        loss += lse + max - row[y];
        for k in 0..c {
            let p = (row[k] - max - lse).exp();
            delta[b * c + k] = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;

    let mut grads = params.zeros_like();
    for l in (0..params.layout.layers.len()).rev() {
        let (w, bias) = &params.layout.layers[l];
        let (fan_in, fan_out) = (w.rows, w.cols);
        let x = &acts.inputs[l];
        {
            let gw = &mut grads.values[w.range()];
            for b in 0..n {
                let d = &delta[b * fan_out..(b + 1) * fan_out];
                for (i, &xi) in x[b * fan_in..(b + 1) * fan_in].iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (g, &dv) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(d) {
                        *g += xi * dv;
                    }
                }
            }
        }
        {
            let gb = &mut grads.values[bias.range()];
            for b in 0..n {
                for (g, &dv) in gb.iter_mut().zip(&delta[b * fan_out..(b + 1) * fan_out]) {
                    *g += dv;
                }
            }
        }
        let wv = params.segment(w);
        let mut below = vec![0.0; n * fan_in];
        for b in 0..n {
            let d = &delta[b * fan_out..(b + 1) * fan_out];
            for i in 0..fan_in {
                // rectifier mask; layer 0's input is the raw embedding concat
                if l > 0 && x[b * fan_in + i] <= 0.0 {
                    continue;
                }
                below[b * fan_in + i] = dot(d, &wv[i * fan_out..(i + 1) * fan_out]);
            }
        }
        delta = below;
    }
    let e = cfg.embed_dim;
    let width = cfg.input_width();
    let emb = params.layout.embedding.clone();
    for (b, seq) in batch.iter().enumerate() {
        for (pos, &tok) in seq.digits().iter().enumerate() {
            let dst = emb.offset + tok as usize * e;
            let src = &delta[b * width + pos * e..b * width + (pos + 1) * e];
            for (g, &dv) in grads.values[dst..dst + e].iter_mut().zip(src) {
                *g += dv;
            }
        }
    }

    if weight_decay != 0.0 {
        let mut sq = 0.0;
        for (g, &p) in grads.values.iter_mut().zip(&params.values) {
            *g += weight_decay * p;
            sq += p * p;
        }
        loss += 0.5 * weight_decay * sq;
    }
    Ok((loss, grads))
}

/// `v <- momentum * v + g; p <- p - lr * v`
pub fn sgd_step(params: &mut Params, velocity: &mut [f64], grads: &Grads, lr: f64, momentum: f64) {
    for ((p, v), &g) in params.values.iter_mut().zip(velocity.iter_mut()).zip(&grads.values) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub min_iterations: usize,
    pub seed: u64,
    /// Evaluate the eval sets every this many epochs (and after the last).
    pub eval_every: usize,
    /// Worker threads for evaluation; metrics do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 200,
            warmup_epochs: 10,
            batch_size: 1024,
            min_iterations: 800,
            seed: 0,
            eval_every: 1,
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    /// Whole epochs covering `max(epochs * steps_per_epoch, min_iterations)`
    /// steps; warmup keeps its `warmup_epochs / epochs` share of the run.
    pub fn new(cfg: &TrainConfig, train_len: usize) -> Result<Self> {
        if train_len == 0 || cfg.epochs == 0 || cfg.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "training needs examples, epochs and a positive batch size".into(),
            ));
        }
        if cfg.warmup_epochs > cfg.epochs {
            return Err(Error::InvalidArgument("warmup longer than training".into()));
        }
        let batch_size = cfg.batch_size.min(train_len);
        let steps_per_epoch = train_len.div_ceil(batch_size);
        let wanted = (cfg.epochs * steps_per_epoch).max(cfg.min_iterations);
        let epochs = wanted.div_ceil(steps_per_epoch);
        let total_steps = epochs * steps_per_epoch;
        let warmup_steps = total_steps * cfg.warmup_epochs / cfg.epochs;
        Ok(Self {
            base_lr: cfg.base_lr,
            batch_size,
            steps_per_epoch,
            epochs,
            total_steps,
            warmup_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1 + self.warmup_steps);
        let t = if span == 0 {
            1.0
        } else {
            ((step - self.warmup_steps) as f64 / span as f64).min(1.0)
        };
        (self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
    }
}

pub fn lr_at(step: usize, schedule: &Schedule) -> f64 {
    schedule.lr_at(step)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Accuracy (argmax, ties to the smallest class) and mean cross-entropy.
/// Chunks are reduced in order, so results do not depend on `workers`.
pub fn evaluate_with(params: &Params, records: &[Example], workers: usize) -> Result<EvalResult> {
    if records.is_empty() {
        return Ok(EvalResult {
            accuracy: 0.0,
            loss: 0.0,
            count: 0,
        });
    }
    let c = params.config.classes;
    let chunks = records.len().div_ceil(EVAL_CHUNK);
    let parts = map_indexed(chunks, workers, |k| -> Result<(usize, f64)> {
        let chunk = &records[k * EVAL_CHUNK..((k + 1) * EVAL_CHUNK).min(records.len())];
        let seqs: Vec<Sequence> = chunk.iter().map(|e| e.digits).collect();
        let labels: Vec<u8> = chunk.iter().map(|e| e.label).collect();
        let logits = forward(params, &seqs)?;
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(b, &y)| argmax(&logits[b * c..(b + 1) * c]) == y as usize)
            .count();
        Ok((correct, cross_entropy(&logits, &labels, c) * chunk.len() as f64))
    });
    let mut correct = 0;
    let mut loss = 0.0;
    for p in parts {
        let (k, l) = p?;
        correct += k;
        loss += l;
    }
    Ok(EvalResult {
        accuracy: correct as f64 / records.len() as f64,
        loss: loss / records.len() as f64,
        count: records.len(),
    })
}

pub fn evaluate(params: &Params, ds: &Dataset) -> Result<f64> {
    Ok(evaluate_with(params, &ds.records, 1)?.accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub train_loss: f64,
    pub evals: Vec<EvalRecord>,
}

/// Final training accuracy below which a capacity-study run is ignored.
pub const IGNORE_BELOW: f64 = 0.20;
/// Final training accuracy below which a holdout-study run is discarded.
pub const DISCARD_BELOW: f64 = 0.60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: Schedule,
    pub param_count: usize,
    pub train_count: usize,
    pub iterations: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_train_acc: f64,
    pub final_train_loss: f64,
    pub final_evals: Vec<EvalRecord>,
    /// Final training accuracy < 20%.
    pub ignored: bool,
    /// Final training accuracy < 60% (holdout experiments).
    pub discarded: bool,
    pub failed: bool,
    pub failure: Option<String>,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn final_eval(&self, name: &str) -> Option<&EvalRecord> {
        self.final_evals.iter().find(|e| e.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The report with wall time zeroed; equal for equal inputs and seeds.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }

    /// `epoch,train_acc,train_loss,<eval>_acc,...`; eval cells are empty on
    /// epochs that were not evaluated.
    pub fn epochs_csv(&self, eval_names: &[String]) -> String {
        let mut out = String::from("epoch,train_acc,train_loss");
        for n in eval_names {
            let _ = write!(out, ",{n}_acc");
        }
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(out, "{},{},{}", e.epoch, e.train_acc, e.train_loss);
            for n in eval_names {
                match e.evals.iter().find(|r| &r.name == n) {
                    Some(r) => {
                        let _ = write!(out, ",{}", r.accuracy);
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub struct NamedDataset<'a> {
    pub name: String,
    pub data: &'a Dataset,
}

/// Train from a fresh initialization. Numeric failure stops the run and
/// returns the partial report with `failed` set.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    evals: &[NamedDataset<'_>],
) -> Result<RunReport> {
    let started = Instant::now();
    model.validate()?;
    if cfg.eval_every == 0 {
        return Err(Error::InvalidArgument("eval_every must be positive".into()));
    }
    for d in std::iter::once(train_ds).chain(evals.iter().map(|e| e.data)) {
        if d.spec().vocab as usize > model.vocab {
            return Err(Error::SpecMismatch(format!(
                "dataset vocabulary {} exceeds model vocabulary {}",
                d.spec().vocab,
                model.vocab
            )));
        }
    }
    let schedule = Schedule::new(cfg, train_ds.len())?;
    let mut params = init_params(model, cfg.seed)?;
    let mut velocity = vec![0.0; params.values.len()];
    let shuffle_seed = derive_seed(cfg.seed, &[SHUFFLE_DOMAIN]);
    let mut report = RunReport {
        model: model.clone(),
        train: cfg.clone(),
        schedule,
        param_count: model.count_params(),
        train_count: train_ds.len(),
        iterations: 0,
        epochs: Vec::new(),
        final_train_acc: 0.0,
        final_train_loss: f64::NAN,
        final_evals: Vec::new(),
        ignored: true,
        discarded: true,
        failed: false,
        failure: None,
        wall_time_secs: 0.0,
    };
    let mut order: Vec<usize> = Vec::with_capacity(train_ds.len());
    let mut batch: Vec<Sequence> = Vec::with_capacity(schedule.batch_size);
    let mut labels: Vec<u8> = Vec::with_capacity(schedule.batch_size);
    let mut step = 0;
    'epochs: for epoch in 0..schedule.epochs {
        order.clear();
        order.extend(0..train_ds.len());
        RngStream::new(shuffle_seed, epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(schedule.batch_size) {
            batch.clear();
            labels.clear();
            for &i in chunk {
                batch.push(train_ds.records[i].digits);
                labels.push(train_ds.records[i].label);
            }
            let grads = match loss_and_grad(&params, &batch, &labels, cfg.weight_decay) {
                Ok((_, g)) => g,
                Err(e @ Error::NumericFailure { .. }) => {
                    report.failed = true;
                    report.failure = Some(format!("epoch {epoch} step {step}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            sgd_step(&mut params, &mut velocity, &grads, schedule.lr_at(step), cfg.momentum);
            step += 1;
            if !params.is_finite() {
                report.failed = true;
                report.failure = Some(format!("epoch {epoch} step {step}: non-finite parameters"));
                break 'epochs;
            }
        }
        report.iterations = step;
        let tr = match evaluate_with(&params, &train_ds.records, cfg.workers) {
            Ok(r) => r,
            Err(e @ Error::NumericFailure { .. }) => {
                report.failed = true;
                report.failure = Some(format!("epoch {epoch} evaluation: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let last = epoch + 1 == schedule.epochs;
        let mut record = EpochRecord {
            epoch: epoch + 1,
            train_acc: tr.accuracy,
            train_loss: tr.loss,
            evals: Vec::new(),
        };
        if last || (epoch + 1) % cfg.eval_every == 0 {
            for ev in evals {
                let r = evaluate_with(&params, &ev.data.records, cfg.workers)?;
                record.evals.push(EvalRecord {
                    name: ev.name.clone(),
                    accuracy: r.accuracy,
                    loss: r.loss,
                });
            }
        }
        report.final_train_acc = tr.accuracy;
        report.final_train_loss = tr.loss;
        if !record.evals.is_empty() || evals.is_empty() {
            report.final_evals = record.evals.clone();
        }
        report.epochs.push(record);
    }
    report.iterations = step;
    report.ignored = report.final_train_acc < IGNORE_BELOW;
    report.discarded = report.final_train_acc < DISCARD_BELOW;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSource {
    pub name: String,
    pub path: String,
}

/// JSON experiment description consumed by the command-line trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub train_data: String,
    #[serde(default)]
    pub evals: Vec<EvalSource>,
    #[serde(default)]
    pub out_dir: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{Aggregation, TaskSpec};
    use crate::taskgen::generate;

    fn toy() -> ModelConfig {
        ModelConfig::new(4, &[8, 8, 8, 8])
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelConfig::full().count_params(), 1_445_194);
        assert_eq!(ModelConfig::full_2x().count_params(), 5_052_426);
        assert_eq!(toy().count_params(), 706);
        assert_eq!(Layout::new(&toy()).total, 706);
    }

    #[test]
    fn init_rules() {
        let a = init_params(&toy(), 3).unwrap();
        let b = init_params(&toy(), 3).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        assert_ne!(a.values, init_params(&toy(), 4).unwrap().values);
        for (w, bias) in &a.layout.layers {
            assert!(a.segment(bias).iter().all(|&v| v == 0.0));
            let scale = 1.0 / (w.rows as f64).sqrt();
            assert!(a.segment(w).iter().all(|v| v.abs() < scale));
        }
        assert!(a.segment(&a.layout.embedding).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn init_means_near_zero() {
        let p = init_params(&ModelConfig::desk(), 11).unwrap();
        for (w, _) in &p.layout.layers {
            let vals = p.segment(w);
            let n = vals.len() as f64;
            let scale = 1.0 / (w.rows as f64).sqrt();
            let sigma = scale / 3f64.sqrt() / n.sqrt();
            let mean = vals.iter().sum::<f64>() / n;
            assert!(mean.abs() < 4.0 * sigma, "{}: {mean}", w.name);
        }
    }

    fn batch(n: usize, seed: u64, m: usize) -> (Vec<Sequence>, Vec<u8>) {
        let ds = generate(&TaskSpec::new(m, Aggregation::ModSum).unwrap(), n, seed).unwrap();
        (
            ds.records.iter().map(|e| e.digits).collect(),
            ds.records.iter().map(|e| e.label).collect(),
        )
    }

    #[test]
    fn zero_params_uniform_logits() {
        let p = Params::zeros(&toy());
        let (x, y) = batch(16, 1, 1);
        let logits = forward(&p, &x).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let (loss, _) = loss_and_grad(&p, &x, &y, 0.0).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_row_equivariance() {
        let p = init_params(&toy(), 2).unwrap();
        let (x, _) = batch(6, 4, 0);
        let logits = forward(&p, &x).unwrap();
        let mut rev = x.clone();
        rev.reverse();
        let rlog = forward(&p, &rev).unwrap();
        for b in 0..6 {
            assert_eq!(&logits[b * 10..(b + 1) * 10], &rlog[(5 - b) * 10..(6 - b) * 10]);
        }
        let dup = forward(&p, &[x[2], x[2]]).unwrap();
        assert_eq!(&dup[..10], &dup[10..]);
        assert_eq!(&dup[..10], &logits[20..30]);
    }

    #[test]
    fn classifier_bias_gradient_identity() {
        let p = init_params(&toy(), 5).unwrap();
        let (x, y) = batch(12, 6, 1);
        let (_, g) = loss_and_grad(&p, &x, &y, 0.0).unwrap();
        let logits = forward(&p, &x).unwrap();
        let mut expected = [0.0; 10];
        for b in 0..12 {
            let row = &logits[b * 10..(b + 1) * 10];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for k in 0..10 {
                let onehot = if k == y[b] as usize { 1.0 } else { 0.0 };
                expected[k] += ((row[k] - max).exp() / z - onehot) / 12.0;
            }
        }
        let (_, cb) = p.layout.layers.last().unwrap();
        for (a, b) in g.segment(cb).iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let p = init_params(&toy(), 7).unwrap();
        let (x, y) = batch(5, 8, 2);
        let (l1, g1) = loss_and_grad(&p, &x, &y, 0.0).unwrap();
        let x2: Vec<_> = x.iter().chain(&x).copied().collect();
        let y2: Vec<_> = y.iter().chain(&y).copied().collect();
        let (l2, g2) = loss_and_grad(&p, &x2, &y2, 0.0).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_digits_get_no_embedding_gradient() {
        let p = init_params(&toy(), 9).unwrap();
        let x = vec![Sequence::new(1, [1, 2, 1, 2, 1, 2, 1, 2, 1, 2])];
        let (_, g) = loss_and_grad(&p, &x, &[2], 0.0).unwrap();
        let emb = g.segment(&g.layout.embedding);
        for tok in 0..10 {
            let row = &emb[tok * 4..(tok + 1) * 4];
            if tok == 1 || tok == 2 {
                assert!(row.iter().any(|&v| v != 0.0));
            } else {
                assert!(row.iter().all(|&v| v == 0.0), "token {tok}");
            }
        }
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig::default();
        let s = Schedule::new(&cfg, 10_240).unwrap();
        assert_eq!(s.steps_per_epoch, 10);
        assert_eq!(s.total_steps, 2000);
        assert_eq!(s.warmup_steps, 100);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(50) - 0.025).abs() < 1e-15);
        assert_eq!(s.lr_at(100), 0.05);
        assert!(s.lr_at(s.total_steps - 1).abs() < 1e-12);
        for step in 0..s.total_steps {
            assert!(s.lr_at(step) >= 0.0);
        }

        let tiny = Schedule::new(&cfg, 64).unwrap();
        assert_eq!(tiny.batch_size, 64);
        assert_eq!(tiny.total_steps, 800);
        assert_eq!(tiny.warmup_steps, 40);
        assert_eq!(tiny.epochs, 800);
    }

    #[test]
    fn sgd_step_rules() {
        let cfg = ModelConfig::new(1, &[1]);
        let mut p = Params::zeros(&cfg);
        p.values.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let start = p.values.clone();
        let mut g = p.zeros_like();
        g.values.iter_mut().for_each(|v| *v = 0.5);
        let mut vel = vec![0.0; start.len()];
        sgd_step(&mut p, &mut vel, &g, 0.0, 0.9);
        assert_eq!(p.values, start);

        let mut vel = vec![0.0; start.len()];
        sgd_step(&mut p, &mut vel, &g, 0.1, 0.9);
        for (a, b) in p.values.iter().zip(&start) {
            assert!((a - (b - 0.05)).abs() < 1e-15);
        }
        sgd_step(&mut p, &mut vel, &g, 0.1, 0.9);
        for (a, b) in p.values.iter().zip(&start) {
            assert!((a - (b - 0.1 * 0.5 * 2.9)).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_tie_rule_and_workers() {
        let spec = TaskSpec::new(1, Aggregation::ModSum).unwrap();
        let ds = generate(&spec, 2_000, 12).unwrap();
        let zeros = Params::zeros(&ModelConfig::desk());
        let freq0 = ds.records.iter().filter(|e| e.label == 0).count() as f64 / ds.len() as f64;
        assert_eq!(evaluate(&zeros, &ds).unwrap(), freq0);
        let p = init_params(&ModelConfig::desk(), 1).unwrap();
        assert_eq!(
            evaluate_with(&p, &ds.records, 1).unwrap(),
            evaluate_with(&p, &ds.records, 4).unwrap()
        );
    }

    #[test]
    fn nonfinite_weights_report_layer() {
        let mut p = init_params(&toy(), 1).unwrap();
        let (w, _) = p.layout.layers[2].clone();
        p.values[w.range()].iter_mut().for_each(|v| *v = f64::INFINITY);
        let (x, _) = batch(4, 1, 0);
        assert!(matches!(forward(&p, &x), Err(Error::NumericFailure { .. })));
    }
}
