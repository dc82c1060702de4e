//! Normalization, data split, optimization and the training loop.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::dynamics::{Dataset, Trajectory, TEST_END, TEST_START};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossMode};
use crate::model::{Model, ParamStore};
use crate::rng;

/// Per-channel mean and population standard deviation in the order
/// forcing, x1, x2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn from_trajectories<'a>(samples: impl Iterator<Item = &'a Trajectory>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; 3];
        let mut all: Vec<&Trajectory> = Vec::new();
        for s in samples {
            for (c, ch) in [&s.forcing, &s.x1, &s.x2].into_iter().enumerate() {
                sum[c] += ch.iter().sum::<f64>();
            }
            n += s.forcing.len();
            all.push(s);
        }
        if n == 0 {
            return Err(Error::invalid("normalization statistics need at least one sample"));
        }
        let mean = sum.map(|v| v / n as f64);
        let mut sq = [0.0; 3];
        for s in &all {
            for (c, ch) in [&s.forcing, &s.x1, &s.x2].into_iter().enumerate() {
                sq[c] += ch.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.map(|v| (v / n as f64).sqrt());
        let stats = NormStats { mean, std };
        stats.check()?;
        Ok(stats)
    }

    pub fn check(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite()))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::invalid(format!(
                "degenerate normalization statistics {self:?}"
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, channel: usize, x: &[f64]) -> Vec<f64> {
        let (m, s) = (self.mean[channel], self.std[channel]);
        x.iter().map(|v| (v - m) / s).collect()
    }

    pub fn denormalize(&self, channel: usize, z: &[f64]) -> Vec<f64> {
        let (m, s) = (self.mean[channel], self.std[channel]);
        z.iter().map(|v| v * s + m).collect()
    }
}

const SPLIT_STREAM: u64 = 1 << 62;
const SHUFFLE_STREAM: u64 = (1 << 62) + 1;

/// Index sets of one training run, in global dataset indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Range<usize>,
}

/// Pool `[0, train_size)`, a seeded random `subset_fraction` of it for
/// training, the rest for validation, and the fixed test slice.
pub fn make_split(train_size: usize, subset_fraction: f64, seed: u64) -> Result<Split> {
    if train_size == 0 || train_size > TEST_START {
        return Err(Error::invalid(format!(
            "train size {train_size} must lie in 1..={TEST_START} to stay clear of the test slice"
        )));
    }
    if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
        return Err(Error::invalid(format!("subset fraction {subset_fraction} outside (0, 1]")));
    }
    let n_train = ((subset_fraction * train_size as f64).round() as usize).clamp(1, train_size);
    let mut pool: Vec<usize> = (0..train_size).collect();
    rng::shuffle(&mut rng::keyed(seed, SPLIT_STREAM), &mut pool);
    let mut train = pool[..n_train].to_vec();
    let mut val = pool[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val, test: TEST_START..TEST_END })
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self { config, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update; `grads[i]` matches tensor `i` of `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} tensors", grads.len(), params.len())));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape("adam", format!("tensor {i}: gradient {} vs {}", g.len(), p.len())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub train_size: usize,
    pub subset_fraction: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Samples per graph; gradients of a batch are accumulated over
    /// micro-batches, so this trades memory for nothing else.
    pub micro_batch: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub loss: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_size: 64,
            subset_fraction: 0.8,
            seed: 0,
            batch_size: 16,
            micro_batch: 4,
            lr: 1e-3,
            adam: AdamConfig::default(),
            plateau_factor: 0.5,
            plateau_patience: 10,
            early_stop_patience: 25,
            max_epochs: 300,
            loss: LossMode::MseOnly,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::invalid(format!("subset fraction {} outside (0, 1]", self.subset_fraction)));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::invalid("batch and micro-batch sizes must be positive"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("patiences must be at least one epoch"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::invalid(format!("plateau factor {} outside (0, 1]", self.plateau_factor)));
        }
        if let LossMode::Spectrogram(cfg) = &self.loss {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// One row of the loss history. `val_loss` falls back to the training loss
/// when the split has no validation samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn write_history_csv<W: std::io::Write>(w: W, history: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if history.is_empty() {
        out.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
    }
    for r in history {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub norm_stats: NormStats,
    pub history: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub split: Split,
}

/// Normalized `[n, 1, T]` inputs and `[n, 2, T]` targets.
pub fn batch_tensors(samples: &[&Trajectory], stats: &NormStats) -> Result<(Tensor, Tensor)> {
    let n = samples.len();
    let t = samples.first().map_or(0, |s| s.forcing.len());
    let mut x = Vec::with_capacity(n * t);
    let mut y = Vec::with_capacity(2 * n * t);
    for s in samples {
        if s.forcing.len() != t {
            return Err(Error::shape("batch", "samples of different lengths"));
        }
        x.extend(stats.normalize(0, &s.forcing));
        y.extend(stats.normalize(1, &s.x1));
        y.extend(stats.normalize(2, &s.x2));
    }
    Ok((Tensor::new(vec![n, 1, t], x)?, Tensor::new(vec![n, 2, t], y)?))
}

/// Physical-unit displacement predictions `[sample][channel][t]` for
/// physical forcings, evaluated `chunk` samples at a time.
pub fn predict_physical(model: &Model, stats: &NormStats, forcings: &[&[f64]], chunk: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(forcings.len());
    for group in forcings.chunks(chunk.max(1)) {
        let t = group[0].len();
        if group.iter().any(|f| f.len() != t) {
            return Err(Error::shape("predict", "forcings of different lengths"));
        }
        let x: Vec<f64> = group.iter().flat_map(|f| stats.normalize(0, f)).collect();
        let y = model.predict(&Tensor::new(vec![group.len(), 1, t], x)?)?;
        let c_out = y.shape()[1];
        for (b, _) in group.iter().enumerate() {
            out.push(
                (0..c_out)
                    .map(|c| stats.denormalize(c + 1, &y.data()[(b * c_out + c) * t..][..t]))
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn lookup<'a>(ds: &'a Dataset, indices: &[usize]) -> Result<Vec<&'a Trajectory>> {
    indices
        .iter()
        .map(|&i| {
            ds.get(i).ok_or_else(|| {
                Error::invalid(format!(
                    "sample {i} is not in the dataset (indices {}..{})",
                    ds.start_index,
                    ds.end_index()
                ))
            })
        })
        .collect()
}

/// Mean loss over `samples` with gradients accumulated into `grads` when
/// given. Each micro-batch is weighted by its share of the samples.
fn pass(
    model: &Model,
    samples: &[&Trajectory],
    cfg: &TrainConfig,
    stats: &NormStats,
    mut grads: Option<&mut [Vec<f64>]>,
    dropout_seed: u64,
) -> Result<f64> {
    let train = grads.is_some();
    let mut total = 0.0;
    for (k, group) in samples.chunks(cfg.micro_batch).enumerate() {
        let (x, y) = batch_tensors(group, stats)?;
        let mut g = Graph::new();
        let params = if train { model.params().bind(&mut g) } else { model.params().bind_constant(&mut g) };
        let xv = g.constant(x);
        let pred = model.forward(&mut g, &params, xv, train, rng::derive(dropout_seed, k as u64))?;
        let terms = total_loss(&mut g, pred, &y, &cfg.loss, Some(stats))?;
        let w = group.len() as f64 / samples.len() as f64;
        let value = g.value(terms.total).item();
        if !value.is_finite() {
            return Ok(f64::NAN);
        }
        total += w * value;
        if let Some(acc) = grads.as_deref_mut() {
            g.backward(terms.total)?;
            for (a, p) in acc.iter_mut().zip(&params) {
                if let Some(gp) = g.take_grad(*p) {
                    for (ai, gi) in a.iter_mut().zip(gp) {
                        *ai += w * gi;
                    }
                }
            }
        }
    }
    Ok(total)
}

pub fn train(model: Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, dataset, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    mut model: Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.in_channels() != 1 || model.out_channels() != 2 {
        return Err(Error::invalid("models map one forcing channel to two displacements"));
    }
    let split = make_split(cfg.train_size, cfg.subset_fraction, cfg.seed)?;
    let train_set = lookup(dataset, &split.train)?;
    let val_set = lookup(dataset, &split.val)?;
    let stats = NormStats::from_trajectories(train_set.iter().copied())?;
    // the loop below only ever sees these indices
    assert!(
        split.train.iter().chain(&split.val).all(|i| !split.test.contains(i)),
        "test index in the training pool"
    );

    let mut adam = Adam::new(model.params(), cfg.adam);
    let mut lr = cfg.lr;
    let mut history = Vec::new();
    let mut best = model.params().clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let (mut since_best, mut since_plateau) = (0, 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = rng::keyed(cfg.seed, SHUFFLE_STREAM);

    for epoch in 1..=cfg.max_epochs {
        rng::shuffle(&mut shuffler, &mut order);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Trajectory> = idx.iter().map(|&i| train_set[i]).collect();
            let mut grads: Vec<Vec<f64>> = model.params().tensors().map(|t| vec![0.0; t.len()]).collect();
            let tag = rng::derive(epoch as u64, b as u64);
            let loss = pass(&model, &batch, cfg, &stats, Some(&mut grads), rng::derive(cfg.seed, tag))?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.step(model.params_mut(), &grads, lr)?;
            epoch_loss += loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            pass(&model, &val_set, cfg, &stats, None, 0)?
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let record = EpochRecord { epoch, train_loss, val_loss, lr };
        history.push(record);
        on_epoch(&record);

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.params().clone();
            since_best = 0;
            since_plateau = 0;
        } else {
            since_best += 1;
            since_plateau += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
            if since_plateau >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                since_plateau = 0;
            }
        }
    }
    *model.params_mut() = best;
    Ok(TrainOutcome { model, norm_stats: stats, history, best_epoch, split })
}
