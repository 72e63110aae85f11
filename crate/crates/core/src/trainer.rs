//! L1 training with Adam, seeded shuffling and resumable checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::imaging::Sample;
use crate::model::{DatsModel, ForwardOptions, raster_to_map};
use crate::nn::{FeatureMap, Tensor};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Global gradient-norm ceiling; `None` leaves gradients alone.
    pub grad_clip: Option<f64>,
    /// Where checkpoints go. Nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 1,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon {} must be positive", self.adam_epsilon));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &Raster, target: &Raster) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Average of per-pair losses.
pub fn l1_loss_batch(preds: &[Raster], targets: &[Raster]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Config(format!(
            "batch of {} predictions against {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        total += l1_loss(p, t)?;
    }
    Ok(total / preds.len() as f64)
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &DatsModel) -> Self {
        let m: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.tensor.len()])
            .collect();
        Self { t: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update of `x` in place. `t` is the 1-based step.
/// Returns the squared norm of the applied change.
pub fn adam_update(x: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &TrainConfig) -> f64 {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut sq = 0.0;
    for i in 0..x.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        let dx = cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_epsilon);
        x[i] -= dx;
        sq += dx * dx;
    }
    sq
}

/// Model, optimizer moments and global step: everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DatsModel,
    pub adam: AdamState,
    pub step: usize,
}

impl TrainState {
    pub fn fresh(model: DatsModel) -> Self {
        let adam = AdamState::new(&model);
        Self { model, adam, step: 0 }
    }
}

/// Batch-mean L1 loss of the unclamped output and its parameter gradient.
pub fn loss_and_gradient(model: &DatsModel, batch: &[&Sample]) -> Result<(f64, DatsModel)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let shape = batch[0].hrms_ref.shape();
    let n = batch.len() as f64;
    let mut grad = model.zeros_like();
    let mut loss = 0.0;
    for s in batch {
        if s.hrms_ref.shape() != shape {
            return Err(Error::DimensionMismatch {
                expected: shape,
                found: s.hrms_ref.shape(),
            });
        }
        let target = raster_to_map(&s.hrms_ref);
        let trace = model.forward_trace(
            &raster_to_map(&s.pan),
            &raster_to_map(&s.lrms_up),
            ForwardOptions::default(),
        )?;
        let pred = &trace.raw_output;
        if pred.data.len() != target.data.len() {
            return Err(Error::DimensionMismatch {
                expected: shape,
                found: (pred.height, pred.width, pred.channels),
            });
        }
        let numel = pred.data.len() as f64;
        let scale = 1.0 / (numel * n);
        let mut g = FeatureMap::zeros(pred.channels, pred.height, pred.width);
        let mut sum = 0.0;
        for ((gi, p), t) in g.data.iter_mut().zip(&pred.data).zip(&target.data) {
            let d = p - t;
            sum += d.abs();
            // sign(0) = 0 so a perfect prediction yields no gradient.
            *gi = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
        loss += sum / numel;
        model.backward(&trace, &g, &mut grad);
    }
    Ok((loss / n, grad))
}

/// Mean L1 of the unclamped output over a sample set, no gradient.
pub fn dataset_loss(model: &DatsModel, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let raw = model.forward_raw(&raster_to_map(&s.pan), &raster_to_map(&s.lrms_up))?;
        let target = raster_to_map(&s.hrms_ref);
        let sum: f64 = raw.data.iter().zip(&target.data).map(|(p, t)| (p - t).abs()).sum();
        total += sum / raw.data.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub update_norm: f64,
}

fn first_non_finite(grad: &DatsModel) -> Option<String> {
    grad.params()
        .into_iter()
        .find(|p| p.tensor.data.iter().any(|v| !v.is_finite()))
        .map(|p| p.name)
}

/// One Adam step on the batch-mean L1 loss.
pub fn train_step(
    model: &mut DatsModel,
    adam: &mut AdamState,
    batch: &[&Sample],
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let step = adam.t as usize;
    let (loss, mut grad) = loss_and_gradient(model, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            step,
            detail: format!("batch of {} samples gave {loss}", batch.len()),
        });
    }
    if let Some(name) = first_non_finite(&grad) {
        return Err(Error::NonFinite {
            what: "gradient",
            step,
            detail: format!("parameter {name}"),
        });
    }
    let grad_norm = grad
        .params()
        .iter()
        .flat_map(|p| p.tensor.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if let Some(clip) = cfg.grad_clip {
        if grad_norm > clip {
            let k = clip / grad_norm;
            for t in grad.params_mut() {
                t.data.iter_mut().for_each(|g| *g *= k);
            }
        }
    }
    adam.t += 1;
    let t = adam.t;
    let grads: Vec<&Tensor> = grad.params().into_iter().map(|p| p.tensor).collect();
    let mut sq = 0.0;
    for (i, (x, g)) in model.params_mut().into_iter().zip(grads).enumerate() {
        sq += adam_update(&mut x.data, &g.data, &mut adam.m[i], &mut adam.v[i], t, cfg);
    }
    Ok(StepOutcome {
        loss,
        grad_norm,
        update_norm: sq.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub update_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub wall_seconds: f64,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn update_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.update_norm).collect()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{}", serde_json::to_string(r).expect("record serializes"));
        }
        s
    }

    pub fn parse_jsonl(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        let wall_seconds = records.last().map_or(0.0, |r| r.wall_ms / 1000.0);
        Ok(Self { records, wall_seconds })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Means over consecutive non-overlapping windows (a trailing partial window
/// is dropped).
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window.max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}

/// Sample order for one epoch; depends only on the seed and the epoch index.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Trains from scratch.
pub fn fit(model: DatsModel, dataset: &[Sample], cfg: &TrainConfig) -> Result<(DatsModel, TrainLog)> {
    let (state, log) = fit_from(TrainState::fresh(model), dataset, cfg, &BTreeMap::new())?;
    Ok((state.model, log))
}

/// Continues training from `state.step` up to `epochs` full epochs. Extra
/// metadata is copied into every checkpoint written.
pub fn fit_from(
    mut state: TrainState,
    dataset: &[Sample],
    cfg: &TrainConfig,
    meta: &BTreeMap<String, String>,
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spe = cfg.steps_per_epoch(dataset.len());
    let total = spe * cfg.epochs;
    let start = Instant::now();
    let mut log = TrainLog::default();
    while state.step < total {
        let epoch = state.step / spe;
        let order = epoch_order(cfg.seed, epoch, dataset.len());
        let b = state.step % spe;
        let lo = b * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(dataset.len());
        let batch: Vec<&Sample> = order[lo..hi].iter().map(|&i| &dataset[i]).collect();
        let out = train_step(&mut state.model, &mut state.adam, &batch, cfg)?;
        log.records.push(StepRecord {
            step: state.step,
            epoch,
            loss: out.loss,
            lr: cfg.learning_rate,
            update_norm: out.update_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1000.0,
        });
        state.step += 1;
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                checkpoint::save_state(&checkpoint_path(dir, state.step), &state, meta)?;
            }
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        checkpoint::save_state(&dir.join(FINAL_CHECKPOINT), &state, meta)?;
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok((state, log))
}
