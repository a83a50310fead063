//! Training: the two learning-rate schedules, Adam with bias correction,
//! global-norm gradient clipping, and the epoch/batch fit loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::FeatureMatrix;
use crate::ctc::{ctc_loss, min_frames};
use crate::error::{Error, Result};
use crate::model::{Model, ForwardOutput, TIME_POOL};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Learning-rate schedule. `Warmup` rises linearly to the peak at
/// `warmup_steps`, then decays as the inverse square root of the step:
/// 256^-0.5 * step * warmup^-1.5 while warming up, 256^-0.5 * step^-0.5 after.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant(f64),
    Warmup { warmup_steps: usize },
}

impl Schedule {
    pub fn as_str(&self) -> String {
        match self {
            Schedule::Constant(_) => "constant".into(),
            Schedule::Warmup { .. } => "warmup".into(),
        }
    }
}

pub fn lr_schedule(schedule: &Schedule, step: usize) -> Result<f64> {
    if step < 1 {
        return Err(Error::InvalidValue {
            op: "lr_schedule",
            detail: "step numbering starts at 1".into(),
        });
    }
    Ok(match schedule {
        Schedule::Constant(lr) => *lr,
        Schedule::Warmup { warmup_steps } => {
            let c = 256f64.powf(-0.5);
            let w = *warmup_steps as f64;
            if step <= *warmup_steps {
                c * step as f64 * w.powf(-1.5)
            } else {
                c * (step as f64).powf(-0.5)
            }
        }
    })
}

/// Adam first/second moments per parameter, in registry order.
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        AdamState {
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters with no accumulated gradient
/// are treated as having a zero gradient.
pub fn adam_step(params: &[(String, Tensor)], state: &mut AdamState, lrate: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!("{} params vs {} moment slots", params.len(), state.m.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (name, p)) in params.iter().enumerate() {
        let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        if grad.len() != state.m[i].len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{name}: gradient length changed"),
            });
        }
        let mut values = p.to_vec();
        for (j, g) in grad.iter().enumerate() {
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            values[j] -= lrate * m_hat / (v_hat.sqrt() + state.eps);
        }
        p.set_values(&values)?;
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm when clipping fired.
pub fn clip_gradients(params: &[(String, Tensor)], max_norm: f64) -> Option<f64> {
    let mut sq = 0.0;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return None;
    }
    let scale = max_norm / norm;
    for (_, p) in params {
        if let Some(mut g) = p.grad() {
            for x in &mut g {
                *x *= scale;
            }
            p.set_grad(&g);
        }
    }
    Some(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Stop after this many optimizer steps (0 = no cap).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            schedule: Schedule::Constant(1e-4),
            seed: 0,
            clip_norm: Some(5.0),
            max_steps: 0,
        }
    }
}

/// One training utterance: features plus its target label indices.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub utterance_id: String,
    pub features: FeatureMatrix,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lrate: f64,
    pub loss: f64,
    pub skipped: usize,
}

#[derive(Debug, Default)]
pub struct FitReport {
    pub logs: Vec<StepLog>,
    pub skipped_total: usize,
    pub clipped_steps: usize,
    pub final_step: usize,
}

/// Epoch loop: seeded shuffle, batches of `batch_size` sorted longest-first
/// within the batch, zero-padded with true-length masking, mean CTC loss,
/// clipped Adam update under the schedule. Unalignable utterances are skipped
/// and counted. Returns the step log and the optimizer state for
/// checkpointing.
pub fn fit(
    model: &Model,
    dataset: &[TrainItem],
    cfg: &TrainConfig,
) -> Result<(FitReport, AdamState)> {
    if dataset.is_empty() {
        return Err(Error::InvalidValue {
            op: "fit",
            detail: "empty dataset".into(),
        });
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be at least 1".into()));
    }
    let params = model.params();
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FitReport::default();
    let mut step = 0usize;
    let mut any_trained = false;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch: Vec<&TrainItem> = chunk.iter().map(|&i| &dataset[i]).collect();
            batch.sort_by(|a, b| {
                b.features
                    .n_frames
                    .cmp(&a.features.n_frames)
                    .then_with(|| a.utterance_id.cmp(&b.utterance_id))
            });
            let mut skipped = 0usize;
            batch.retain(|item| {
                let pooled = item.features.n_frames / TIME_POOL;
                let ok = item.features.n_frames >= TIME_POOL
                    && pooled >= min_frames(&item.targets);
                if !ok {
                    skipped += 1;
                }
                ok
            });
            if batch.is_empty() {
                report.skipped_total += skipped;
                continue;
            }
            let t_max = batch[0].features.n_frames;
            let b = batch.len();
            let dim = batch[0].features.dim;
            let mut data = vec![0.0; b * t_max * dim];
            let mut lengths = Vec::with_capacity(b);
            for (bi, item) in batch.iter().enumerate() {
                let t = item.features.n_frames;
                data[bi * t_max * dim..bi * t_max * dim + t * dim]
                    .copy_from_slice(&item.features.data);
                lengths.push(t);
            }
            let feats = Tensor::from_vec(vec![b, 1, t_max, dim], data, false)?;
            let out: ForwardOutput = model.forward(&feats, &lengths, Mode::Train, &mut rng, false)?;
            let t_pooled = out.logits.shape()[1];
            let mut losses = Vec::with_capacity(b);
            for (bi, item) in batch.iter().enumerate() {
                let len = out.pooled_lengths[bi];
                let frame_logits = out
                    .logits
                    .slice(0, bi, bi + 1)?
                    .reshape(vec![t_pooled, model.config.vocab_size])?
                    .slice(0, 0, len)?;
                losses.push(ctc_loss(&frame_logits, &item.targets)?);
            }
            let loss = Tensor::concat(&losses, 0)?.mean();
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::Other(format!(
                    "non-finite loss {loss_val} at step {} (epoch {epoch}); aborting",
                    step + 1
                )));
            }
            loss.backward()?;
            if let Some(max_norm) = cfg.clip_norm {
                if clip_gradients(&params, max_norm).is_some() {
                    report.clipped_steps += 1;
                }
            }
            step += 1;
            let lrate = lr_schedule(&cfg.schedule, step)?;
            adam_step(&params, &mut state, lrate)?;
            model.zero_grads();
            any_trained = true;
            report.skipped_total += skipped;
            report.logs.push(StepLog {
                step,
                epoch,
                lrate,
                loss: loss_val,
                skipped,
            });
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
        }
    }
    if !any_trained {
        return Err(Error::InvalidValue {
            op: "fit",
            detail: format!(
                "all {} utterances were unalignable or too short",
                dataset.len()
            ),
        });
    }
    report.final_step = step;
    Ok((report, state))
}

#[cfg(test)]
mod tests;
