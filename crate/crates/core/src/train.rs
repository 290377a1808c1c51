//! Teacher-forced training with Adam.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{CaptionModel, Sample};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    #[doc(hidden)]
    pub fault_injection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            clip_norm: None,
            max_steps: None,
            fault_injection: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// First and second moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having zero gradient.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Config("optimizer state does not match parameters".into()));
    }
    for (id, g) in iter_grads(grads) {
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {}",
                params.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let k = id.0;
        let g = grads.get(id);
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

fn iter_grads(grads: &Gradients) -> Vec<(crate::params::ParamId, &Tensor)> {
    let mut out: Vec<_> = grads.iter().collect();
    out.sort_by_key(|(id, _)| id.0);
    out
}

/// Shuffle, group by reified graph size, chunk, then shuffle the chunks.
/// A trailing chunk of one sample joins its predecessor so batch norm sees
/// at least two rows whenever the group allows.
pub fn make_batches(samples: &[Sample], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        groups.entry(samples[i].graph.graph.len()).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for members in groups.into_values() {
        let mut chunks: Vec<Vec<usize>> = members.chunks(batch_size).map(<[usize]>::to_vec).collect();
        if chunks.len() >= 2 && chunks.last().map_or(false, |c| c.len() == 1) {
            let last = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(last);
        }
        batches.extend(chunks);
    }
    batches.shuffle(rng);
    batches
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean per-sample training loss over the epoch.
    pub mean_loss: f64,
    pub val_meteor: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub steps: usize,
    pub adam: AdamState,
    /// Model with the highest validation METEOR, if validation ran.
    pub best: Option<(usize, f64, CaptionModel)>,
}

/// Trains `model` in place. `validate` scores a model on held-out data after
/// each epoch; `on_epoch` sees each finished epoch (for logging or
/// checkpointing).
pub fn train(
    model: &mut CaptionModel,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut validate: Option<&mut dyn FnMut(&CaptionModel) -> Result<f64>>,
    mut on_epoch: impl FnMut(&EpochLog, &CaptionModel, &AdamState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        steps: 0,
        adam: adam.clone(),
        best: None,
    };
    'epochs: for epoch in 1..=cfg.epochs {
        let batches = make_batches(samples, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in batches {
            if cfg.max_steps.map_or(false, |m| outcome.steps >= m) {
                break;
            }
            let refs: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
            let tape_seed: u64 = rng.gen();
            let mut fwd = model.forward_batch(&refs, true, tape_seed)?;
            let loss = fwd.tape.value(fwd.loss).item();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", outcome.steps + 1)));
            }
            if cfg.fault_injection {
                fwd.tape.inject_backward_fault(true);
            }
            let mut grads = fwd.tape.backward(fwd.loss)?;
            if let Some(clip) = cfg.clip_norm {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam_step(&mut model.params, &grads, &mut adam, cfg)?;
            if let Some(stats) = &fwd.bn_stats {
                model.bn.update(&stats.mean, &stats.var, stats.rows);
            }
            loss_sum += fwd.per_sample.iter().sum::<f64>();
            count += fwd.per_sample.len();
            outcome.step_losses.push(loss);
            outcome.steps += 1;
        }
        if count == 0 {
            break 'epochs;
        }
        let val_meteor = match validate.as_mut() {
            Some(f) => Some(f(model)?),
            None => None,
        };
        let log = EpochLog {
            epoch,
            steps: outcome.steps,
            mean_loss: loss_sum / count as f64,
            val_meteor,
        };
        if let Some(score) = val_meteor {
            if outcome.best.as_ref().map_or(true, |(_, b, _)| score > *b) {
                outcome.best = Some((epoch, score, model.clone()));
            }
        }
        on_epoch(&log, model, &adam)?;
        outcome.epochs.push(log);
    }
    outcome.adam = adam;
    Ok(outcome)
}

/// Mean eval-mode teacher-forced loss over samples.
pub fn mean_loss(model: &CaptionModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += model.teacher_forced_loss(s)?;
    }
    Ok(total / samples.len() as f64)
}
