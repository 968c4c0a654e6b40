//! Optimization: initialization, the warm-up learning-rate schedule, Adam,
//! frame-budget batching, checkpoints and the training loop.
//!
//! Every source of randomness is derived from the configured seed together
//! with the epoch and the utterance index, and per-utterance gradients are
//! summed in utterance order. Results therefore do not depend on the number
//! of threads, and a run resumed from an epoch checkpoint continues exactly
//! as an uninterrupted one.

mod adam;
mod batch;
mod checkpoint;
pub mod init;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use batch::batch_by_frames;
pub use checkpoint::{average_checkpoints, Checkpoint};
pub use init::{init_fan_avg, init_routing_kernel};

use crate::ctc::{self, greedy_decode};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{token_error_rate, AlignmentResult};
use crate::model::{Mode, SrfModel};
use crate::tensor::{NormStats, Tape, Tensor};

/// `κ · min(n_s^-0.5, n_s · n_w^-1.5)`: linear warm-up for `n_w` steps, then
/// inverse square-root decay.
pub fn learning_rate(step: u64, warmup: u64, kappa: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    kappa * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// `κ` takes `value` once `after_epochs` epochs have completed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KappaStep {
    pub after_epochs: usize,
    pub value: f64,
}

fn default_kappa() -> Vec<KappaStep> {
    vec![KappaStep { after_epochs: 0, value: 0.5 }]
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    #[serde(default = "default_kappa")]
    pub kappa: Vec<KappaStep>,
    /// Padded frame budget of one batch.
    pub batch_frames: usize,
    pub epochs: usize,
    /// Initialization scale `α_s`.
    #[serde(default = "one")]
    pub init_scale: f64,
    /// Number of final epoch checkpoints to average.
    #[serde(default = "one_usize")]
    pub average_last: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub execution: Execution,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::config("train.warmup_steps", "must be at least 1"));
        }
        if self.kappa.is_empty() || self.kappa[0].after_epochs != 0 {
            return Err(Error::config("train.kappa", "the first entry must start after 0 epochs"));
        }
        for (i, k) in self.kappa.iter().enumerate() {
            if !(k.value > 0.0 && k.value.is_finite()) {
                return Err(Error::config(format!("train.kappa[{i}].value"), "must be positive"));
            }
            if i > 0 && k.after_epochs <= self.kappa[i - 1].after_epochs {
                return Err(Error::config(format!("train.kappa[{i}].after_epochs"), "must increase"));
            }
        }
        if self.batch_frames == 0 {
            return Err(Error::config("train.batch_frames", "must be at least 1"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("train.init_scale", "must be positive"));
        }
        if self.average_last == 0 {
            return Err(Error::config("train.average_last", "must be at least 1"));
        }
        Ok(())
    }

    /// `κ` in effect during epoch `epoch` (zero based).
    pub fn kappa_at(&self, epoch: usize) -> f64 {
        self.kappa
            .iter()
            .rev()
            .find(|k| k.after_epochs <= epoch)
            .map_or(self.kappa[0].value, |k| k.value)
    }
}

/// Independent random stream for one utterance in one epoch.
pub fn utterance_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
    rng.set_stream(epoch as u64);
    rng
}

/// Loss, parameter gradients and batch-norm statistics of one utterance.
pub struct UtteranceGradient {
    pub loss: f64,
    pub grads: BTreeMap<usize, Tensor>,
    pub norm_stats: Vec<NormStats>,
}

/// CTC loss and its gradient for one utterance in training mode.
pub fn utterance_gradient(model: &SrfModel, utt: &Utterance, blank: usize, rng: &mut ChaCha8Rng) -> Result<UtteranceGradient> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &utt.features, Mode::Train(rng), false)?;
    let loss = ctc::ctc_loss(&mut tape, out.log_probs, &utt.labels, blank)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?.into_params();
    Ok(UtteranceGradient {
        loss: value,
        grads,
        norm_stats: out.norm_stats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub rate: f64,
    /// Mean CTC loss per utterance of the batch.
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Greedy token error rate on the validation set, in percent.
    pub valid_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Checkpoints of the most recent epochs, oldest first.
    pub checkpoints: Vec<Checkpoint>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub alignment: AlignmentResult,
    pub frames: usize,
}

impl Evaluation {
    pub fn error_percent(&self) -> f64 {
        100.0 * self.alignment.error_rate()
    }
}

/// Mean CTC loss and greedy token errors over `data` in evaluation mode.
pub fn evaluate(model: &SrfModel, data: &[Utterance], blank: usize, exec: Execution) -> Result<Evaluation> {
    let results = exec.map(data, |_, u| -> Result<(f64, AlignmentResult)> {
        let lp = model.log_probs(&u.features)?;
        let loss = ctc::ctc_loss_value(&lp, &u.labels, blank)?;
        Ok((loss, token_error_rate(&u.labels, &greedy_decode(&lp, blank))))
    });
    let mut eval = Evaluation::default();
    for (r, u) in results.into_iter().zip(data) {
        let (loss, a) = r?;
        eval.loss += loss;
        eval.alignment += a;
        eval.frames += u.frames();
    }
    if !data.is_empty() {
        eval.loss /= data.len() as f64;
    }
    Ok(eval)
}

/// Model, optimizer and progress of a training run.
pub struct TrainState {
    pub model: SrfModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: SrfModel, adam: AdamConfig) -> Self {
        let adam = Adam::new(adam, model.params());
        Self { model, adam, epoch: 0 }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.adam, self.epoch)
    }
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        Error::NonFiniteGradient(name) => Error::Diverged {
            step,
            detail: format!("non-finite gradient for {name}"),
        },
        other => other,
    }
}

/// Runs epochs `state.epoch .. cfg.epochs`.
///
/// `on_epoch` sees every finished epoch with its checkpoint, e.g. to write
/// it to disk.
pub fn train(
    state: &mut TrainState,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    cfg: &TrainConfig,
    seed: u64,
    blank: usize,
    mut on_epoch: impl FnMut(&EpochRecord, &Checkpoint) -> Result<()>,
) -> Result<History> {
    cfg.validate()?;
    let mut history = History::default();
    let lengths: Vec<usize> = train_set.iter().map(Utterance::frames).collect();
    let base_batches = batch_by_frames(&lengths, cfg.batch_frames)?;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut batches = base_batches.clone();
        batches.shuffle(&mut epoch_rng(seed, epoch));
        let kappa = cfg.kappa_at(epoch);
        let mut loss_sum = 0.0;

        for batch in &batches {
            let model = &state.model;
            let results = cfg.execution.map(batch, |_, &idx| {
                let mut rng = utterance_rng(seed, epoch, idx);
                utterance_gradient(model, &train_set[idx], blank, &mut rng)
            });
            let step = state.adam.step + 1;
            let mut total: BTreeMap<usize, Tensor> = BTreeMap::new();
            let mut loss = 0.0;
            let mut stats = Vec::with_capacity(batch.len());
            for r in results {
                let g = r.map_err(|e| diverged(step, e))?;
                loss += g.loss;
                for (id, t) in g.grads {
                    match total.get_mut(&id) {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                        None => {
                            total.insert(id, t);
                        }
                    }
                }
                stats.push(g.norm_stats);
            }
            let n = batch.len() as f64;
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("loss {loss}") });
            }
            for t in total.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v /= n);
            }
            let rate = learning_rate(step, cfg.warmup_steps, kappa);
            state
                .adam
                .step(state.model.params_mut(), &total, rate)
                .map_err(|e| diverged(step, e))?;
            state.model.update_running_stats(&stats);
            loss_sum += loss;
            history.steps.push(StepRecord { epoch: epoch + 1, step, rate, loss });
        }

        state.epoch += 1;
        let valid = evaluate(&state.model, valid_set, blank, cfg.execution).map_err(|e| diverged(state.adam.step, e))?;
        let record = EpochRecord {
            epoch: state.epoch,
            step: state.adam.step,
            train_loss: loss_sum / batches.len().max(1) as f64,
            valid_loss: valid.loss,
            valid_error: valid.error_percent(),
        };
        let ckpt = state.checkpoint();
        on_epoch(&record, &ckpt)?;
        history.epochs.push(record);
        history.checkpoints.push(ckpt);
        if history.checkpoints.len() > cfg.average_last {
            history.checkpoints.remove(0);
        }
    }
    if history.checkpoints.is_empty() {
        history.checkpoints.push(state.checkpoint());
    }
    Ok(history)
}
