//! Fair-CRPS ensemble training, pushforward finetuning and ensemble generation.

pub mod checkpoint;
pub mod crps;
pub mod loss;
pub mod muon;
pub mod norm;
pub mod schedule;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Model, ModelInput, TIME_CHANNELS};
use crate::nn::ParamSet;
use crate::synth::{Dataset, Sample};
use crate::tensor::{Graph, Real, Tensor, Var};

pub use crps::fair_crps;
pub use loss::{weighted_loss, LossWeights};
pub use muon::Muon;
pub use norm::NormStats;
pub use schedule::Schedule;

/// Ensemble size during training.
pub const TRAIN_MEMBERS: usize = 2;
/// Ensemble size at inference.
pub const INFERENCE_MEMBERS: usize = 48;
/// Noise round used by [`Trainer::evaluate`]; far beyond any update count.
const EVAL_ROUND: u64 = 1 << 30;
/// Fraction of sample start indices held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Noise vector for `(seed, member, step)`, independent of evaluation order.
pub fn noise_vector(seed: u64, member: u64, step: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member);
    rng.set_word_pos(u128::from(step) * 2 * dim as u128);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Input for the next step: history shifted by one with `next` appended.
pub fn advance<T: Real>(input: &ModelInput<T>, next: Tensor<T>, time: [f64; TIME_CHANNELS]) -> ModelInput<T> {
    let mut history = input.history[1..].to_vec();
    history.push(next);
    ModelInput {
        history,
        statics: input.statics.clone(),
        time,
    }
}

/// Gradient-free forward pass.
pub fn predict<T: Real>(model: &Model<T>, params: &ParamSet<T>, input: &ModelInput<T>, z: &[f64]) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let y = model.forward(&mut g, params, input, z)?;
    Ok(g.value(y).clone())
}

/// `members` trajectories of `steps` predictions from one initial condition.
/// `time_at(j)` gives the time features of the newest input state before step `j`.
/// Returned as `[member][step]`.
pub fn generate_ensemble<T: Real>(
    model: &Model<T>,
    params: &ParamSet<T>,
    initial: &ModelInput<T>,
    members: usize,
    steps: usize,
    seed: u64,
    time_at: impl Fn(usize) -> [f64; TIME_CHANNELS],
) -> Result<Vec<Vec<Tensor<T>>>> {
    let dim = model.config().noise_dim;
    (0..members)
        .map(|m| {
            let mut input = initial.clone();
            input.time = time_at(0);
            let mut out = Vec::with_capacity(steps);
            for j in 0..steps {
                let z = noise_vector(seed, m as u64, j as u64, dim);
                let y = predict(model, params, &input, &z)?;
                if !y.all_finite() {
                    return Err(Error::Numeric(format!("member {m} diverged at step {j}")));
                }
                input = advance(&input, y.clone(), time_at(j + 1));
                out.push(y);
            }
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub schedule: Schedule,
    /// Matrix learning rate per unit of scheduled rate. 1 runs matrices at the table rate.
    pub matrix_lr_ratio: f64,
    pub clip_norm: f64,
    pub members: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Pretraining at the table rate for matrices and biases alike.
    pub fn pretrain(steps: usize, seed: u64) -> Self {
        TrainConfig {
            schedule: Schedule::pretrain(schedule::PRETRAIN_LR, steps),
            matrix_lr_ratio: 1.0,
            clip_norm: muon::CLIP_NORM,
            members: TRAIN_MEMBERS,
            seed,
        }
    }

    /// Finetuning stage with rollout `k`, at the table rate of that stage.
    pub fn finetune(k: usize, steps: usize, seed: u64) -> Result<Self> {
        let peak = schedule::finetune_lr(k)
            .ok_or_else(|| Error::config(format!("no finetuning stage with rollout {k} (1, 2, 4, 8, 12)")))?;
        Ok(TrainConfig {
            schedule: Schedule::finetune(peak, steps),
            ..Self::pretrain(steps, seed)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Backward rules recorded on the gradient tape.
    pub tape_ops: usize,
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub params: ParamSet<T>,
    pub weights: LossWeights,
    pub config: TrainConfig,
    pub optimizer: Muon,
    step: usize,
    peak_tape: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, params: ParamSet<T>, weights: LossWeights, config: TrainConfig) -> Result<Self> {
        if config.members < 2 {
            return Err(Error::EnsembleSize(config.members));
        }
        if weights.alpha.len() != model.config().c_dyn {
            return Err(Error::dim("loss weights", &[weights.alpha.len()], &[model.config().c_dyn]));
        }
        Ok(Trainer {
            model,
            params,
            weights,
            config,
            optimizer: Muon::new(),
            step: 0,
            peak_tape: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Largest gradient tape recorded so far.
    pub fn peak_tape(&self) -> usize {
        self.peak_tape
    }

    /// Noise of rollout step `step` for `member` of batch entry `sample` in update `round`.
    fn noise(&self, round: u64, sample: usize, member: usize, step: usize) -> Vec<f64> {
        let stream = (round << 32) | ((sample as u64) << 8) | member as u64;
        noise_vector(self.config.seed, stream, step as u64, self.model.config().noise_dim)
    }

    /// Member inputs after `k − 1` gradient-free steps of a sample.
    fn rollout_inputs(&self, round: u64, index: usize, sample: &Sample<T>, k: usize) -> Result<Vec<ModelInput<T>>> {
        let mut inputs = vec![sample.input.clone(); self.config.members];
        for (m, input) in inputs.iter_mut().enumerate() {
            input.time = sample.times[0];
            for j in 0..k - 1 {
                let y = predict(&self.model, &self.params, input, &self.noise(round, index, m, j))?;
                *input = advance(input, y, sample.times[j + 1]);
            }
        }
        Ok(inputs)
    }

    /// Mean batch loss at rollout step `k` on a fresh gradient tape.
    fn batch_loss(&self, g: &mut Graph<T>, batch: &[Sample<T>], k: usize, round: u64) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let mut total = None;
        for (i, sample) in batch.iter().enumerate() {
            if sample.targets.len() < k || sample.times.len() < k {
                return Err(Error::config(format!("sample has {} targets, rollout needs {k}", sample.targets.len())));
            }
            let inputs = self.rollout_inputs(round, i, sample, k)?;
            let members = inputs
                .iter()
                .enumerate()
                .map(|(m, input)| self.model.forward(g, &self.params, input, &self.noise(round, i, m, k - 1)))
                .collect::<Result<Vec<_>>>()?;
            let truth = g.constant(sample.targets[k - 1].clone());
            let l = weighted_loss(g, &members, truth, &self.weights)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        Ok(g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64))
    }

    /// Single-step update.
    pub fn train_step(&mut self, batch: &[Sample<T>]) -> Result<StepReport> {
        self.rollout_finetune_step(batch, 1)
    }

    /// Update from the loss at rollout step `k`; steps before it record no gradient.
    pub fn rollout_finetune_step(&mut self, batch: &[Sample<T>], k: usize) -> Result<StepReport> {
        if k == 0 {
            return Err(Error::config("rollout length must be at least 1"));
        }
        let mut g = Graph::new();
        let loss_var = self.batch_loss(&mut g, batch, k, self.step as u64)?;
        let loss = g.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at step {}", self.step)));
        }
        let tape_ops = g.recorded_ops();
        self.peak_tape = self.peak_tape.max(tape_ops);
        let grads = g.backward(loss_var)?;
        let mut param_grads = g.param_grads(&grads);
        drop(g);
        let grad_norm = muon::clip_global_norm(&mut param_grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {}", self.step)));
        }
        let lr = self.config.schedule.lr(self.step);
        self.optimizer
            .step(&mut self.params, &param_grads, lr * self.config.matrix_lr_ratio, lr)?;
        let report = StepReport {
            step: self.step,
            loss,
            grad_norm,
            lr,
            tape_ops,
        };
        self.step += 1;
        Ok(report)
    }

    /// Mean loss at rollout step `k` without updating. The noise is the same at
    /// every call, so values at different training steps are comparable.
    pub fn evaluate(&self, samples: &[Sample<T>], k: usize) -> Result<f64> {
        let mut total = 0.0;
        for (i, sample) in samples.iter().enumerate() {
            let mut g = Graph::no_grad();
            let l = self.batch_loss(&mut g, std::slice::from_ref(sample), k, EVAL_ROUND + i as u64)?;
            total += g.value(l).data()[0].as_f64();
        }
        Ok(total / samples.len().max(1) as f64)
    }
}

/// Training and validation start indices for `samples` windows; validation is the tail.
pub fn split_samples(samples: usize) -> Result<(Range<usize>, Range<usize>)> {
    if samples < 2 {
        return Err(Error::config(format!("dataset yields {samples} samples, need at least 2")));
    }
    let val = ((samples as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, samples - 1);
    Ok((0..samples - val, samples - val..samples))
}

#[derive(Clone, Debug)]
pub struct LoopConfig {
    pub steps: usize,
    pub batch: usize,
    pub rollout: usize,
    /// Validate every this many steps and after the last; 0 disables.
    pub val_every: usize,
    /// Validation samples, evenly spaced over the validation range.
    pub val_samples: usize,
    pub seed: u64,
}

/// Runs `cfg.steps` updates on random training windows of `data`.
/// `on_step` sees every report, `on_val` every `(step, validation loss)`.
pub fn fit<T: Real>(
    trainer: &mut Trainer<T>,
    data: &Dataset<T>,
    cfg: &LoopConfig,
    mut on_step: impl FnMut(&StepReport) -> Result<()>,
    mut on_val: impl FnMut(usize, f64) -> Result<()>,
) -> Result<()> {
    let history = trainer.model.config().history;
    let (train, val) = split_samples(data.num_samples(history, cfg.rollout))?;
    let count = cfg.val_samples.clamp(1, val.len());
    let val_set = (0..count)
        .map(|i| data.sample(val.start + i * val.len() / count, history, cfg.rollout))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.val_every > 0 {
        on_val(trainer.step(), trainer.evaluate(&val_set, cfg.rollout)?)?;
    }
    for i in 0..cfg.steps {
        let batch = (0..cfg.batch.max(1))
            .map(|_| data.sample(rng.gen_range(train.clone()), history, cfg.rollout))
            .collect::<Result<Vec<_>>>()?;
        on_step(&trainer.rollout_finetune_step(&batch, cfg.rollout)?)?;
        if cfg.val_every > 0 && ((i + 1) % cfg.val_every == 0 || i + 1 == cfg.steps) {
            on_val(trainer.step(), trainer.evaluate(&val_set, cfg.rollout)?)?;
        }
    }
    Ok(())
}
