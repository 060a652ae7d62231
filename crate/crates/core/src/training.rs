//! Bridge training: timestep sampling, mixing, L1 objective and Adam.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ParamStore};
use crate::bridge::{self, Schedule};
use crate::data::ImageTriplet;
use crate::error::{Error, Result};
use crate::image::stack_images;
use crate::inference::{batch_inference, InferenceConfig};
use crate::metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of bridge timesteps `T`.
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Enables stochastic mixing with this beta peak.
    pub sde_beta_max: Option<f64>,
}

impl TrainConfig {
    /// Full-scale recipe: 50 epochs, batch 4, Adam at 5e-5, T = 1000.
    pub fn full_scale() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            learning_rate: 5e-5,
            steps: 1000,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            sde_beta_max: None,
        }
    }

    /// Short CPU recipe for the 64×64 synthetic dataset.
    pub fn desk() -> Self {
        Self {
            epochs: 6,
            learning_rate: 1e-3,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("epochs, batch_size and steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(b) = self.sde_beta_max {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("sde_beta_max must be nonnegative, got {b}")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.steps, bridge::ScheduleKind::Sine, self.sde_beta_max)
    }

    /// Optimizer steps per epoch for `n` training scenes.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Adam without weight decay; moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: usize,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((v.clone() / bc2)?.sqrt()? + self.eps)?;
            let update = ((m.clone() / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.moments.insert(name.to_string(), (m, v));
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub ts: Vec<usize>,
    pub loss: f64,
}

/// Model, optimizer and progress of a training run.
pub struct TrainState {
    pub model: Backbone,
    pub optimizer: Adam,
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub loss_history: Vec<LossRecord>,
    pub best_val_psnr: Option<f64>,
}

impl TrainState {
    pub fn new(model: Backbone, lr: f64) -> Self {
        Self {
            model,
            optimizer: Adam::new(lr),
            step: 0,
            epoch: 0,
            loss_history: Vec::new(),
            best_val_psnr: None,
        }
    }
}

/// L1 loss of the restorer on a batch mixed at timesteps `ts`.
pub fn batch_loss(
    model: &Backbone,
    batch: &[&ImageTriplet],
    ts: &[usize],
    sched: &Schedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if batch.is_empty() || batch.len() != ts.len() {
        return Err(Error::invalid(format!(
            "{} timesteps for a batch of {}",
            ts.len(),
            batch.len()
        )));
    }
    let (dtype, dev) = (model.dtype(), model.device());
    let x0 = stack_images(&batch.iter().map(|t| &t.x0).collect::<Vec<_>>(), dtype, dev)?;
    let y = stack_images(&batch.iter().map(|t| &t.y).collect::<Vec<_>>(), dtype, dev)?;
    let z = stack_images(&batch.iter().map(|t| &t.z).collect::<Vec<_>>(), dtype, dev)?;
    let x_t = bridge::forward_mix_batch(&x0, &y, ts, sched, noise)?;
    let pred = model.forward(&x_t, ts, &z)?;
    Ok((pred - x0)?.abs()?.mean_all()?)
}

/// Computes the loss on one batch, applies one Adam update and logs the step.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&ImageTriplet],
    ts: &[usize],
    sched: &Schedule,
    noise: Option<&Tensor>,
) -> Result<f64> {
    let loss = batch_loss(&state.model, batch, ts, sched, noise)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let step = state.step + 1;
    if !value.is_finite() {
        return Err(Error::Divergence { step, loss: value });
    }
    let grads = loss.backward()?;
    state.optimizer.step(state.model.params(), &grads)?;
    state.step = step;
    state.loss_history.push(LossRecord {
        step,
        ts: ts.to_vec(),
        loss: value,
    });
    Ok(value)
}

fn derived_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::data::scene_seed(seed, index));
    rng.set_stream(stream);
    rng
}

/// Training order of scene indices for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, 1, epoch));
    idx
}

/// Timesteps (uniform over `0..=T`) and optional noise for one step.
pub fn step_draws(
    seed: u64,
    step: usize,
    batch: usize,
    sched: &Schedule,
    noise_shape: Option<&[usize]>,
    model: &Backbone,
) -> Result<(Vec<usize>, Option<Tensor>)> {
    let mut rng = derived_rng(seed, 2, step);
    let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=sched.steps())).collect();
    let noise = match noise_shape {
        Some(shape) if sched.is_stochastic() => {
            let n: usize = shape.iter().product();
            let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            Some(Tensor::from_vec(v, shape, model.device())?.to_dtype(model.dtype())?)
        }
        _ => None,
    };
    Ok((ts, noise))
}

/// Mean PSNR of single-step restorations over `scenes`.
pub fn validation_psnr(model: &Backbone, sched: &Schedule, scenes: &[ImageTriplet]) -> Result<f64> {
    let pairs: Vec<_> = scenes.iter().map(|t| (&t.y, &t.z)).collect();
    let outs = batch_inference(&pairs, model, sched, &InferenceConfig::default())?;
    let mut total = 0.0;
    for (out, t) in outs.iter().zip(scenes) {
        total += metrics::psnr(&out.clamped(), &t.x0, 1.0)?;
    }
    Ok(total / scenes.len() as f64)
}

/// Summary handed to the epoch observer.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub val_psnr: Option<f64>,
    /// Validation PSNR beat every previous epoch.
    pub improved: bool,
}

/// Runs the remaining epochs of `state`, calling `on_epoch` after each.
///
/// Every step draws its timesteps and noise from `(seed, step)` and every
/// epoch its order from `(seed, epoch)`, so a resumed run reproduces an
/// uninterrupted one.
pub fn train_loop(
    state: &mut TrainState,
    train: &[ImageTriplet],
    val: &[ImageTriplet],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let sched = cfg.schedule()?;
    if state.model.total_steps() != sched.steps() {
        return Err(Error::invalid(format!(
            "model built for T = {}, config has T = {}",
            state.model.total_steps(),
            sched.steps()
        )));
    }
    state.optimizer.lr = cfg.learning_rate;
    let per_epoch = cfg.steps_per_epoch(train.len());
    while state.epoch < cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, state.epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ImageTriplet> = chunk.iter().map(|&i| &train[i]).collect();
            let (c, h, w) = batch[0].x0.shape();
            let shape = [batch.len(), c, h, w];
            let (ts, noise) = step_draws(cfg.seed, state.step, batch.len(), &sched, Some(&shape), &state.model)?;
            sum += train_step(state, &batch, &ts, &sched, noise.as_ref())?;
        }
        state.epoch += 1;
        let val_psnr = if val.is_empty() {
            None
        } else {
            Some(validation_psnr(&state.model, &sched, val)?)
        };
        let improved = match (val_psnr, state.best_val_psnr) {
            (Some(v), Some(best)) => v > best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_val_psnr = val_psnr;
        }
        let report = EpochReport {
            epoch: state.epoch,
            step: state.step,
            mean_loss: sum / per_epoch as f64,
            val_psnr,
            improved,
        };
        log::info!(
            "epoch {} step {} loss {:.5} val_psnr {}",
            report.epoch,
            report.step,
            report.mean_loss,
            val_psnr.map_or("-".into(), |v| format!("{v:.3}"))
        );
        on_epoch(&report, state)?;
    }
    Ok(())
}
