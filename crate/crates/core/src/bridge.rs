//! Bridge process between the clean state (`t = 0`) and the cloudy state
//! (`t = T`): mixing schedules, forward interpolation and reverse
//! resampling in deterministic (ODE) and stochastic (SDE) form.
//!
//! All operations work on tensors of any shape, so the same code serves
//! single images and batches.

use std::f64::consts::PI;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the mixing curve `alpha_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `alpha_t = sin²(π t / 2T)`.
    Sine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Sine => "sine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(ScheduleKind::Sine),
            other => Err(Error::invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Mixing coefficients `alpha[0..=T]` and optional noise levels `beta[0..=T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    kind: ScheduleKind,
    beta_max: Option<f64>,
    alpha: Vec<f64>,
    beta: Option<Vec<f64>>,
}

impl Schedule {
    /// Builds the schedule for `steps` training timesteps.
    ///
    /// `alpha[t] = sin²(π t / 2T)`; with `sde_beta_max = Some(b)` the noise
    /// level is `beta[t] = b · sin(π t / T)`, which vanishes at both ends.
    pub fn new(steps: usize, kind: ScheduleKind, sde_beta_max: Option<f64>) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs T >= 1"));
        }
        if let Some(b) = sde_beta_max {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::invalid(format!("sde_beta_max must be >= 0, got {b}")));
            }
        }
        let total = steps as f64;
        let alpha = (0..=steps)
            .map(|t| match t {
                0 => 0.0,
                t if t == steps => 1.0,
                t => match kind {
                    ScheduleKind::Sine => (PI * t as f64 / (2.0 * total)).sin().powi(2),
                },
            })
            .collect();
        let beta = sde_beta_max.map(|b| {
            (0..=steps)
                .map(|t| {
                    if t == 0 || t == steps {
                        0.0
                    } else {
                        b * (PI * t as f64 / total).sin()
                    }
                })
                .collect()
        });
        Ok(Self {
            steps,
            kind,
            beta_max: sde_beta_max,
            alpha,
            beta,
        })
    }

    /// Number of training timesteps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_max(&self) -> Option<f64> {
        self.beta_max
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn betas(&self) -> Option<&[f64]> {
        self.beta.as_deref()
    }

    pub fn is_stochastic(&self) -> bool {
        self.beta.is_some()
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha[t])
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        self.beta
            .as_ref()
            .map(|b| b[t])
            .ok_or_else(|| Error::InvalidState("schedule has no noise levels (beta)".into()))
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::invalid(format!(
                "timestep {t} outside [0, {}]",
                self.steps
            )));
        }
        Ok(())
    }
}

/// An intermediate image on the bridge together with its timestep.
#[derive(Debug, Clone)]
pub struct BridgeState {
    pub x: Tensor,
    pub t: usize,
}

/// `x_t = (1 - alpha_t) x0 + alpha_t y`.
///
/// Returns `x0` itself at `t = 0` and `y` itself at `t = T`.
pub fn forward_mix(x0: &Tensor, y: &Tensor, t: usize, sched: &Schedule) -> Result<BridgeState> {
    ensure_same_shape(x0, y, "forward_mix")?;
    let a = sched.alpha(t)?;
    Ok(BridgeState {
        x: lerp(x0, y, a)?,
        t,
    })
}

/// Stochastic forward mixing: `x_t = (1 - alpha_t) x0 + alpha_t y + beta_t noise`.
pub fn forward_mix_sde(
    x0: &Tensor,
    y: &Tensor,
    t: usize,
    sched: &Schedule,
    noise: &Tensor,
) -> Result<BridgeState> {
    ensure_same_shape(x0, y, "forward_mix_sde")?;
    ensure_same_shape(x0, noise, "forward_mix_sde noise")?;
    let b = sched.beta(t)?;
    let mixed = lerp(x0, y, sched.alpha(t)?)?;
    let x = if b == 0.0 {
        mixed
    } else {
        (mixed + noise.affine(b, 0.0)?)?
    };
    Ok(BridgeState { x, t })
}

/// One reverse resampling step from `t` to `t - s`:
/// `x_{t-s} = (1 - r) x0_hat + r x_t` with `r = alpha_{t-s} / alpha_t`.
pub fn reverse_step(
    x0_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    s: usize,
    sched: &Schedule,
) -> Result<Tensor> {
    ensure_same_shape(x0_hat, x_t, "reverse_step")?;
    let r = reverse_ratio(t, s, sched)?;
    lerp(x0_hat, x_t, r)
}

/// Stochastic reverse step; adds `(beta_t r - beta_{t-s}) noise` to the
/// deterministic update.
pub fn reverse_step_sde(
    x0_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    s: usize,
    sched: &Schedule,
    noise: &Tensor,
) -> Result<Tensor> {
    ensure_same_shape(x0_hat, x_t, "reverse_step_sde")?;
    ensure_same_shape(x0_hat, noise, "reverse_step_sde noise")?;
    let r = reverse_ratio(t, s, sched)?;
    let coef = sched.beta(t)? * r - sched.beta(t - s)?;
    let det = lerp(x0_hat, x_t, r)?;
    if coef == 0.0 {
        Ok(det)
    } else {
        Ok((det + noise.affine(coef, 0.0)?)?)
    }
}

fn reverse_ratio(t: usize, s: usize, sched: &Schedule) -> Result<f64> {
    sched.check_t(t)?;
    if s == 0 || s > t {
        return Err(Error::invalid(format!(
            "reverse step needs 0 < s <= t, got s = {s}, t = {t}"
        )));
    }
    let at = sched.alpha(t)?;
    if at == 0.0 {
        return Err(Error::invalid(format!("alpha[{t}] is zero")));
    }
    Ok(sched.alpha(t - s)? / at)
}

/// `(1 - w) a + w b`, returning an exact copy of an endpoint when `w` is 0 or 1.
fn lerp(a: &Tensor, b: &Tensor, w: f64) -> Result<Tensor> {
    if w == 0.0 {
        return Ok(a.clone());
    }
    if w == 1.0 {
        return Ok(b.clone());
    }
    Ok((a.affine(1.0 - w, 0.0)? + b.affine(w, 0.0)?)?)
}

/// Batched forward mixing with one timestep per leading-dimension entry.
pub fn forward_mix_batch(
    x0: &Tensor,
    y: &Tensor,
    ts: &[usize],
    sched: &Schedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    ensure_same_shape(x0, y, "forward_mix_batch")?;
    if x0.dim(0)? != ts.len() {
        return Err(Error::invalid(format!(
            "{} timesteps for a batch of {}",
            ts.len(),
            x0.dim(0)?
        )));
    }
    let mut rows = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let (a, b) = (x0.get(i)?, y.get(i)?);
        let state = match noise {
            Some(n) => forward_mix_sde(&a, &b, t, sched, &n.get(i)?)?,
            None => forward_mix(&a, &b, t, sched)?,
        };
        rows.push(state.x);
    }
    Ok(Tensor::stack(&rows, 0)?)
}

/// Descending timesteps visited by `N`-step inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
    stride: usize,
}

impl TimestepPlan {
    /// `[T, T - s, ..., s, 0]` with `s = T / N`; `N` must divide `T`.
    pub fn new(total: usize, nfe: usize) -> Result<Self> {
        if nfe == 0 || nfe > total {
            return Err(Error::invalid(format!(
                "NFE must be in [1, {total}], got {nfe}"
            )));
        }
        if !total.is_multiple_of(nfe) {
            return Err(Error::invalid(format!(
                "NFE {nfe} does not divide T = {total}"
            )));
        }
        let stride = total / nfe;
        let steps = (0..=nfe).rev().map(|k| k * stride).collect();
        Ok(Self { steps, stride })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Timesteps at which the restorer is evaluated (every step except 0).
    pub fn evaluation_points(&self) -> &[usize] {
        &self.steps[..self.steps.len() - 1]
    }
}

pub fn plan_timesteps(total: usize, nfe: usize) -> Result<TimestepPlan> {
    TimestepPlan::new(total, nfe)
}

fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::invalid(format!(
            "{what}: dtype mismatch {:?} vs {:?}",
            a.dtype(),
            b.dtype()
        )));
    }
    Ok(())
}
