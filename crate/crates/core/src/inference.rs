//! Few-step reverse sampling from a cloudy image to a cloud-free estimate.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::bridge::{self, Schedule, TimestepPlan};
use crate::error::{Error, Result};
use crate::image::Image;

/// Beta peak used for stochastic sampling when the schedule carries none.
pub const DEFAULT_SDE_BETA_MAX: f64 = 0.1;

/// Anything that predicts `x0` from `(x_t, t, z)` for a batch.
pub trait Restorer {
    fn predict(&self, x_t: &Tensor, ts: &[usize], z: &Tensor) -> Result<Tensor>;

    fn dtype(&self) -> DType {
        DType::F32
    }

    fn device(&self) -> Device {
        Device::Cpu
    }
}

impl Restorer for Backbone {
    fn predict(&self, x_t: &Tensor, ts: &[usize], z: &Tensor) -> Result<Tensor> {
        self.forward(x_t, ts, z)
    }

    fn dtype(&self) -> DType {
        Backbone::dtype(self)
    }

    fn device(&self) -> Device {
        Backbone::device(self).clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ode,
    Sde,
}

impl SamplerMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::Ode => "ode",
            SamplerMode::Sde => "sde",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ode" => Ok(SamplerMode::Ode),
            "sde" => Ok(SamplerMode::Sde),
            other => Err(Error::invalid(format!("unknown sampler mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Number of restorer evaluations.
    pub nfe: usize,
    pub mode: SamplerMode,
    /// Seeds the per-step noise in SDE mode; ignored otherwise.
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            nfe: 1,
            mode: SamplerMode::Ode,
            seed: 0,
        }
    }
}

/// Every state visited by one sampling run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `x_t` at each evaluation point, starting with `x_T = y`.
    pub frames: Vec<(usize, Image)>,
    /// Prediction returned by the final restorer call.
    pub output: Image,
}

fn sampling_schedule(sched: &Schedule, mode: SamplerMode) -> Result<Schedule> {
    match mode {
        SamplerMode::Sde if !sched.is_stochastic() => {
            Schedule::new(sched.steps(), sched.kind(), Some(DEFAULT_SDE_BETA_MAX))
        }
        _ => Ok(sched.clone()),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, like: &Tensor) -> Result<Tensor> {
    let n = like.elem_count();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, like.dims(), like.device())?.to_dtype(like.dtype())?)
}

fn ensure_finite(t: &Tensor, step: usize, what: &str) -> Result<()> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            t: step,
            what: what.to_string(),
        })
    }
}

fn sample<R: Restorer + ?Sized>(
    y: &Image,
    z: &Image,
    model: &R,
    sched: &Schedule,
    icfg: &InferenceConfig,
    mut on_frame: impl FnMut(usize, &Tensor) -> Result<()>,
) -> Result<Image> {
    if (y.height(), y.width()) != (z.height(), z.width()) {
        return Err(Error::invalid(format!(
            "SAR {:?} is not aligned with optical {:?}",
            z.shape(),
            y.shape()
        )));
    }
    let plan = TimestepPlan::new(sched.steps(), icfg.nfe)?;
    let sched = sampling_schedule(sched, icfg.mode)?;
    let s = plan.stride();
    let (dtype, device) = (model.dtype(), model.device());
    let mut x = y.to_tensor(dtype, &device)?;
    let z = z.to_tensor(dtype, &device)?;
    let mut rng = ChaCha8Rng::seed_from_u64(icfg.seed);
    let points = plan.evaluation_points();
    let mut pred = None;
    for (k, &t) in points.iter().enumerate() {
        on_frame(t, &x)?;
        let x0 = model.predict(&x, &[t], &z)?;
        ensure_finite(&x0, t, "restorer output")?;
        if k + 1 < points.len() {
            x = match icfg.mode {
                SamplerMode::Ode => bridge::reverse_step(&x0, &x, t, s, &sched)?,
                SamplerMode::Sde => {
                    let noise = gaussian(&mut rng, &x)?;
                    bridge::reverse_step_sde(&x0, &x, t, s, &sched, &noise)?
                }
            };
            ensure_finite(&x, t - s, "reverse step")?;
        }
        pred = Some(x0);
    }
    let pred = pred.ok_or_else(|| Error::InvalidState("empty timestep plan".into()))?;
    Image::from_tensor(&pred)
}

/// Restores one image with `icfg.nfe` restorer calls and returns the
/// last clean-image prediction.
pub fn run_inference<R: Restorer + ?Sized>(
    y: &Image,
    z: &Image,
    model: &R,
    sched: &Schedule,
    icfg: &InferenceConfig,
) -> Result<Image> {
    sample(y, z, model, sched, icfg, |_, _| Ok(()))
}

/// [`run_inference`] that also records the state before every call.
pub fn run_inference_traced<R: Restorer + ?Sized>(
    y: &Image,
    z: &Image,
    model: &R,
    sched: &Schedule,
    icfg: &InferenceConfig,
) -> Result<Trajectory> {
    let mut frames = Vec::new();
    let output = sample(y, z, model, sched, icfg, |t, x| {
        frames.push((t, Image::from_tensor(x)?));
        Ok(())
    })?;
    Ok(Trajectory { frames, output })
}

/// Runs [`run_inference`] on every `(y, z)` pair in parallel, preserving order.
pub fn batch_inference<R: Restorer + Sync + ?Sized>(
    pairs: &[(&Image, &Image)],
    model: &R,
    sched: &Schedule,
    icfg: &InferenceConfig,
) -> Result<Vec<Image>> {
    if pairs.is_empty() {
        return Err(Error::invalid("batch inference needs at least one pair"));
    }
    let shape = pairs[0].0.shape();
    if let Some(i) = pairs.iter().position(|(y, _)| y.shape() != shape) {
        return Err(Error::Item {
            index: i,
            source: Box::new(Error::invalid("image shape differs from the first item")),
        });
    }
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, (y, z))| {
            run_inference(y, z, model, sched, icfg).map_err(|e| Error::Item {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::bridge::ScheduleKind;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Oracle {
        x0: Tensor,
        calls: AtomicUsize,
    }

    impl Restorer for Oracle {
        fn predict(&self, _x: &Tensor, _ts: &[usize], _z: &Tensor) -> Result<Tensor> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.x0.clone())
        }
    }

    struct Broken;

    impl Restorer for Broken {
        fn predict(&self, x: &Tensor, _ts: &[usize], _z: &Tensor) -> Result<Tensor> {
            Ok(x.affine(0.0, f64::NAN)?)
        }
    }

    fn pattern(c: usize, seed: u32) -> Image {
        Image::new(c, 8, 8, (0..c * 64).map(|i| ((i as u32 * 37 + seed) % 101) as f32 / 100.0).collect()).unwrap()
    }

    fn sched() -> Schedule {
        Schedule::new(1000, ScheduleKind::Sine, None).unwrap()
    }

    #[test]
    fn oracle_recovers_x0_with_n_calls() {
        let (x0, y, z) = (pattern(3, 1), pattern(3, 7), pattern(2, 3));
        for nfe in [1, 2, 5, 10] {
            let oracle = Oracle {
                x0: x0.to_tensor(DType::F32, &Device::Cpu).unwrap(),
                calls: AtomicUsize::new(0),
            };
            for mode in [SamplerMode::Ode, SamplerMode::Sde] {
                let icfg = InferenceConfig { nfe, mode, seed: 4 };
                let out = run_inference(&y, &z, &oracle, &sched(), &icfg).unwrap();
                assert_eq!(out, x0);
            }
            assert_eq!(oracle.calls.load(Ordering::SeqCst), 2 * nfe);
        }
    }

    #[test]
    fn single_step_equals_one_restorer_call() {
        let net = Backbone::new(&BackboneConfig::tiny(3), 1000, DType::F32, &Device::Cpu, 3).unwrap();
        net.params().randomize_prefix("head", 0.1, 1).unwrap();
        let (y, z) = (pattern(3, 2), pattern(2, 5));
        let out = run_inference(&y, &z, &net, &sched(), &InferenceConfig::default()).unwrap();
        let direct = net
            .restore(
                &y.to_tensor(DType::F32, &Device::Cpu).unwrap(),
                1000,
                &z.to_tensor(DType::F32, &Device::Cpu).unwrap(),
            )
            .unwrap();
        assert_eq!(out, Image::from_tensor(&direct).unwrap());
    }

    #[test]
    fn trace_has_one_frame_per_call() {
        let oracle = Oracle {
            x0: pattern(3, 1).to_tensor(DType::F32, &Device::Cpu).unwrap(),
            calls: AtomicUsize::new(0),
        };
        let y = pattern(3, 9);
        let tr = run_inference_traced(&y, &pattern(2, 0), &oracle, &sched(), &InferenceConfig { nfe: 5, ..Default::default() })
            .unwrap();
        let ts: Vec<usize> = tr.frames.iter().map(|(t, _)| *t).collect();
        assert_eq!(ts, vec![1000, 800, 600, 400, 200]);
        assert_eq!(tr.frames[0].1, y);
    }

    #[test]
    fn rejects_bad_nfe_and_shapes() {
        let oracle = Oracle {
            x0: pattern(3, 1).to_tensor(DType::F32, &Device::Cpu).unwrap(),
            calls: AtomicUsize::new(0),
        };
        let icfg = InferenceConfig { nfe: 3, ..Default::default() };
        assert!(matches!(
            run_inference(&pattern(3, 0), &pattern(2, 0), &oracle, &sched(), &icfg),
            Err(Error::InvalidArgument(_))
        ));
        let z = Image::zeros(2, 4, 4);
        assert!(run_inference(&pattern(3, 0), &z, &oracle, &sched(), &InferenceConfig::default()).is_err());
    }

    #[test]
    fn non_finite_prediction_reports_timestep() {
        let r = run_inference(&pattern(3, 0), &pattern(2, 0), &Broken, &sched(), &InferenceConfig::default());
        assert!(matches!(r, Err(Error::Numerical { t: 1000, .. })));
    }

    #[test]
    fn batch_matches_single_calls() {
        let net = Backbone::new(&BackboneConfig::tiny(3), 1000, DType::F32, &Device::Cpu, 8).unwrap();
        let ys: Vec<Image> = (0..4).map(|i| pattern(3, i)).collect();
        let zs: Vec<Image> = (0..4).map(|i| pattern(2, 10 + i)).collect();
        let pairs: Vec<(&Image, &Image)> = ys.iter().zip(&zs).collect();
        let icfg = InferenceConfig { nfe: 2, ..Default::default() };
        let batch = batch_inference(&pairs, &net, &sched(), &icfg).unwrap();
        for (i, (y, z)) in pairs.iter().enumerate() {
            assert_eq!(batch[i], run_inference(y, z, &net, &sched(), &icfg).unwrap());
        }
        let err = batch_inference(&[(&ys[0], &Image::zeros(2, 4, 4))], &net, &sched(), &icfg).unwrap_err();
        assert!(matches!(err, Error::Item { index: 0, .. }));
        assert!(batch_inference(&[], &net, &sched(), &icfg).is_err());
    }
}
