use candle_core::{DType, Device, Tensor};

use super::layers::Linear;
use super::params::Scope;
use crate::error::{Error, Result};

/// Raw sinusoidal code of timestep `t`: `dim/2` sines followed by `dim/2`
/// cosines at geometrically spaced frequencies `10000^(-k / (dim/2))`.
pub fn sinusoidal_embedding(t: usize, dim: usize, total: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "time embedding dimension must be even, got {dim}"
        )));
    }
    if t > total {
        return Err(Error::invalid(format!("timestep {t} outside [0, {total}]")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let t = t as f64;
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(out)
}

/// Sinusoidal code followed by `Linear → GELU → Linear`.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    dim: usize,
    total: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeMlp {
    pub(crate) fn new(scope: &mut Scope, dim: usize, total: usize) -> Result<Self> {
        Ok(Self {
            dim,
            total,
            fc1: Linear::new(&mut scope.sub("fc1"), dim, dim)?,
            fc2: Linear::new(&mut scope.sub("fc2"), dim, dim)?,
        })
    }

    /// `B × dim` embedding for a batch of timesteps.
    pub fn forward(&self, ts: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut raw = Vec::with_capacity(ts.len() * self.dim);
        for &t in ts {
            raw.extend(sinusoidal_embedding(t, self.dim, self.total)?);
        }
        let x = Tensor::from_vec(raw, (ts.len(), self.dim), device)?.to_dtype(dtype)?;
        let h = self.fc1.forward(&x)?.gelu_erf()?;
        self.fc2.forward(&h)
    }
}
