//! Named, seeded parameter storage.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

/// All trainable tensors of a model, keyed by dotted path.
///
/// Iteration is in lexicographic name order, which fixes the layout of
/// checkpoints and optimizer state.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates and registers a parameter; names must be unique.
    pub(crate) fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidState(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| self.rng.random_range(-bound..bound))
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; the shape must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::invalid(format!(
                "parameter `{name}`: expected shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Zeros every parameter whose name starts with `prefix`; returns how many.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.vars.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            var.set(&var.zeros_like()?)?;
            n += 1;
        }
        Ok(n)
    }

    /// Fills every parameter under `prefix` with uniform values in
    /// `[-scale, scale]`; returns how many tensors were touched.
    pub fn randomize_prefix(&self, prefix: &str, scale: f64, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = 0;
        for (name, var) in self.vars.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            let v: Vec<f64> = (0..var.elem_count())
                .map(|_| rng.random_range(-scale..=scale))
                .collect();
            self.set_values(name, &v)?;
            n += 1;
        }
        Ok(n)
    }

    /// Flat copy of one parameter as `f64`.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        Ok(var
            .as_tensor()
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    /// Replaces one parameter from flat `f64` values.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let t = Tensor::from_slice(values, var.dims(), &self.device)?;
        self.assign(name, &t)
    }
}

/// Scoped helper that prefixes parameter names while building modules.
pub(crate) struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn root(store: &'a mut ParamStore) -> Self {
        Self {
            store,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.param(&full, shape, init)
    }
}
