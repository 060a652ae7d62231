//! Convolution-free building blocks. Layers are compositions of matmul,
//! reshape, narrow and elementwise tensor ops, except the depthwise conv
//! which has its own kernel.

use candle_core::{Tensor, D};

use super::kernels;
use super::params::{Init, Scope};
use crate::error::{Error, Result};

/// 1×1 convolution over `B × C × H × W` feature maps.
#[derive(Debug, Clone)]
pub struct Pointwise {
    weight: Tensor,
    bias: Option<Tensor>,
    cin: usize,
    cout: usize,
}

impl Pointwise {
    pub(crate) fn new(scope: &mut Scope, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Self::with_init(scope, cin, cout, bias, Init::FanIn(cin))
    }

    pub(crate) fn with_init(
        scope: &mut Scope,
        cin: usize,
        cout: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = scope.param("weight", &[cout, cin], init)?;
        let bias = if bias {
            let b_init = match init {
                Init::FanIn(_) => Init::FanIn(cin),
                other => other,
            };
            Some(scope.param("bias", &[cout], b_init)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.cin {
            return Err(Error::invalid(format!(
                "pointwise conv expects {} channels, got {c}",
                self.cin
            )));
        }
        let flat = x.reshape((b, c, h * w))?;
        let mut y = self.weight.broadcast_matmul(&flat)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(&bias.reshape((1, self.cout, 1))?)?;
        }
        Ok(y.reshape((b, self.cout, h, w))?)
    }
}

/// Fully connected layer over `B × F` vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub(crate) fn new(scope: &mut Scope, fin: usize, fout: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[fout, fin], Init::FanIn(fin))?,
            bias: scope.param("bias", &[fout], Init::FanIn(fin))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// 3×3 depthwise convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Depthwise3x3 {
    weight: Tensor,
    bias: Tensor,
    channels: usize,
}

impl Depthwise3x3 {
    pub(crate) fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[channels, 9], Init::FanIn(9))?,
            bias: scope.param("bias", &[channels], Init::FanIn(9))?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.channels {
            return Err(Error::invalid(format!(
                "depthwise conv expects {} channels, got {c}",
                self.channels
            )));
        }
        let y = kernels::depthwise3x3(x, &self.weight)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalization across channels at every pixel, with per-channel affine.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl ChannelNorm {
    pub(crate) fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[channels], Init::Ones)?,
            bias: scope.param("bias", &[channels], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let normed = kernels::channel_standardize(x, self.eps)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Splits channels in half and multiplies the halves elementwise.
pub fn simple_gate(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if c % 2 != 0 {
        return Err(Error::invalid(format!(
            "simple gate needs an even channel count, got {c}"
        )));
    }
    let half = c / 2;
    Ok((x.narrow(1, 0, half)? * x.narrow(1, half, half)?)?)
}

/// Softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(dim)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

/// `B × C × H × W → B × 4C × H/2 × W/2`; channel `4c + 2i + j` holds pixel
/// offset `(i, j)` of input channel `c`.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "cannot downsample odd spatial size {h}x{w}"
        )));
    }
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?
        .reshape((b, c * 4, h / 2, w / 2))?)
}

/// Inverse of [`space_to_depth`] (pixel shuffle with factor 2).
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::invalid(format!(
            "pixel shuffle needs channels divisible by 4, got {c4}"
        )));
    }
    let c = c4 / 4;
    Ok(x.reshape((b, c, 2, 2, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, c, h * 2, w * 2))?)
}

/// Strided 2×2 convolution halving resolution: space-to-depth, then 1×1 conv.
#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Pointwise,
}

impl Downsample {
    pub(crate) fn new(scope: &mut Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Pointwise::new(&mut scope.sub("conv"), cin * 4, cout, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&space_to_depth(x)?)
    }
}

/// 1×1 conv to `4 · cout` channels followed by pixel shuffle.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Pointwise,
}

impl Upsample {
    pub(crate) fn new(scope: &mut Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Pointwise::new(&mut scope.sub("conv"), cin, cout * 4, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depth_to_space(&self.conv.forward(x)?)
    }
}

/// Mean over the spatial dimensions, keeping them as size-1 axes.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
}
