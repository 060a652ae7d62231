//! Hand-written CPU kernels with explicit gradients for hot layers.

use std::ops::{AddAssign, Mul};

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

fn msg(s: impl Into<String>) -> candle_core::Error {
    candle_core::Error::Msg(s.into())
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| msg("depthwise3x3 needs contiguous inputs"))?;
    Ok(&v[a..b])
}

/// Rows `lo..hi` of the output that read input row `y + d - 1` in bounds.
fn span(d: usize, n: usize) -> (usize, usize) {
    (1usize.saturating_sub(d), (n + 1 - d).min(n))
}

fn forward<T>(x: &[T], w: &[T], (b, c, h, wd): (usize, usize, usize, usize)) -> Vec<T>
where
    T: Copy + Default + AddAssign + Mul<Output = T>,
{
    let plane = h * wd;
    let mut out = vec![T::default(); b * c * plane];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let src = &x[base..base + plane];
            let dst = &mut out[base..base + plane];
            for dy in 0..3 {
                let (y0, y1) = span(dy, h);
                for dx in 0..3 {
                    let k = w[ci * 9 + dy * 3 + dx];
                    let (x0, x1) = span(dx, wd);
                    for y in y0..y1 {
                        let sy = (y + dy - 1) * wd;
                        let row = &mut dst[y * wd + x0..y * wd + x1];
                        let srow = &src[sy + x0 + dx - 1..sy + x1 + dx - 1];
                        for (o, &s) in row.iter_mut().zip(srow) {
                            *o += k * s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward<T>(
    x: &[T],
    w: &[T],
    g: &[T],
    (b, c, h, wd): (usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>)
where
    T: Copy + Default + AddAssign + Mul<Output = T>,
{
    let plane = h * wd;
    let mut gx = vec![T::default(); x.len()];
    let mut gw = vec![T::default(); w.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let src = &x[base..base + plane];
            let gout = &g[base..base + plane];
            let gin = &mut gx[base..base + plane];
            for dy in 0..3 {
                let (y0, y1) = span(dy, h);
                for dx in 0..3 {
                    let k = w[ci * 9 + dy * 3 + dx];
                    let (x0, x1) = span(dx, wd);
                    let mut acc = T::default();
                    for y in y0..y1 {
                        let sy = (y + dy - 1) * wd;
                        let grow = &gout[y * wd + x0..y * wd + x1];
                        let lo = sy + x0 + dx - 1;
                        let hi = sy + x1 + dx - 1;
                        for ((gi, &s), &go) in gin[lo..hi].iter_mut().zip(&src[lo..hi]).zip(grow) {
                            *gi += k * go;
                            acc += go * s;
                        }
                    }
                    gw[ci * 9 + dy * 3 + dx] += acc;
                }
            }
        }
    }
    (gx, gw)
}

/// `x: B × C × H × W`, `w: C × 9` (row-major 3×3 taps), zero padding, no bias.
struct Depthwise3x3Op;

impl CustomOp2 for Depthwise3x3Op {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(forward(contiguous(x, l1)?, contiguous(w, l2)?, dims))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(forward(contiguous(x, l1)?, contiguous(w, l2)?, dims))
            }
            _ => return Err(msg("depthwise3x3 supports matching f32 or f64 inputs")),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims4()?;
        let dev = x.device();
        let (gx, gw) = match x.dtype() {
            DType::F32 => {
                let (gx, gw) = backward(
                    &x.flatten_all()?.to_vec1::<f32>()?,
                    &w.flatten_all()?.to_vec1::<f32>()?,
                    &grad.flatten_all()?.to_vec1::<f32>()?,
                    dims,
                );
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, w.shape(), dev)?)
            }
            DType::F64 => {
                let (gx, gw) = backward(
                    &x.flatten_all()?.to_vec1::<f64>()?,
                    &w.flatten_all()?.to_vec1::<f64>()?,
                    &grad.flatten_all()?.to_vec1::<f64>()?,
                    dims,
                );
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, w.shape(), dev)?)
            }
            other => return Err(msg(format!("depthwise3x3 backward: unsupported {other:?}"))),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Depthwise 3×3 convolution with zero padding.
pub(crate) fn depthwise3x3(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Depthwise3x3Op)
}

fn norm_forward<T: WithDType>(x: &[T], (b, c, p): (usize, usize, usize), eps: f64) -> (Vec<T>, Vec<f64>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![0f64; b * p];
    let mut mean = vec![0f64; p];
    let mut var = vec![0f64; p];
    for bi in 0..b {
        let xs = &x[bi * c * p..(bi + 1) * c * p];
        mean.iter_mut().for_each(|m| *m = 0.0);
        var.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..c {
            for (m, v) in mean.iter_mut().zip(&xs[ci * p..(ci + 1) * p]) {
                *m += v.to_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        for ci in 0..c {
            for ((s, v), m) in var.iter_mut().zip(&xs[ci * p..(ci + 1) * p]).zip(&mean) {
                let d = v.to_f64() - m;
                *s += d * d;
            }
        }
        let inv = &mut inv_std[bi * p..(bi + 1) * p];
        for (i, s) in inv.iter_mut().zip(&var) {
            *i = 1.0 / (s / c as f64 + eps).sqrt();
        }
        let os = &mut out[bi * c * p..(bi + 1) * c * p];
        for ci in 0..c {
            let range = ci * p..(ci + 1) * p;
            for (((o, v), m), i) in os[range.clone()].iter_mut().zip(&xs[range]).zip(&mean).zip(inv.iter()) {
                *o = T::from_f64((v.to_f64() - m) * i);
            }
        }
    }
    (out, inv_std)
}

/// `dx = inv_std (g - mean_c g - y mean_c(g y))` per pixel.
fn norm_backward<T: WithDType>(y: &[T], g: &[T], inv_std: &[f64], (b, c, p): (usize, usize, usize)) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    let mut mg = vec![0f64; p];
    let mut mgy = vec![0f64; p];
    for bi in 0..b {
        let off = bi * c * p;
        mg.iter_mut().for_each(|v| *v = 0.0);
        mgy.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..c {
            let r = off + ci * p..off + (ci + 1) * p;
            for (((a, bb), gv), yv) in mg.iter_mut().zip(mgy.iter_mut()).zip(&g[r.clone()]).zip(&y[r]) {
                let gv = gv.to_f64();
                *a += gv;
                *bb += gv * yv.to_f64();
            }
        }
        let inv = &inv_std[bi * p..(bi + 1) * p];
        for ci in 0..c {
            let r = off + ci * p..off + (ci + 1) * p;
            let (gs, ys) = (&g[r.clone()], &y[r.clone()]);
            for (k, o) in gx[r].iter_mut().enumerate() {
                let v = gs[k].to_f64() - mg[k] / c as f64 - ys[k].to_f64() * mgy[k] / c as f64;
                *o = T::from_f64(v * inv[k]);
            }
        }
    }
    gx
}

/// Standardizes `B × C × H × W` across channels at every pixel.
struct ChannelStandardize {
    eps: f64,
}

impl CustomOp1 for ChannelStandardize {
    fn name(&self) -> &'static str {
        "channel-standardize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let dims = (b, c, h * w);
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(norm_forward(contiguous(x, l)?, dims, self.eps).0),
            CpuStorage::F64(x) => CpuStorage::F64(norm_forward(contiguous(x, l)?, dims, self.eps).0),
            _ => return Err(msg("channel-standardize supports f32 or f64")),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = x.dims4()?;
        let dims = (b, c, h * w);
        let gx = match x.dtype() {
            DType::F32 => {
                let (_, inv) = norm_forward(&x.flatten_all()?.to_vec1::<f32>()?, dims, self.eps);
                let y = res.flatten_all()?.to_vec1::<f32>()?;
                let g = grad.flatten_all()?.to_vec1::<f32>()?;
                Tensor::from_vec(norm_backward(&y, &g, &inv, dims), x.shape(), x.device())?
            }
            DType::F64 => {
                let (_, inv) = norm_forward(&x.flatten_all()?.to_vec1::<f64>()?, dims, self.eps);
                let y = res.flatten_all()?.to_vec1::<f64>()?;
                let g = grad.flatten_all()?.to_vec1::<f64>()?;
                Tensor::from_vec(norm_backward(&y, &g, &inv, dims), x.shape(), x.device())?
            }
            other => return Err(msg(format!("channel-standardize backward: unsupported {other:?}"))),
        };
        Ok(Some(gx))
    }
}

/// `(x - mean_c x) / sqrt(var_c x + eps)` at every pixel.
pub(crate) fn channel_standardize(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(ChannelStandardize { eps })
}
