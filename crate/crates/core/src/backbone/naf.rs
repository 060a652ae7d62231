use candle_core::Tensor;

use super::layers::{global_avg_pool, simple_gate, ChannelNorm, Depthwise3x3, Linear, Pointwise};
use super::params::{Init, Scope};
use crate::error::{Error, Result};

/// Time-conditioned nonlinear-activation-free block.
///
/// ```text
/// h = LN(x) * (1 + s1) + b1
/// y = x + beta  * conv3(SCA(SG(dw(conv1(h)))))
/// h = LN(y) * (1 + s2) + b2
/// out = y + gamma * conv5(SG(conv4(h)))
/// ```
///
/// `(s1, b1, s2, b2)` come from a linear map of the time embedding.
#[derive(Debug, Clone)]
pub struct NafBlock {
    channels: usize,
    norm1: ChannelNorm,
    conv1: Pointwise,
    dwconv: Depthwise3x3,
    sca: Pointwise,
    conv3: Pointwise,
    norm2: ChannelNorm,
    conv4: Pointwise,
    conv5: Pointwise,
    beta: Tensor,
    gamma: Tensor,
    time: Linear,
}

impl NafBlock {
    pub(crate) fn new(scope: &mut Scope, channels: usize, time_dim: usize) -> Result<Self> {
        let c = channels;
        Ok(Self {
            channels,
            norm1: ChannelNorm::new(&mut scope.sub("norm1"), c)?,
            conv1: Pointwise::new(&mut scope.sub("conv1"), c, 2 * c, true)?,
            dwconv: Depthwise3x3::new(&mut scope.sub("dwconv"), 2 * c)?,
            sca: Pointwise::new(&mut scope.sub("sca"), c, c, true)?,
            conv3: Pointwise::new(&mut scope.sub("conv3"), c, c, true)?,
            norm2: ChannelNorm::new(&mut scope.sub("norm2"), c)?,
            conv4: Pointwise::new(&mut scope.sub("conv4"), c, 2 * c, true)?,
            conv5: Pointwise::new(&mut scope.sub("conv5"), c, c, true)?,
            beta: scope.param("beta", &[1, c, 1, 1], Init::Zeros)?,
            gamma: scope.param("gamma", &[1, c, 1, 1], Init::Zeros)?,
            time: Linear::new(&mut scope.sub("time"), time_dim, 4 * c)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `x`: `B × C × H × W`; `temb`: `B × time_dim`.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::invalid(format!(
                "NAF block of width {} got {c} channels",
                self.channels
            )));
        }
        let mods = self.time.forward(temb)?.reshape((b, 4 * c, 1, 1))?;
        let chunk = |i: usize| mods.narrow(1, i * c, c);
        let (scale1, shift1, scale2, shift2) = (chunk(0)?, chunk(1)?, chunk(2)?, chunk(3)?);

        let h = modulate(&self.norm1.forward(x)?, &scale1, &shift1)?;
        let h = self.conv1.forward(&h)?;
        let h = self.dwconv.forward(&h)?;
        let h = simple_gate(&h)?;
        let att = self.sca.forward(&global_avg_pool(&h)?)?;
        let h = h.broadcast_mul(&att)?;
        let h = self.conv3.forward(&h)?;
        let y = (x + h.broadcast_mul(&self.beta)?)?;

        let h = modulate(&self.norm2.forward(&y)?, &scale2, &shift2)?;
        let h = self.conv4.forward(&h)?;
        let h = simple_gate(&h)?;
        let h = self.conv5.forward(&h)?;
        Ok((y + h.broadcast_mul(&self.gamma)?)?)
    }
}

fn modulate(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::params::ParamStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn block(seed: u64) -> (ParamStore, NafBlock) {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, seed);
        let b = NafBlock::new(&mut Scope::root(&mut store), 4, 6).unwrap();
        // residual scales start at zero; open them so every path contributes
        store.set_values("beta", &[0.7, -0.4, 1.1, 0.5]).unwrap();
        store.set_values("gamma", &[0.9, 0.3, -0.6, 1.2]).unwrap();
        (store, b)
    }

    #[test]
    fn preserves_shape() {
        let (_, b) = block(1);
        let x = random(&[2, 4, 6, 4], 2);
        let temb = random(&[2, 6], 3);
        assert_eq!(b.forward(&x, &temb).unwrap().dims(), x.dims());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (_, b) = block(1);
        let x = random(&[1, 6, 4, 4], 2);
        assert!(matches!(
            b.forward(&x, &random(&[1, 6], 3)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zeroed_convolutions_pass_input_through() {
        let (store, b) = block(5);
        for p in ["conv1", "conv3", "conv4", "conv5", "dwconv", "sca"] {
            store.zero_prefix(p).unwrap();
        }
        let x = random(&[1, 4, 4, 4], 8);
        let y = b.forward(&x, &random(&[1, 6], 9)).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (_, b) = block(21);
        let x = candle_core::Var::from_tensor(&random(&[1, 4, 4, 4], 22)).unwrap();
        let temb = random(&[1, 6], 23);
        let weights = random(&[1, 4, 4, 4], 24);
        let loss = |x: &Tensor| -> Tensor {
            (b.forward(x, &temb).unwrap() * &weights)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        let grads = loss(x.as_tensor()).backward().unwrap();
        let g = grads
            .get(x.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let base = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-5;
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, (1, 4, 4, 4), &Device::Cpu).unwrap();
                loss(&t).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-3, "element {i}: autograd {} vs fd {fd}", g[i]);
        }
    }
}
