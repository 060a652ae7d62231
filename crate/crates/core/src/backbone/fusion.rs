use candle_core::Tensor;

use super::layers::{softmax, ChannelNorm, Pointwise};
use super::params::{Init, Scope};
use crate::error::{Error, Result};

/// Cross-modal channel attention: optical features query SAR keys and values.
///
/// Per head with `d = c / heads` channels, scores `S = Q Kᵀ / sqrt(d)` form a
/// `d × d` matrix (rows: optical query channels, columns: SAR key channels).
/// Each column is softmax-normalized and the head output is
/// `Sᵀ V + opt`, followed by a residual per-pixel MLP
/// (`d → 2d → d`, GELU). Heads are concatenated and projected by a 1×1 conv.
#[derive(Debug, Clone)]
pub struct SfBlock {
    channels: usize,
    heads: usize,
    norm_opt: ChannelNorm,
    norm_sar: ChannelNorm,
    query: Pointwise,
    key: Pointwise,
    value: Pointwise,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
    proj: Pointwise,
}

impl SfBlock {
    pub(crate) fn new(scope: &mut Scope, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "{heads} heads do not divide {channels} channels"
            )));
        }
        let d = channels / heads;
        let c = channels;
        Ok(Self {
            channels,
            heads,
            norm_opt: ChannelNorm::new(&mut scope.sub("norm_opt"), c)?,
            norm_sar: ChannelNorm::new(&mut scope.sub("norm_sar"), c)?,
            query: Pointwise::new(&mut scope.sub("query"), c, c, true)?,
            key: Pointwise::new(&mut scope.sub("key"), c, c, true)?,
            value: Pointwise::new(&mut scope.sub("value"), c, c, true)?,
            mlp_w1: scope.param("mlp.fc1.weight", &[heads, 2 * d, d], Init::FanIn(d))?,
            mlp_b1: scope.param("mlp.fc1.bias", &[heads, 2 * d, 1], Init::FanIn(d))?,
            mlp_w2: scope.param("mlp.fc2.weight", &[heads, d, 2 * d], Init::FanIn(2 * d))?,
            mlp_b2: scope.param("mlp.fc2.bias", &[heads, d, 1], Init::FanIn(2 * d))?,
            proj: Pointwise::new(&mut scope.sub("proj"), c, c, true)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn check(&self, opt: &Tensor, sar: &Tensor) -> Result<()> {
        if opt.dims() != sar.dims() {
            return Err(Error::invalid(format!(
                "fusion inputs differ in shape: {:?} vs {:?}",
                opt.dims(),
                sar.dims()
            )));
        }
        if opt.dim(1)? != self.channels {
            return Err(Error::invalid(format!(
                "fusion block of width {} got {} channels",
                self.channels,
                opt.dim(1)?
            )));
        }
        Ok(())
    }

    /// Column-normalized attention matrices, `B × heads × d × d`.
    pub fn attention_weights(&self, opt: &Tensor, sar: &Tensor) -> Result<Tensor> {
        self.check(opt, sar)?;
        let (q, k, _) = self.project(opt, sar)?;
        self.weights(&q, &k)
    }

    fn project(&self, opt: &Tensor, sar: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, c, h, w) = opt.dims4()?;
        let d = c / self.heads;
        let split = |t: Tensor| t.reshape((b, self.heads, d, h * w));
        let on = self.norm_opt.forward(opt)?;
        let sn = self.norm_sar.forward(sar)?;
        Ok((
            split(self.query.forward(&on)?)?,
            split(self.key.forward(&sn)?)?,
            split(self.value.forward(&sn)?)?,
        ))
    }

    fn weights(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let d = q.dim(2)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
        softmax(&scores, 2)
    }

    pub fn forward(&self, opt: &Tensor, sar: &Tensor) -> Result<Tensor> {
        self.check(opt, sar)?;
        let (b, c, h, w) = opt.dims4()?;
        let d = c / self.heads;
        let (q, k, v) = self.project(opt, sar)?;
        let attn = self.weights(&q, &k)?;
        let attended = attn.t()?.contiguous()?.matmul(&v)?;
        let z_sum = (attended + opt.reshape((b, self.heads, d, h * w))?)?;

        let hidden = self
            .mlp_w1
            .broadcast_matmul(&z_sum)?
            .broadcast_add(&self.mlp_b1)?
            .gelu_erf()?;
        let mlp = self
            .mlp_w2
            .broadcast_matmul(&hidden)?
            .broadcast_add(&self.mlp_b2)?;
        let z_out = (z_sum + mlp)?;
        self.proj.forward(&z_out.reshape((b, c, h, w))?)
    }
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
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn output_matches_optical_shape() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 1);
        let sf = SfBlock::new(&mut Scope::root(&mut store), 8, 2).unwrap();
        let opt = random(&[2, 8, 6, 4], 1);
        let sar = random(&[2, 8, 6, 4], 2);
        assert_eq!(sf.forward(&opt, &sar).unwrap().dims(), opt.dims());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 1);
        assert!(SfBlock::new(&mut Scope::root(&mut store), 8, 3).is_err());
        let sf = SfBlock::new(&mut Scope::root(&mut store), 8, 2).unwrap();
        let opt = random(&[1, 8, 4, 4], 1);
        assert!(sf.forward(&opt, &random(&[1, 8, 2, 4], 2)).is_err());
        assert!(sf.forward(&random(&[1, 4, 4, 4], 3), &random(&[1, 4, 4, 4], 4)).is_err());
    }

    #[test]
    fn attention_columns_sum_to_one() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 7);
        let sf = SfBlock::new(&mut Scope::root(&mut store), 4, 1).unwrap();
        let opt = random(&[1, 4, 8, 8], 10);
        let sar = random(&[1, 4, 8, 8], 11);
        let a = sf.attention_weights(&opt, &sar).unwrap().get(0).unwrap().get(0).unwrap();
        let m = a.to_vec2::<f64>().unwrap();
        for col in 0..4 {
            let sum: f64 = (0..4).map(|row| m[row][col]).sum();
            assert!((sum - 1.0).abs() < 1e-6, "column {col} sums to {sum}");
        }
    }

    #[test]
    fn zero_values_and_mlp_reduce_to_projection() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 3);
        let sf = SfBlock::new(&mut Scope::root(&mut store), 4, 2).unwrap();
        store.zero_prefix("value").unwrap();
        store.zero_prefix("mlp").unwrap();
        let opt = random(&[1, 4, 4, 4], 4);
        let out = sf.forward(&opt, &random(&[1, 4, 4, 4], 5)).unwrap();
        let expected = sf.proj.forward(&opt).unwrap();
        for (a, b) in flat(&out).iter().zip(flat(&expected)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
