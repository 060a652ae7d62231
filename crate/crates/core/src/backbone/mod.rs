//! Two-branch restoration network.
//!
//! The optical branch is a U-Net of [`NafBlock`]s; the SAR branch is an
//! encoder of the same blocks. At every encoder level an [`SfBlock`] fuses
//! SAR features into the optical features, and the fused map feeds both the
//! next level and the decoder skip connection. A zero-initialized output
//! head plus a global residual from `x_t` makes a fresh network the
//! identity map.

mod config;
mod fusion;
mod kernels;
mod layers;
mod naf;
pub mod params;
mod time;

use candle_core::{DType, Device, Tensor};

pub use config::BackboneConfig;
pub use fusion::SfBlock;
pub use layers::{depth_to_space, simple_gate, softmax, space_to_depth};
pub use naf::NafBlock;
pub use params::{Init, ParamStore};
pub use time::{sinusoidal_embedding, TimeMlp};

use layers::{Downsample, Pointwise, Upsample};
use params::Scope;

use crate::error::{Error, Result};

/// Fused encoder features, finest level first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

struct EncoderLevel {
    opt_blocks: Vec<NafBlock>,
    sar_blocks: Vec<NafBlock>,
    fusion: SfBlock,
    opt_down: Option<Downsample>,
    sar_down: Option<Downsample>,
}

struct DecoderLevel {
    up: Option<Upsample>,
    blocks: Vec<NafBlock>,
}

/// The restorer `R(x_t, t, z)`.
pub struct Backbone {
    cfg: BackboneConfig,
    total_steps: usize,
    store: ParamStore,
    time: TimeMlp,
    opt_intro: Pointwise,
    sar_intro: Pointwise,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
    head: Pointwise,
}

impl Backbone {
    /// Builds a freshly initialized network for a bridge with `total_steps`
    /// timesteps. Parameter values are a pure function of `seed`.
    pub fn new(
        cfg: &BackboneConfig,
        total_steps: usize,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if total_steps == 0 {
            return Err(Error::invalid("backbone needs T >= 1"));
        }
        let mut store = ParamStore::new(dtype, device.clone(), seed);
        let mut root = Scope::root(&mut store);
        let td = cfg.time_embed_dim;
        let w0 = cfg.widths[0];
        let levels = cfg.levels();

        let time = TimeMlp::new(&mut root.sub("time"), td, total_steps)?;
        let opt_intro = Pointwise::new(&mut root.sub("opt_intro"), cfg.opt_channels, w0, true)?;
        let sar_intro = Pointwise::new(&mut root.sub("sar_intro"), cfg.sar_channels, w0, true)?;

        let mut encoder = Vec::with_capacity(levels);
        for i in 0..levels {
            let w = cfg.widths[i];
            let mut lvl = root.sub(format!("enc{i}"));
            let blocks = |branch: &str, lvl: &mut Scope| -> Result<Vec<NafBlock>> {
                (0..cfg.enc_blocks[i])
                    .map(|j| NafBlock::new(&mut lvl.sub(format!("{branch}.{j}")), w, td))
                    .collect()
            };
            let opt_blocks = blocks("opt", &mut lvl)?;
            let sar_blocks = blocks("sar", &mut lvl)?;
            let fusion = SfBlock::new(&mut lvl.sub("fusion"), w, cfg.fusion_heads[i])?;
            let (opt_down, sar_down) = if i + 1 < levels {
                let next = cfg.widths[i + 1];
                (
                    Some(Downsample::new(&mut lvl.sub("opt_down"), w, next)?),
                    Some(Downsample::new(&mut lvl.sub("sar_down"), w, next)?),
                )
            } else {
                (None, None)
            };
            encoder.push(EncoderLevel {
                opt_blocks,
                sar_blocks,
                fusion,
                opt_down,
                sar_down,
            });
        }

        let mut decoder = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let w = cfg.widths[i];
            let mut lvl = root.sub(format!("dec{i}"));
            let up = if i + 1 < levels {
                Some(Upsample::new(&mut lvl.sub("up"), cfg.widths[i + 1], w)?)
            } else {
                None
            };
            let blocks = (0..cfg.dec_blocks[i])
                .map(|j| NafBlock::new(&mut lvl.sub(format!("block.{j}")), w, td))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderLevel { up, blocks });
        }

        let head = Pointwise::with_init(&mut root.sub("head"), w0, cfg.opt_channels, true, Init::Zeros)?;

        Ok(Self {
            cfg: cfg.clone(),
            total_steps,
            store,
            time,
            opt_intro,
            sar_intro,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    fn check_inputs(&self, x_t: &Tensor, ts: &[usize], z: &Tensor) -> Result<()> {
        let (b, c, h, w) = x_t.dims4()?;
        if c != self.cfg.opt_channels {
            return Err(Error::invalid(format!(
                "optical input x_t has {c} channels, model expects {}",
                self.cfg.opt_channels
            )));
        }
        let (zb, zc, zh, zw) = z.dims4()?;
        if zc != self.cfg.sar_channels {
            return Err(Error::invalid(format!(
                "SAR input z has {zc} channels, model expects {}",
                self.cfg.sar_channels
            )));
        }
        if (zb, zh, zw) != (b, h, w) {
            return Err(Error::invalid(format!(
                "SAR input z shape {:?} not aligned with x_t shape {:?}",
                z.dims(),
                x_t.dims()
            )));
        }
        let m = self.cfg.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!(
                "spatial size {h}x{w} must be divisible by {m}"
            )));
        }
        if ts.len() != b {
            return Err(Error::invalid(format!(
                "{} timesteps for a batch of {b}",
                ts.len()
            )));
        }
        if let Some(&t) = ts.iter().find(|&&t| t > self.total_steps) {
            return Err(Error::invalid(format!(
                "timestep {t} outside [0, {}]",
                self.total_steps
            )));
        }
        Ok(())
    }

    fn encode_with(
        &self,
        x_t: &Tensor,
        temb: &Tensor,
        z: &Tensor,
    ) -> Result<FeaturePyramid> {
        let mut opt = self.opt_intro.forward(x_t)?;
        let mut sar = self.sar_intro.forward(z)?;
        let mut levels = Vec::with_capacity(self.encoder.len());
        for lvl in &self.encoder {
            for b in &lvl.opt_blocks {
                opt = b.forward(&opt, temb)?;
            }
            for b in &lvl.sar_blocks {
                sar = b.forward(&sar, temb)?;
            }
            let fused = lvl.fusion.forward(&opt, &sar)?;
            if let (Some(od), Some(sd)) = (&lvl.opt_down, &lvl.sar_down) {
                opt = od.forward(&fused)?;
                sar = sd.forward(&sar)?;
            }
            levels.push(fused);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Fused encoder features for a batch.
    pub fn encode(&self, x_t: &Tensor, ts: &[usize], z: &Tensor) -> Result<FeaturePyramid> {
        self.check_inputs(x_t, ts, z)?;
        let temb = self.time.forward(ts, self.dtype(), self.device())?;
        self.encode_with(x_t, &temb, z)
    }

    /// Predicts the clean image for a batch: `x_t`, `z` are `B × C × H × W`,
    /// `ts` holds one timestep per batch entry.
    pub fn forward(&self, x_t: &Tensor, ts: &[usize], z: &Tensor) -> Result<Tensor> {
        self.check_inputs(x_t, ts, z)?;
        let x_t = x_t.to_dtype(self.dtype())?;
        let z = z.to_dtype(self.dtype())?;
        let temb = self.time.forward(ts, self.dtype(), self.device())?;
        let pyramid = self.encode_with(&x_t, &temb, &z)?;

        let mut h: Option<Tensor> = None;
        for (lvl, skip) in self.decoder.iter().zip(pyramid.levels.iter().rev()) {
            let mut cur = match (&lvl.up, h.take()) {
                (Some(up), Some(prev)) => (up.forward(&prev)? + skip)?,
                _ => skip.clone(),
            };
            for b in &lvl.blocks {
                cur = b.forward(&cur, &temb)?;
            }
            h = Some(cur);
        }
        let h = h.ok_or_else(|| Error::InvalidState("empty decoder".into()))?;
        Ok((x_t + self.head.forward(&h)?)?)
    }

    /// Single-image convenience wrapper around [`Backbone::forward`].
    pub fn restore(&self, x_t: &Tensor, t: usize, z: &Tensor) -> Result<Tensor> {
        self.forward(x_t, &[t], z)
    }
}

/// Analytic parameter count for a configuration, without allocating weights.
pub fn count_params(cfg: &BackboneConfig) -> usize {
    let td = cfg.time_embed_dim;
    let naf = |c: usize| {
        // norms 4c, conv1 2c²+2c, dw 18c+2c, sca c²+c, conv3 c²+c,
        // conv4 2c²+2c, conv5 c²+c, beta/gamma 2c, time td·4c+4c
        7 * c * c + 33 * c + 4 * c * td + 4 * c
    };
    let sf = |c: usize, heads: usize| {
        let d = c / heads;
        4 * c + 3 * (c * c + c) + heads * (4 * d * d + 3 * d) + c * c + c
    };
    let mut n = 2 * (td * td + td);
    let w0 = cfg.widths[0];
    n += cfg.opt_channels * w0 + w0 + cfg.sar_channels * w0 + w0;
    let levels = cfg.levels();
    for i in 0..levels {
        let w = cfg.widths[i];
        n += 2 * cfg.enc_blocks[i] * naf(w);
        n += sf(w, cfg.fusion_heads[i]);
        n += cfg.dec_blocks[i] * naf(w);
        if i + 1 < levels {
            let next = cfg.widths[i + 1];
            n += 2 * (4 * w * next + next);
            n += next * 4 * w;
        }
    }
    n += w0 * cfg.opt_channels + cfg.opt_channels;
    n
}
