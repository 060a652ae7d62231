//! Checkpoint files: a `key=value` text header with a tensor index, the
//! line `end`, then every tensor as raw little-endian bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::backbone::{Backbone, BackboneConfig};
use crate::bridge::{Schedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::rawio::{self, format_shape, parse_num, parse_shape};
use crate::training::{Adam, LossRecord, TrainState};

pub const CHECKPOINT_MAGIC: &str = "cloudbridge-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const END: &[u8] = b"\nend\n";

/// SHA-256 over the architecture and schedule; identifies a model family.
pub fn config_hash(cfg: &BackboneConfig, sched: &Schedule) -> String {
    let beta = sched.beta_max().map_or("none".to_string(), |b| format!("{b:e}"));
    let text = format!(
        "{};steps={};kind={};beta_max={beta}",
        cfg.canonical(),
        sched.steps(),
        sched.kind().name()
    );
    rawio::sha256_hex(text.as_bytes())
}

/// Training progress recorded next to the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Progress {
    pub step: usize,
    pub epoch: usize,
    /// Seed the run was started with.
    pub seed: u64,
    pub best_val_psnr: Option<f64>,
}

/// A model, its bridge schedule and (optionally) optimizer state.
pub struct Checkpoint {
    pub model: Backbone,
    pub schedule: Schedule,
    pub progress: Progress,
    pub optimizer: Option<Adam>,
    pub loss_history: Vec<LossRecord>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(self.model.config(), &self.schedule)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.model,
            &self.schedule,
            &self.progress,
            self.optimizer.as_ref(),
            &self.loss_history,
        )
    }

    /// Resumable training state (fresh optimizer if none was stored).
    pub fn into_train_state(self, lr: f64) -> TrainState {
        TrainState {
            model: self.model,
            optimizer: self.optimizer.unwrap_or_else(|| Adam::new(lr)),
            step: self.progress.step,
            epoch: self.progress.epoch,
            loss_history: self.loss_history,
            best_val_psnr: self.progress.best_val_psnr,
        }
    }
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::invalid(format!("cannot store {other:?} tensors"))),
    }
}

fn parse_dtype(path: &Path, s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::format(path, format!("unknown dtype `{other}`"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::invalid(format!("cannot store {other:?} tensors"))),
    })
}

fn bytes_tensor(bytes: &[u8], dtype: DType, shape: &[usize]) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        _ => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
    };
    Ok(t)
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| format!("{:016x}", x.to_bits()))
}

/// Writes a checkpoint; floats in the header are stored as raw bits.
pub fn save_checkpoint(
    path: &Path,
    model: &Backbone,
    sched: &Schedule,
    progress: &Progress,
    optimizer: Option<&Adam>,
    history: &[LossRecord],
) -> Result<()> {
    let cfg = model.config();
    let mut h = String::new();
    let _ = writeln!(h, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(h, "format_version={FORMAT_VERSION}");
    let _ = writeln!(h, "config_hash={}", config_hash(cfg, sched));
    let _ = writeln!(h, "backbone.opt_channels={}", cfg.opt_channels);
    let _ = writeln!(h, "backbone.sar_channels={}", cfg.sar_channels);
    let _ = writeln!(h, "backbone.widths={}", list(&cfg.widths));
    let _ = writeln!(h, "backbone.enc_blocks={}", list(&cfg.enc_blocks));
    let _ = writeln!(h, "backbone.dec_blocks={}", list(&cfg.dec_blocks));
    let _ = writeln!(h, "backbone.fusion_heads={}", list(&cfg.fusion_heads));
    let _ = writeln!(h, "backbone.time_embed_dim={}", cfg.time_embed_dim);
    let _ = writeln!(h, "schedule.steps={}", sched.steps());
    let _ = writeln!(h, "schedule.kind={}", sched.kind().name());
    let _ = writeln!(h, "schedule.beta_max={}", opt_f64(sched.beta_max()));
    let _ = writeln!(h, "dtype={}", dtype_name(model.dtype())?);
    let _ = writeln!(h, "step={}", progress.step);
    let _ = writeln!(h, "epoch={}", progress.epoch);
    let _ = writeln!(h, "seed={}", progress.seed);
    let _ = writeln!(h, "best_val_psnr={}", opt_f64(progress.best_val_psnr));

    let mut entries: Vec<(String, Tensor)> = model
        .params()
        .vars()
        .map(|(n, v)| (format!("param/{n}"), v.as_tensor().clone()))
        .collect();
    match optimizer {
        Some(adam) => {
            let _ = writeln!(
                h,
                "adam={},{},{},{},{}",
                opt_f64(Some(adam.lr)),
                opt_f64(Some(adam.beta1)),
                opt_f64(Some(adam.beta2)),
                opt_f64(Some(adam.eps)),
                adam.t
            );
            for (n, (m, v)) in &adam.moments {
                entries.push((format!("adam_m/{n}"), m.clone()));
                entries.push((format!("adam_v/{n}"), v.clone()));
            }
        }
        None => {
            let _ = writeln!(h, "adam=none");
        }
    }
    for r in history {
        let _ = writeln!(h, "loss\t{}\t{}\t{}", r.step, list(&r.ts), opt_f64(Some(r.loss)));
    }
    let mut blob = Vec::new();
    for (name, t) in &entries {
        let bytes = tensor_bytes(t)?;
        let _ = writeln!(
            h,
            "tensor\t{name}\t{}\t{}\t{}\t{}",
            format_shape(t.dims()),
            dtype_name(t.dtype())?,
            blob.len(),
            bytes.len()
        );
        blob.extend_from_slice(&bytes);
    }
    h.push_str("end\n");
    let mut out = h.into_bytes();
    out.extend_from_slice(&blob);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Index {
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
    len: usize,
}

fn f64_bits(path: &Path, key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        return Ok(None);
    }
    u64::from_str_radix(v, 16)
        .map(|b| Some(f64::from_bits(b)))
        .map_err(|_| Error::format(path, format!("bad float bits `{v}` for `{key}`")))
}

fn usize_list(path: &Path, key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(path, key, x)).collect()
}

/// Reads and verifies a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format(path, "missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..split + 1])
        .map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let blob = &bytes[split + END.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let mut kv = BTreeMap::new();
    let mut index: Vec<(String, Index)> = Vec::new();
    let mut history = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        match cols[0] {
            "tensor" if cols.len() == 6 => index.push((
                cols[1].to_string(),
                Index {
                    shape: parse_shape(path, cols[2])?,
                    dtype: parse_dtype(path, cols[3])?,
                    offset: parse_num(path, "offset", cols[4])?,
                    len: parse_num(path, "len", cols[5])?,
                },
            )),
            "loss" if cols.len() == 4 => history.push(LossRecord {
                step: parse_num(path, "loss step", cols[1])?,
                ts: usize_list(path, "loss ts", cols[2])?,
                loss: f64_bits(path, "loss", cols[3])?
                    .ok_or_else(|| Error::format(path, "loss value missing"))?,
            }),
            _ => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::format(path, format!("bad header line `{line}`")))?;
                kv.insert(k.to_string(), v.to_string());
            }
        }
    }
    let get = |k: &str| -> Result<&str> {
        kv.get(k)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::format(path, format!("missing header key `{k}`")))
    };
    let version: u32 = parse_num(path, "format_version", get("format_version")?)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let cfg = BackboneConfig {
        opt_channels: parse_num(path, "opt_channels", get("backbone.opt_channels")?)?,
        sar_channels: parse_num(path, "sar_channels", get("backbone.sar_channels")?)?,
        widths: usize_list(path, "widths", get("backbone.widths")?)?,
        enc_blocks: usize_list(path, "enc_blocks", get("backbone.enc_blocks")?)?,
        dec_blocks: usize_list(path, "dec_blocks", get("backbone.dec_blocks")?)?,
        fusion_heads: usize_list(path, "fusion_heads", get("backbone.fusion_heads")?)?,
        time_embed_dim: parse_num(path, "time_embed_dim", get("backbone.time_embed_dim")?)?,
    };
    cfg.validate()
        .map_err(|e| Error::format(path, format!("invalid architecture: {e}")))?;
    let sched = Schedule::new(
        parse_num(path, "schedule.steps", get("schedule.steps")?)?,
        ScheduleKind::parse(get("schedule.kind")?)?,
        f64_bits(path, "schedule.beta_max", get("schedule.beta_max")?)?,
    )?;
    let stored = get("config_hash")?;
    let actual = config_hash(&cfg, &sched);
    if stored != actual {
        return Err(Error::format(
            path,
            format!("config hash mismatch: header says {stored}, contents give {actual}"),
        ));
    }
    let dtype = parse_dtype(path, get("dtype")?)?;
    let progress = Progress {
        step: parse_num(path, "step", get("step")?)?,
        epoch: parse_num(path, "epoch", get("epoch")?)?,
        seed: parse_num(path, "seed", get("seed")?)?,
        best_val_psnr: f64_bits(path, "best_val_psnr", get("best_val_psnr")?)?,
    };

    let model = Backbone::new(&cfg, sched.steps(), dtype, &Device::Cpu, progress.seed)?;
    let mut tensors = BTreeMap::new();
    for (name, ix) in index {
        let end = ix.offset.checked_add(ix.len).filter(|&e| e <= blob.len());
        let width = if ix.dtype == DType::F32 { 4 } else { 8 };
        if end.is_none() || ix.len != ix.shape.iter().product::<usize>() * width {
            return Err(Error::format(path, format!("tensor `{name}` has an inconsistent index entry")));
        }
        let t = bytes_tensor(&blob[ix.offset..ix.offset + ix.len], ix.dtype, &ix.shape)?;
        tensors.insert(name, t);
    }
    let names: Vec<String> = model.params().vars().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let t = tensors
            .remove(&format!("param/{name}"))
            .ok_or_else(|| Error::format(path, format!("missing parameter `{name}`")))?;
        model
            .params()
            .assign(name, &t)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    let optimizer = match get("adam")? {
        "none" => None,
        v => {
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::format(path, "bad `adam` header"));
            }
            let f = |i: usize| -> Result<f64> {
                f64_bits(path, "adam", parts[i])?.ok_or_else(|| Error::format(path, "bad `adam` header"))
            };
            let mut adam = Adam::new(f(0)?);
            adam.beta1 = f(1)?;
            adam.beta2 = f(2)?;
            adam.eps = f(3)?;
            adam.t = parse_num(path, "adam.t", parts[4])?;
            for name in &names {
                let m = tensors.remove(&format!("adam_m/{name}"));
                let v = tensors.remove(&format!("adam_v/{name}"));
                if let (Some(m), Some(v)) = (m, v) {
                    adam.moments.insert(name.clone(), (m, v));
                }
            }
            Some(adam)
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint {
        model,
        schedule: sched,
        progress,
        optimizer,
        loss_history: history,
    })
}
