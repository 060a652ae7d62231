//! Parameter counts of the presets and a forward pass through a fresh
//! desk network, which starts out as the identity.
//!
//! cargo run --example backbone_summary

use candle_core::{DType, Device, Tensor};
use cloudbridge::backbone::{count_params, Backbone, BackboneConfig};

fn main() -> cloudbridge::Result<()> {
    for (name, cfg) in [
        ("full_scale", BackboneConfig::full_scale()),
        ("desk", BackboneConfig::desk()),
        ("tiny", BackboneConfig::tiny(13)),
    ] {
        println!(
            "{name:<10} widths {:?} enc {:?} dec {:?} heads {:?}: {} parameters, input side multiple of {}",
            cfg.widths,
            cfg.enc_blocks,
            cfg.dec_blocks,
            cfg.fusion_heads,
            count_params(&cfg),
            cfg.size_multiple()
        );
    }

    let dev = Device::Cpu;
    let model = Backbone::new(&BackboneConfig::desk(), 1000, DType::F32, &dev, 0)?;
    let x_t = Tensor::rand(0f32, 1.0, (2, 13, 64, 64), &dev)?;
    let z = Tensor::rand(0f32, 1.0, (2, 2, 64, 64), &dev)?;
    let start = std::time::Instant::now();
    let out = model.forward(&x_t, &[250, 900], &z)?;
    let diff = (&out - &x_t)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!(
        "\ndesk forward {:?} -> {:?} in {:.0?}; max |out - x_t| at init = {diff}",
        x_t.dims(),
        out.dims(),
        start.elapsed()
    );
    let biggest = model
        .params()
        .vars()
        .max_by_key(|(_, v)| v.elem_count())
        .map(|(n, v)| format!("{n} {:?}", v.dims()))
        .unwrap_or_default();
    println!("{} tensors, largest {biggest}", model.params().len());
    Ok(())
}
