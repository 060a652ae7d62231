//! Scores the cloudy inputs of a synthetic dataset against their clean
//! references and prints the cloud-cover stratified report. This is the
//! baseline every restorer has to beat.
//!
//! cargo run --release --example evaluate_metrics -- [scenes]

use cloudbridge::data::DatasetSpec;
use cloudbridge::metrics::{psnr, sam, ssim, stratified_report, ImageMetrics};

fn main() -> cloudbridge::Result<()> {
    let count: usize = std::env::args().nth(1).map_or(60, |a| a.parse().expect("scene count"));
    let spec = DatasetSpec { count, split_ratios: (0.0, 0.0, 1.0), ..Default::default() };
    let scenes = spec.generate()?.test;

    let first = &scenes[0];
    println!(
        "{}: PSNR {:.2} dB, SSIM {:.4}, SAM {:?} deg",
        first.scene_id,
        psnr(&first.y, &first.x0, 1.0)?,
        ssim(&first.y, &first.x0)?,
        sam(&first.y, &first.x0)?
    );

    let rows = scenes
        .iter()
        .map(|s| ImageMetrics::compute(&s.scene_id, &s.y, &s.x0, s.cloud_fraction as f64))
        .collect::<cloudbridge::Result<Vec<_>>>()?;
    let report = stratified_report(rows)?;
    println!("\n{}", report.to_table("cloudy input vs reference", &format!("{count} synthetic scenes")));
    Ok(())
}
