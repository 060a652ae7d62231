//! Generates a few synthetic scenes and writes cloudy | clean previews
//! next to a false-colour SAR image.
//!
//! cargo run --example synthetic_scenes -- [out_dir] [count]

use std::path::PathBuf;

use cloudbridge::data::{cloud_mask, generate_triplet, DatasetSpec, MaskSource};
use cloudbridge::image::Image;
use cloudbridge::raster::{write_grid, write_rgb_png};

fn main() -> cloudbridge::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic_preview".into()));
    let count: usize = args.next().map_or(4, |a| a.parse().expect("count must be an integer"));
    std::fs::create_dir_all(&out).expect("cannot create output directory");

    let spec = DatasetSpec::default();
    for i in 0..count {
        let scene = generate_triplet(&spec.scene_params(i))?;
        let source = match &scene.opacity {
            Some(op) => MaskSource::Opacity(op),
            None => MaskSource::default(),
        };
        let mask = cloud_mask(&scene.y, source)?;
        // SAR has two channels; show VV, VH and their mean as RGB.
        let (vv, vh) = (scene.z.plane(0), scene.z.plane(1));
        let mean: Vec<f32> = vv.iter().zip(vh).map(|(a, b)| 0.5 * (a + b)).collect();
        let sar = Image::new(3, scene.z.height(), scene.z.width(), [vv, vh, &mean[..]].concat())?;
        write_rgb_png(&out.join(format!("scene_{i:03}_sar.png")), &sar, [0, 1, 2], &[])?;
        let path = out.join(format!("scene_{i:03}.png"));
        write_grid(&path, &[&scene.y, &scene.x0], [3, 2, 1], &[])?;
        println!(
            "{}: cloud fraction {:.2} (mask {:.2}), clean range {:?} -> {}",
            scene.scene_id,
            scene.cloud_fraction,
            mask.fraction(),
            scene.x0.min_max(),
            path.display()
        );
    }
    Ok(())
}
