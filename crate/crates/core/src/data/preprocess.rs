//! Value transforms for Sentinel-1/2 rasters.

use crate::error::Result;
use crate::image::Image;

/// Upper clip for Sentinel-2 top-of-atmosphere digital numbers.
pub const S2_MAX: f32 = 10_000.0;
/// Lower clip (dB) for the VV polarization.
pub const VV_MIN_DB: f32 = -25.0;
/// Lower clip (dB) for the VH polarization.
pub const VH_MIN_DB: f32 = -32.5;

/// Clips optical bands to `[0, 10000]` without rescaling.
pub fn clip_s2(raw: &Image) -> Image {
    raw.map(|v| v.clamp(0.0, S2_MAX))
}

/// Clips to `[0, 10000]`, then scales into `[0, 1]`.
pub fn preprocess_s2(raw: &Image) -> Image {
    raw.map(|v| v.clamp(0.0, S2_MAX) / S2_MAX)
}

fn scale_db(v: f32, min_db: f32) -> f32 {
    (v.clamp(min_db, 0.0) - min_db) / -min_db
}

/// Clips VV to `[-25, 0]` dB and VH to `[-32.5, 0]` dB, shifts each into
/// the positive range and scales it to `[0, 1]`; returns a 2-channel image.
pub fn preprocess_s1(raw_vv: &Image, raw_vh: &Image) -> Result<Image> {
    raw_vv.ensure_same_shape(raw_vh, "preprocess_s1")?;
    let vv = raw_vv.map(|v| scale_db(v, VV_MIN_DB));
    let vh = raw_vh.map(|v| scale_db(v, VH_MIN_DB));
    Image::concat_channels(&[&vv, &vh])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(v: f32) -> Image {
        Image::filled(1, 1, 1, v)
    }

    #[test]
    fn optical_examples() {
        assert_eq!(preprocess_s2(&px(12_000.0)).data(), &[1.0]);
        assert_eq!(preprocess_s2(&px(5_000.0)).data(), &[0.5]);
        assert_eq!(preprocess_s2(&px(-3.0)).data(), &[0.0]);
    }

    #[test]
    fn sar_examples() {
        let out = |vv: f32, vh: f32| preprocess_s1(&px(vv), &px(vh)).unwrap().into_data();
        assert_eq!(out(-25.0, -32.5), vec![0.0, 0.0]);
        assert_eq!(out(0.0, 0.0), vec![1.0, 1.0]);
        assert_eq!(out(-30.0, -40.0), vec![0.0, 0.0]);
        assert_eq!(out(-12.5, -16.25), vec![0.5, 0.5]);
    }

    #[test]
    fn sar_band_shapes_must_agree() {
        assert!(preprocess_s1(&Image::zeros(1, 2, 2), &Image::zeros(1, 2, 3)).is_err());
    }

    proptest! {
        #[test]
        fn outputs_in_unit_range_and_clip_is_idempotent(
            raw in proptest::collection::vec(-1e5f32..1e5, 1..64)
        ) {
            let n = raw.len();
            let img = Image::new(1, 1, n, raw).unwrap();
            let once = clip_s2(&img);
            prop_assert_eq!(&clip_s2(&once), &once);
            prop_assert_eq!(preprocess_s2(&once), preprocess_s2(&img));
            for &v in preprocess_s2(&img).data() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let sar = preprocess_s1(&img.map(|v| v / 1000.0), &img.map(|v| v / 1000.0)).unwrap();
            for &v in sar.data() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
