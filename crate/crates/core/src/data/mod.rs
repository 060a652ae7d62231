//! Scene triplets: preprocessing, synthetic generation, cloud masks,
//! splitting and on-disk datasets.

mod preprocess;
mod store;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use preprocess::{clip_s2, preprocess_s1, preprocess_s2, S2_MAX, VH_MIN_DB, VV_MIN_DB};
pub use store::{load_dataset, load_scene, write_dataset, Dataset, DatasetManifest, ManifestEntry, MANIFEST_HEADER};
pub use synth::{generate_triplet, SyntheticSceneParams};

use crate::error::{Error, Result};
use crate::image::Image;

/// Aligned clean optical `x0`, cloudy optical `y` and SAR `z` of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTriplet {
    pub x0: Image,
    pub y: Image,
    pub z: Image,
    pub scene_id: String,
    pub cloud_fraction: f32,
    /// Ground-truth cloud opacity (`1 × H × W`), known only for synthetic scenes.
    pub opacity: Option<Image>,
}

impl ImageTriplet {
    pub fn validate(&self) -> Result<()> {
        self.x0.ensure_same_shape(&self.y, "triplet x0/y")?;
        if (self.z.height(), self.z.width()) != (self.x0.height(), self.x0.width()) {
            return Err(Error::invalid(format!(
                "scene {}: SAR {:?} not aligned with optical {:?}",
                self.scene_id,
                self.z.shape(),
                self.x0.shape()
            )));
        }
        Ok(())
    }
}

/// Indices of the blue, green and red bands in a 13-band Sentinel-2 stack.
pub const S2_VISIBLE: [usize; 3] = [1, 2, 3];
/// Default brightness threshold of the cloud proxy.
pub const CLOUD_THRESHOLD: f32 = 0.6;

/// Where cloud labels come from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// Pixel is cloudy when the mean visible-band value exceeds the threshold.
    Brightness { threshold: f32 },
    /// Known opacity field (synthetic scenes): cloudy where opacity > 0.5.
    Opacity(&'a Image),
}

impl Default for MaskSource<'_> {
    fn default() -> Self {
        MaskSource::Brightness {
            threshold: CLOUD_THRESHOLD,
        }
    }
}

/// Binary per-pixel cloud mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl CloudMask {
    pub fn fraction(&self) -> f32 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f32 / self.mask.len() as f32
    }
}

/// Labels cloudy pixels of `y`.
///
/// With 13 or more bands the visible bands B2–B4 are averaged; smaller
/// stacks average all bands.
pub fn cloud_mask(y: &Image, source: MaskSource) -> Result<CloudMask> {
    let (h, w) = (y.height(), y.width());
    let mask = match source {
        MaskSource::Opacity(m) => {
            if (m.height(), m.width()) != (h, w) || m.channels() != 1 {
                return Err(Error::invalid("opacity field does not match image"));
            }
            m.data().iter().map(|&v| v > 0.5).collect()
        }
        MaskSource::Brightness { threshold } => {
            let bands: Vec<usize> = if y.channels() >= 13 {
                S2_VISIBLE.to_vec()
            } else {
                (0..y.channels()).collect()
            };
            (0..h * w)
                .map(|i| {
                    let s: f32 = bands.iter().map(|&c| y.plane(c)[i]).sum();
                    s / bands.len() as f32 > threshold
                })
                .collect()
        }
    };
    Ok(CloudMask {
        height: h,
        width: w,
        mask,
    })
}

/// Seeded shuffle, then partition into train/val/test by `ratios`.
///
/// Validation and test sizes are rounded; training receives the rest.
pub fn split_dataset<T>(
    items: Vec<T>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let mut items = items;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let n = items.len();
    let n_val = ((n as f64 * b).round() as usize).min(n);
    let n_test = ((n as f64 * c).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    let test = items.split_off(n_train + n_val);
    let val = items.split_off(n_train);
    Ok((items, val, test))
}

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub opt_channels: usize,
    pub terrain_octaves: usize,
    pub cloud_opacity_range: (f32, f32),
    /// Per-scene coverage targets are drawn uniformly from this range.
    pub coverage_range: (f32, f32),
    pub sar_noise_level: f32,
    pub split_ratios: (f64, f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let scene = SyntheticSceneParams::default();
        Self {
            count: 320,
            seed: 2024,
            height: scene.height,
            width: scene.width,
            opt_channels: scene.opt_channels,
            terrain_octaves: scene.terrain_octaves,
            cloud_opacity_range: scene.cloud_opacity_range,
            coverage_range: (0.1, 0.9),
            sar_noise_level: scene.sar_noise_level,
            split_ratios: (0.8, 0.1, 0.1),
        }
    }
}

impl DatasetSpec {
    /// Parameters of scene `index`; depends only on the spec and the index.
    pub fn scene_params(&self, index: usize) -> SyntheticSceneParams {
        use rand::Rng;
        let seed = scene_seed(self.seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(99);
        let (lo, hi) = self.coverage_range;
        let coverage = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        SyntheticSceneParams {
            seed,
            height: self.height,
            width: self.width,
            opt_channels: self.opt_channels,
            terrain_octaves: self.terrain_octaves,
            cloud_opacity_range: self.cloud_opacity_range,
            cloud_coverage_target: coverage,
            sar_noise_level: self.sar_noise_level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("dataset count must be positive"));
        }
        let (lo, hi) = self.coverage_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("coverage_range must lie within [0, 1]"));
        }
        self.scene_params(0).validate()
    }

    /// Generates every scene (in parallel) and splits them.
    pub fn generate(&self) -> Result<SplitTriplets> {
        self.validate()?;
        let scenes = (0..self.count)
            .into_par_iter()
            .map(|i| generate_triplet(&self.scene_params(i)))
            .collect::<Result<Vec<_>>>()?;
        let (train, val, test) = split_dataset(scenes, self.split_ratios, self.seed)?;
        Ok(SplitTriplets { train, val, test })
    }
}

/// Splitmix-style derivation of a per-scene seed.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A dataset partitioned into train/val/test.
#[derive(Debug, Clone, Default)]
pub struct SplitTriplets {
    pub train: Vec<ImageTriplet>,
    pub val: Vec<ImageTriplet>,
    pub test: Vec<ImageTriplet>,
}

/// Named split of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl SplitTriplets {
    pub fn get(&self, split: Split) -> &[ImageTriplet] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_extremes() {
        let m = cloud_mask(&Image::zeros(13, 4, 4), MaskSource::default()).unwrap();
        assert_eq!(m.fraction(), 0.0);
        let m = cloud_mask(&Image::filled(13, 4, 4, 1.0), MaskSource::default()).unwrap();
        assert_eq!(m.fraction(), 1.0);
    }

    #[test]
    fn mask_from_known_opacity() {
        let t = generate_triplet(&SyntheticSceneParams {
            seed: 5,
            cloud_coverage_target: 0.4,
            ..Default::default()
        })
        .unwrap();
        let op = t.opacity.as_ref().unwrap();
        let m = cloud_mask(&t.y, MaskSource::Opacity(op)).unwrap();
        let expected: Vec<bool> = op.data().iter().map(|&v| v > 0.5).collect();
        assert_eq!(m.mask, expected);
        assert_eq!(m.fraction(), t.cloud_fraction);
    }

    #[test]
    fn split_sizes_and_coverage() {
        let (a, b, c) = split_dataset((0..10).collect(), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let mut all: Vec<i32> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let again = split_dataset((0..10).collect(), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((a, b, c), again);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(split_dataset(vec![1, 2], (0.5, 0.5, 0.5), 0).is_err());
        assert!(split_dataset(vec![1, 2], (1.2, -0.1, -0.1), 0).is_err());
    }

    #[test]
    fn default_spec_yields_256_32_32() {
        let spec = DatasetSpec::default();
        let (a, b, c) = split_dataset((0..spec.count).collect(), spec.split_ratios, 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (256, 32, 32));
    }

    #[test]
    fn empty_spec_refused() {
        let spec = DatasetSpec {
            count: 0,
            ..Default::default()
        };
        assert!(spec.generate().is_err());
    }
}
