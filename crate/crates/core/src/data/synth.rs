//! Seeded procedural scenes: clean multispectral terrain, a smooth cloud
//! opacity field, the cloudy observation and a cloud-independent SAR pair.
//!
//! Three independent random streams are derived from the scene seed
//! (terrain, clouds, speckle), so changing the cloud parameters never
//! changes `x0` or `z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::ImageTriplet;
use crate::error::{Error, Result};
use crate::image::Image;

const TERRAIN_STREAM: u64 = 1;
const CLOUD_STREAM: u64 = 2;
const SPECKLE_STREAM: u64 = 3;

/// Reflectance of four land-cover endmembers at the 13 Sentinel-2 bands
/// (B1..B12 including B8A and B10).
const ENDMEMBERS: [[f32; 13]; 4] = [
    // vegetation
    [0.03, 0.04, 0.08, 0.04, 0.12, 0.30, 0.38, 0.42, 0.43, 0.40, 0.02, 0.22, 0.10],
    // bare soil
    [0.08, 0.10, 0.14, 0.19, 0.22, 0.25, 0.27, 0.29, 0.30, 0.30, 0.03, 0.38, 0.32],
    // water
    [0.07, 0.06, 0.05, 0.03, 0.02, 0.02, 0.015, 0.01, 0.01, 0.01, 0.002, 0.005, 0.003],
    // built-up / rock
    [0.12, 0.13, 0.15, 0.17, 0.19, 0.21, 0.22, 0.24, 0.24, 0.23, 0.03, 0.27, 0.24],
];

/// Cloud-top reflectance at the same 13 bands.
const CLOUD_SPECTRUM: [f32; 13] = [
    0.90, 0.91, 0.90, 0.89, 0.88, 0.87, 0.86, 0.86, 0.85, 0.78, 0.70, 0.68, 0.55,
];

/// Backscatter level of each endmember in VV and VH (already in `[0, 1]`).
const SAR_VV: [f32; 4] = [0.55, 0.45, 0.08, 0.85];
const SAR_VH: [f32; 4] = [0.50, 0.30, 0.05, 0.60];

/// Parameters of one synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneParams {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub opt_channels: usize,
    pub terrain_octaves: usize,
    /// Peak cloud opacity is drawn uniformly from this range (within `(0.5, 1]`).
    pub cloud_opacity_range: (f32, f32),
    /// Fraction of pixels whose opacity exceeds 0.5.
    pub cloud_coverage_target: f32,
    /// Relative standard deviation of the multiplicative SAR speckle.
    pub sar_noise_level: f32,
}

impl Default for SyntheticSceneParams {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            opt_channels: 13,
            terrain_octaves: 4,
            cloud_opacity_range: (0.75, 1.0),
            cloud_coverage_target: 0.5,
            sar_noise_level: 0.15,
        }
    }
}

impl SyntheticSceneParams {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |n: usize| n >= 16 && n.is_power_of_two();
        if !pow2(self.height) || !pow2(self.width) {
            return Err(Error::invalid(format!(
                "scene size {}x{} must be powers of two >= 16",
                self.height, self.width
            )));
        }
        if self.opt_channels == 0 {
            return Err(Error::invalid("opt_channels must be positive"));
        }
        if self.terrain_octaves == 0 {
            return Err(Error::invalid("terrain_octaves must be positive"));
        }
        let (lo, hi) = self.cloud_opacity_range;
        if !(lo > 0.5 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "cloud_opacity_range ({lo}, {hi}) must satisfy 0.5 < lo <= hi <= 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.cloud_coverage_target) {
            return Err(Error::invalid("cloud_coverage_target must be in [0, 1]"));
        }
        if !(self.sar_noise_level >= 0.0 && self.sar_noise_level < 1.0) {
            return Err(Error::invalid("sar_noise_level must be in [0, 1)"));
        }
        Ok(())
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Fractal value noise: `octaves` layers of smoothly interpolated lattice
/// noise, base lattice of `cells` cells across the shorter side.
pub(crate) fn fractal_noise(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    cells: usize,
    octaves: usize,
) -> Vec<f32> {
    let mut out = vec![0f32; height * width];
    let mut amp = 1f32;
    let mut cells = cells.max(1);
    for _ in 0..octaves {
        let (gy, gx) = (cells + 1, cells + 1);
        let lattice: Vec<f32> = (0..gy * gx).map(|_| rng.random_range(-1.0..1.0)).collect();
        for y in 0..height {
            let fy = y as f32 / height as f32 * cells as f32;
            let (iy, ty) = (fy as usize, smooth(fy.fract()));
            for x in 0..width {
                let fx = x as f32 / width as f32 * cells as f32;
                let (ix, tx) = (fx as usize, smooth(fx.fract()));
                let at = |yy: usize, xx: usize| lattice[yy * gx + xx];
                let top = at(iy, ix) + (at(iy, ix + 1) - at(iy, ix)) * tx;
                let bottom = at(iy + 1, ix) + (at(iy + 1, ix + 1) - at(iy + 1, ix)) * tx;
                out[y * width + x] += amp * (top + (bottom - top) * ty);
            }
        }
        amp *= 0.5;
        cells *= 2;
    }
    out
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Per-band table resampled to `channels` bands by linear interpolation.
fn resample_bands(table: &[f32; 13], channels: usize) -> Vec<f32> {
    if channels == 13 {
        return table.to_vec();
    }
    (0..channels)
        .map(|c| {
            let pos = if channels == 1 {
                0.0
            } else {
                c as f32 * 12.0 / (channels - 1) as f32
            };
            let i = (pos as usize).min(11);
            let f = pos - i as f32;
            table[i] * (1.0 - f) + table[i + 1] * f
        })
        .collect()
}

fn box_blur(plane: &[f32], height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let (mut acc, mut n) = (0f32, 0f32);
            for yy in y.saturating_sub(1)..(y + 2).min(height) {
                for xx in x.saturating_sub(1)..(x + 2).min(width) {
                    acc += plane[yy * width + xx];
                    n += 1.0;
                }
            }
            out[y * width + x] = acc / n;
        }
    }
    out
}

/// Land-cover abundances (`4 × H × W`, summing to one per pixel) and the
/// clean optical image.
fn terrain(p: &SyntheticSceneParams) -> (Vec<Vec<f32>>, Image) {
    let (h, w) = (p.height, p.width);
    let mut r = rng(p.seed, TERRAIN_STREAM);
    let fields: Vec<Vec<f32>> = (0..ENDMEMBERS.len())
        .map(|_| fractal_noise(&mut r, h, w, 4, p.terrain_octaves))
        .collect();
    let sharp = 3.0f32;
    let mut abundance = vec![vec![0f32; h * w]; ENDMEMBERS.len()];
    for i in 0..h * w {
        let e: Vec<f32> = fields.iter().map(|f| (sharp * f[i]).exp()).collect();
        let s: f32 = e.iter().sum();
        for (k, v) in e.iter().enumerate() {
            abundance[k][i] = v / s;
        }
    }
    let texture = fractal_noise(&mut r, h, w, 16, 2);
    let gain: f32 = r.random_range(0.85..1.15);
    let spectra: Vec<Vec<f32>> = ENDMEMBERS
        .iter()
        .map(|e| resample_bands(e, p.opt_channels))
        .collect();
    let mut x0 = Image::zeros(p.opt_channels, h, w);
    for c in 0..p.opt_channels {
        let plane = x0.plane_mut(c);
        for i in 0..h * w {
            let refl: f32 = (0..spectra.len()).map(|k| abundance[k][i] * spectra[k][c]).sum();
            plane[i] = (gain * refl * (1.0 + 0.12 * texture[i])).clamp(0.0, 1.0);
        }
    }
    (abundance, x0)
}

/// Opacity field `m` in `[0, peak]` with `m > 0.5` on exactly the pixels
/// whose cloud noise exceeds its `(1 - target)` quantile.
fn cloud_field(p: &SyntheticSceneParams) -> Image {
    let (h, w) = (p.height, p.width);
    let mut out = Image::zeros(1, h, w);
    if p.cloud_coverage_target <= 0.0 {
        return out;
    }
    let mut r = rng(p.seed, CLOUD_STREAM);
    let noise = fractal_noise(&mut r, h, w, 3, 3);
    let (lo, hi) = p.cloud_opacity_range;
    let peak: f32 = if lo < hi { r.random_range(lo..=hi) } else { lo };

    let mut sorted = noise.clone();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    let covered = ((p.cloud_coverage_target * n as f32).round() as usize).min(n);
    let mean = noise.iter().sum::<f32>() / n as f32;
    let std = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n as f32).sqrt();
    let ramp = 0.35 * std.max(1e-6);
    let plane = out.plane_mut(0);
    if covered == 0 {
        return out;
    }
    // threshold halfway between the last clear and first cloudy sample
    let thr = if covered == n {
        f32::NEG_INFINITY
    } else {
        0.5 * (sorted[n - covered - 1] + sorted[n - covered])
    };
    let offset = 0.5 / peak;
    for (m, &v) in plane.iter_mut().zip(&noise) {
        let above = v > thr;
        let raw = if thr.is_finite() {
            ((v - thr) / ramp + offset).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let mut val = peak * raw;
        // keep the > 0.5 set identical to the thresholded set under rounding
        if above && val <= 0.5 {
            val = f32::from_bits(0.5f32.to_bits() + 1);
        } else if !above && val > 0.5 {
            val = 0.5;
        }
        *m = val;
    }
    out
}

/// Builds a seeded synthetic triplet.
pub fn generate_triplet(p: &SyntheticSceneParams) -> Result<ImageTriplet> {
    p.validate()?;
    let (h, w) = (p.height, p.width);
    let (abundance, x0) = terrain(p);
    let opacity = cloud_field(p);
    let m = opacity.plane(0);

    let mut cr = rng(p.seed, CLOUD_STREAM ^ 0x55);
    let tint: f32 = cr.random_range(-0.03..0.03);
    let shade = fractal_noise(&mut cr, h, w, 4, 2);
    let cloud = resample_bands(&CLOUD_SPECTRUM, p.opt_channels);

    let mut y = Image::zeros(p.opt_channels, h, w);
    for c in 0..p.opt_channels {
        let clean = x0.plane(c);
        let blurred = box_blur(clean, h, w);
        let plane = y.plane_mut(c);
        for i in 0..h * w {
            let mi = m[i];
            let under = clean[i] + mi * (blurred[i] - clean[i]);
            let top = ((cloud[c] + tint) * (1.0 + 0.06 * shade[i])).clamp(0.0, 1.0);
            plane[i] = ((1.0 - mi) * under + mi * top).clamp(0.0, 1.0);
        }
    }

    let z = sar_from_terrain(&abundance, &x0, p);
    let cloud_fraction = m.iter().filter(|&&v| v > 0.5).count() as f32 / (h * w) as f32;
    Ok(ImageTriplet {
        x0,
        y,
        z,
        scene_id: format!("scene_{:016x}", p.seed),
        cloud_fraction,
        opacity: Some(opacity),
    })
}

/// Two-channel backscatter: land-cover level plus an edge term from the
/// clean image, with multiplicative gamma speckle.
fn sar_from_terrain(abundance: &[Vec<f32>], x0: &Image, p: &SyntheticSceneParams) -> Image {
    let (h, w) = (p.height, p.width);
    // structure from a near-infrared-like band (or the last band when fewer)
    let band = (p.opt_channels * 7 / 13).min(p.opt_channels - 1);
    let src = x0.plane(band);
    let mut edges = vec![0f32; h * w];
    for yy in 0..h {
        for xx in 0..w {
            let at = |a: usize, b: usize| src[a.min(h - 1) * w + b.min(w - 1)];
            let gx = at(yy, xx + 1) - at(yy, xx.saturating_sub(1));
            let gy = at(yy + 1, xx) - at(yy.saturating_sub(1), xx);
            edges[yy * w + xx] = (gx * gx + gy * gy).sqrt();
        }
    }
    let mut r = rng(p.seed, SPECKLE_STREAM);
    let speckle = if p.sar_noise_level > 0.0 {
        let looks = 1.0 / (p.sar_noise_level * p.sar_noise_level);
        Some(Gamma::new(looks, 1.0 / looks).expect("positive gamma parameters"))
    } else {
        None
    };
    let mut z = Image::zeros(2, h, w);
    for (c, levels) in [SAR_VV, SAR_VH].iter().enumerate() {
        for i in 0..h * w {
            let base: f32 = (0..levels.len()).map(|k| abundance[k][i] * levels[k]).sum();
            let clean = base + 1.5 * edges[i];
            let noise = speckle.map_or(1.0, |g| g.sample(&mut r));
            z.plane_mut(c)[i] = (clean * noise).clamp(0.0, 1.0);
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(seed: u64, coverage: f32) -> SyntheticSceneParams {
        SyntheticSceneParams {
            seed,
            cloud_coverage_target: coverage,
            ..Default::default()
        }
    }

    #[test]
    fn zero_coverage_leaves_scene_clear() {
        let t = generate_triplet(&params(3, 0.0)).unwrap();
        assert_eq!(t.y, t.x0);
        assert_eq!(t.cloud_fraction, 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_triplet(&params(42, 0.4)).unwrap();
        let b = generate_triplet(&params(42, 0.4)).unwrap();
        assert_eq!(a, b);
        let c = generate_triplet(&params(43, 0.4)).unwrap();
        assert_ne!(a.x0, c.x0);
    }

    #[test]
    fn sar_ignores_clouds() {
        let a = generate_triplet(&params(7, 0.2)).unwrap();
        let mut other = params(7, 0.8);
        other.cloud_opacity_range = (0.6, 0.7);
        let b = generate_triplet(&other).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.x0, b.x0);
        assert_ne!(a.y, b.y);
    }

    #[test]
    fn values_in_unit_range_and_aligned() {
        for seed in 0..5 {
            let t = generate_triplet(&params(seed, 0.6)).unwrap();
            for img in [&t.x0, &t.y, &t.z] {
                let (lo, hi) = img.min_max();
                assert!(lo >= 0.0 && hi <= 1.0);
                assert_eq!((img.height(), img.width()), (64, 64));
            }
            assert_eq!(t.z.channels(), 2);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut p = params(0, 0.5);
        p.height = 48;
        assert!(generate_triplet(&p).is_err());
        p.height = 8;
        assert!(generate_triplet(&p).is_err());
    }

    #[test]
    fn resampling_preserves_endpoints() {
        let r = resample_bands(&CLOUD_SPECTRUM, 4);
        assert_eq!(r.len(), 4);
        assert_eq!(r[0], CLOUD_SPECTRUM[0]);
        assert!((r[3] - CLOUD_SPECTRUM[12]).abs() < 1e-6);
    }
}
