//! Distortion metrics and cloud-cover stratified reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Gaussian window side length for SSIM.
pub const SSIM_WINDOW: usize = 11;
/// Gaussian window standard deviation for SSIM.
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check(pred: &Image, reference: &Image, what: &str) -> Result<()> {
    pred.ensure_same_shape(reference, what)
}

/// Mean squared error in `f64`.
pub fn mse(pred: &Image, reference: &Image) -> Result<f64> {
    check(pred, reference, "mse")?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(peak² / MSE)` in dB; `+inf` for identical images.
pub fn psnr(pred: &Image, reference: &Image, peak: f64) -> Result<f64> {
    let m = mse(pred, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Mean absolute error.
pub fn mae(pred: &Image, reference: &Image) -> Result<f64> {
    check(pred, reference, "mae")?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n)
}

/// Mean spectral angle in degrees over pixels where both spectra are
/// nonzero; `None` when no such pixel exists.
pub fn sam(pred: &Image, reference: &Image) -> Result<Option<f64>> {
    check(pred, reference, "sam")?;
    if pred.channels() < 2 {
        return Err(Error::invalid("spectral angle needs at least 2 channels"));
    }
    let (c, n) = (pred.channels(), pred.pixels());
    let (mut total, mut valid) = (0f64, 0usize);
    for i in 0..n {
        let (mut dot, mut pp, mut rr) = (0f64, 0f64, 0f64);
        for ch in 0..c {
            let p = pred.plane(ch)[i] as f64;
            let r = reference.plane(ch)[i] as f64;
            dot += p * r;
            pp += p * p;
            rr += r * r;
        }
        if pp == 0.0 || rr == 0.0 {
            continue;
        }
        let cos = (dot / (pp.sqrt() * rr.sqrt())).clamp(-1.0, 1.0);
        total += cos.acos().to_degrees();
        valid += 1;
    }
    Ok((valid > 0).then(|| total / valid as f64))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5) and
/// constants for unit dynamic range, averaged over all valid window
/// positions and over channels.
pub fn ssim(pred: &Image, reference: &Image) -> Result<f64> {
    let bands: Vec<usize> = (0..pred.channels()).collect();
    ssim_bands(pred, reference, &bands)
}

/// [`ssim`] restricted to the listed channels (e.g. an RGB triple).
pub fn ssim_bands(pred: &Image, reference: &Image, bands: &[usize]) -> Result<f64> {
    check(pred, reference, "ssim")?;
    let (h, w) = (pred.height(), pred.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    if bands.is_empty() || bands.iter().any(|&b| b >= pred.channels()) {
        return Err(Error::invalid(format!("invalid SSIM band selection {bands:?}")));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0f64;
    for &b in bands {
        let x: Vec<f64> = pred.plane(b).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = reference.plane(b).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0f64;
        for i in 0..mx.len() {
            let (a, b) = (mx[i], my[i]);
            let va = sxx[i] - a * a;
            let vb = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            acc += ((2.0 * a * b + c1) * (2.0 * cov + c2))
                / ((a * a + b * b + c1) * (va + vb + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / bands.len() as f64)
}

/// Metrics of one restored scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub scene_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    /// Degrees; `None` when undefined (all-zero spectra).
    pub sam: Option<f64>,
    pub cloud_fraction: f64,
}

impl ImageMetrics {
    pub fn compute(scene_id: &str, pred: &Image, reference: &Image, cloud_fraction: f64) -> Result<Self> {
        Ok(Self {
            scene_id: scene_id.to_string(),
            psnr: psnr(pred, reference, 1.0)?,
            ssim: ssim(pred, reference)?,
            mae: mae(pred, reference)?,
            sam: sam(pred, reference)?,
            cloud_fraction,
        })
    }
}

/// Mean or median of each metric; SAM ignores undefined entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValues {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub sam: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: MetricValues,
    pub median: MetricValues,
}

/// Cloud-cover stratum `[lo, hi)` (the last one includes 1.0).
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub lo: f64,
    pub hi: f64,
    pub summary: Option<Summary>,
}

impl Stratum {
    pub fn label(&self) -> String {
        format!("{:.0}-{:.0}%", self.lo * 100.0, self.hi * 100.0)
    }

    pub fn count(&self) -> usize {
        self.summary.as_ref().map_or(0, |s| s.count)
    }
}

pub const STRATUM_EDGES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Stratum index of a cloud fraction: right-exclusive bins, last bin closed.
pub fn stratum_index(fraction: f64) -> usize {
    STRATUM_EDGES[1..5].iter().filter(|&&e| fraction >= e).count()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn summarize(rows: &[&ImageMetrics]) -> Option<Summary> {
    if rows.is_empty() {
        return None;
    }
    let col = |f: fn(&ImageMetrics) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
    let (p, s, m) = (col(|r| r.psnr), col(|r| r.ssim), col(|r| r.mae));
    let sams: Vec<f64> = rows.iter().filter_map(|r| r.sam).collect();
    let pick = |agg: fn(&[f64]) -> Option<f64>| MetricValues {
        psnr: agg(&p).unwrap_or(f64::NAN),
        ssim: agg(&s).unwrap_or(f64::NAN),
        mae: agg(&m).unwrap_or(f64::NAN),
        sam: agg(&sams),
    };
    Some(Summary {
        count: rows.len(),
        mean: pick(mean),
        median: pick(median),
    })
}

/// Per-image rows with overall and per-stratum aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub overall: Summary,
    pub strata: Vec<Stratum>,
}

/// Buckets images into the five cloud-cover strata and aggregates them.
pub fn stratified_report(results: Vec<ImageMetrics>) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::invalid("cannot build a report from zero images"));
    }
    let all: Vec<&ImageMetrics> = results.iter().collect();
    let overall = summarize(&all).expect("nonempty");
    let strata = (0..5)
        .map(|k| {
            let rows: Vec<&ImageMetrics> = results
                .iter()
                .filter(|r| stratum_index(r.cloud_fraction) == k)
                .collect();
            Stratum {
                lo: STRATUM_EDGES[k],
                hi: STRATUM_EDGES[k + 1],
                summary: summarize(&rows),
            }
        })
        .collect();
    Ok(MetricsReport {
        per_image: results,
        overall,
        strata,
    })
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.prec$}"))
}

impl MetricsReport {
    /// Human-readable table: overall row, stratum medians, per-image rows.
    pub fn to_table(&self, title: &str, provenance: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {title}");
        let _ = writeln!(s, "# {provenance}");
        let _ = writeln!(s, "# LPIPS/FID: not computed (need pretrained perceptual networks)");
        let _ = writeln!(s, "{:<14} {:>6} {:>9} {:>7} {:>8} {:>8}", "set", "n", "PSNR", "SSIM", "MAE", "SAM");
        let row = |s: &mut String, name: &str, n: usize, v: &MetricValues| {
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>9.3} {:>7.4} {:>8.4} {:>8}",
                name,
                n,
                v.psnr,
                v.ssim,
                v.mae,
                fmt_opt(v.sam, 3)
            );
        };
        row(&mut s, "overall-mean", self.overall.count, &self.overall.mean);
        row(&mut s, "overall-median", self.overall.count, &self.overall.median);
        let _ = writeln!(s, "\n# median by cloud cover");
        for st in &self.strata {
            match &st.summary {
                Some(sum) => row(&mut s, &st.label(), sum.count, &sum.median),
                None => {
                    let _ = writeln!(s, "{:<14} {:>6} {:>9}", st.label(), 0, "-");
                }
            }
        }
        let _ = writeln!(s, "\n# per image");
        for r in &self.per_image {
            let _ = writeln!(
                s,
                "{:<24} cover={:.3} psnr={:.3} ssim={:.4} mae={:.4} sam={}",
                r.scene_id,
                r.cloud_fraction,
                r.psnr,
                r.ssim,
                r.mae,
                fmt_opt(r.sam, 3)
            );
        }
        s
    }

    /// Machine-readable rows: one per image, then stratum and overall aggregates.
    pub fn write_csv(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let rec = |w: &mut csv::Writer<std::fs::File>, fields: Vec<String>| {
            w.write_record(&fields).map_err(|e| csv_err(path, e))
        };
        rec(&mut w, vec!["# provenance".into(), provenance.into()])?;
        rec(
            &mut w,
            ["kind", "id", "cloud_fraction", "count", "psnr", "ssim", "mae", "sam"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )?;
        for r in &self.per_image {
            rec(
                &mut w,
                vec![
                    "image".into(),
                    r.scene_id.clone(),
                    r.cloud_fraction.to_string(),
                    "1".into(),
                    r.psnr.to_string(),
                    r.ssim.to_string(),
                    r.mae.to_string(),
                    fmt_opt(r.sam, 6),
                ],
            )?;
        }
        let agg = |kind: &str, id: String, n: usize, v: &MetricValues| -> Vec<String> {
            vec![
                kind.into(),
                id,
                String::new(),
                n.to_string(),
                v.psnr.to_string(),
                v.ssim.to_string(),
                v.mae.to_string(),
                fmt_opt(v.sam, 6),
            ]
        };
        for st in &self.strata {
            if let Some(sum) = &st.summary {
                rec(&mut w, agg("stratum-median", st.label(), sum.count, &sum.median))?;
            } else {
                rec(&mut w, vec!["stratum-median".into(), st.label(), String::new(), "0".into()])?;
            }
        }
        rec(&mut w, agg("overall-mean", "all".into(), self.overall.count, &self.overall.mean))?;
        rec(&mut w, agg("overall-median", "all".into(), self.overall.count, &self.overall.median))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One row of a sampler comparison (e.g. an NFE value or ODE vs SDE).
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub summary: Summary,
}

/// Mean metrics per row, plus which row is best on each metric.
pub fn comparison_table(title: &str, provenance: &str, rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {title}");
    let _ = writeln!(s, "# {provenance}");
    let _ = writeln!(s, "{:<16} {:>6} {:>9} {:>7} {:>8} {:>8}", "setting", "n", "PSNR", "SSIM", "MAE", "SAM");
    for r in rows {
        let v = &r.summary.mean;
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>9.3} {:>7.4} {:>8.4} {:>8}",
            r.label,
            r.summary.count,
            v.psnr,
            v.ssim,
            v.mae,
            fmt_opt(v.sam, 3)
        );
    }
    let best = |key: fn(&MetricValues) -> f64, higher: bool| {
        rows.iter()
            .filter(|r| key(&r.summary.mean).is_finite())
            .max_by(|a, b| {
                let (x, y) = (key(&a.summary.mean), key(&b.summary.mean));
                if higher { x.total_cmp(&y) } else { y.total_cmp(&x) }
            })
            .map_or("-".to_string(), |r| r.label.clone())
    };
    let _ = writeln!(
        s,
        "# best: PSNR {} | SSIM {} | MAE {}",
        best(|v| v.psnr, true),
        best(|v| v.ssim, true),
        best(|v| v.mae, false)
    );
    s
}

pub fn write_comparison_csv(path: &Path, provenance: &str, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut put = |fields: Vec<String>| w.write_record(&fields).map_err(|e| csv_err(path, e));
    put(vec!["# provenance".into(), provenance.into()])?;
    put(["setting", "count", "psnr", "ssim", "mae", "sam"].iter().map(|s| s.to_string()).collect())?;
    for r in rows {
        let v = &r.summary.mean;
        put(vec![
            r.label.clone(),
            r.summary.count.to_string(),
            v.psnr.to_string(),
            v.ssim.to_string(),
            v.mae.to_string(),
            fmt_opt(v.sam, 6),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> Image {
        Image::new(c, h, w, (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = img(3, 4, 4, |i| (i % 7) as f32 / 10.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-4);
        assert!(psnr(&a, &img(3, 4, 5, |_| 0.0), 1.0).is_err());
    }

    #[test]
    fn mae_cases() {
        let a = img(2, 3, 3, |i| (i % 5) as f32 / 8.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert!((mae(&a.map(|v| v + 0.1), &a).unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn sam_cases() {
        let a = img(3, 2, 2, |i| 0.1 + (i % 4) as f32 / 10.0);
        assert!(sam(&a, &a).unwrap().unwrap().abs() < 1e-5);
        assert!(sam(&a.map(|v| 2.0 * v), &a).unwrap().unwrap().abs() < 1e-5);
        // per pixel spectra (1,0) vs (0,1)
        let p = Image::new(2, 1, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let r = Image::new(2, 1, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((sam(&p, &r).unwrap().unwrap() - 90.0).abs() < 1e-9);
        let z = Image::zeros(2, 2, 2);
        assert_eq!(sam(&z, &z).unwrap(), None);
        // zero pixel excluded
        let p = Image::new(2, 1, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = Image::new(2, 1, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(sam(&p, &r).unwrap().unwrap().abs() < 1e-9);
    }

    #[test]
    fn ssim_cases() {
        let a = img(2, 16, 16, |i| if (i / 3) % 2 == 0 { 0.9 } else { 0.1 });
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a.map(|v| 1.0 - v), &a).unwrap() < 0.0);
        assert!(ssim(&img(1, 8, 8, |_| 0.0), &img(1, 8, 8, |_| 0.0)).is_err());
        assert!(ssim_bands(&a, &a, &[2]).is_err());
    }

    #[test]
    fn strata_boundaries() {
        assert_eq!(stratum_index(0.0), 0);
        assert_eq!(stratum_index(0.1999), 0);
        assert_eq!(stratum_index(0.2), 1);
        assert_eq!(stratum_index(0.2f32 as f64), 1);
        assert_eq!(stratum_index(0.5), 2);
        assert_eq!(stratum_index(0.8), 4);
        assert_eq!(stratum_index(1.0), 4);
    }

    fn row(id: &str, cover: f64, p: f64) -> ImageMetrics {
        ImageMetrics {
            scene_id: id.into(),
            psnr: p,
            ssim: 0.5,
            mae: 0.1,
            sam: Some(2.0),
            cloud_fraction: cover,
        }
    }

    #[test]
    fn single_image_lands_in_one_stratum() {
        let r = stratified_report(vec![row("a", 0.5, 30.0)]).unwrap();
        let counts: Vec<usize> = r.strata.iter().map(|s| s.count()).collect();
        assert_eq!(counts, vec![0, 0, 1, 0, 0]);
        let r = stratified_report(vec![row("b", 0.2, 30.0)]).unwrap();
        assert_eq!(r.strata[1].count(), 1);
        assert!(stratified_report(vec![]).is_err());
    }

    #[test]
    fn comparison_rows_and_best() {
        let a = stratified_report(vec![row("a", 0.1, 30.0)]).unwrap().overall;
        let b = stratified_report(vec![row("a", 0.1, 20.0)]).unwrap().overall;
        let rows = vec![
            ComparisonRow { label: "nfe=1".into(), summary: a },
            ComparisonRow { label: "nfe=5".into(), summary: b },
        ];
        let t = comparison_table("sweep", "hash", &rows);
        assert!(t.contains("best: PSNR nfe=1"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_comparison_csv(&p, "hash", &rows).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 4);
    }

    #[test]
    fn emits_table_and_csv() {
        let r = stratified_report(vec![row("a", 0.1, 30.0), row("b", 0.9, 20.0)]).unwrap();
        let t = r.to_table("test", "hash=abc");
        assert!(t.contains("80-100%"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        r.write_csv(&p, "hash=abc").unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("image,")).count(), 2);
        assert_eq!(text.lines().filter(|l| l.starts_with("stratum-median,")).count(), 5);
    }
}
