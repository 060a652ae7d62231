//! Property tests for the algebraic and metric invariants.

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use cloudbridge::backbone::{Backbone, BackboneConfig};
use cloudbridge::bridge::{
    forward_mix, forward_mix_sde, plan_timesteps, reverse_step, reverse_step_sde, Schedule, ScheduleKind,
};
use cloudbridge::data::{generate_triplet, SyntheticSceneParams};
use cloudbridge::image::Image;
use cloudbridge::inference::{run_inference, InferenceConfig, Restorer};
use cloudbridge::metrics::{mae, psnr, sam, ssim};

fn tensor(values: &[f64]) -> Tensor {
    Tensor::from_vec(values.to_vec(), (1, 2, 2, values.len() / 4), &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn image(c: usize, h: usize, w: usize, v: Vec<f32>) -> Image {
    Image::new(c, h, w, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_strictly_increasing_with_exact_endpoints(steps in 2usize..=2048) {
        let s = Schedule::new(steps, ScheduleKind::Sine, Some(0.3)).unwrap();
        prop_assert_eq!(s.alpha(0).unwrap(), 0.0);
        prop_assert_eq!(s.alpha(steps).unwrap(), 1.0);
        for w in s.alphas().windows(2) {
            prop_assert!(w[0] < w[1]);
            prop_assert!((0.0..=1.0).contains(&w[1]));
        }
        let b = s.betas().unwrap();
        prop_assert_eq!(b[0], 0.0);
        prop_assert_eq!(b[steps], 0.0);
        prop_assert!(b.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn bridge_endpoints_and_consistency(
        x0 in prop::collection::vec(-2.0f64..2.0, 12),
        y in prop::collection::vec(-2.0f64..2.0, 12),
        steps in 1usize..=1000,
        frac_t in 0.0f64..=1.0,
        frac_s in 0.0f64..=1.0,
    ) {
        let sched = Schedule::new(steps, ScheduleKind::Sine, None).unwrap();
        let (x0, y) = (tensor(&x0), tensor(&y));
        prop_assert_eq!(flat(&forward_mix(&x0, &y, 0, &sched).unwrap().x), flat(&x0));
        prop_assert_eq!(flat(&forward_mix(&x0, &y, steps, &sched).unwrap().x), flat(&y));
        let t = 1 + ((steps - 1) as f64 * frac_t) as usize;
        let s = 1 + ((t - 1) as f64 * frac_s) as usize;
        let x_t = forward_mix(&x0, &y, t, &sched).unwrap().x;
        let got = flat(&reverse_step(&x0, &x_t, t, s, &sched).unwrap());
        let want = flat(&forward_mix(&x0, &y, t - s, &sched).unwrap().x);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_beta_sde_is_the_ode(
        x0 in prop::collection::vec(-1.0f64..1.0, 8),
        y in prop::collection::vec(-1.0f64..1.0, 8),
        noise in prop::collection::vec(-3.0f64..3.0, 8),
        t in 1usize..=50,
        s in 1usize..=50,
    ) {
        prop_assume!(s <= t);
        let sched = Schedule::new(50, ScheduleKind::Sine, Some(0.0)).unwrap();
        let (x0, y, n) = (tensor(&x0), tensor(&y), tensor(&noise));
        let x_t = forward_mix(&x0, &y, t, &sched).unwrap().x;
        prop_assert_eq!(flat(&forward_mix_sde(&x0, &y, t, &sched, &n).unwrap().x), flat(&x_t));
        prop_assert_eq!(
            flat(&reverse_step_sde(&x0, &x_t, t, s, &sched, &n).unwrap()),
            flat(&reverse_step(&x0, &x_t, t, s, &sched).unwrap())
        );
    }

    #[test]
    fn plans_cover_t_to_zero_with_uniform_stride(steps in 1usize..=2000, k in 1usize..=40) {
        let divisors: Vec<usize> = (1..=steps).filter(|n| steps % n == 0).collect();
        let nfe = divisors[k % divisors.len()];
        let plan = plan_timesteps(steps, nfe).unwrap();
        let v = plan.steps();
        prop_assert_eq!(v[0], steps);
        prop_assert_eq!(*v.last().unwrap(), 0);
        prop_assert!(v.windows(2).all(|w| w[0] - w[1] == plan.stride()));
        prop_assert_eq!(plan.evaluation_points().len(), nfe);
    }

    #[test]
    fn metrics_are_symmetric(
        a in prop::collection::vec(0.0f32..1.0, 3 * 12 * 12),
        b in prop::collection::vec(0.0f32..1.0, 3 * 12 * 12),
    ) {
        let (a, b) = (image(3, 12, 12, a), image(3, 12, 12, b));
        prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn sam_ignores_positive_scale(a in prop::collection::vec(0.01f32..1.0, 4 * 9), c in 0.1f32..10.0) {
        let a = image(4, 3, 3, a);
        let scaled = a.map(|v| v * c);
        prop_assert!(sam(&scaled, &a).unwrap().unwrap() < 1e-3);
    }

    #[test]
    fn constant_offset_links_psnr_and_mae(a in prop::collection::vec(0.0f32..0.5, 2 * 16), d in 0.01f32..0.5) {
        let a = image(2, 4, 4, a);
        // An offset that is exact in f32 arithmetic.
        let d = (d * 1024.0).round() / 1024.0;
        let b = a.map(|v| v + d);
        let m = mae(&a, &b).unwrap();
        prop_assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / (m * m)).log10()).abs() < 1e-3);
    }

    #[test]
    fn synthetic_sar_ignores_cloud_settings(seed in any::<u64>(), cov in 0.0f32..1.0, op in 0.6f32..1.0) {
        let base = SyntheticSceneParams { seed, height: 16, width: 16, ..Default::default() };
        let a = generate_triplet(&base).unwrap();
        let b = generate_triplet(&SyntheticSceneParams {
            cloud_coverage_target: cov,
            cloud_opacity_range: (op, op),
            ..base
        })
        .unwrap();
        prop_assert_eq!(a.z.data(), b.z.data());
        prop_assert_eq!(a.x0.data(), b.x0.data());
        for img in [&b.x0, &b.y, &b.z] {
            let (lo, hi) = img.min_max();
            prop_assert!(lo >= 0.0 && hi <= 1.0);
            prop_assert_eq!((img.height(), img.width()), (16, 16));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn backbone_preserves_optical_shape(
        opt in 1usize..6,
        sar in 1usize..3,
        base in 1usize..4,
        levels in 1usize..4,
        batch in 1usize..3,
        seed in any::<u64>(),
    ) {
        let widths: Vec<usize> = (0..levels).map(|i| (4 * base) << i).collect();
        let cfg = BackboneConfig {
            opt_channels: opt,
            sar_channels: sar,
            enc_blocks: vec![1; levels],
            dec_blocks: vec![1; levels],
            fusion_heads: vec![1; levels],
            time_embed_dim: 4,
            widths,
        };
        let model = Backbone::new(&cfg, 100, DType::F32, &Device::Cpu, seed).unwrap();
        model.params().randomize_prefix("head", 0.1, seed).unwrap();
        let side = cfg.size_multiple() * 2;
        let x = Tensor::rand(0f32, 1.0, (batch, opt, side, side), &Device::Cpu).unwrap();
        let z = Tensor::rand(0f32, 1.0, (batch, sar, side, side), &Device::Cpu).unwrap();
        let ts: Vec<usize> = (0..batch).map(|i| 37 * i % 101).collect();
        let out = model.forward(&x, &ts, &z).unwrap();
        prop_assert_eq!(out.dims(), x.dims());
    }
}

struct Counting(std::sync::atomic::AtomicUsize);

impl Restorer for Counting {
    fn predict(&self, x_t: &Tensor, _ts: &[usize], _z: &Tensor) -> cloudbridge::Result<Tensor> {
        self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(x_t.affine(0.5, 0.1)?)
    }
}

proptest! {
    #[test]
    fn restorer_called_exactly_nfe_times(k in 0usize..16) {
        let divisors: Vec<usize> = (1..=1000).filter(|n| 1000 % n == 0).collect();
        let nfe = divisors[k];
        let sched = Schedule::new(1000, ScheduleKind::Sine, None).unwrap();
        let y = Image::filled(2, 4, 4, 0.7);
        let z = Image::filled(1, 4, 4, 0.2);
        let counter = Counting(0.into());
        run_inference(&y, &z, &counter, &sched, &InferenceConfig { nfe, ..Default::default() }).unwrap();
        prop_assert_eq!(counter.0.into_inner(), nfe);
    }
}
