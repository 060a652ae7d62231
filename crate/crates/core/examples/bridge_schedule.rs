//! Prints the mixing schedule and checks that one reverse step lands
//! exactly on the forward bridge.
//!
//! cargo run --example bridge_schedule -- [nfe]

use candle_core::{Device, Tensor};
use cloudbridge::bridge::{forward_mix, plan_timesteps, reverse_step, Schedule, ScheduleKind};

fn main() -> cloudbridge::Result<()> {
    let nfe: usize = std::env::args().nth(1).map_or(Ok(5), |a| a.parse()).expect("nfe must be an integer");
    let sched = Schedule::new(1000, ScheduleKind::Sine, Some(0.1))?;

    println!("   t    alpha     beta");
    for t in (0..=1000).step_by(100) {
        println!("{t:>4}  {:.5}  {:.5}", sched.alpha(t)?, sched.beta(t)?);
    }

    let plan = plan_timesteps(1000, nfe)?;
    println!("\nNFE {nfe}: stride {}, restorer called at {:?}", plan.stride(), plan.evaluation_points());

    let dev = Device::Cpu;
    let x0 = Tensor::rand(0f64, 1.0, (1, 4, 8, 8), &dev)?;
    let y = Tensor::rand(0f64, 1.0, (1, 4, 8, 8), &dev)?;
    let s = plan.stride();
    for &t in plan.evaluation_points() {
        let x_t = forward_mix(&x0, &y, t, &sched)?.x;
        let stepped = reverse_step(&x0, &x_t, t, s, &sched)?;
        let target = forward_mix(&x0, &y, t - s, &sched)?.x;
        let err = (stepped - target)?.abs()?.max_all()?.to_scalar::<f64>()?;
        println!("t {t:>4} -> {:>4}: max deviation from bridge {err:.1e}", t - s);
    }
    Ok(())
}
