/* Inspect the cosine noise schedule that drives training and sampling.

   Prints the cumulative signal fraction at a few landmarks, the per-step
   beta clip at the final step, and the SNR loss weights, then forward-noises
   a toy signal to show how quickly content drowns.

   cargo run --example noise_schedule -- 8192
*/

use candle_core::{DType, Device, Tensor};
use cdt::rng::{randn, Purpose};
use cdt::schedule::{cosine_schedule, q_sample, snr_weight};
use cdt::Result;

fn main() -> Result<()> {
    let t_count: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(8192);
    let sched = cosine_schedule(t_count)?;

    println!("cosine schedule, {t_count} steps");
    println!("{:>8} {:>12} {:>12} {:>14}", "t", "alpha_bar", "beta", "snr_weight");
    let mut last = 0;
    for frac in [0.0, 0.001, 0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0] {
        let t = ((t_count as f64 * frac).round() as usize).max(1).min(t_count);
        if t == last {
            continue;
        }
        last = t;
        println!(
            "{t:>8} {:>12.6e} {:>12.6e} {:>14.6e}",
            sched.alpha_bar(t),
            sched.beta(t),
            snr_weight(t, &sched)?
        );
    }
    println!("beta at final step clipped to {}", sched.beta(t_count));

    // noise a smooth ramp and report how much of it survives
    let dev = Device::Cpu;
    let n = 64;
    let ramp: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let v0 = Tensor::from_vec(ramp, (1, 1, 1, n, 1), &dev)?;
    for frac in [0.1, 0.5, 0.9] {
        let t = (t_count as f64 * frac).round() as usize;
        let eps = randn(0, t as u64, Purpose::NoiseDraw, v0.dims(), DType::F64, &dev)?;
        let vt = q_sample(&v0, t, &eps, &sched)?;
        let power = vt.sqr()?.mean_all()?.to_scalar::<f64>()?;
        let signal = sched.alpha_bar(t) * v0.sqr()?.mean_all()?.to_scalar::<f64>()?;
        println!(
            "t = {t:>6}: total power {power:.4}, surviving signal power {signal:.4}"
        );
    }
    Ok(())
}
