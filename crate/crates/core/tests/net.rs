mod common;

use saq_core::diffusion::{NoiseSchedule, ToyDistribution};
use saq_core::net::train::{denoising_loss, loss_floor, train_denoiser, TrainConfig};
use saq_core::net::{forward, NetConfig};
use saq_core::rng::{rng_from_seed, standard_normal};

#[test]
fn reverse_mode_matches_central_differences_including_adapter() {
    for seed in 0..3 {
        let (worst, counts) = common::gradient_check(100, seed);
        assert!(counts[2] > 0 && counts[3] > 0);
        assert!(worst < 1e-4, "seed {seed}: max relative error {worst:e}");
    }
}

#[test]
fn standard_normal_training_reaches_the_analytic_floor() {
    let s = NoiseSchedule::default();
    let data = ToyDistribution::standard_normal(2);
    let out = train_denoiser(&NetConfig::default(), &data, &s, &TrainConfig::default()).unwrap();
    let loss = denoising_loss(&out.params, &data, &s, 50_000, &mut rng_from_seed(11)).unwrap();
    let floor = loss_floor(&data, &s, 50_000, &mut rng_from_seed(11)).unwrap();
    assert!(loss <= 1.2 * floor, "loss {loss} vs floor {floor}");

    // eps*(x, t) = sigma_t x for N(0, I) data.
    let x = standard_normal(2000, 2, &mut rng_from_seed(3));
    let mut dev = 0.0;
    for &t in &[0.05, 0.2, 0.5, 0.9] {
        let y = forward(&out.params, None, &x, t).unwrap();
        let target = x.map(|v| s.sigma(t) * v);
        dev += y.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    }
    assert!(dev / 4.0 < floor, "{} vs {floor}", dev / 4.0);
}

#[test]
fn smoothed_training_loss_decreases_on_the_mixture() {
    let s = NoiseSchedule::default();
    let data = ToyDistribution::circle(8, 4.0, 0.3).unwrap();
    let out = train_denoiser(&NetConfig::default(), &data, &s, &TrainConfig::default()).unwrap();
    let smooth = out.smoothed(100);
    let first = smooth[0];
    let last = *smooth.last().unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
    let worst_rise = smooth.windows(2).map(|w| w[1] - w[0]).fold(f64::MIN, f64::max);
    // Minibatch noise: window means of 100 draws still fluctuate.
    assert!(worst_rise < 0.1 * first, "rise {worst_rise}");
}
