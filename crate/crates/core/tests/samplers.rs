mod common;

use saq_core::diffusion::{NoiseSchedule, ToyDistribution};
use saq_core::metrics::energy_distance;
use saq_core::rng::{rng_from_seed, standard_normal};
use saq_core::samplers::*;
use saq_core::Tensor;

fn endpoint_error(kind: SamplerKind, steps: usize) -> f64 {
    let s = NoiseSchedule::default();
    let (mu, c) = ([1.0, -0.5], 0.5);
    let dist = ToyDistribution::gaussian(mu.to_vec(), c).unwrap();
    let x = standard_normal(64, 2, &mut rng_from_seed(5));
    let grid = TimeGrid::uniform_lambda(&s, steps).unwrap();
    let mut ev = AnalyticEvaluator::new(dist, s);
    let traj = sample(&mut ev, &s, &grid, &x, kind).unwrap();
    let exact = common::gaussian_transport(&s, &mu, c, &x, s.t_end, s.t_min);
    common::rms_diff(traj.endpoint(), &exact)
}

#[test]
fn analytic_epsilon_matches_monte_carlo_posterior_mean() {
    // eps*(x, t) = (x - alpha E[x0 | x_t = x]) / sigma, with the posterior mean
    // estimated by self-normalised importance sampling from the data.
    let s = NoiseSchedule::default();
    let dist = ToyDistribution::circle(8, 4.0, 0.3).unwrap();
    let x0 = dist.sample(200_000, &mut rng_from_seed(1));
    for &t in &[0.3, 0.6, 0.9] {
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let x = Tensor::matrix(3, 2, vec![0.5, -0.2, 2.0 * a, 1.0 * a, -3.0 * a, 0.4]);
        let e = dist.analytic_epsilon(&s, &x, t).unwrap();
        for r in 0..3 {
            let xr = x.row(r);
            let logw: Vec<f64> = (0..x0.rows())
                .map(|i| {
                    let p = x0.row(i);
                    -((xr[0] - a * p[0]).powi(2) + (xr[1] - a * p[1]).powi(2)) / (2.0 * sg * sg)
                })
                .collect();
            let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let ess = z * z / w.iter().map(|v| v * v).sum::<f64>();
            assert!(ess > 500.0, "t {t} row {r}: ess {ess}");
            for j in 0..2 {
                let mean = (0..x0.rows()).map(|i| w[i] * x0.row(i)[j]).sum::<f64>() / z;
                let mc = (xr[j] - a * mean) / sg;
                assert!((mc - e.row(r)[j]).abs() < 0.05 * (1.0 + mc.abs()), "t {t} row {r}: {mc} vs {}", e.row(r)[j]);
            }
        }
    }
}

#[test]
fn global_convergence_orders_on_a_gaussian() {
    let steps = [10usize, 20, 40, 80];
    let h: Vec<f64> = steps.iter().map(|n| 1.0 / *n as f64).collect();
    for (kind, lo, hi) in [(SamplerKind::Dpm1, 0.8, 1.2), (SamplerKind::Dpm2, 1.7, 2.3)] {
        let err: Vec<f64> = steps.iter().map(|&n| endpoint_error(kind, n)).collect();
        let slope = common::loglog_slope(&h, &err);
        assert!((lo..=hi).contains(&slope), "{}: slope {slope}, errors {err:?}", kind.label());
    }
}

#[test]
fn plms_converges_faster_than_first_order() {
    let e1 = endpoint_error(SamplerKind::Dpm1, 40);
    let e4 = endpoint_error(SamplerKind::Plms { max_order: 4 }, 40);
    assert!(e4 < 0.2 * e1, "{e4} vs {e1}");
    let p1 = endpoint_error(SamplerKind::Plms { max_order: 1 }, 40);
    assert!((p1 - endpoint_error(SamplerKind::Ddim, 40)).abs() < 1e-10);
}

#[test]
fn ddim_and_dpm1_coincide() {
    let s = NoiseSchedule::default();
    let dist = ToyDistribution::circle(8, 4.0, 0.3).unwrap();
    let x = standard_normal(32, 2, &mut rng_from_seed(2));
    for grid in [
        TimeGrid::uniform_lambda(&s, 7).unwrap(),
        TimeGrid::uniform_time(&s, 25).unwrap(),
        TimeGrid::new(&s, vec![1.0, 0.7, 0.69, 0.2, 0.05, s.t_min]).unwrap(),
    ] {
        let mut ev = AnalyticEvaluator::new(dist.clone(), s);
        let a = sample(&mut ev, &s, &grid, &x, SamplerKind::Ddim).unwrap();
        let b = sample(&mut ev, &s, &grid, &x, SamplerKind::Dpm1).unwrap();
        for (u, v) in a.states.iter().zip(&b.states) {
            assert!(u.max_abs_diff(v).unwrap() < 1e-10);
        }
    }
}

#[test]
fn twenty_step_dpm2_reproduces_the_mixture() {
    let s = NoiseSchedule::default();
    let dist = ToyDistribution::circle(8, 4.0, 0.3).unwrap();
    let x = standard_normal(2000, 2, &mut rng_from_seed(3));
    let grid = TimeGrid::uniform_lambda(&s, 20).unwrap();
    let traj = sample(&mut AnalyticEvaluator::new(dist.clone(), s), &s, &grid, &x, SamplerKind::Dpm2).unwrap();
    let data = dist.sample(2000, &mut rng_from_seed(4));
    let d = energy_distance(traj.endpoint(), &data).unwrap();
    assert!(d < 0.05, "energy distance {d}");
}

#[test]
fn evaluation_counts_match_the_solver() {
    let s = NoiseSchedule::default();
    let dist = ToyDistribution::standard_normal(2);
    let x = standard_normal(4, 2, &mut rng_from_seed(0));
    let grid = TimeGrid::uniform_lambda(&s, 10).unwrap();
    for (kind, calls) in [(SamplerKind::Dpm1, 10), (SamplerKind::Dpm2, 20), (SamplerKind::Plms { max_order: 4 }, 10)] {
        let mut ev = Counting::new(AnalyticEvaluator::new(dist.clone(), s));
        sample(&mut ev, &s, &grid, &x, kind).unwrap();
        assert_eq!(ev.calls, calls, "{}", kind.label());
    }
}
