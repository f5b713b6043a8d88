use saq_core::diffusion::{NoiseSchedule, ToyDistribution};
use saq_core::net::train::{train_denoiser, TrainConfig};
use saq_core::net::{NetConfig, Parameters};
use saq_core::quant::QuantSpec;
use saq_core::samplers::{AnalyticEvaluator, NetEvaluator, TimeGrid};
use saq_core::saquant::*;
use saq_core::Tensor;

fn trained(seed: u64) -> Parameters {
    let s = NoiseSchedule::default();
    let data = ToyDistribution::circle(8, 4.0, 0.3).unwrap();
    let cfg = TrainConfig {
        steps: 4000,
        seed,
        ..TrainConfig::default()
    };
    train_denoiser(&NetConfig::default(), &data, &s, &cfg).unwrap().params
}

fn calibrated(p: &Parameters, bits: BitConfig, calib: &CalibrationSet) -> QuantModel {
    let mut qm = QuantModel::new(p.clone(), bits).unwrap();
    let pts: Vec<(&Tensor, &[f64])> = calib
        .pairs
        .iter()
        .map(|q| (&q.first.x, std::slice::from_ref(&q.first.t)))
        .collect();
    qm.calibrate_activations(&pts).unwrap();
    qm
}

/// Smallest `d^T C d` over all up/down roundings of one weight row, by
/// Gray-code enumeration of the `2^n` choices.
fn best_rounding(w: &[f64], spec: QuantSpec, c: &[f64]) -> (f64, f64) {
    let n = w.len();
    let quad = |d: &[f64]| -> f64 { (0..n).map(|i| (0..n).map(|j| d[i] * c[i * n + j] * d[j]).sum::<f64>()).sum() };
    let near: Vec<f64> = w.iter().map(|v| spec.fake_quant(*v) - v).collect();
    let mut d: Vec<f64> = w.iter().map(|v| spec.scale * (v / spec.scale).floor() - v).collect();
    let mut cd: Vec<f64> = (0..n).map(|i| (0..n).map(|j| c[i * n + j] * d[j]).sum()).collect();
    let mut cost = quad(&d);
    let mut best = cost;
    let mut up = vec![false; n];
    for k in 1u64..(1 << n) {
        let i = k.trailing_zeros() as usize;
        let step = if up[i] { -spec.scale } else { spec.scale };
        up[i] = !up[i];
        cost += 2.0 * step * cd[i] + step * step * c[i * n + i];
        for j in 0..n {
            cd[j] += c[j * n + i] * step;
        }
        d[i] += step;
        best = best.min(cost);
    }
    (quad(&near), best)
}

#[test]
fn eight_bit_reconstruction_reduces_layer_output_error() {
    let s = NoiseSchedule::default();
    let p = trained(0);
    // 16 chains over a 16-step grid: 256 calibration points.
    let grid = TimeGrid::uniform_lambda(&s, 16).unwrap();
    let calib = collect_dual_trajectories(&mut NetEvaluator::new(&p), &s, &grid, &[0], 16, 2)
        .unwrap()
        .same_point();
    assert_eq!(calib.rows(), 256);
    let mut qm = calibrated(&p, BitConfig { weight_bits: 8, act_bits: 8 }, &calib);
    qm.set_quantization(true, false);
    let before: Vec<f64> = (0..3).map(|l| layer_output_mse(&qm, l, &calib).unwrap()).collect();
    let cfg = ReconConfig {
        learn_act: false,
        ..ReconConfig::default()
    };
    let reports = ptq_all_layers(&mut qm, &calib, &cfg).unwrap();
    let after: Vec<f64> = (0..3).map(|l| layer_output_mse(&qm, l, &calib).unwrap()).collect();
    let reduction: Vec<f64> = before.iter().zip(&after).map(|(b, a)| 1.0 - a / b).collect();
    assert!(reports.iter().all(|r| r.accepted));
    for l in 1..3 {
        assert!(reduction[l] >= 0.5, "layer {l}: {reduction:?}");
    }

    // Layer 0 sees the raw sample and time embedding, whose 18 columns are
    // nearly collinear over 16 distinct times. The exact optimum over all
    // roundings caps its achievable reduction.
    let w = p.layers[0].weight.data();
    let fan_in = p.layers[0].weight.shape()[1];
    let mut c = vec![0.0; fan_in * fan_in];
    for q in &calib.pairs {
        let input = p.network_input(&q.first.x, &[q.first.t]).unwrap();
        for r in input.chunks(fan_in) {
            for i in 0..fan_in {
                for j in 0..fan_in {
                    c[i * fan_in + j] += r[i] * r[j] / 256.0;
                }
            }
        }
    }
    let (mut near, mut best) = (0.0, 0.0);
    for row in w.chunks(fan_in) {
        let (n, b) = best_rounding(row, qm.weight_specs[0], &c);
        near += n;
        best += b;
    }
    let ceiling = 1.0 - best / near;
    assert!(ceiling < 0.5, "optimum {ceiling}");
    assert!(reduction[0] > 0.6 * ceiling, "layer 0: {} vs optimum {ceiling}", reduction[0]);
}

#[test]
fn calibration_pairs_sit_strictly_inside_their_intervals() {
    let s = NoiseSchedule::default();
    let dist = ToyDistribution::circle(8, 4.0, 0.3).unwrap();
    let mut ev = AnalyticEvaluator::new(dist, s);
    for grid in [
        TimeGrid::uniform_lambda(&s, 20).unwrap(),
        TimeGrid::uniform_time(&s, 50).unwrap(),
        TimeGrid::uniform_lambda(&s, 100).unwrap(),
    ] {
        let calib = collect_dual_trajectories(&mut ev, &s, &grid, &[3, 4], 8, 2).unwrap();
        assert_eq!(calib.len(), 2 * grid.steps());
        calib.check_integrity().unwrap();
        for t in calib.times() {
            assert!(t.t_next < t.s && t.s < t.t_prev);
            let mid = 0.5 * (s.lambda(t.t_prev) + s.lambda(t.t_next));
            assert!((s.lambda(t.s) - mid).abs() < 1e-9);
        }
        for p in &calib.pairs {
            assert_eq!(p.first.x.shape(), p.second.x.shape());
        }
        calib.same_point().check_integrity().unwrap_err();
    }
}

#[test]
fn hardened_weights_follow_the_rounding_formula() {
    let s = NoiseSchedule::default();
    let p = trained(1);
    let grid = TimeGrid::uniform_lambda(&s, 10).unwrap();
    let calib = collect_dual_trajectories(&mut NetEvaluator::new(&p), &s, &grid, &[1], 16, 2).unwrap();
    let mut qm = calibrated(&p, BitConfig { weight_bits: 4, act_bits: 8 }, &calib);
    let cfg = ReconConfig {
        iterations: 200,
        ..ReconConfig::default()
    };
    let reports = ptq_all_layers(&mut qm, &calib, &cfg).unwrap();
    assert!(qm.soft_layer.is_none());
    for (l, r) in reports.iter().enumerate() {
        let spec = qm.weight_specs[l];
        let (sc, z, qmax) = (spec.scale, spec.zero_point as f64, spec.qmax() as f64);
        let eff = qm.effective_weight(l);
        for ((w, m), e) in p.layers[l].weight.data().iter().zip(&qm.masks[l]).zip(&eff) {
            let h = if *m { 1.0 } else { 0.0 };
            let expect = sc * (((w / sc).floor() + h + z).clamp(0.0, qmax) - z);
            assert_eq!(*e, expect);
            assert!((e - w).abs() <= sc * (1.0 + 1e-12) || *e == sc * -z || *e == sc * (qmax - z));
        }
        if r.accepted {
            let hard: Vec<bool> = qm.soft_offsets(l).iter().map(|h| *h >= 0.5).collect();
            assert_eq!(hard, qm.masks[l], "layer {l}");
        }
    }
}
