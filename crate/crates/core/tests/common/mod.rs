//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use saq_core::diffusion::NoiseSchedule;
use saq_core::Tensor;

/// Exact probability-flow transport of `N(mu, c^2 I)` data: the standardised
/// coordinate `(x - alpha mu) / sqrt(alpha^2 c^2 + sigma^2)` is conserved.
pub fn gaussian_transport(s: &NoiseSchedule, mu: &[f64], c: f64, x: &Tensor, t_from: f64, t_to: f64) -> Tensor {
    let v = |t: f64| (s.alpha(t).powi(2) * c * c + s.sigma(t).powi(2)).sqrt();
    let (a0, a1) = (s.alpha(t_from), s.alpha(t_to));
    let ratio = v(t_to) / v(t_from);
    let d = mu.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, &xi)| {
            let m = mu[k % d];
            a1 * m + ratio * (xi - a0 * m)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub fn rms_diff(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    (a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

/// Adaptive Simpson quadrature.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, m: f64, fm: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1) + rec(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    rec(f, a, fa, b, fb, m, fm, whole, tol, 50)
}

/// Max relative error between reverse-mode gradients of `<f(x, t), c>` and
/// central differences with step `1e-5`, over `probes` random coordinates
/// drawn from weights, biases, adapter factors and inputs. Denominators are
/// floored at `1e-7` so that vanishing gradients compare absolutely.
pub fn gradient_check(probes: usize, seed: u64) -> (f64, [usize; 5]) {
    use rand::Rng;
    use saq_core::net::{backward, forward_times, LoRAAdapter, NetConfig, Parameters};
    use saq_core::rng::{rng_from_seed, standard_normal};

    let mut rng = rng_from_seed(seed);
    let config = NetConfig {
        input_dim: 2,
        hidden_widths: vec![16, 12],
        time_embed_dim: 6,
    };
    let params = Parameters::init(&config, 1.0, &mut rng).unwrap();
    let mut adapter = LoRAAdapter::new(&params, 4, &mut rng);
    for l in adapter.layers.iter_mut().flatten() {
        let n = l.b.len();
        let b = standard_normal(1, n, &mut rng);
        l.b.data_mut().copy_from_slice(&b.data().iter().map(|v| 0.3 * v).collect::<Vec<_>>());
    }
    let x = standard_normal(5, 2, &mut rng);
    let times: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
    let c = standard_normal(5, 2, &mut rng);
    let grads = backward(&params, Some(&adapter), &x, &times, &c).unwrap();
    let adapter_grads = grads.adapter.clone().unwrap();

    let loss = |p: &Parameters, a: &LoRAAdapter, x: &Tensor| -> f64 {
        let y = forward_times(p, Some(a), x, &times).unwrap();
        y.data().iter().zip(c.data()).map(|(u, v)| u * v).sum()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut counts = [0usize; 5];
    for _ in 0..probes {
        let kind = rng.gen_range(0..5);
        counts[kind] += 1;
        let layer = rng.gen_range(0..params.depth());
        let (mut p_plus, mut p_minus) = (params.clone(), params.clone());
        let (mut a_plus, mut a_minus) = (adapter.clone(), adapter.clone());
        let (mut x_plus, mut x_minus) = (x.clone(), x.clone());
        let analytic = match kind {
            0 => {
                let i = rng.gen_range(0..params.layers[layer].weight.len());
                p_plus.layers[layer].weight.data_mut()[i] += h;
                p_minus.layers[layer].weight.data_mut()[i] -= h;
                grads.layers[layer].weight[i]
            }
            1 => {
                let i = rng.gen_range(0..params.layers[layer].bias.len());
                p_plus.layers[layer].bias.data_mut()[i] += h;
                p_minus.layers[layer].bias.data_mut()[i] -= h;
                grads.layers[layer].bias[i]
            }
            2 => {
                let i = rng.gen_range(0..adapter.layers[layer].as_ref().unwrap().a.len());
                a_plus.layers[layer].as_mut().unwrap().a.data_mut()[i] += h;
                a_minus.layers[layer].as_mut().unwrap().a.data_mut()[i] -= h;
                adapter_grads[layer].as_ref().unwrap().0[i]
            }
            3 => {
                let i = rng.gen_range(0..adapter.layers[layer].as_ref().unwrap().b.len());
                a_plus.layers[layer].as_mut().unwrap().b.data_mut()[i] += h;
                a_minus.layers[layer].as_mut().unwrap().b.data_mut()[i] -= h;
                adapter_grads[layer].as_ref().unwrap().1[i]
            }
            _ => {
                let i = rng.gen_range(0..x.len());
                x_plus.data_mut()[i] += h;
                x_minus.data_mut()[i] -= h;
                grads.input.data()[i]
            }
        };
        let fd = (loss(&p_plus, &a_plus, &x_plus) - loss(&p_minus, &a_minus, &x_minus)) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    (worst, counts)
}
