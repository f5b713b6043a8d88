//! Denoising score-matching training of the noise network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::{backward, forward_times, NetConfig, Parameters};
use crate::diffusion::{NoiseSchedule, ToyDistribution};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, standard_normal, SeededRng};
use crate::tensor::Tensor;

pub trait DataSource {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, rng: &mut SeededRng) -> Tensor;
}

impl DataSource for ToyDistribution {
    fn dim(&self) -> usize {
        ToyDistribution::dim(self)
    }

    fn sample(&self, n: usize, rng: &mut SeededRng) -> Tensor {
        ToyDistribution::sample(self, n, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    /// Mini-batch loss at every step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean of the last `window` mini-batch losses.
    pub fn tail_loss(&self, window: usize) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let w = window.min(self.losses.len()).max(1);
        let tail = &self.losses[self.losses.len() - w..];
        Some(tail.iter().sum::<f64>() / w as f64)
    }

    /// Means over consecutive non-overlapping windows.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// One batch of `(x_t, t, eps)` with `t ~ U[t_min, T]`.
pub fn draw_batch(
    data: &dyn DataSource,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut SeededRng,
) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let x0 = data.sample(n, rng);
    let eps = standard_normal(n, data.dim(), rng);
    let times: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(schedule.t_min..=schedule.t_end))
        .collect();
    let d = data.dim();
    let mut xt = Vec::with_capacity(n * d);
    for (r, &t) in times.iter().enumerate() {
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        for j in 0..d {
            xt.push(a * x0.row(r)[j] + s * eps.row(r)[j]);
        }
    }
    Ok((Tensor::matrix(n, d, xt), times, eps))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(u, v)| (u - v).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// Adam on the per-coordinate mean squared noise-prediction error.
pub fn train_denoiser(
    config: &NetConfig,
    data: &dyn DataSource,
    schedule: &NoiseSchedule,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.dim() != config.input_dim {
        return Err(Error::Shape(format!(
            "data dimension {} vs network input {}",
            data.dim(),
            config.input_dim
        )));
    }
    let mut rng = rng_from_seed(train.seed);
    let mut params = Parameters::init(config, schedule.t_end, &mut rng)?;
    let mut opt = Adam::for_slices(train.adam, &params.slices_mut());
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let (xt, times, eps) = draw_batch(data, schedule, train.batch_size, &mut rng)?;
        let pred = forward_times(&params, None, &xt, &times)?;
        let loss = mse(&pred, &eps);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        losses.push(loss);
        let scale = 2.0 / pred.len() as f64;
        let upstream = pred.axpby(scale, &eps, -scale)?;
        let grads = backward(&params, None, &xt, &times, &upstream)?;
        opt.step(params.slices_mut(), &grads.param_slices());
    }
    params.check_finite()?;
    Ok(TrainOutcome { params, losses })
}

/// Monte-Carlo estimate of the training objective for fixed parameters.
pub fn denoising_loss(
    params: &Parameters,
    data: &dyn DataSource,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let (xt, times, eps) = draw_batch(data, schedule, n, rng)?;
    let pred = forward_times(params, None, &xt, &times)?;
    Ok(mse(&pred, &eps))
}

/// Monte-Carlo estimate of the irreducible loss `E |eps - eps*(x_t, t)|^2 / d`.
pub fn loss_floor(dist: &ToyDistribution, schedule: &NoiseSchedule, n: usize, rng: &mut SeededRng) -> Result<f64> {
    let (xt, times, eps) = draw_batch(dist, schedule, n, rng)?;
    let d = dist.dim();
    let mut acc = 0.0;
    for r in 0..n {
        let row = Tensor::matrix(1, d, xt.row(r).to_vec());
        let best = dist.analytic_epsilon(schedule, &row, times[r])?;
        acc += best
            .data()
            .iter()
            .zip(eps.row(r))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(acc / (n * d) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_returns_initialisation() {
        let cfg = NetConfig::default();
        let data = ToyDistribution::standard_normal(2);
        let sched = NoiseSchedule::default();
        let tc = TrainConfig {
            steps: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = train_denoiser(&cfg, &data, &sched, &tc).unwrap();
        let init = Parameters::init(&cfg, 1.0, &mut rng_from_seed(9)).unwrap();
        assert_eq!(out.params, init);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn same_seed_same_bits() {
        let cfg = NetConfig {
            hidden_widths: vec![16, 16],
            ..NetConfig::default()
        };
        let data = ToyDistribution::circle(4, 2.0, 0.3).unwrap();
        let sched = NoiseSchedule::default();
        let tc = TrainConfig {
            steps: 50,
            batch_size: 32,
            seed: 1,
            ..TrainConfig::default()
        };
        let a = train_denoiser(&cfg, &data, &sched, &tc).unwrap();
        let b = train_denoiser(&cfg, &data, &sched, &tc).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = NetConfig::default();
        let data = ToyDistribution::standard_normal(3);
        let r = train_denoiser(&cfg, &data, &NoiseSchedule::default(), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn huge_learning_rate_reports_divergence_step() {
        let cfg = NetConfig::default();
        let data = ToyDistribution::gaussian(vec![1e200, 0.0], 1.0).unwrap();
        let tc = TrainConfig {
            steps: 20,
            ..TrainConfig::default()
        };
        let r = train_denoiser(&cfg, &data, &NoiseSchedule::default(), &tc);
        assert!(matches!(r, Err(Error::TrainingDiverged { step: 0 })), "{r:?}");
    }
}
