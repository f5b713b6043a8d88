//! Variance-preserving noise schedule, toy Gaussian-mixture data and the
//! closed-form optimal noise predictor for such data.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Continuous VP schedule with linear `beta(t) = beta_min + t (beta_max - beta_min)`,
/// so `log alpha(t) = -t^2 (beta_max - beta_min) / 4 - t beta_min / 2` and
/// `sigma(t) = sqrt(1 - alpha(t)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Final time `T`.
    pub t_end: f64,
    /// Sampling grids stop here instead of at 0, where `lambda` diverges.
    pub t_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            t_end: 1.0,
            t_min: 1e-4,
        }
    }
}

/// Bisection tolerance on `|lambda(t) - target|`.
const LAMBDA_TOL: f64 = 1e-13;
const MAX_BISECTION: usize = 200;

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_min > 0.0
            && self.beta_max >= self.beta_min
            && self.t_end > 0.0
            && self.t_min > 0.0
            && self.t_min < self.t_end
            && [self.beta_min, self.beta_max, self.t_end, self.t_min]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise schedule {self:?}")))
        }
    }

    pub fn log_alpha(&self, t: f64) -> f64 {
        -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.log_alpha(t).exp()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        (-(2.0 * self.log_alpha(t)).exp_m1()).sqrt()
    }

    /// `log(alpha / sigma)` without domain checks.
    pub fn lambda(&self, t: f64) -> f64 {
        let la = self.log_alpha(t);
        la - 0.5 * (-(2.0 * la).exp_m1()).ln()
    }

    pub fn lambda_of_t(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= self.t_end) {
            return Err(Error::Domain(format!(
                "t = {t} outside (0, {}]",
                self.t_end
            )));
        }
        Ok(self.lambda(t))
    }

    pub fn lambda_range(&self) -> (f64, f64) {
        (self.lambda(self.t_end), self.lambda(self.t_min))
    }

    pub fn t_of_lambda(&self, lambda: f64) -> Result<f64> {
        self.t_of_lambda_counted(lambda).map(|(t, _)| t)
    }

    /// Bisection inverse of `lambda(t)` on `[t_min, T]`; also returns the
    /// number of iterations used.
    pub fn t_of_lambda_counted(&self, lambda: f64) -> Result<(f64, usize)> {
        let (lo_l, hi_l) = self.lambda_range();
        if !(lambda >= lo_l && lambda <= hi_l) {
            return Err(Error::Domain(format!(
                "lambda = {lambda} outside [{lo_l}, {hi_l}]"
            )));
        }
        if lambda == lo_l {
            return Ok((self.t_end, 0));
        }
        if lambda == hi_l {
            return Ok((self.t_min, 0));
        }
        // Bisect in log t, where lambda is close to linear over the whole range.
        // lambda is decreasing: lambda(lo) > target > lambda(hi).
        let (mut lo, mut hi) = (self.t_min.ln(), self.t_end.ln());
        let mut mid = 0.5 * (lo + hi);
        for it in 1..=MAX_BISECTION {
            mid = 0.5 * (lo + hi);
            let r = self.lambda(mid.exp()) - lambda;
            if r.abs() <= LAMBDA_TOL {
                return Ok((mid.exp(), it));
            }
            if r > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1.0) {
                return Ok((mid.exp(), it));
            }
        }
        Ok((mid.exp(), MAX_BISECTION))
    }

    /// `alpha_t x0 + sigma_t eps`.
    pub fn forward_sample(&self, x0: &Tensor, t: f64, noise: &Tensor) -> Result<Tensor> {
        x0.axpby(self.alpha(t), noise, self.sigma(t))
    }
}

/// Isotropic Gaussian mixture `sum_k w_k N(mu_k, c_k^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDistribution {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl ToyDistribution {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        let d = Self {
            weights,
            means,
            stds,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(Error::Config(
                "mixture needs matching, non-empty weights/means/stds".into(),
            ));
        }
        let dim = self.means[0].len();
        if dim == 0 || self.means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share one dimension".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("mixture weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        if self.stds.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("mixture stds must be positive".into()));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("mixture means must be finite".into()));
        }
        Ok(())
    }

    pub fn gaussian(mean: Vec<f64>, std: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![std])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("standard normal is valid")
    }

    /// `k` equally weighted 2-d components evenly spaced on a circle.
    pub fn circle(k: usize, radius: f64, std: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("circle mixture needs at least one mode".into()));
        }
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        let weights = vec![1.0 / k as f64; k];
        // 1/k summed k times can miss 1 by an ulp; absorb it in the last weight.
        let mut weights = weights;
        let s: f64 = weights[..k - 1].iter().sum();
        weights[k - 1] = 1.0 - s;
        Self::new(weights, means, vec![std; k])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut k = self.weights.len() - 1;
            let mut acc = 0.0;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                data.push(self.means[k][j] + self.stds[k] * z);
            }
        }
        Tensor::matrix(n, d, data)
    }

    /// Optimal noise prediction `-sigma_t * grad log p_t(x)` for the
    /// diffused mixture `p_t = sum_k w_k N(alpha_t mu_k, (alpha_t^2 c_k^2 + sigma_t^2) I)`.
    pub fn analytic_epsilon(&self, schedule: &NoiseSchedule, x: &Tensor, t: f64) -> Result<Tensor> {
        let d = self.dim();
        if x.cols() != d || x.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "expected rows of dimension {d}, got shape {:?}",
                x.shape()
            )));
        }
        if !(t > 0.0 && t <= schedule.t_end) {
            return Err(Error::Domain(format!("t = {t} outside (0, T]")));
        }
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let k = self.weights.len();
        let vars: Vec<f64> = self.stds.iter().map(|c| a * a * c * c + s * s).collect();
        let mut out = Vec::with_capacity(x.len());
        let mut logits = vec![0.0; k];
        for row in 0..x.rows() {
            let xr = x.row(row);
            for c in 0..k {
                let sq: f64 = xr
                    .iter()
                    .zip(&self.means[c])
                    .map(|(xi, mi)| (xi - a * mi).powi(2))
                    .sum();
                logits[c] = self.weights[c].ln() - 0.5 * d as f64 * vars[c].ln() - 0.5 * sq / vars[c];
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..d {
                let mut e = 0.0;
                for c in 0..k {
                    let r = (logits[c] - m).exp() / z;
                    if r > 0.0 {
                        e += r * (xr[j] - a * self.means[c][j]) / vars[c];
                    }
                }
                out.push(s * e);
            }
        }
        Ok(Tensor::matrix(x.rows(), d, out))
    }
}
