//! Numerical checks of the error-accumulation theory for quantized samplers:
//! the cumulative quantization-error bound, its incomplete-gamma form, the
//! midpoint/Taylor equivalence behind DPM-Solver-2, and measured scaling laws
//! of perturbed samplers.

mod scaling;
mod taylor;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SeededRng};
use crate::samplers::DirectionalEvaluator;
use crate::tensor::Tensor;

pub use scaling::{
    fit_scaling_laws, gaussian_flow_map, order_sensitivity, ErrorReport, HSweepPoint, OrderComparison,
    ScalingConfig, SweepPoint, StepRecord,
};
pub use taylor::{midpoint_vs_taylor, TaylorComparison, FD_STEP};

fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Lower incomplete gamma `gamma(n + 1, x) = integral_0^x e^-u u^n du` for integer `n`.
///
/// Uses the closed form `n! (1 - e^-x sum_{m<=n} x^m / m!)`. Below `x = n + 1`
/// the bracket is evaluated through its equivalent tail
/// `e^-x sum_{m>n} x^m / m!`, which avoids cancelling against 1.
pub fn lower_incomplete_gamma(n: u32, x: f64) -> f64 {
    assert!(x >= 0.0, "lower_incomplete_gamma needs x >= 0, got {x}");
    if x == 0.0 {
        return 0.0;
    }
    let nf = factorial(n);
    if x < (n + 1) as f64 {
        // term_m = x^m / m! for m = n+1, n+2, ...
        let mut term = x.powi(n as i32 + 1) / factorial(n + 1);
        let mut sum = 0.0;
        let mut m = n + 1;
        while term > sum * 1e-17 {
            sum += term;
            m += 1;
            term *= x / m as f64;
        }
        nf * (-x).exp() * sum
    } else {
        let mut term = 1.0;
        let mut partial = 1.0;
        for m in 1..=n {
            term *= x / m as f64;
            partial += term;
        }
        nf * (1.0 - (-x).exp() * partial)
    }
}

/// Small-`x` approximation `gamma(n + 1, x) ~ x^(n+1) / (n + 1)`.
pub fn gamma_small_x_approx(n: u32, x: f64) -> f64 {
    x.powi(n as i32 + 1) / (n + 1) as f64
}

/// Inputs to the cumulative quantization-error bound over one interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// Sup bound on the per-evaluation perturbation.
    pub delta: f64,
    /// Number of expansion terms.
    pub k: u32,
    pub lambda_s: f64,
    pub lambda_t: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.k < 1 {
            return Err(Error::InvalidArgument("expansion order k must be >= 1".into()));
        }
        if !(self.lambda_t > self.lambda_s) {
            return Err(Error::InvalidArgument(format!(
                "need lambda_t > lambda_s, got {} and {}",
                self.lambda_t, self.lambda_s
            )));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        self.lambda_t - self.lambda_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    /// `a_n = delta e^-lambda_s h^(n+1) / (n+1)!` for `n = 0..k`.
    pub terms: Vec<f64>,
    pub total: f64,
}

/// `delta e^-lambda_s sum_{n<k} h^(n+1) / (n+1)!`.
pub fn quant_error_bound(p: &BoundParams) -> Result<Bound> {
    p.validate()?;
    let h = p.h();
    let mut terms = Vec::with_capacity(p.k as usize);
    let mut a = p.delta * (-p.lambda_s).exp() * h;
    for n in 0..p.k {
        if n > 0 {
            a *= h / (n + 1) as f64;
        }
        terms.push(a);
    }
    let total = terms.iter().sum();
    Ok(Bound { terms, total })
}

/// The `k -> infinity` limit `delta e^-lambda_s (e^h - 1)`.
pub fn quant_error_bound_limit(p: &BoundParams) -> Result<f64> {
    p.validate()?;
    Ok(p.delta * (-p.lambda_s).exp() * p.h().exp_m1())
}

/// Adds independent `U[-delta, delta]` noise to every coordinate of every
/// output of `base`. The stream is a pure function of the seed and the call
/// sequence; `delta = 0` returns the base output untouched.
pub struct PerturbedEvaluator<E> {
    pub base: E,
    pub delta: f64,
    rng: SeededRng,
    unit: Uniform<f64>,
    sup_log: Vec<f64>,
}

pub fn perturbed_evaluator<E: DirectionalEvaluator>(base: E, delta: f64, seed: u64) -> Result<PerturbedEvaluator<E>> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta must be >= 0, got {delta}")));
    }
    Ok(PerturbedEvaluator {
        base,
        delta,
        rng: rng_from_seed(seed),
        unit: Uniform::new_inclusive(-1.0, 1.0),
        sup_log: Vec::new(),
    })
}

impl<E> PerturbedEvaluator<E> {
    /// Sup-norm of the perturbation added by each call since the last drain.
    pub fn drain_sups(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.sup_log)
    }
}

impl<E: DirectionalEvaluator> DirectionalEvaluator for PerturbedEvaluator<E> {
    fn evaluate(&mut self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut out = self.base.evaluate(x, t)?;
        if self.delta == 0.0 {
            self.sup_log.push(0.0);
            return Ok(out);
        }
        let mut sup = 0.0f64;
        for v in out.data_mut() {
            // Scaling a unit draw keeps the noise exactly linear in delta.
            let n = self.delta * self.unit.sample(&mut self.rng);
            sup = sup.max(n.abs());
            *v += n;
        }
        self.sup_log.push(sup);
        Ok(out)
    }
}

/// Least-squares line through `(ln x, ln y)` with a 95% interval on the slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

/// Two-sided 97.5% Student-t quantiles for 1..=30 degrees of freedom.
const T_975: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
    2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
];

pub fn fit_loglog(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} abscissae vs {} ordinates", x.len(), y.len())));
    }
    if x.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "slope fits need at least 4 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Domain("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("log-log fit needs distinct abscissae".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let dof = lx.len() - 2;
    let se = (rss / dof as f64 / sxx).sqrt();
    let q = T_975.get(dof - 1).copied().unwrap_or(1.96);
    Ok(SlopeFit {
        slope,
        intercept,
        ci_low: slope - q * se,
        ci_high: slope + q * se,
        points: lx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::FnEvaluator;

    #[test]
    fn gamma_examples() {
        assert!((lower_incomplete_gamma(0, 0.01) - 0.009_950_166_250_831_947).abs() < 1e-16);
        for n in 0..6 {
            assert_eq!(lower_incomplete_gamma(n, 0.0), 0.0);
            assert_eq!(gamma_small_x_approx(n, 0.0), 0.0);
        }
        let want = 2.0 * (1.0 - (-5.0f64).exp() * 18.5);
        assert!((lower_incomplete_gamma(2, 5.0) - want).abs() < 1e-14);
    }

    #[test]
    fn gamma_branches_agree_at_the_switch() {
        for n in 0..8u32 {
            let x = (n + 1) as f64;
            let below = lower_incomplete_gamma(n, x * (1.0 - 1e-12));
            let above = lower_incomplete_gamma(n, x);
            assert!((below - above).abs() <= 1e-10 * above, "n={n}: {below} vs {above}");
        }
    }

    #[test]
    fn small_x_approximation_error() {
        let exact = lower_incomplete_gamma(0, 0.01);
        let rel = (gamma_small_x_approx(0, 0.01) - exact).abs() / exact;
        assert!((rel - 0.005).abs() < 2e-4, "{rel}");
    }

    #[test]
    fn bound_terms() {
        let p = BoundParams {
            delta: 0.3,
            k: 6,
            lambda_s: -1.0,
            lambda_t: -0.6,
        };
        let b = quant_error_bound(&p).unwrap();
        assert_eq!(b.terms.len(), 6);
        for n in 1..6 {
            let ratio = b.terms[n] / b.terms[n - 1];
            let want = p.h() / (n + 1) as f64;
            assert!((ratio - want).abs() <= 4.0 * f64::EPSILON * want);
        }
        let zero = quant_error_bound(&BoundParams { delta: 0.0, ..p }).unwrap();
        assert_eq!(zero.total, 0.0);
        let long = quant_error_bound(&BoundParams { k: 40, ..p }).unwrap();
        assert!((long.total - quant_error_bound_limit(&p).unwrap()).abs() < 1e-12);
        assert!(quant_error_bound(&BoundParams { k: 0, ..p }).is_err());
        assert!(quant_error_bound(&BoundParams { lambda_t: -1.0, ..p }).is_err());
    }

    fn base() -> FnEvaluator<impl FnMut(&Tensor, f64) -> Result<Tensor>> {
        FnEvaluator(|x: &Tensor, t: f64| Ok(x.map(|v| v * t)))
    }

    #[test]
    fn zero_delta_is_bitwise_identity() {
        let x = Tensor::matrix(2, 2, vec![-0.0, 1.5, 2.0, -3.0]);
        let mut p = perturbed_evaluator(base(), 0.0, 9).unwrap();
        let y = p.evaluate(&x, 0.5).unwrap();
        let want = x.map(|v| v * 0.5);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&y), bits(&want));
    }

    #[test]
    fn perturbation_is_bounded_and_seeded() {
        let x = Tensor::matrix(100, 2, (0..200).map(|i| i as f64 * 0.01).collect());
        let delta = 0.25;
        let mut p = perturbed_evaluator(base(), delta, 3).unwrap();
        let mut q = perturbed_evaluator(base(), delta, 3).unwrap();
        let want = x.map(|v| v * 0.7);
        for _ in 0..50 {
            let a = p.evaluate(&x, 0.7).unwrap();
            let b = q.evaluate(&x, 0.7).unwrap();
            assert_eq!(a, b);
            assert!(a.max_abs_diff(&want).unwrap() <= delta);
        }
        assert!(perturbed_evaluator(base(), -1.0, 0).is_err());
    }

    #[test]
    fn loglog_fit_recovers_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0, 16.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        let f = fit_loglog(&x, &y).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(f.ci_high - f.ci_low < 1e-9);
        assert!(fit_loglog(&x[..3], &y[..3]).is_err());
        assert!(fit_loglog(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 1.0, 1.0]).is_err());
    }
}
