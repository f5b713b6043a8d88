//! Midpoint RK2 against the explicit second-order Taylor step on the
//! simplified flow `dx/dlambda = eps(x, t_lambda(lambda))`.

use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::samplers::DirectionalEvaluator;
use crate::tensor::Tensor;

/// Central-difference step for the partial derivatives of `eps`.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorComparison {
    pub rk2: Tensor,
    pub taylor2: Tensor,
    /// Max-abs difference of the two updates.
    pub discrepancy: f64,
}

fn eps_at(eval: &mut dyn DirectionalEvaluator, schedule: &NoiseSchedule, x: &Tensor, lambda: f64) -> Result<Tensor> {
    let t = schedule.t_of_lambda(lambda)?;
    eval.evaluate(x, t)
}

/// One step of size `h` from `(x, lambda)` by the midpoint rule and by
/// `x + h eps + h^2/2 (d eps/d lambda + (d eps/d x) eps)`.
pub fn midpoint_vs_taylor(
    eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    x: &Tensor,
    lambda: f64,
    h: f64,
) -> Result<TaylorComparison> {
    x.check_finite()?;
    if h == 0.0 {
        return Ok(TaylorComparison {
            rk2: x.clone(),
            taylor2: x.clone(),
            discrepancy: 0.0,
        });
    }
    let k1 = eps_at(eval, schedule, x, lambda)?;
    let mid = x.axpby(1.0, &k1, 0.5 * h)?;
    let k2 = eps_at(eval, schedule, &mid, lambda + 0.5 * h)?;
    let rk2 = x.axpby(1.0, &k2, h)?;

    let eta = FD_STEP;
    let up = eps_at(eval, schedule, x, lambda + eta)?;
    let down = eps_at(eval, schedule, x, lambda - eta)?;
    let mut second = up.axpby(0.5 / eta, &down, -0.5 / eta)?;

    let cols = x.cols();
    for j in 0..cols {
        let shift = |sign: f64| {
            let mut y = x.clone();
            for r in 0..y.rows() {
                y.data_mut()[r * cols + j] += sign * eta;
            }
            y
        };
        let plus = eval.evaluate(&shift(1.0), schedule.t_of_lambda(lambda)?)?;
        let minus = eval.evaluate(&shift(-1.0), schedule.t_of_lambda(lambda)?)?;
        let data = second.data_mut();
        for r in 0..x.rows() {
            let kj = k1.data()[r * cols + j];
            for i in 0..cols {
                let d = (plus.data()[r * cols + i] - minus.data()[r * cols + i]) / (2.0 * eta);
                data[r * cols + i] += d * kj;
            }
        }
    }
    let taylor2 = x.axpby(1.0, &k1, h)?.axpby(1.0, &second, 0.5 * h * h)?;
    let discrepancy = rk2.max_abs_diff(&taylor2)?;
    Ok(TaylorComparison {
        rk2,
        taylor2,
        discrepancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::FnEvaluator;

    #[test]
    fn linear_autonomous_flow_has_no_discrepancy() {
        let s = NoiseSchedule::default();
        let mut lin = FnEvaluator(|x: &Tensor, _t: f64| {
            let mut out = x.clone();
            for r in 0..x.rows() {
                let (a, b) = (x.row(r)[0], x.row(r)[1]);
                out.data_mut()[2 * r] = -0.3 * a + 0.7 * b;
                out.data_mut()[2 * r + 1] = 0.2 * a - 0.5 * b;
            }
            Ok(out)
        });
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 0.25]);
        let c = midpoint_vs_taylor(&mut lin, &s, &x, 0.0, 0.1).unwrap();
        assert!(c.discrepancy < 1e-10, "{}", c.discrepancy);
    }

    #[test]
    fn zero_step_is_identity() {
        let s = NoiseSchedule::default();
        let mut e = FnEvaluator(|x: &Tensor, t: f64| Ok(x.map(|v| v.sin() * t)));
        let x = Tensor::matrix(1, 2, vec![0.3, -0.4]);
        let c = midpoint_vs_taylor(&mut e, &s, &x, 1.0, 0.0).unwrap();
        assert_eq!(c.rk2, x);
        assert_eq!(c.taylor2, x);
        assert_eq!(c.discrepancy, 0.0);
    }
}
