use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{stage_rng, standard_normal};
use crate::samplers::{sample, DirectionalEvaluator, SamplerKind, TimeGrid};
use crate::tensor::Tensor;

/// A batch of network inputs at one time, with the full-precision prediction there.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibPoint {
    pub x: Tensor,
    pub t: f64,
    pub eps: Tensor,
}

/// One sampler interval `(t_i, t_{i-1})`: the first-order point
/// `(x_{t_{i-1}}, t_{i-1})` and the second-order intermediate point `(u_i, s_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibPair {
    pub seed: u64,
    pub step: usize,
    pub first: CalibPoint,
    pub second: CalibPoint,
    /// End of the interval, `t_i`.
    pub t_next: f64,
    /// Reserved for conditional models; always `None` here.
    pub cond: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationSet {
    pub pairs: Vec<CalibPair>,
}

/// Time stamps of a pair, for logging and integrity checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTimes {
    pub t_prev: f64,
    pub s: f64,
    pub t_next: f64,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.pairs.iter().map(|p| p.first.x.rows()).sum()
    }

    /// Degenerate copy where both records of every pair are the first-order point.
    pub fn same_point(&self) -> CalibrationSet {
        CalibrationSet {
            pairs: self
                .pairs
                .iter()
                .map(|p| CalibPair {
                    second: p.first.clone(),
                    ..p.clone()
                })
                .collect(),
        }
    }

    pub fn times(&self) -> Vec<PairTimes> {
        self.pairs
            .iter()
            .map(|p| PairTimes {
                t_prev: p.first.t,
                s: p.second.t,
                t_next: p.t_next,
            })
            .collect()
    }

    /// Every intermediate time lies strictly inside its interval.
    pub fn check_integrity(&self) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            if !(p.t_next < p.second.t && p.second.t < p.first.t) {
                return Err(Error::InvalidArgument(format!(
                    "pair {i}: intermediate time {} not inside ({}, {})",
                    p.second.t, p.t_next, p.first.t
                )));
            }
        }
        Ok(())
    }
}

/// Runs DPM-Solver-1 and DPM-Solver-2 from the same `x_T` for each seed and
/// pairs the first-order input of every interval with the second-order
/// intermediate point of the same interval. Diverged seeds are skipped.
pub fn collect_dual_trajectories(
    fp_eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    seeds: &[u64],
    chains: usize,
    dim: usize,
) -> Result<CalibrationSet> {
    if chains == 0 || dim == 0 {
        return Err(Error::InvalidArgument("calibration needs chains and dimension > 0".into()));
    }
    let mut pairs = Vec::new();
    for &seed in seeds {
        let x_t = standard_normal(chains, dim, &mut stage_rng(seed, "calibration/x_T", 0));
        let first = sample(fp_eval, schedule, grid, &x_t, SamplerKind::Dpm1)?;
        let second = sample(fp_eval, schedule, grid, &x_t, SamplerKind::Dpm2)?;
        if !first.is_complete() || !second.is_complete() {
            log::warn!("calibration seed {seed} diverged; skipped");
            continue;
        }
        for (i, (ev, inter)) in first.evals.iter().zip(&second.intermediates).enumerate() {
            let inter = inter.as_ref().expect("order-2 steps record intermediates");
            pairs.push(CalibPair {
                seed,
                step: i + 1,
                first: CalibPoint {
                    x: ev.input.clone(),
                    t: ev.t,
                    eps: ev.output.clone(),
                },
                second: CalibPoint {
                    x: inter.u.clone(),
                    t: inter.s,
                    eps: inter.eps.clone(),
                },
                t_next: grid.times()[i + 1],
                cond: None,
            });
        }
    }
    Ok(CalibrationSet { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ToyDistribution;
    use crate::samplers::AnalyticEvaluator;

    #[test]
    fn one_seed_gives_one_pair_per_step() {
        let s = NoiseSchedule::default();
        let mut ev = AnalyticEvaluator::new(ToyDistribution::circle(8, 4.0, 0.3).unwrap(), s);
        let grid = TimeGrid::uniform_lambda(&s, 12).unwrap();
        let c = collect_dual_trajectories(&mut ev, &s, &grid, &[7], 5, 2).unwrap();
        assert_eq!(c.len(), 12);
        c.check_integrity().unwrap();
        for (p, w) in c.pairs.iter().zip(grid.times().windows(2)) {
            let mid = 0.5 * (s.lambda(w[0]) + s.lambda(w[1]));
            assert!((s.lambda(p.second.t) - mid).abs() < 1e-9);
            assert_eq!(p.first.t, w[0]);
        }
        let first_x = &c.pairs[0].first.x;
        let x_t = standard_normal(5, 2, &mut stage_rng(7, "calibration/x_T", 0));
        assert_eq!(first_x, &x_t);
        assert!(c.same_point().check_integrity().is_err());
    }
}
