use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// Equal steps in log-SNR.
    UniformLambda,
    /// Equal steps in time.
    UniformTime,
}

/// Strictly decreasing times `t_0 = T > t_1 > ... > t_M = t_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(schedule: &NoiseSchedule, times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidArgument("a grid needs at least two times".into()));
        }
        if times[0] != schedule.t_end || *times.last().unwrap() != schedule.t_min {
            return Err(Error::InvalidArgument(format!(
                "grid must run from T = {} to t_min = {}",
                schedule.t_end, schedule.t_min
            )));
        }
        if times.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidArgument("grid times must strictly decrease".into()));
        }
        Ok(Self { times })
    }

    pub fn build(schedule: &NoiseSchedule, steps: usize, spacing: Spacing) -> Result<Self> {
        match spacing {
            Spacing::UniformLambda => Self::uniform_lambda(schedule, steps),
            Spacing::UniformTime => Self::uniform_time(schedule, steps),
        }
    }

    pub fn uniform_lambda(schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        let (l_start, l_end) = schedule.lambda_range();
        let mut times = Vec::with_capacity(steps + 1);
        times.push(schedule.t_end);
        for i in 1..steps {
            let l = l_start + (l_end - l_start) * i as f64 / steps as f64;
            times.push(schedule.t_of_lambda(l)?);
        }
        times.push(schedule.t_min);
        Self::new(schedule, times)
    }

    pub fn uniform_time(schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        let (a, b) = (schedule.t_end, schedule.t_min);
        let mut times: Vec<f64> = (0..steps)
            .map(|i| a + (b - a) * i as f64 / steps as f64)
            .collect();
        times.push(b);
        Self::new(schedule, times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn lambdas(&self, schedule: &NoiseSchedule) -> Vec<f64> {
        self.times.iter().map(|&t| schedule.lambda(t)).collect()
    }

    /// Step sizes `h_i = lambda(t_i) - lambda(t_{i-1})`.
    pub fn step_sizes(&self, schedule: &NoiseSchedule) -> Vec<f64> {
        self.lambdas(schedule).windows(2).map(|w| w[1] - w[0]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_lambda_has_equal_steps() {
        let s = NoiseSchedule::default();
        for steps in [1, 5, 20, 100] {
            let g = TimeGrid::uniform_lambda(&s, steps).unwrap();
            assert_eq!(g.steps(), steps);
            let hs = g.step_sizes(&s);
            let (l0, l1) = s.lambda_range();
            let want = (l1 - l0) / steps as f64;
            for h in hs {
                assert!((h - want).abs() < 1e-12 * want.abs().max(1.0) * 10.0, "{h} vs {want}");
            }
        }
    }

    #[test]
    fn endpoints_and_monotonicity_enforced() {
        let s = NoiseSchedule::default();
        assert!(TimeGrid::new(&s, vec![1.0, 0.5, s.t_min]).is_ok());
        assert!(TimeGrid::new(&s, vec![0.9, 0.5, s.t_min]).is_err());
        assert!(TimeGrid::new(&s, vec![1.0, 0.5, 0.5, s.t_min]).is_err());
        assert!(TimeGrid::new(&s, vec![1.0]).is_err());
        assert!(TimeGrid::uniform_time(&s, 0).is_err());
    }
}
