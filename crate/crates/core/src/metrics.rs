//! Sample-set and trajectory metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::samplers::Trajectory;
use crate::tensor::Tensor;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_pairwise(x: &Tensor, y: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let xi = x.row(i);
        let mut row = 0.0;
        for j in 0..y.rows() {
            row += dist(xi, y.row(j));
        }
        total += row;
    }
    total / (x.rows() * y.rows()) as f64
}

/// V-statistic energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|`, all pairs
/// including the diagonal.
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("energy distance needs non-empty sets".into()));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!(
            "sample dimensions differ: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    Ok(2.0 * mean_pairwise(x, y) - mean_pairwise(x, x) - mean_pairwise(y, y))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMse {
    /// Mean over chains and coordinates of the squared state difference, per grid time.
    pub per_step: Vec<f64>,
    pub endpoint: f64,
}

/// Mean squared state deviation, normalised per coordinate:
/// `mean_{chains, dims} (x_fp - x_q)^2` at every grid time.
pub fn trajectory_mse(fp: &Trajectory, q: &Trajectory) -> Result<TrajectoryMse> {
    if fp.times != q.times {
        return Err(Error::InvalidArgument("trajectories use different grids".into()));
    }
    let steps = fp.states.len().min(q.states.len());
    let mut per_step = Vec::with_capacity(steps);
    for i in 0..steps {
        per_step.push(state_mse(&fp.states[i], &q.states[i])?);
    }
    if fp.diverged_at.is_some() || q.diverged_at.is_some() {
        per_step.resize(fp.times.len(), f64::INFINITY);
    }
    let endpoint = *per_step.last().expect("grids have at least two times");
    Ok(TrajectoryMse { per_step, endpoint })
}

pub fn state_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}
