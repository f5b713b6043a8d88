//! Deterministic ODE samplers (DDIM, DPM-Solver-1/2, PLMS) with full
//! trajectory recording, including DPM-Solver-2 intermediate points.

mod evaluator;
mod grid;
mod trajectory;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use evaluator::{AnalyticEvaluator, Counting, DirectionalEvaluator, FnEvaluator, NetEvaluator};
pub use grid::{Spacing, TimeGrid};
pub use trajectory::{csv_header, EvalRecord, Intermediate, Trajectory};

/// States with any coordinate beyond this magnitude count as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum SamplerKind {
    Ddim,
    Dpm1,
    Dpm2,
    /// Pseudo linear multistep; `max_order` in 1..=4.
    Plms { max_order: usize },
}

impl SamplerKind {
    pub fn label(&self) -> String {
        match self {
            SamplerKind::Ddim => "ddim".into(),
            SamplerKind::Dpm1 => "dpm1".into(),
            SamplerKind::Dpm2 => "dpm2".into(),
            SamplerKind::Plms { max_order } => format!("plms{max_order}"),
        }
    }
}

fn check_times(t_prev: f64, t_next: f64, schedule: &NoiseSchedule) -> Result<()> {
    let ok = t_next <= t_prev && t_next >= schedule.t_min && t_prev <= schedule.t_end;
    if ok {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "step {t_prev} -> {t_next} not inside [{}, {}] or not decreasing",
            schedule.t_min, schedule.t_end
        )))
    }
}

/// `a x - b e`, elementwise.
fn combine(x: &Tensor, a: f64, e: &Tensor, b: f64) -> Result<Tensor> {
    x.axpby(a, e, -b)
}

/// First-order exponential integrator step.
pub fn dpm1_step(
    eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    x: &Tensor,
    t_prev: f64,
    t_next: f64,
) -> Result<Tensor> {
    check_times(t_prev, t_next, schedule)?;
    let e = eval.evaluate(x, t_prev)?;
    dpm1_update(schedule, x, &e, t_prev, t_next)
}

fn dpm1_update(schedule: &NoiseSchedule, x: &Tensor, e: &Tensor, t_prev: f64, t_next: f64) -> Result<Tensor> {
    let h = schedule.lambda(t_next) - schedule.lambda(t_prev);
    let ratio = schedule.alpha(t_next) / schedule.alpha(t_prev);
    combine(x, ratio, e, schedule.sigma(t_next) * h.exp_m1())
}

/// Second-order (midpoint in log-SNR) step; returns the intermediate record too.
pub fn dpm2_step(
    eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    x: &Tensor,
    t_prev: f64,
    t_next: f64,
) -> Result<(Tensor, Intermediate)> {
    let (x_next, _, inter) = dpm2_step_recorded(eval, schedule, x, t_prev, t_next)?;
    Ok((x_next, inter))
}

pub(crate) fn dpm2_step_recorded(
    eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    x: &Tensor,
    t_prev: f64,
    t_next: f64,
) -> Result<(Tensor, Tensor, Intermediate)> {
    check_times(t_prev, t_next, schedule)?;
    let (l_prev, l_next) = (schedule.lambda(t_prev), schedule.lambda(t_next));
    let h = l_next - l_prev;
    let s = if h == 0.0 {
        t_prev
    } else {
        schedule.t_of_lambda(0.5 * (l_prev + l_next))?
    };
    let e_prev = eval.evaluate(x, t_prev)?;
    let a_prev = schedule.alpha(t_prev);
    let u = combine(
        x,
        schedule.alpha(s) / a_prev,
        &e_prev,
        schedule.sigma(s) * (0.5 * h).exp_m1(),
    )?;
    let e_u = eval.evaluate(&u, s)?;
    let x_next = combine(
        x,
        schedule.alpha(t_next) / a_prev,
        &e_u,
        schedule.sigma(t_next) * h.exp_m1(),
    )?;
    Ok((x_next, e_prev, Intermediate { s, u, eps: e_u }))
}

/// Deterministic DDIM update via the predicted clean sample.
pub fn ddim_step(
    eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    x: &Tensor,
    t_prev: f64,
    t_next: f64,
) -> Result<Tensor> {
    check_times(t_prev, t_next, schedule)?;
    let e = eval.evaluate(x, t_prev)?;
    ddim_update(schedule, x, &e, t_prev, t_next)
}

fn ddim_update(schedule: &NoiseSchedule, x: &Tensor, e: &Tensor, t_prev: f64, t_next: f64) -> Result<Tensor> {
    if t_next == t_prev {
        return Ok(x.clone());
    }
    let (a0, s0) = (schedule.alpha(t_prev), schedule.sigma(t_prev));
    let (a1, s1) = (schedule.alpha(t_next), schedule.sigma(t_next));
    let x0 = x.axpby(1.0 / a0, e, -s0 / a0)?;
    x0.axpby(a1, e, s1)
}

/// Classical Adams-Bashforth rows, newest value first.
pub const MULTISTEP_COEFFS: [&[f64]; 4] = [
    &[1.0],
    &[3.0 / 2.0, -1.0 / 2.0],
    &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
    &[55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0],
];

/// Transfer part `phi(x, e, t, t')` with `abar = alpha^2`.
pub fn plms_transfer(schedule: &NoiseSchedule, x: &Tensor, e: &Tensor, t_prev: f64, t_next: f64) -> Result<Tensor> {
    let a_bar = schedule.alpha(t_prev).powi(2);
    let a_bar_next = schedule.alpha(t_next).powi(2);
    // 1 - abar equals sigma^2 exactly under VP; use sigma to avoid cancellation.
    let one_minus = schedule.sigma(t_prev).powi(2);
    let one_minus_next = schedule.sigma(t_next).powi(2);
    let coef_x = a_bar_next.sqrt() / a_bar.sqrt();
    let denom = a_bar.sqrt() * ((one_minus_next * a_bar).sqrt() + (one_minus * a_bar_next).sqrt());
    let coef_e = (a_bar_next - a_bar) / denom;
    combine(x, coef_x, e, coef_e)
}

/// Combines the fresh evaluation with `history` (newest first) using the
/// multistep row of order `min(max_order, 1 + history.len(), 4)`.
pub fn multistep_gradient(fresh: &Tensor, history: &[Tensor], max_order: usize) -> Result<Tensor> {
    let order = max_order.clamp(1, 4).min(1 + history.len());
    let row = MULTISTEP_COEFFS[order - 1];
    let mut out = fresh.map(|v| v * row[0]);
    for (k, c) in row.iter().enumerate().skip(1) {
        out = out.axpby(1.0, &history[k - 1], *c)?;
    }
    Ok(out)
}

/// One PLMS step; returns the new state and the raw evaluation to push
/// onto the history.
pub fn plms_step(
    eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    x: &Tensor,
    history: &[Tensor],
    t_prev: f64,
    t_next: f64,
    max_order: usize,
) -> Result<(Tensor, Tensor)> {
    check_times(t_prev, t_next, schedule)?;
    let e = eval.evaluate(x, t_prev)?;
    let g = multistep_gradient(&e, history, max_order)?;
    Ok((plms_transfer(schedule, x, &g, t_prev, t_next)?, e))
}

fn diverged(x: &Tensor) -> bool {
    x.data()
        .iter()
        .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD)
}

/// Integrates from `x_T` over `grid`, recording every evaluation.
pub fn sample(
    eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    x_t: &Tensor,
    kind: SamplerKind,
) -> Result<Trajectory> {
    x_t.check_finite()?;
    if let SamplerKind::Plms { max_order } = kind {
        if !(1..=4).contains(&max_order) {
            return Err(Error::InvalidArgument(format!(
                "PLMS order {max_order} outside 1..=4"
            )));
        }
    }
    let times = grid.times();
    let mut traj = Trajectory::start(kind, times.to_vec(), x_t.clone());
    let mut history: Vec<Tensor> = Vec::new();
    let mut x = x_t.clone();
    for i in 1..times.len() {
        let (t_prev, t_next) = (times[i - 1], times[i]);
        let (x_next, e_prev, inter) = match kind {
            SamplerKind::Dpm1 => {
                let e = eval.evaluate(&x, t_prev)?;
                (dpm1_update(schedule, &x, &e, t_prev, t_next)?, e, None)
            }
            SamplerKind::Ddim => {
                let e = eval.evaluate(&x, t_prev)?;
                (ddim_update(schedule, &x, &e, t_prev, t_next)?, e, None)
            }
            SamplerKind::Dpm2 => {
                let (xn, e, inter) = dpm2_step_recorded(eval, schedule, &x, t_prev, t_next)?;
                (xn, e, Some(inter))
            }
            SamplerKind::Plms { max_order } => {
                let (xn, e) = plms_step(eval, schedule, &x, &history, t_prev, t_next, max_order)?;
                history.insert(0, e.clone());
                history.truncate(3);
                (xn, e, None)
            }
        };
        traj.evals.push(EvalRecord {
            input: x.clone(),
            t: t_prev,
            output: e_prev,
        });
        traj.intermediates.push(inter);
        if diverged(&x_next) {
            log::warn!("{} trajectory diverged at step {i}", kind.label());
            traj.diverged_at = Some(i);
            return Ok(traj);
        }
        traj.states.push(x_next.clone());
        x = x_next;
    }
    Ok(traj)
}
