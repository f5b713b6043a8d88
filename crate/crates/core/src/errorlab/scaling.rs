//! Scaling of sampler deviation under bounded evaluator perturbations.

use serde::{Deserialize, Serialize};

use super::{fit_loglog, perturbed_evaluator, quant_error_bound, BoundParams, SlopeFit};
use crate::diffusion::{NoiseSchedule, ToyDistribution};
use crate::error::{Error, Result};
use crate::metrics::{state_mse, trajectory_mse};
use crate::rng::{derive_seed, stage_rng, standard_normal};
use crate::samplers::{
    dpm1_step, dpm2_step, sample, AnalyticEvaluator, DirectionalEvaluator, SamplerKind, TimeGrid, Trajectory,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub seed: u64,
    pub chains: usize,
    /// Perturbation bounds of the delta sweep (fixed grid).
    pub deltas: Vec<f64>,
    /// Step count of the fixed grid used by the delta sweep.
    pub delta_steps: usize,
    /// Step counts of the grid family used by the h sweep.
    pub h_steps: Vec<usize>,
    pub samplers: Vec<SamplerKind>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            chains: 256,
            deltas: vec![1e-3, 2e-3, 4e-3, 8e-3, 1.6e-2],
            delta_steps: 20,
            h_steps: vec![40, 80, 160, 320],
            samplers: vec![SamplerKind::Dpm1, SamplerKind::Dpm2],
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("chains must be positive".into()));
        }
        if self.deltas.len() < 4 || self.h_steps.len() < 4 {
            return Err(Error::Config("sweeps need at least 4 points each".into()));
        }
        if self.deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Config("sweep deltas must be positive".into()));
        }
        if self.delta_steps == 0 || self.h_steps.contains(&0) {
            return Err(Error::Config("step counts must be positive".into()));
        }
        for k in &self.samplers {
            if !matches!(k, SamplerKind::Dpm1 | SamplerKind::Dpm2) {
                return Err(Error::Config(format!(
                    "scaling sweeps support dpm1 and dpm2, not {}",
                    k.label()
                )));
            }
        }
        Ok(())
    }
}

/// One interval of a perturbed delta-sweep run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub sampler: String,
    pub delta: f64,
    pub steps: usize,
    pub step: usize,
    pub t_prev: f64,
    pub t_next: f64,
    pub h: f64,
    /// Largest `|eps_hat - eps|` over the evaluations of the local step.
    pub eps_deviation: f64,
    /// Sup-norm of one perturbed step from the unperturbed state.
    pub local_deviation: f64,
    /// `alpha(t_next)` times the interval bound, i.e. the bound in `x` units.
    pub bound: f64,
    /// RMS deviation of the full perturbed trajectory at this step.
    pub state_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sampler: String,
    pub delta: f64,
    pub steps: usize,
    /// Per-coordinate endpoint MSE between perturbed and unperturbed runs.
    pub endpoint_mse: f64,
    /// `sqrt(endpoint_mse)`.
    pub endpoint_deviation: f64,
    /// Largest `local_deviation / bound` over the run's intervals.
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HSweepPoint {
    pub sampler: String,
    pub delta: f64,
    pub steps: usize,
    pub h: f64,
    /// Mean over intervals of the one-step perturbation deviation.
    pub quant_local: f64,
    /// Mean over intervals of the one-step truncation error; single Gaussians only.
    pub disc_local: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledFit {
    pub sampler: String,
    pub delta: Option<f64>,
    pub fit: SlopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstant {
    pub sampler: String,
    /// Single constant covering every interval of every delta-sweep run.
    pub c: f64,
    pub c_min: f64,
    pub c_max: f64,
    /// Per-run constants agree within a factor of 2.
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub sampler: String,
    pub delta: f64,
    /// Largest swept `h` at and below which truncation error stays under the
    /// perturbation error.
    pub h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub config: ScalingConfig,
    pub delta_sweep: Vec<SweepPoint>,
    pub h_sweep: Vec<HSweepPoint>,
    pub delta_slopes: Vec<LabelledFit>,
    pub h_slopes: Vec<LabelledFit>,
    pub bound_constants: Vec<BoundConstant>,
    pub crossovers: Vec<Crossover>,
    pub steps: Vec<StepRecord>,
    pub excluded_diverged: usize,
}

impl ErrorReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Per-step deviation curves of the delta sweep.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from(
            "sampler,delta,steps,step,t_prev,t_next,h,eps_deviation,local_deviation,bound,state_rms\n",
        );
        for r in &self.steps {
            out.push_str(&format!(
                "{},{:?},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                r.sampler,
                r.delta,
                r.steps,
                r.step,
                r.t_prev,
                r.t_next,
                r.h,
                r.eps_deviation,
                r.local_deviation,
                r.bound,
                r.state_rms
            ));
        }
        out
    }
}

/// Exact flow map of the probability-flow ODE for `N(mean, std^2 I)` data.
pub fn gaussian_flow_map(schedule: &NoiseSchedule, mean: &[f64], std: f64, x: &Tensor, t_from: f64, t_to: f64) -> Result<Tensor> {
    if x.cols() != mean.len() {
        return Err(Error::Shape(format!("{} columns vs mean of length {}", x.cols(), mean.len())));
    }
    let spread = |t: f64| (schedule.alpha(t).powi(2) * std * std + schedule.sigma(t).powi(2)).sqrt();
    let ratio = spread(t_to) / spread(t_from);
    let (a0, a1) = (schedule.alpha(t_from), schedule.alpha(t_to));
    let d = mean.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| a1 * mean[k % d] + ratio * (v - a0 * mean[k % d]))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn order(kind: SamplerKind) -> u32 {
    match kind {
        SamplerKind::Dpm2 => 2,
        _ => 1,
    }
}

fn local_step(
    kind: SamplerKind,
    eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    x: &Tensor,
    t_prev: f64,
    t_next: f64,
) -> Result<Tensor> {
    match kind {
        SamplerKind::Dpm2 => Ok(dpm2_step(eval, schedule, x, t_prev, t_next)?.0),
        _ => dpm1_step(eval, schedule, x, t_prev, t_next),
    }
}

fn sup_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.max_abs_diff(b)
}

fn initial_states(dist: &ToyDistribution, cfg: &ScalingConfig) -> Tensor {
    let mut rng = stage_rng(cfg.seed, "error-lab/x_T", 0);
    standard_normal(cfg.chains, dist.dim(), &mut rng)
}

/// Perturbed and unperturbed runs of DPM-Solver-1/2 over a delta sweep on a
/// fixed grid and an h sweep over a grid family, with log-log slope fits.
///
/// Endpoint deviations are `sqrt` of the shared per-coordinate trajectory MSE.
/// The perturbation stream for every delta uses the same seed, so deviations
/// differ only through delta itself.
pub fn fit_scaling_laws(schedule: &NoiseSchedule, dist: &ToyDistribution, cfg: &ScalingConfig) -> Result<ErrorReport> {
    cfg.validate()?;
    schedule.validate()?;
    dist.validate()?;
    let x_t = initial_states(dist, cfg);
    let noise_seed = derive_seed(cfg.seed, "error-lab/perturb", 0);
    let local_seed = derive_seed(cfg.seed, "error-lab/perturb-local", 0);
    let single = (dist.weights.len() == 1).then(|| (dist.means[0].clone(), dist.stds[0]));
    let mut base = AnalyticEvaluator::new(dist.clone(), *schedule);

    let mut delta_sweep = Vec::new();
    let mut steps_out = Vec::new();
    let mut excluded = 0;
    let grid = TimeGrid::uniform_lambda(schedule, cfg.delta_steps)?;
    for &kind in &cfg.samplers {
        let reference = sample(&mut base, schedule, &grid, &x_t, kind)?;
        if !reference.is_complete() {
            return Err(Error::Domain(format!("unperturbed {} run diverged", kind.label())));
        }
        for &delta in &cfg.deltas {
            let mut pert = perturbed_evaluator(base.clone(), delta, noise_seed)?;
            let run = sample(&mut pert, schedule, &grid, &x_t, kind)?;
            if !run.is_complete() {
                excluded += 1;
                continue;
            }
            let mse = trajectory_mse(&reference, &run)?;
            let (records, c) = local_records(kind, &reference, &run, &base, schedule, delta, local_seed)?;
            steps_out.extend(records);
            delta_sweep.push(SweepPoint {
                sampler: kind.label(),
                delta,
                steps: cfg.delta_steps,
                endpoint_mse: mse.endpoint,
                endpoint_deviation: mse.endpoint.sqrt(),
                c,
            });
        }
    }

    let mut h_sweep = Vec::new();
    for &kind in &cfg.samplers {
        for &n in &cfg.h_steps {
            let grid = TimeGrid::uniform_lambda(schedule, n)?;
            let h = grid.step_sizes(schedule)[0];
            let reference = sample(&mut base, schedule, &grid, &x_t, kind)?;
            if !reference.is_complete() {
                excluded += 1;
                continue;
            }
            let times = grid.times();
            let disc_local = match &single {
                Some((mean, std)) => {
                    let mut acc = 0.0;
                    for i in 1..times.len() {
                        let exact = gaussian_flow_map(schedule, mean, *std, &reference.states[i - 1], times[i - 1], times[i])?;
                        acc += sup_diff(&exact, &reference.states[i])?;
                    }
                    Some(acc / n as f64)
                }
                None => None,
            };
            for &delta in &cfg.deltas {
                let mut pert = perturbed_evaluator(base.clone(), delta, local_seed)?;
                let mut acc = 0.0;
                for i in 1..times.len() {
                    let step = local_step(kind, &mut pert, schedule, &reference.states[i - 1], times[i - 1], times[i])?;
                    acc += sup_diff(&step, &reference.states[i])?;
                }
                h_sweep.push(HSweepPoint {
                    sampler: kind.label(),
                    delta,
                    steps: n,
                    h,
                    quant_local: acc / n as f64,
                    disc_local,
                });
            }
        }
    }

    let mut delta_slopes = Vec::new();
    let mut h_slopes = Vec::new();
    let mut bound_constants = Vec::new();
    let mut crossovers = Vec::new();
    for &kind in &cfg.samplers {
        let label = kind.label();
        let pts: Vec<&SweepPoint> = delta_sweep.iter().filter(|p| p.sampler == label).collect();
        if pts.len() >= 4 {
            let xs: Vec<f64> = pts.iter().map(|p| p.delta).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.endpoint_deviation).collect();
            delta_slopes.push(LabelledFit {
                sampler: label.clone(),
                delta: None,
                fit: fit_loglog(&xs, &ys)?,
            });
        }
        if !pts.is_empty() {
            let c_min = pts.iter().map(|p| p.c).fold(f64::INFINITY, f64::min);
            let c_max = pts.iter().map(|p| p.c).fold(0.0, f64::max);
            bound_constants.push(BoundConstant {
                sampler: label.clone(),
                c: c_max,
                c_min,
                c_max,
                stable: c_max <= 2.0 * c_min,
            });
        }
        for &delta in &cfg.deltas {
            let mut pts: Vec<&HSweepPoint> = h_sweep
                .iter()
                .filter(|p| p.sampler == label && p.delta == delta)
                .collect();
            if pts.len() >= 4 {
                let xs: Vec<f64> = pts.iter().map(|p| p.h).collect();
                let ys: Vec<f64> = pts.iter().map(|p| p.quant_local).collect();
                h_slopes.push(LabelledFit {
                    sampler: label.clone(),
                    delta: Some(delta),
                    fit: fit_loglog(&xs, &ys)?,
                });
            }
            if single.is_some() {
                pts.sort_by(|a, b| a.h.total_cmp(&b.h));
                let mut h = None;
                for p in &pts {
                    match p.disc_local {
                        Some(d) if d < p.quant_local => h = Some(p.h),
                        _ => break,
                    }
                }
                crossovers.push(Crossover {
                    sampler: label.clone(),
                    delta,
                    h,
                });
            }
        }
    }

    Ok(ErrorReport {
        config: cfg.clone(),
        delta_sweep,
        h_sweep,
        delta_slopes,
        h_slopes,
        bound_constants,
        crossovers,
        steps: steps_out,
        excluded_diverged: excluded,
    })
}

fn local_records(
    kind: SamplerKind,
    reference: &Trajectory,
    run: &Trajectory,
    base: &AnalyticEvaluator,
    schedule: &NoiseSchedule,
    delta: f64,
    seed: u64,
) -> Result<(Vec<StepRecord>, f64)> {
    let mut pert = perturbed_evaluator(base.clone(), delta, seed)?;
    let times = &reference.times;
    let steps = times.len() - 1;
    let mut records = Vec::with_capacity(steps);
    let mut c = 0.0f64;
    for i in 1..times.len() {
        let (tp, tn) = (times[i - 1], times[i]);
        let step = local_step(kind, &mut pert, schedule, &reference.states[i - 1], tp, tn)?;
        let local = sup_diff(&step, &reference.states[i])?;
        let eps_dev = pert.drain_sups().into_iter().fold(0.0, f64::max);
        let (ls, lt) = (schedule.lambda(tp), schedule.lambda(tn));
        let bound = schedule.alpha(tn)
            * quant_error_bound(&BoundParams {
                delta,
                k: order(kind),
                lambda_s: ls,
                lambda_t: lt,
            })?
            .total;
        c = c.max(local / bound);
        records.push(StepRecord {
            sampler: kind.label(),
            delta,
            steps,
            step: i,
            t_prev: tp,
            t_next: tn,
            h: lt - ls,
            eps_deviation: eps_dev,
            local_deviation: local,
            bound,
            state_rms: state_mse(&reference.states[i], &run.states[i])?.sqrt(),
        });
    }
    Ok((records, c))
}

/// Endpoint deviation of perturbed DPM-Solver-1 and DPM-Solver-2 runs at equal
/// delta, from the same initial states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderComparison {
    pub seed: u64,
    pub dpm1_deviation: f64,
    pub dpm2_deviation: f64,
}

pub fn order_sensitivity(
    schedule: &NoiseSchedule,
    dist: &ToyDistribution,
    steps: usize,
    delta: f64,
    chains: usize,
    seed: u64,
) -> Result<OrderComparison> {
    let cfg = ScalingConfig {
        seed,
        chains,
        ..ScalingConfig::default()
    };
    let x_t = initial_states(dist, &cfg);
    let grid = TimeGrid::uniform_lambda(schedule, steps)?;
    let base = AnalyticEvaluator::new(dist.clone(), *schedule);
    let noise_seed = derive_seed(seed, "error-lab/perturb", 0);
    let deviation = |kind: SamplerKind| -> Result<f64> {
        let reference = sample(&mut base.clone(), schedule, &grid, &x_t, kind)?;
        let mut pert = perturbed_evaluator(base.clone(), delta, noise_seed)?;
        let run = sample(&mut pert, schedule, &grid, &x_t, kind)?;
        Ok(trajectory_mse(&reference, &run)?.endpoint.sqrt())
    };
    Ok(OrderComparison {
        seed,
        dpm1_deviation: deviation(SamplerKind::Dpm1)?,
        dpm2_deviation: deviation(SamplerKind::Dpm2)?,
    })
}
