use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{BitConfig, CalibrationSet, PairingDirection, QuantModel, RoundingMode};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::net::adam::{Adam, AdamConfig};
use crate::net::mlp::{self, ActQuant};
use crate::net::{LoRAAdapter, Parameters};
use crate::quant::QuantSpec;
use crate::rng::{derive_seed, stage_rng};
use crate::samplers::{sample, DirectionalEvaluator, SamplerKind, TimeGrid};
use crate::tensor::Tensor;

use super::collect_dual_trajectories;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QLoRAObjective {
    /// `w_cos L_COS + w_mota L_MOTA` over mixed-order pairs.
    #[default]
    Mota,
    /// Same-point MSE between quantized and full-precision predictions only.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SAQLoRAConfig {
    /// Mixstep schedule: sampler step counts visited in order.
    pub steps: Vec<usize>,
    /// Calibration pairs per optimizer step.
    pub batch_size: usize,
    pub rank: usize,
    /// Epochs per mixstep stage (160 at image scale, 40 here).
    pub epochs: usize,
    pub w_cos: f64,
    pub w_mota: f64,
    pub lr: f64,
    /// Chains per calibration trajectory; every pair holds this many rows.
    pub chains: usize,
    /// Calibration trajectories regenerated per stage.
    pub trajectories: usize,
    /// Train the weight and activation `(ln s, z)` alongside the adapter.
    pub learn_quant: bool,
    pub objective: QLoRAObjective,
    pub direction: PairingDirection,
    pub seed: u64,
}

impl Default for SAQLoRAConfig {
    fn default() -> Self {
        Self {
            steps: vec![100, 50, 20],
            batch_size: 4,
            rank: 32,
            epochs: 40,
            w_cos: 1.0,
            w_mota: 1.0,
            lr: 1e-3,
            chains: 16,
            trajectories: 1,
            learn_quant: true,
            objective: QLoRAObjective::Mota,
            direction: PairingDirection::CaseStudy,
            seed: 0,
        }
    }
}

impl SAQLoRAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.steps.contains(&0) || self.steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "steps must be a strictly decreasing list of positive integers, got {:?}",
                self.steps
            )));
        }
        if self.batch_size == 0 || self.chains == 0 || self.trajectories == 0 {
            return Err(Error::Config("batch_size, chains and trajectories must be positive".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if !(self.w_cos >= 0.0 && self.w_mota >= 0.0 && self.lr > 0.0) {
            return Err(Error::Config("loss weights must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage_steps: usize,
    pub epoch: usize,
    pub step: usize,
    pub l_cos: f64,
    pub l_mota: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QLoRAOutcome {
    pub records: Vec<LossRecord>,
}

/// `1 - <a, b> / (|a| |b|)`; 1 when either vector is zero.
pub fn cosine_loss(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Quantized model ready for adapter fine-tuning: min-max weight specs,
/// activation specs from the full-precision first-order trajectory on a
/// `calib_steps` grid, nearest rounding, and a fresh adapter with `B = 0`.
#[allow(clippy::too_many_arguments)]
pub fn init_qlora_model(
    base: &Parameters,
    bits: BitConfig,
    fp_eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    calib_steps: usize,
    chains: usize,
    rank: usize,
    seed: u64,
) -> Result<QuantModel> {
    let mut qm = QuantModel::new(base.clone(), bits)?;
    qm.rounding = RoundingMode::Nearest;
    let grid = TimeGrid::uniform_lambda(schedule, calib_steps)?;
    let x_t = crate::rng::standard_normal(chains, base.config.input_dim, &mut stage_rng(seed, "qlora/init-x_T", 0));
    let traj = sample(fp_eval, schedule, &grid, &x_t, SamplerKind::Dpm1)?;
    let pts: Vec<(&Tensor, &[f64])> = traj
        .evals
        .iter()
        .map(|e| (&e.input, std::slice::from_ref(&e.t)))
        .collect();
    qm.calibrate_activations(&pts)?;
    qm.adapter = Some(LoRAAdapter::new(base, rank, &mut stage_rng(seed, "qlora/adapter", 0)));
    Ok(qm)
}

struct Batch {
    x: Tensor,
    times: Vec<f64>,
    target: Vec<f64>,
}

fn assemble(calib: &CalibrationSet, idx: &[usize], direction: PairingDirection) -> Batch {
    let mut x = Vec::new();
    let mut times = Vec::new();
    let mut target = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for &i in idx {
        let p = &calib.pairs[i];
        let (q, f) = match direction {
            PairingDirection::CaseStudy => (&p.first, &p.second),
            PairingDirection::EquationLiteral => (&p.second, &p.first),
        };
        x.extend_from_slice(q.x.data());
        times.extend(std::iter::repeat_n(q.t, q.x.rows()));
        target.extend_from_slice(f.eps.data());
        rows += q.x.rows();
        cols = q.x.cols();
    }
    Batch {
        x: Tensor::matrix(rows, cols, x),
        times,
        target,
    }
}

/// Losses and `dL/d eps_hat` for one batch.
fn objective(pred: &[f64], target: &[f64], cols: usize, w_cos: f64, w_mota: f64) -> (f64, f64, Vec<f64>) {
    let rows = pred.len() / cols;
    let mut l_cos = 0.0;
    let mut l_mota = 0.0;
    let mut grad = vec![0.0; pred.len()];
    let inv = 1.0 / rows as f64;
    for r in 0..rows {
        let p = &pred[r * cols..(r + 1) * cols];
        let y = &target[r * cols..(r + 1) * cols];
        let g = &mut grad[r * cols..(r + 1) * cols];
        for k in 0..cols {
            let d = p[k] - y[k];
            l_mota += d * d;
            g[k] += w_mota * 2.0 * d * inv;
        }
        l_cos += cosine_loss(y, p);
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if np > 0.0 && ny > 0.0 && w_cos != 0.0 {
            let c = p.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / (np * ny);
            for k in 0..cols {
                let dc = y[k] / (np * ny) - c * p[k] / (np * np);
                g[k] -= w_cos * dc * inv;
            }
        }
    }
    (l_cos * inv, l_mota * inv, grad)
}

/// Real-valued shadows of the trainable quantizer parameters: `[ln s, z]`.
fn shadows(qm: &QuantModel) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let w = qm.weight_specs.iter().map(|s| vec![s.scale.ln(), s.zero_point as f64]).collect();
    let a = qm
        .act_specs
        .iter()
        .map(|s| match s {
            Some(s) => vec![s.scale.ln(), s.zero_point as f64],
            None => vec![0.0, 0.0],
        })
        .collect();
    (w, a)
}

fn write_back(shadow: &mut [f64], spec: &QuantSpec) -> Result<QuantSpec> {
    let qmax = spec.qmax() as f64;
    shadow[1] = shadow[1].clamp(0.0, qmax);
    QuantSpec::new(shadow[0].exp(), shadow[1].round_ties_even() as u32, spec.bit_width)
}

/// Adapter fine-tuning of a quantized model over the mixstep schedule.
///
/// For every step count in `cfg.steps` the dual-order calibration pairs are
/// regenerated with `fp_eval`, then `cfg.epochs` passes minimise the
/// configured objective over the adapter and (optionally) the log-scale and
/// zero point of every weight and activation quantizer, with straight-through
/// rounding. `Plain` runs the same loop on degenerate pairs with
/// `w_cos = 0, w_mota = 1`.
pub fn sa_qlora_train(
    qm: &mut QuantModel,
    fp_eval: &mut dyn DirectionalEvaluator,
    schedule: &NoiseSchedule,
    cfg: &SAQLoRAConfig,
) -> Result<QLoRAOutcome> {
    cfg.validate()?;
    let depth = qm.depth();
    let adapter = qm
        .adapter
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("sa_qlora_train needs an attached adapter".into()))?;
    let adapter_sizes: Vec<usize> = adapter
        .layers
        .iter()
        .flatten()
        .flat_map(|l| [l.a.len(), l.b.len()])
        .collect();
    let (w_cos, w_mota) = match cfg.objective {
        QLoRAObjective::Mota => (cfg.w_cos, cfg.w_mota),
        QLoRAObjective::Plain => (0.0, 1.0),
    };
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam_adapter = Adam::new(adam_cfg, &adapter_sizes);
    let mut adam_quant = Adam::new(adam_cfg, &vec![2; 2 * depth]);
    let (mut w_shadow, mut a_shadow) = shadows(qm);
    let dim = qm.base.config.input_dim;
    let mut records = Vec::new();
    let mut epoch_index = 0;
    for (stage, &n) in cfg.steps.iter().enumerate() {
        let grid = TimeGrid::uniform_lambda(schedule, n)?;
        let seeds: Vec<u64> = (0..cfg.trajectories)
            .map(|k| derive_seed(cfg.seed, &format!("qlora/calib/{stage}"), k as u64))
            .collect();
        let mut calib = collect_dual_trajectories(fp_eval, schedule, &grid, &seeds, cfg.chains, dim)?;
        if cfg.objective == QLoRAObjective::Plain {
            calib = calib.same_point();
        }
        if calib.is_empty() {
            return Err(Error::FinetuneDiverged { epoch: epoch_index });
        }
        let mut rng = stage_rng(cfg.seed, &format!("qlora/shuffle/{stage}"), 0);
        let mut order: Vec<usize> = (0..calib.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch = assemble(&calib, chunk, cfg.direction);
                let (cache, weights, acts) = qm.forward_cache(&batch.x, &batch.times)?;
                let (l_cos, l_mota, upstream) = objective(cache.output(), &batch.target, dim, w_cos, w_mota);
                let total = w_cos * l_cos + w_mota * l_mota;
                if !total.is_finite() {
                    return Err(Error::FinetuneDiverged { epoch: epoch_index });
                }
                records.push(LossRecord {
                    stage_steps: n,
                    epoch,
                    step,
                    l_cos,
                    l_mota,
                    total,
                });
                let refs = super::layer_refs(&qm.base, &weights);
                let g = mlp::backward(&refs, &cache, &acts, &upstream);
                let mut quant_grads: Vec<Vec<f64>> = vec![vec![0.0; 2]; 2 * depth];
                let mut merged_grads = Vec::with_capacity(depth);
                for l in 0..depth {
                    let gw = &g.weights[l];
                    if qm.weights_quantized {
                        let spec = qm.weight_specs[l];
                        let q = ActQuant {
                            scale: spec.scale,
                            zero: spec.zero_point as f64,
                            qmax: spec.qmax() as f64,
                        };
                        let merged = qm.merged_weight(l);
                        let mut dw = Vec::with_capacity(gw.len());
                        let (mut ds, mut dz) = (0.0, 0.0);
                        for (&gi, &w) in gw.iter().zip(&merged) {
                            let (px, ps, pz) = q.partials(w);
                            dw.push(gi * px);
                            ds += gi * ps;
                            dz += gi * pz;
                        }
                        quant_grads[2 * l] = vec![ds * spec.scale, dz];
                        merged_grads.push(dw);
                    } else {
                        merged_grads.push(gw.clone());
                    }
                    if let Some(spec) = qm.act_specs[l].filter(|_| qm.acts_quantized && l > 0) {
                        quant_grads[2 * l + 1] = vec![g.act_scale[l] * spec.scale, g.act_zero[l]];
                    }
                }
                let adapter = qm.adapter.as_mut().expect("checked above");
                let ad_grads: Vec<(Vec<f64>, Vec<f64>)> = (0..depth)
                    .filter_map(|l| {
                        let layer = &qm.base.layers[l];
                        adapter.chain(l, &merged_grads[l], layer.fan_in(), layer.fan_out())
                    })
                    .collect();
                let flat: Vec<&[f64]> = ad_grads.iter().flat_map(|(a, b)| [a.as_slice(), b.as_slice()]).collect();
                if flat.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
                    return Err(Error::FinetuneDiverged { epoch: epoch_index });
                }
                adam_adapter.step(adapter.slices_mut(), &flat);
                if cfg.learn_quant {
                    let mut params: Vec<&mut [f64]> = Vec::with_capacity(2 * depth);
                    for (w, a) in w_shadow.iter_mut().zip(a_shadow.iter_mut()) {
                        params.push(w.as_mut_slice());
                        params.push(a.as_mut_slice());
                    }
                    let grads: Vec<&[f64]> = quant_grads.iter().map(|v| v.as_slice()).collect();
                    adam_quant.step(params, &grads);
                    for l in 0..depth {
                        if qm.weights_quantized {
                            qm.weight_specs[l] = write_back(&mut w_shadow[l], &qm.weight_specs[l])?;
                        }
                        if let Some(spec) = qm.act_specs[l].filter(|_| qm.acts_quantized && l > 0) {
                            qm.act_specs[l] = Some(write_back(&mut a_shadow[l], &spec)?);
                        }
                    }
                }
            }
            epoch_index += 1;
        }
    }
    Ok(QLoRAOutcome { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ToyDistribution;
    use crate::net::NetConfig;
    use crate::rng::rng_from_seed;
    use crate::samplers::{AnalyticEvaluator, NetEvaluator};
    use crate::saquant::fake_quant_forward;

    #[test]
    fn cosine_identities() {
        let a = [1.0, 2.0, -0.5];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(cosine_loss(&a, &a).abs() < 1e-15);
        assert!((cosine_loss(&a, &neg) - 2.0).abs() < 1e-15);
        assert!((cosine_loss(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let pred = [0.3, -1.2, 0.8, 0.1];
        let target = [0.5, -1.0, -0.2, 0.7];
        let (_, _, g) = objective(&pred, &target, 2, 0.7, 1.3);
        for k in 0..pred.len() {
            let f = |d: f64| {
                let mut p = pred;
                p[k] += d;
                let (c, m, _) = objective(&p, &target, 2, 0.7, 1.3);
                0.7 * c + 1.3 * m
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SAQLoRAConfig::default().validate().is_ok());
        for steps in [vec![], vec![20, 50], vec![50, 50], vec![10, 0]] {
            let c = SAQLoRAConfig {
                steps,
                ..SAQLoRAConfig::default()
            };
            assert!(c.validate().is_err());
        }
    }

    fn setup() -> (Parameters, QuantModel, NoiseSchedule) {
        let s = NoiseSchedule::default();
        let p = Parameters::init(&NetConfig::default(), 1.0, &mut rng_from_seed(4)).unwrap();
        let mut ev = NetEvaluator::new(&p);
        let qm = init_qlora_model(&p, BitConfig { weight_bits: 4, act_bits: 8 }, &mut ev, &s, 10, 8, 32, 1).unwrap();
        (p, qm, s)
    }

    #[test]
    fn fresh_adapter_and_no_training_is_bitwise_ptq_model() {
        let (p, qm, s) = setup();
        let mut plain = qm.clone();
        plain.adapter = None;
        let mut trained = qm.clone();
        let cfg = SAQLoRAConfig {
            epochs: 0,
            steps: vec![10],
            ..SAQLoRAConfig::default()
        };
        let mut ev = NetEvaluator::new(&p);
        sa_qlora_train(&mut trained, &mut ev, &s, &cfg).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.1, 0.4, -1.0, 2.0]);
        let a = fake_quant_forward(&trained, &x, 0.3).unwrap();
        let b = fake_quant_forward(&plain, &x, 0.3).unwrap();
        assert_eq!(a, b);
        assert_eq!(trained, qm);
    }

    #[test]
    fn losses_decompose_and_training_reduces_loss() {
        let (p, mut qm, s) = setup();
        let cfg = SAQLoRAConfig {
            steps: vec![20, 10],
            epochs: 5,
            chains: 8,
            w_cos: 0.5,
            w_mota: 2.0,
            ..SAQLoRAConfig::default()
        };
        let mut ev = NetEvaluator::new(&p);
        let out = sa_qlora_train(&mut qm, &mut ev, &s, &cfg).unwrap();
        for r in &out.records {
            assert!((r.total - (0.5 * r.l_cos + 2.0 * r.l_mota)).abs() <= 1e-12);
        }
        assert!(qm.adapter.as_ref().unwrap().layers.iter().flatten().any(|l| l.b.max_abs() > 0.0));
    }

    #[test]
    fn rank_is_clamped_to_layer_width() {
        let s = NoiseSchedule::default();
        let p = Parameters::init(&NetConfig::default(), 1.0, &mut rng_from_seed(4)).unwrap();
        let mut ev = AnalyticEvaluator::new(ToyDistribution::standard_normal(2), s);
        let qm = init_qlora_model(&p, BitConfig::default(), &mut ev, &s, 5, 4, 100, 0).unwrap();
        let ranks: Vec<usize> = qm.adapter.unwrap().layers.iter().flatten().map(|l| l.rank).collect();
        assert_eq!(ranks, vec![18, 64, 2]);
    }
}
