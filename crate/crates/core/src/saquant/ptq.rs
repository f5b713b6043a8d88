use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use super::{act_quant, layer_refs, rectified_sigmoid, rectified_sigmoid_grad, CalibrationSet, QuantModel};
use crate::error::{Error, Result};
use crate::net::adam::{Adam, AdamConfig};
use crate::net::mlp::{self, ActQuant, LayerRef};
use crate::quant::QuantSpec;
use crate::rng::stage_rng;

/// Which branch consumes the intermediate (second-order) points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingDirection {
    /// Quantized branch at first-order points, full-precision target at the
    /// paired intermediate points.
    #[default]
    CaseStudy,
    /// Full-precision target at first-order points, quantized branch at the
    /// intermediate points.
    EquationLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub iterations: usize,
    /// Rows drawn (without replacement) per iteration.
    pub batch_rows: usize,
    pub lr_alpha: f64,
    /// Learning rate of the activation `(ln s, z)` of the layer input.
    pub lr_act: f64,
    pub learn_act: bool,
    pub reg_weight: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Fraction of iterations before the rounding regularizer is switched on.
    pub warmup: f64,
    pub direction: PairingDirection,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_rows: 256,
            lr_alpha: 1e-2,
            lr_act: 4e-5,
            learn_act: true,
            reg_weight: 0.01,
            beta_start: 20.0,
            beta_end: 2.0,
            warmup: 0.2,
            direction: PairingDirection::CaseStudy,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rows == 0 {
            return Err(Error::Config("batch_rows must be positive".into()));
        }
        if !(self.lr_alpha > 0.0 && self.lr_act >= 0.0 && self.reg_weight >= 0.0) {
            return Err(Error::Config("learning rates and regularizer weight must be non-negative".into()));
        }
        if !(self.beta_start >= self.beta_end && self.beta_end > 0.0) {
            return Err(Error::Config("need beta_start >= beta_end > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Config("warmup must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Regularizer exponent at `iteration`, or `None` during warm-up.
    fn beta(&self, iteration: usize) -> Option<f64> {
        let warm = (self.warmup * self.iterations as f64) as usize;
        if iteration < warm {
            return None;
        }
        let rel = (iteration - warm) as f64 / (self.iterations - warm).max(1) as f64;
        Some(self.beta_end + (self.beta_start - self.beta_end) * (1.0 - rel).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub layer: usize,
    pub iterations: usize,
    /// Reconstruction loss over all rows with the masks and activation spec on entry.
    pub initial_loss: f64,
    /// Same after hardening.
    pub final_loss: f64,
    /// Whether the hardened result was kept (it is dropped if it is worse than the entry state).
    pub accepted: bool,
    /// Rounding offsets that differ from the entry masks.
    pub flipped: usize,
}

struct Rows {
    n: usize,
    fan_in: usize,
    fan_out: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

fn gather_rows(qm: &QuantModel, layer: usize, calib: &CalibrationSet, direction: PairingDirection) -> Result<Rows> {
    let fp_weights: Vec<Vec<f64>> = qm.base.layers.iter().map(|l| l.weight.data().to_vec()).collect();
    let fp_refs = layer_refs(&qm.base, &fp_weights);
    let (fi, fo) = (qm.base.layers[layer].fan_in(), qm.base.layers[layer].fan_out());
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for p in &calib.pairs {
        let (q, f) = match direction {
            PairingDirection::CaseStudy => (&p.first, &p.second),
            PairingDirection::EquationLiteral => (&p.second, &p.first),
        };
        if q.x.rows() != f.x.rows() {
            return Err(Error::Shape("paired records hold different row counts".into()));
        }
        let fp_in = qm.base.network_input(&f.x, &[f.t])?;
        let fp_cache = mlp::forward(&fp_refs, fp_in, f.x.rows(), &[]);
        targets.extend_from_slice(&fp_cache.pre[layer]);
        let (q_cache, _, _) = qm.forward_cache(&q.x, &[q.t])?;
        inputs.extend_from_slice(&q_cache.raw_inputs[layer]);
    }
    Ok(Rows {
        n: targets.len() / fo,
        fan_in: fi,
        fan_out: fo,
        inputs,
        targets,
    })
}

/// Mean over rows of the squared output error of one layer.
fn layer_loss(weight: &[f64], bias: &[f64], act: Option<ActQuant>, rows: &Rows) -> f64 {
    let layer = LayerRef {
        weight,
        bias,
        fan_in: rows.fan_in,
        fan_out: rows.fan_out,
    };
    let cache = mlp::forward(&[layer], rows.inputs.clone(), rows.n, &[act]);
    let sq: f64 = cache
        .output()
        .iter()
        .zip(&rows.targets)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    sq / rows.n as f64
}

/// Soft-quantized weights with `h(alpha)` and the per-weight `dW_q/dalpha`.
fn soft_weights(w: &[f64], alpha: &[f64], spec: &QuantSpec) -> (Vec<f64>, Vec<f64>) {
    let (s, z, qmax) = (spec.scale, spec.zero_point as f64, spec.qmax() as f64);
    let mut out = Vec::with_capacity(w.len());
    let mut dalpha = Vec::with_capacity(w.len());
    for (&v, &a) in w.iter().zip(alpha) {
        let code = (v / s).floor() + rectified_sigmoid(a) + z;
        let clamped = code.clamp(0.0, qmax);
        out.push(s * (clamped - z));
        dalpha.push(if clamped == code { s * rectified_sigmoid_grad(a) } else { 0.0 });
    }
    (out, dalpha)
}

/// Module-wise rounding reconstruction of `layer` under mixed-order
/// trajectory alignment: the quantized branch and the full-precision target
/// consume the two records of every calibration pair (see
/// [`PairingDirection`]). Layers below `layer` are used with their current
/// hardened masks. Zero iterations leave the model untouched.
pub fn sa_ptq_reconstruct(qm: &mut QuantModel, layer: usize, calib: &CalibrationSet, cfg: &ReconConfig) -> Result<ReconReport> {
    cfg.validate()?;
    if layer >= qm.depth() {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    if calib.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    let saved = (qm.soft_layer, qm.rounding);
    qm.soft_layer = None;
    qm.rounding = super::RoundingMode::Learned;
    let result = reconstruct(qm, layer, calib, cfg);
    qm.soft_layer = saved.0;
    qm.rounding = saved.1;
    result
}

fn reconstruct(qm: &mut QuantModel, layer: usize, calib: &CalibrationSet, cfg: &ReconConfig) -> Result<ReconReport> {
    let rows = gather_rows(qm, layer, calib, cfg.direction)?;
    let bias = qm.base.layers[layer].bias.data().to_vec();
    let acts_on = qm.acts_quantized && layer > 0;
    let entry_act = if acts_on { qm.act_quantizers()?[layer] } else { None };
    let weights_on = qm.weights_quantized;
    let entry_weight = qm.effective_weight(layer);
    let initial_loss = layer_loss(&entry_weight, &bias, entry_act, &rows);
    if cfg.iterations == 0 || (!weights_on && !acts_on) {
        return Ok(ReconReport {
            layer,
            iterations: 0,
            initial_loss,
            final_loss: initial_loss,
            accepted: true,
            flipped: 0,
        });
    }

    let w = qm.merged_weight(layer);
    let spec = qm.weight_specs[layer];
    let entry = (qm.alpha[layer].clone(), qm.masks[layer].clone(), qm.act_specs[layer]);
    let mut alpha = qm.alpha[layer].data().to_vec();
    let learn_act = acts_on && cfg.learn_act && cfg.lr_act > 0.0;
    let act_spec = qm.act_specs[layer];
    let qmax_a = act_spec.map(|s| s.qmax() as f64).unwrap_or(0.0);
    let mut act_params = match act_spec {
        Some(s) => vec![s.scale.ln(), s.zero_point as f64],
        None => vec![0.0, 0.0],
    };
    let mut adam_alpha = Adam::new(
        AdamConfig {
            lr: cfg.lr_alpha,
            ..AdamConfig::default()
        },
        &[alpha.len()],
    );
    let mut adam_act = Adam::new(
        AdamConfig {
            lr: cfg.lr_act,
            ..AdamConfig::default()
        },
        &[2],
    );
    let mut rng = stage_rng(cfg.seed, &format!("ptq/{}", crate::net::Parameters::layer_name(layer)), 0);
    let batch = cfg.batch_rows.min(rows.n);
    let (fi, fo) = (rows.fan_in, rows.fan_out);
    let mut x_b = vec![0.0; batch * fi];
    let mut y_b = vec![0.0; batch * fo];
    for it in 0..cfg.iterations {
        let idx = sample_indices(&mut rng, rows.n, batch);
        for (k, r) in idx.iter().enumerate() {
            x_b[k * fi..(k + 1) * fi].copy_from_slice(&rows.inputs[r * fi..(r + 1) * fi]);
            y_b[k * fo..(k + 1) * fo].copy_from_slice(&rows.targets[r * fo..(r + 1) * fo]);
        }
        let (wq, dwq_da) = if weights_on {
            soft_weights(&w, &alpha, &spec)
        } else {
            (w.clone(), vec![0.0; w.len()])
        };
        let act = if acts_on {
            Some(if learn_act {
                ActQuant {
                    scale: act_params[0].exp(),
                    zero: act_params[1],
                    qmax: qmax_a,
                }
            } else {
                entry_act.expect("acts_on implies a fitted spec")
            })
        } else {
            None
        };
        let lref = LayerRef {
            weight: &wq,
            bias: &bias,
            fan_in: fi,
            fan_out: fo,
        };
        let cache = mlp::forward(&[lref], x_b.clone(), batch, &[act]);
        let mut loss = 0.0;
        let upstream: Vec<f64> = cache
            .output()
            .iter()
            .zip(&y_b)
            .map(|(a, b)| {
                loss += (a - b).powi(2);
                2.0 * (a - b) / batch as f64
            })
            .collect();
        loss /= batch as f64;
        let g = mlp::backward(&[lref], &cache, &[act], &upstream);
        let mut grad_alpha: Vec<f64> = g.weights[0].iter().zip(&dwq_da).map(|(a, b)| a * b).collect();
        if let (Some(beta), true) = (cfg.beta(it), weights_on) {
            for (ga, &a) in grad_alpha.iter_mut().zip(&alpha) {
                let h = rectified_sigmoid(a);
                let d = 2.0 * h - 1.0;
                loss += cfg.reg_weight * (1.0 - d.abs().powf(beta));
                let dreg = -cfg.reg_weight * beta * d.abs().powf(beta - 1.0) * d.signum() * 2.0;
                *ga += dreg * rectified_sigmoid_grad(a);
            }
        }
        if !loss.is_finite() || grad_alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::ReconstructionDiverged {
                layer,
                iteration: it,
            });
        }
        if weights_on {
            adam_alpha.step(vec![&mut alpha], &[&grad_alpha]);
        }
        if learn_act {
            let s = act_params[0].exp();
            let grad = [g.act_scale[0] * s, g.act_zero[0]];
            adam_act.step(vec![&mut act_params], &[&grad]);
            act_params[1] = act_params[1].clamp(0.0, qmax_a);
        }
    }

    qm.alpha[layer] = crate::tensor::Tensor::new(qm.alpha[layer].shape().to_vec(), alpha)?;
    if weights_on {
        qm.harden(layer);
    }
    if learn_act {
        let bits = act_spec.expect("learned spec exists").bit_width;
        qm.act_specs[layer] = Some(QuantSpec::new(
            act_params[0].exp(),
            act_params[1].round_ties_even() as u32,
            bits,
        )?);
    }
    let final_act = if acts_on { qm.act_specs[layer].map(|s| act_quant(&s)) } else { None };
    let final_loss = layer_loss(&qm.effective_weight(layer), &bias, final_act, &rows);
    let flipped = qm.masks[layer].iter().zip(&entry.1).filter(|(a, b)| a != b).count();
    let accepted = final_loss <= initial_loss;
    if !accepted {
        log::info!(
            "{}: reconstruction loss {final_loss:.3e} above entry {initial_loss:.3e}; reverted",
            crate::net::Parameters::layer_name(layer)
        );
        qm.alpha[layer] = entry.0;
        qm.masks[layer] = entry.1;
        qm.act_specs[layer] = entry.2;
    }
    Ok(ReconReport {
        layer,
        iterations: cfg.iterations,
        initial_loss,
        final_loss: if accepted { final_loss } else { initial_loss },
        accepted,
        flipped: if accepted { flipped } else { 0 },
    })
}

/// Baseline reconstruction: both branches consume the first-order points.
/// Runs the same code as [`sa_ptq_reconstruct`] on the degenerate pairing.
pub fn naive_ptq_reconstruct(qm: &mut QuantModel, layer: usize, calib: &CalibrationSet, cfg: &ReconConfig) -> Result<ReconReport> {
    sa_ptq_reconstruct(qm, layer, &calib.same_point(), cfg)
}

/// Reconstructs every layer in network order.
pub fn ptq_all_layers(qm: &mut QuantModel, calib: &CalibrationSet, cfg: &ReconConfig) -> Result<Vec<ReconReport>> {
    (0..qm.depth())
        .map(|l| sa_ptq_reconstruct(qm, l, calib, cfg))
        .collect()
}

/// Per-row squared output error of `layer` between the quantized path and
/// the full-precision network, both at the first-order points.
pub fn layer_output_mse(qm: &QuantModel, layer: usize, calib: &CalibrationSet) -> Result<f64> {
    let rows = gather_rows(qm, layer, &calib.same_point(), PairingDirection::CaseStudy)?;
    let act = if qm.acts_quantized && layer > 0 { qm.act_quantizers()?[layer] } else { None };
    Ok(layer_loss(&qm.effective_weight(layer), qm.base.layers[layer].bias.data(), act, &rows))
}
