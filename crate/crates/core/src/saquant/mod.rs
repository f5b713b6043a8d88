//! Sampling-aware quantization: a fake-quantized wrapper around the noise
//! network, dual-order calibration trajectories, module-wise rounding
//! reconstruction under mixed-order trajectory alignment (SA-PTQ), and
//! adapter fine-tuning under the cosine and alignment losses (SA-QLoRA).

mod calib;
pub mod checkpoint;
mod ptq;
mod qlora;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::mlp::{self, ActQuant, LayerRef};
use crate::net::{LoRAAdapter, Parameters};
use crate::quant::{fit_minmax_values, QuantSpec};
use crate::samplers::DirectionalEvaluator;
use crate::tensor::Tensor;

pub use calib::{collect_dual_trajectories, CalibPair, CalibPoint, CalibrationSet};
pub use ptq::{
    layer_output_mse, naive_ptq_reconstruct, ptq_all_layers, sa_ptq_reconstruct, PairingDirection, ReconConfig,
    ReconReport,
};
pub use qlora::{
    cosine_loss, init_qlora_model, sa_qlora_train, LossRecord, QLoRAObjective, QLoRAOutcome, SAQLoRAConfig,
};

/// Stretch limits of the rectified sigmoid used for soft rounding.
pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;

/// `h(alpha) = clamp(sigmoid(alpha) (zeta - gamma) + gamma, 0, 1)`.
pub fn rectified_sigmoid(alpha: f64) -> f64 {
    (mlp::sigmoid(alpha) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

/// `dh/dalpha`, zero where the clamp is active.
pub fn rectified_sigmoid_grad(alpha: f64) -> f64 {
    let s = mlp::sigmoid(alpha);
    let v = s * (ZETA - GAMMA) + GAMMA;
    if v <= 0.0 || v >= 1.0 {
        0.0
    } else {
        (ZETA - GAMMA) * s * (1.0 - s)
    }
}

/// The `alpha` with `h(alpha) = offset` for `offset` in `(0, 1)`.
pub fn alpha_for_offset(offset: f64) -> f64 {
    let p = (offset - GAMMA) / (ZETA - GAMMA);
    (p / (1.0 - p)).ln()
}

/// Weight and activation bit widths, "WxAy". The first and last layers are
/// held at 8 bits whatever the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BitConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
}

impl Default for BitConfig {
    fn default() -> Self {
        Self {
            weight_bits: 8,
            act_bits: 8,
        }
    }
}

pub const EDGE_LAYER_BITS: u32 = 8;

impl BitConfig {
    pub fn validate(&self) -> Result<()> {
        for b in [self.weight_bits, self.act_bits] {
            if !(crate::quant::MIN_BITS..=crate::quant::MAX_BITS).contains(&b) {
                return Err(Error::Config(format!("bit width {b} outside [2, 8]")));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight_bits, self.act_bits)
    }

    pub fn layer_weight_bits(&self, layer: usize, depth: usize) -> u32 {
        if layer == 0 || layer + 1 == depth {
            EDGE_LAYER_BITS
        } else {
            self.weight_bits
        }
    }

    /// Bits of the quantizer on the input of `layer` (which is the output
    /// activation of `layer - 1`).
    pub fn layer_act_bits(&self, layer: usize, depth: usize) -> u32 {
        if layer + 1 == depth {
            EDGE_LAYER_BITS
        } else {
            self.act_bits
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    /// `floor(w/s) + h` with a learned per-weight offset `h`.
    Learned,
    /// Round half to even of the current (possibly adapter-merged) weight.
    Nearest,
}

/// Fake-quantized view of a noise network.
///
/// Layer `l` multiplies `Q_w(W_l [+ gamma B_l A_l])` with `Q_a(input_l)`.
/// The input of layer 0 is the raw sample and time embedding and is never
/// quantized; every later input is a post-SiLU activation. Biases stay in
/// full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub base: Parameters,
    pub bits: BitConfig,
    pub weight_specs: Vec<QuantSpec>,
    /// Input quantizer per layer; entry 0 is always `None`, later `None`s are unfitted.
    pub act_specs: Vec<Option<QuantSpec>>,
    /// Soft-rounding variables, one per weight.
    pub alpha: Vec<Tensor>,
    /// Hardened rounding offsets `h` in `{0, 1}`.
    pub masks: Vec<Vec<bool>>,
    pub rounding: RoundingMode,
    /// Layer evaluated with soft offsets `h(alpha)` instead of its mask.
    pub soft_layer: Option<usize>,
    pub adapter: Option<LoRAAdapter>,
    pub weights_quantized: bool,
    pub acts_quantized: bool,
}

impl QuantModel {
    /// Min-max weight specs, nearest-rounding masks, soft variables at the
    /// fractional parts, unfitted activation specs.
    pub fn new(base: Parameters, bits: BitConfig) -> Result<Self> {
        bits.validate()?;
        base.check_finite()?;
        let depth = base.depth();
        let mut weight_specs = Vec::with_capacity(depth);
        let mut alpha = Vec::with_capacity(depth);
        let mut masks = Vec::with_capacity(depth);
        for (l, layer) in base.layers.iter().enumerate() {
            let spec = fit_minmax_values(layer.weight.data(), bits.layer_weight_bits(l, depth))?;
            let (a, m) = rounding_init(layer.weight.data(), spec.scale);
            alpha.push(Tensor::new(layer.weight.shape().to_vec(), a)?);
            masks.push(m);
            weight_specs.push(spec);
        }
        Ok(Self {
            base,
            bits,
            weight_specs,
            act_specs: vec![None; depth],
            alpha,
            masks,
            rounding: RoundingMode::Learned,
            soft_layer: None,
            adapter: None,
            weights_quantized: true,
            acts_quantized: true,
        })
    }

    pub fn depth(&self) -> usize {
        self.base.depth()
    }

    pub fn set_quantization(&mut self, weights: bool, acts: bool) {
        self.weights_quantized = weights;
        self.acts_quantized = acts;
    }

    /// Resets `alpha` and the masks of `layer` to nearest rounding under the current scale.
    pub fn reset_rounding(&mut self, layer: usize) {
        let (a, m) = rounding_init(self.base.layers[layer].weight.data(), self.weight_specs[layer].scale);
        self.alpha[layer] = Tensor::new(self.alpha[layer].shape().to_vec(), a).expect("shape unchanged");
        self.masks[layer] = m;
    }

    /// Min-max activation specs from full-precision activations at `points`.
    pub fn calibrate_activations(&mut self, points: &[(&Tensor, &[f64])]) -> Result<()> {
        let depth = self.depth();
        let mut seen: Vec<Vec<f64>> = vec![Vec::new(); depth];
        let weights: Vec<Vec<f64>> = self.base.layers.iter().map(|l| l.weight.data().to_vec()).collect();
        for (x, times) in points {
            let input = self.base.network_input(x, times)?;
            let refs = layer_refs(&self.base, &weights);
            let cache = mlp::forward(&refs, input, x.rows(), &[]);
            for (l, acc) in seen.iter_mut().enumerate().skip(1) {
                acc.extend_from_slice(&cache.raw_inputs[l]);
            }
        }
        for l in 1..depth {
            self.act_specs[l] = Some(fit_minmax_values(&seen[l], self.bits.layer_act_bits(l, depth))?);
        }
        Ok(())
    }

    /// Soft offsets `h(alpha)` of one layer.
    pub fn soft_offsets(&self, layer: usize) -> Vec<f64> {
        self.alpha[layer].data().iter().map(|&a| rectified_sigmoid(a)).collect()
    }

    /// Fixes the masks of `layer` to `h(alpha) >= 0.5`.
    pub fn harden(&mut self, layer: usize) {
        self.masks[layer] = self.soft_offsets(layer).into_iter().map(|h| h >= 0.5).collect();
    }

    /// Weight of `layer` before quantization (adapter merged in).
    pub fn merged_weight(&self, layer: usize) -> Vec<f64> {
        match &self.adapter {
            Some(ad) => ad.effective_weight(layer, &self.base.layers[layer].weight),
            None => self.base.layers[layer].weight.data().to_vec(),
        }
    }

    /// The weights the network actually multiplies with.
    pub fn effective_weight(&self, layer: usize) -> Vec<f64> {
        let w = self.merged_weight(layer);
        if !self.weights_quantized {
            return w;
        }
        let spec = self.weight_specs[layer];
        let (s, z, qmax) = (spec.scale, spec.zero_point as f64, spec.qmax() as f64);
        match self.rounding {
            RoundingMode::Nearest => w.iter().map(|&v| spec.fake_quant(v)).collect(),
            RoundingMode::Learned if self.soft_layer == Some(layer) => w
                .iter()
                .zip(self.alpha[layer].data())
                .map(|(&v, &a)| s * (((v / s).floor() + rectified_sigmoid(a) + z).clamp(0.0, qmax) - z))
                .collect(),
            RoundingMode::Learned => w
                .iter()
                .zip(&self.masks[layer])
                .map(|(&v, &m)| {
                    let code = ((v / s).floor() + if m { 1.0 } else { 0.0 } + z).clamp(0.0, qmax);
                    s * (code - z)
                })
                .collect(),
        }
    }

    pub fn effective_weights(&self) -> Vec<Vec<f64>> {
        (0..self.depth()).map(|l| self.effective_weight(l)).collect()
    }

    /// Input quantizers in engine form; errors on an unfitted spec.
    pub fn act_quantizers(&self) -> Result<Vec<Option<ActQuant>>> {
        if !self.acts_quantized {
            return Ok(vec![None; self.depth()]);
        }
        let mut out = vec![None];
        for l in 1..self.depth() {
            match self.act_specs[l] {
                Some(spec) => out.push(Some(act_quant(&spec))),
                None => return Err(Error::UnfittedActivation(Parameters::layer_name(l))),
            }
        }
        Ok(out)
    }

    pub fn forward_times(&self, x: &Tensor, times: &[f64]) -> Result<Tensor> {
        let cache = self.forward_cache(x, times)?.0;
        Ok(Tensor::matrix(x.rows(), self.base.config.input_dim, cache.output().to_vec()))
    }

    pub(crate) fn forward_cache(&self, x: &Tensor, times: &[f64]) -> Result<(mlp::Cache, Vec<Vec<f64>>, Vec<Option<ActQuant>>)> {
        let acts = self.act_quantizers()?;
        let input = self.base.network_input(x, times)?;
        let weights = self.effective_weights();
        let refs = layer_refs(&self.base, &weights);
        let cache = mlp::forward(&refs, input, x.rows(), &acts);
        Ok((cache, weights, acts))
    }

    /// Largest `|eps_hat - eps|` over the first-order calibration points: an
    /// empirical estimate of the perturbation bound `delta`.
    pub fn empirical_delta(&self, calib: &CalibrationSet) -> Result<f64> {
        let mut sup = 0.0f64;
        for p in &calib.pairs {
            let q = self.forward_times(&p.first.x, &[p.first.t])?;
            sup = sup.max(q.max_abs_diff(&p.first.eps)?);
        }
        Ok(sup)
    }
}

pub(crate) fn act_quant(spec: &QuantSpec) -> ActQuant {
    ActQuant {
        scale: spec.scale,
        zero: spec.zero_point as f64,
        qmax: spec.qmax() as f64,
    }
}

fn rounding_init(w: &[f64], scale: f64) -> (Vec<f64>, Vec<bool>) {
    let mut alpha = Vec::with_capacity(w.len());
    let mut mask = Vec::with_capacity(w.len());
    for &v in w {
        let r = v / scale;
        let floor = r.floor();
        alpha.push(alpha_for_offset(r - floor));
        mask.push(r.round_ties_even() > floor);
    }
    (alpha, mask)
}

pub(crate) fn layer_refs<'a>(params: &'a Parameters, weights: &'a [Vec<f64>]) -> Vec<LayerRef<'a>> {
    params
        .layers
        .iter()
        .zip(weights)
        .map(|(l, w)| LayerRef {
            weight: w,
            bias: l.bias.data(),
            fan_in: l.fan_in(),
            fan_out: l.fan_out(),
        })
        .collect()
}

/// `eps_hat(x, t)` of the fake-quantized model.
pub fn fake_quant_forward(qm: &QuantModel, x: &Tensor, t: f64) -> Result<Tensor> {
    qm.forward_times(x, &[t])
}

/// Quantized model as a sampler direction.
#[derive(Debug, Clone, Copy)]
pub struct QuantEvaluator<'a>(pub &'a QuantModel);

impl DirectionalEvaluator for QuantEvaluator<'_> {
    fn evaluate(&mut self, x: &Tensor, t: f64) -> Result<Tensor> {
        fake_quant_forward(self.0, x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{self, NetConfig};
    use crate::quant::QuantSpec;
    use crate::rng::rng_from_seed;

    fn params() -> Parameters {
        Parameters::init(&NetConfig::default(), 1.0, &mut rng_from_seed(5)).unwrap()
    }

    fn x() -> Tensor {
        Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.3, 0.8])
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn rectified_sigmoid_inverse() {
        for h in [0.01, 0.25, 0.5, 0.75, 0.99] {
            assert!((rectified_sigmoid(alpha_for_offset(h)) - h).abs() < 1e-12);
        }
        assert_eq!(rectified_sigmoid(-50.0), 0.0);
        assert_eq!(rectified_sigmoid(50.0), 1.0);
        assert_eq!(rectified_sigmoid_grad(50.0), 0.0);
    }

    #[test]
    fn disabled_quantization_is_bitwise_base() {
        let p = params();
        let mut qm = QuantModel::new(p.clone(), BitConfig::default()).unwrap();
        qm.set_quantization(false, false);
        let want = net::forward(&p, None, &x(), 0.4).unwrap();
        assert_eq!(bits(&fake_quant_forward(&qm, &x(), 0.4).unwrap()), bits(&want));
    }

    #[test]
    fn nearest_masks_equal_plain_quantization() {
        let p = params();
        let qm = QuantModel::new(p.clone(), BitConfig { weight_bits: 4, act_bits: 8 }).unwrap();
        for l in 0..qm.depth() {
            let spec: QuantSpec = qm.weight_specs[l];
            let plain: Vec<f64> = p.layers[l].weight.data().iter().map(|&w| spec.fake_quant(w)).collect();
            let got = qm.effective_weight(l);
            assert_eq!(
                got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                plain.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            let mut nearest = qm.clone();
            nearest.rounding = RoundingMode::Nearest;
            assert_eq!(nearest.effective_weight(l), got);
        }
    }

    #[test]
    fn edge_layers_stay_at_eight_bits() {
        let qm = QuantModel::new(params(), BitConfig { weight_bits: 4, act_bits: 4 }).unwrap();
        let b: Vec<u32> = qm.weight_specs.iter().map(|s| s.bit_width).collect();
        assert_eq!(b, vec![8, 4, 8]);
        assert_eq!(qm.bits.layer_act_bits(1, 3), 4);
        assert_eq!(qm.bits.layer_act_bits(2, 3), 8);
    }

    #[test]
    fn unfitted_activations_name_the_layer() {
        let qm = QuantModel::new(params(), BitConfig::default()).unwrap();
        match fake_quant_forward(&qm, &x(), 0.5) {
            Err(Error::UnfittedActivation(name)) => assert_eq!(name, "layer1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn soft_offsets_in_unit_interval_and_hardening_is_binary() {
        let mut qm = QuantModel::new(params(), BitConfig::default()).unwrap();
        for a in qm.alpha[1].data_mut().iter_mut().step_by(7) {
            *a *= 40.0;
        }
        assert!(qm.soft_offsets(1).iter().all(|h| (0.0..=1.0).contains(h)));
        qm.harden(1);
        let spec = qm.weight_specs[1];
        let w = qm.base.layers[1].weight.data().to_vec();
        let got = qm.effective_weight(1);
        for ((&v, &m), g) in w.iter().zip(&qm.masks[1]).zip(got) {
            let h = if m { 1.0 } else { 0.0 };
            let code = ((v / spec.scale).floor() + h + spec.zero_point as f64).clamp(0.0, spec.qmax() as f64);
            assert_eq!(g, spec.scale * (code - spec.zero_point as f64));
        }
    }

    #[test]
    fn eight_bit_weight_deviation_within_first_order_estimate() {
        let p = params();
        let mut qm = QuantModel::new(p.clone(), BitConfig::default()).unwrap();
        qm.set_quantization(true, false);
        let xs = x();
        let t = 0.3;
        let fp = net::forward(&p, None, &xs, t).unwrap();
        let q = fake_quant_forward(&qm, &xs, t).unwrap();
        let dev = q.axpby(1.0, &fp, -1.0).unwrap();
        let dev_norm = dev.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        // ||J|| from the parameter gradient of <out, u> over unit directions u.
        let mut jac_sq = 0.0;
        for r in 0..xs.rows() {
            for c in 0..xs.cols() {
                let mut u = Tensor::zeros(xs.shape().to_vec());
                u.data_mut()[r * xs.cols() + c] = 1.0;
                let g = net::backward(&p, None, &xs, &[t], &u).unwrap();
                jac_sq += g.layers.iter().flat_map(|l| l.weight.iter()).map(|v| v * v).sum::<f64>();
            }
        }
        let s_max = qm.weight_specs.iter().map(|s| s.scale).fold(0.0, f64::max);
        let estimate = jac_sq.sqrt() * (s_max / 2.0) * (p.num_weights() as f64).sqrt();
        assert!(dev_norm > 0.0);
        assert!(dev_norm <= 10.0 * estimate, "{dev_norm} vs {estimate}");
    }
}
