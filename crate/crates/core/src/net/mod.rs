//! Noise-estimation network `eps_theta(x, t)`: a small SiLU MLP over
//! `[x, time_embedding(t)]` with optional low-rank adapters.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod train;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use adam::{Adam, AdamConfig};
pub use mlp::ActQuant;
pub use train::{train_denoiser, DataSource, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_widths: vec![64, 64],
            time_embed_dim: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config(
                "need at least one hidden layer, all widths positive".into(),
            ));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("time_embed_dim must be positive and even".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim + self.time_embed_dim;
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.input_dim));
        dims
    }

    pub fn depth(&self) -> usize {
        self.hidden_widths.len() + 1
    }
}

/// Sinusoidal features of `tau = 1000 t / t_end` at angular frequencies
/// `10^(-4 k / (half - 1))`, `k = 0..half`: `[sin(tau w_k).., cos(tau w_k)..]`.
pub fn time_embedding(t: f64, t_end: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    let tau = 1000.0 * t / t_end;
    for k in 0..half {
        let w = if half > 1 {
            10f64.powf(-4.0 * k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out[k] = (tau * w).sin();
        out[half + k] = (tau * w).cos();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_out x fan_in`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: NetConfig,
    /// Time horizon `T` used to normalise the time embedding.
    pub t_end: f64,
    pub layers: Vec<Linear>,
}

impl Parameters {
    /// Normal(0, 1/fan_in) weights, zero biases.
    pub fn init(config: &NetConfig, t_end: f64, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fi, fo)| {
                let std = (1.0 / fi as f64).sqrt();
                let w = (0..fi * fo)
                    .map(|_| { let z: f64 = StandardNormal.sample(rng); std * z })
                    .collect::<Vec<f64>>();
                Linear {
                    weight: Tensor::matrix(fo, fi, w),
                    bias: Tensor::scalar_vec(vec![0.0; fo]),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            t_end,
            layers,
        })
    }

    pub fn zeros(config: &NetConfig, t_end: f64) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fi, fo)| Linear {
                weight: Tensor::zeros(vec![fo, fi]),
                bias: Tensor::zeros(vec![fo]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            t_end,
            layers,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for l in &self.layers {
            l.weight.check_finite()?;
            l.bias.check_finite()?;
        }
        Ok(())
    }

    /// Flat mutable views `[w0, b0, w1, b1, ...]`.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.data_mut());
        }
        out
    }

    pub fn layer_name(index: usize) -> String {
        format!("layer{index}")
    }

    /// Builds `[x, emb(t_r)]` for every row.
    pub fn network_input(&self, x: &Tensor, times: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.input_dim;
        if x.shape().len() != 2 || x.cols() != d {
            return Err(Error::Shape(format!(
                "network expects rows of dimension {d}, got {:?}",
                x.shape()
            )));
        }
        if times.len() != x.rows() && times.len() != 1 {
            return Err(Error::Shape(format!(
                "{} times for {} rows",
                times.len(),
                x.rows()
            )));
        }
        let e = self.config.time_embed_dim;
        let width = d + e;
        let mut input = vec![0.0; x.rows() * width];
        let mut shared = vec![0.0; e];
        if times.len() == 1 {
            time_embedding(times[0], self.t_end, e, &mut shared);
        }
        for r in 0..x.rows() {
            let dst = &mut input[r * width..(r + 1) * width];
            dst[..d].copy_from_slice(x.row(r));
            if times.len() == 1 {
                dst[d..].copy_from_slice(&shared);
            } else {
                time_embedding(times[r], self.t_end, e, &mut dst[d..]);
            }
        }
        Ok(input)
    }
}

/// Low-rank update for one layer: `delta W = (c / r) B A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub rank: usize,
    /// `rank x fan_in`.
    pub a: Tensor,
    /// `fan_out x rank`, zero at creation.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoRAAdapter {
    pub requested_rank: usize,
    pub scale_constant: f64,
    /// `None` for rank-0 layers.
    pub layers: Vec<Option<LoraLayer>>,
}

impl LoRAAdapter {
    /// Adapter on every weight matrix; per-layer rank is capped at
    /// `min(fan_in, fan_out)`.
    pub fn new(params: &Parameters, rank: usize, rng: &mut SeededRng) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| {
                let (fi, fo) = (l.fan_in(), l.fan_out());
                let r = rank.min(fi).min(fo);
                if r < rank {
                    log::warn!("adapter rank {rank} clamped to {r} for a {fo}x{fi} layer");
                }
                if r == 0 {
                    return None;
                }
                let std = (1.0 / fi as f64).sqrt();
                let a = (0..r * fi)
                    .map(|_| { let z: f64 = StandardNormal.sample(rng); std * z })
                    .collect();
                Some(LoraLayer {
                    rank: r,
                    a: Tensor::matrix(r, fi, a),
                    b: Tensor::zeros(vec![fo, r]),
                })
            })
            .collect();
        Self {
            requested_rank: rank,
            scale_constant: 1.0,
            layers,
        }
    }

    pub fn gamma(&self, layer: usize) -> f64 {
        match &self.layers[layer] {
            Some(l) => self.scale_constant / l.rank as f64,
            None => 0.0,
        }
    }

    /// `W + gamma B A`, or `W` unchanged when the layer has no adapter.
    pub fn effective_weight(&self, layer: usize, weight: &Tensor) -> Vec<f64> {
        let mut w = weight.data().to_vec();
        if let Some(ad) = &self.layers[layer] {
            let gamma = self.gamma(layer);
            let (fo, fi, r) = (weight.rows(), weight.cols(), ad.rank);
            let (a, b) = (ad.a.data(), ad.b.data());
            for o in 0..fo {
                for i in 0..fi {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += b[o * r + k] * a[k * fi + i];
                    }
                    w[o * fi + i] += gamma * acc;
                }
            }
        }
        w
    }

    /// Chain rule from `dL/dW_eff` to `(dL/dA, dL/dB)`.
    pub fn chain(&self, layer: usize, grad_w: &[f64], fan_in: usize, fan_out: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let ad = self.layers[layer].as_ref()?;
        let gamma = self.gamma(layer);
        let r = ad.rank;
        let (a, b) = (ad.a.data(), ad.b.data());
        let mut ga = vec![0.0; r * fan_in];
        let mut gb = vec![0.0; fan_out * r];
        for o in 0..fan_out {
            for i in 0..fan_in {
                let g = gamma * grad_w[o * fan_in + i];
                if g == 0.0 {
                    continue;
                }
                for k in 0..r {
                    ga[k * fan_in + i] += b[o * r + k] * g;
                    gb[o * r + k] += g * a[k * fan_in + i];
                }
            }
        }
        Some((ga, gb))
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut().flatten() {
            out.push(l.a.data_mut());
            out.push(l.b.data_mut());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LinearGrad>,
    /// `(dA, dB)` per adapted layer, mirroring `LoRAAdapter::layers`.
    pub adapter: Option<Vec<Option<(Vec<f64>, Vec<f64>)>>>,
    pub input: Tensor,
}

impl GradientBundle {
    /// Flat views in the order of [`Parameters::slices_mut`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
            .collect()
    }

    /// Flat views in the order of [`LoRAAdapter::slices_mut`].
    pub fn adapter_slices(&self) -> Vec<&[f64]> {
        self.adapter
            .iter()
            .flatten()
            .flatten()
            .flat_map(|(a, b)| [a.as_slice(), b.as_slice()])
            .collect()
    }
}

fn effective_weights(params: &Parameters, adapter: Option<&LoRAAdapter>) -> Result<Vec<Vec<f64>>> {
    if let Some(ad) = adapter {
        if ad.layers.len() != params.depth() {
            return Err(Error::Shape(format!(
                "adapter has {} layers, network has {}",
                ad.layers.len(),
                params.depth()
            )));
        }
    }
    Ok(params
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match adapter {
            Some(ad) => ad.effective_weight(i, &l.weight),
            None => l.weight.data().to_vec(),
        })
        .collect())
}

fn layer_refs<'a>(params: &'a Parameters, weights: &'a [Vec<f64>]) -> Vec<mlp::LayerRef<'a>> {
    params
        .layers
        .iter()
        .zip(weights)
        .map(|(l, w)| mlp::LayerRef {
            weight: w,
            bias: l.bias.data(),
            fan_in: l.fan_in(),
            fan_out: l.fan_out(),
        })
        .collect()
}

/// Predicted noise for every row of `x` at one shared time `t`.
pub fn forward(params: &Parameters, adapter: Option<&LoRAAdapter>, x: &Tensor, t: f64) -> Result<Tensor> {
    forward_times(params, adapter, x, &[t])
}

/// As [`forward`] with a time per row (or one shared time).
pub fn forward_times(params: &Parameters, adapter: Option<&LoRAAdapter>, x: &Tensor, times: &[f64]) -> Result<Tensor> {
    let input = params.network_input(x, times)?;
    let weights = effective_weights(params, adapter)?;
    let refs = layer_refs(params, &weights);
    let cache = mlp::forward(&refs, input, x.rows(), &[]);
    Ok(Tensor::matrix(x.rows(), params.config.input_dim, cache.output().to_vec()))
}

/// Exact gradients of `<forward(x, t), upstream>`.
pub fn backward(
    params: &Parameters,
    adapter: Option<&LoRAAdapter>,
    x: &Tensor,
    times: &[f64],
    upstream: &Tensor,
) -> Result<GradientBundle> {
    if upstream.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "upstream {:?} vs output {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let input = params.network_input(x, times)?;
    let weights = effective_weights(params, adapter)?;
    let refs = layer_refs(params, &weights);
    let cache = mlp::forward(&refs, input, x.rows(), &[]);
    let g = mlp::backward(&refs, &cache, &[], upstream.data());
    Ok(bundle_from_engine(params, adapter, g, x.rows()))
}

pub(crate) fn bundle_from_engine(
    params: &Parameters,
    adapter: Option<&LoRAAdapter>,
    g: mlp::EngineGrads,
    rows: usize,
) -> GradientBundle {
    let d = params.config.input_dim;
    let width = d + params.config.time_embed_dim;
    let mut input = Vec::with_capacity(rows * d);
    for r in 0..rows {
        input.extend_from_slice(&g.input[r * width..r * width + d]);
    }
    let adapter_grads = adapter.map(|ad| {
        params
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| ad.chain(i, &g.weights[i], l.fan_in(), l.fan_out()))
            .collect()
    });
    GradientBundle {
        layers: g
            .weights
            .into_iter()
            .zip(g.biases)
            .map(|(weight, bias)| LinearGrad { weight, bias })
            .collect(),
        adapter: adapter_grads,
        input: Tensor::matrix(rows, d, input),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};

    fn small_config() -> NetConfig {
        NetConfig {
            input_dim: 2,
            hidden_widths: vec![6, 5],
            time_embed_dim: 4,
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        let mut c = NetConfig::default();
        c.hidden_widths.clear();
        assert!(c.validate().is_err());
        let mut c = NetConfig::default();
        c.time_embed_dim = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = Parameters::zeros(&NetConfig::default(), 1.0).unwrap();
        let mut rng = rng_from_seed(1);
        let x = standard_normal(7, 2, &mut rng);
        for t in [1e-4, 0.3, 1.0] {
            let y = forward(&p, None, &x, t).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fresh_adapter_is_bitwise_identity() {
        let mut rng = rng_from_seed(2);
        let p = Parameters::init(&NetConfig::default(), 1.0, &mut rng).unwrap();
        let ad = LoRAAdapter::new(&p, 32, &mut rng);
        let x = standard_normal(9, 2, &mut rng);
        let a = forward(&p, None, &x, 0.42).unwrap();
        let b = forward(&p, Some(&ad), &x, 0.42).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn adapter_rank_is_capped_per_layer() {
        let mut rng = rng_from_seed(3);
        let p = Parameters::init(&small_config(), 1.0, &mut rng).unwrap();
        let ad = LoRAAdapter::new(&p, 32, &mut rng);
        let ranks: Vec<usize> = ad.layers.iter().map(|l| l.as_ref().unwrap().rank).collect();
        assert_eq!(ranks, vec![6, 5, 2]);
        let ad0 = LoRAAdapter::new(&p, 0, &mut rng);
        assert!(ad0.layers.iter().all(Option::is_none));
    }

    #[test]
    fn adapter_b_gradient_vanishes_when_a_is_zero() {
        let mut rng = rng_from_seed(4);
        let p = Parameters::init(&small_config(), 1.0, &mut rng).unwrap();
        let mut ad = LoRAAdapter::new(&p, 3, &mut rng);
        for l in ad.layers.iter_mut().flatten() {
            l.a = Tensor::zeros(l.a.shape().to_vec());
            l.b = standard_normal(l.b.rows(), l.b.cols(), &mut rng);
        }
        let x = standard_normal(5, 2, &mut rng);
        let up = standard_normal(5, 2, &mut rng);
        let g = backward(&p, Some(&ad), &x, &[0.5], &up).unwrap();
        for (_, gb) in g.adapter.unwrap().into_iter().flatten() {
            assert!(gb.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = rng_from_seed(5);
        let p = Parameters::init(&small_config(), 1.0, &mut rng).unwrap();
        let x = standard_normal(3, 3, &mut rng);
        assert!(matches!(forward(&p, None, &x, 0.1), Err(Error::Shape(_))));
        let x = standard_normal(3, 2, &mut rng);
        let up = standard_normal(2, 2, &mut rng);
        assert!(backward(&p, None, &x, &[0.1], &up).is_err());
        assert!(forward_times(&p, None, &x, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_row_independent() {
        let mut rng = rng_from_seed(6);
        let p = Parameters::init(&small_config(), 1.0, &mut rng).unwrap();
        let x = standard_normal(4, 2, &mut rng);
        let a = forward(&p, None, &x, 0.25).unwrap();
        let b = forward(&p, None, &x, 0.25).unwrap();
        assert_eq!(a, b);
        let single = forward(&p, None, &Tensor::matrix(1, 2, x.row(2).to_vec()), 0.25).unwrap();
        assert_eq!(single.data(), a.row(2));
    }
}
