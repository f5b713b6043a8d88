//! Batched MLP forward/backward over borrowed layer weights.
//!
//! The same engine serves the full-precision network and the fake-quantized
//! one: callers hand in whatever effective weights they want evaluated, plus
//! optional per-layer input quantizers.

/// Fake quantizer for a layer input, `s * (clamp(round(x/s) + round(z), 0, qmax) - round(z))`.
///
/// `zero` is kept real-valued so it can be trained; it is rounded on use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuant {
    pub scale: f64,
    pub zero: f64,
    pub qmax: f64,
}

impl ActQuant {
    /// Returns the quantized value and whether `x` fell inside the clamp range.
    #[inline]
    pub fn apply(&self, x: f64) -> (f64, Clamp) {
        let z = self.zero.round_ties_even();
        let r = (x / self.scale).round_ties_even();
        let q = r + z;
        if q < 0.0 {
            (self.scale * (0.0 - z), Clamp::Low)
        } else if q > self.qmax {
            (self.scale * (self.qmax - z), Clamp::High)
        } else {
            (self.scale * (q - z), Clamp::Inside)
        }
    }

    /// Straight-through partials `(dy/dx, dy/ds, dy/dz)` at `x`.
    #[inline]
    pub fn partials(&self, x: f64) -> (f64, f64, f64) {
        let z = self.zero.round_ties_even();
        match self.apply(x).1 {
            Clamp::Inside => {
                let v = x / self.scale;
                (1.0, v.round_ties_even() - v, 0.0)
            }
            Clamp::Low => (0.0, -z, -self.scale),
            Clamp::High => (0.0, self.qmax - z, -self.scale),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clamp {
    Low,
    Inside,
    High,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerRef<'a> {
    /// Row-major `out x in`.
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub fan_in: usize,
    pub fan_out: usize,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    pub rows: usize,
    /// Layer inputs before input quantization (`rows x fan_in`).
    pub raw_inputs: Vec<Vec<f64>>,
    /// Layer inputs actually multiplied by the weights.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations (`rows x fan_out`).
    pub pre: Vec<Vec<f64>>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct EngineGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub act_scale: Vec<f64>,
    pub act_zero: Vec<f64>,
    /// Gradient with respect to the raw network input (`rows x fan_in[0]`).
    pub input: Vec<f64>,
}

/// Runs the MLP: SiLU after every layer but the last, no output nonlinearity.
pub fn forward(layers: &[LayerRef<'_>], input: Vec<f64>, rows: usize, act: &[Option<ActQuant>]) -> Cache {
    let depth = layers.len();
    let mut raw_inputs = Vec::with_capacity(depth);
    let mut inputs = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth);
    let mut h = input;
    for (l, layer) in layers.iter().enumerate() {
        let quantized = act
            .get(l)
            .copied()
            .flatten()
            .map(|q| h.iter().map(|&v| q.apply(v).0).collect::<Vec<_>>());
        let x = quantized.as_ref().unwrap_or(&h);
        let z = affine(layer, x, rows);
        let next = if l + 1 < depth {
            Some(z.iter().map(|&v| silu(v)).collect::<Vec<_>>())
        } else {
            None
        };
        match quantized {
            Some(q) => {
                raw_inputs.push(h);
                inputs.push(q);
            }
            None => {
                inputs.push(h.clone());
                raw_inputs.push(h);
            }
        }
        pre.push(z);
        if let Some(n) = next {
            h = n;
        } else {
            h = Vec::new();
        }
    }
    Cache {
        rows,
        raw_inputs,
        inputs,
        pre,
    }
}

fn affine(layer: &LayerRef<'_>, x: &[f64], rows: usize) -> Vec<f64> {
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    let mut z = vec![0.0; rows * fo];
    for r in 0..rows {
        let xr = &x[r * fi..(r + 1) * fi];
        let zr = &mut z[r * fo..(r + 1) * fo];
        for (o, zo) in zr.iter_mut().enumerate() {
            let w = &layer.weight[o * fi..(o + 1) * fi];
            let mut acc = 0.0;
            for (wi, xi) in w.iter().zip(xr) {
                acc += wi * xi;
            }
            *zo = acc + layer.bias[o];
        }
    }
    z
}

/// Reverse pass for `<output, upstream>`.
pub fn backward(layers: &[LayerRef<'_>], cache: &Cache, act: &[Option<ActQuant>], upstream: &[f64]) -> EngineGrads {
    let depth = layers.len();
    let rows = cache.rows;
    let mut weights = vec![Vec::new(); depth];
    let mut biases = vec![Vec::new(); depth];
    let mut act_scale = vec![0.0; depth];
    let mut act_zero = vec![0.0; depth];
    let mut g = upstream.to_vec();
    let mut input = Vec::new();
    for l in (0..depth).rev() {
        let layer = &layers[l];
        let (fi, fo) = (layer.fan_in, layer.fan_out);
        let x = &cache.inputs[l];
        let mut gw = vec![0.0; fo * fi];
        let mut gb = vec![0.0; fo];
        let mut gx = vec![0.0; rows * fi];
        for r in 0..rows {
            let gr = &g[r * fo..(r + 1) * fo];
            let xr = &x[r * fi..(r + 1) * fi];
            let gxr = &mut gx[r * fi..(r + 1) * fi];
            for (o, &go) in gr.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                let w = &layer.weight[o * fi..(o + 1) * fi];
                let gwo = &mut gw[o * fi..(o + 1) * fi];
                for i in 0..fi {
                    gwo[i] += go * xr[i];
                    gxr[i] += go * w[i];
                }
            }
        }
        if let Some(q) = act.get(l).copied().flatten() {
            let raw = &cache.raw_inputs[l];
            let (mut ds, mut dz) = (0.0, 0.0);
            for (gi, &xi) in gx.iter_mut().zip(raw) {
                let (dx, dsi, dzi) = q.partials(xi);
                ds += *gi * dsi;
                dz += *gi * dzi;
                *gi *= dx;
            }
            act_scale[l] = ds;
            act_zero[l] = dz;
        }
        weights[l] = gw;
        biases[l] = gb;
        if l > 0 {
            let pre = &cache.pre[l - 1];
            g = gx
                .iter()
                .zip(pre)
                .map(|(gi, &zi)| gi * silu_grad(zi))
                .collect();
        } else {
            input = gx;
        }
    }
    EngineGrads {
        weights,
        biases,
        act_scale,
        act_zero,
        input,
    }
}
