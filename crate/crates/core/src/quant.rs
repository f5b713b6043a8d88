//! Per-tensor affine quantization: `code = clamp(round(x / s) + z, 0, 2^b - 1)`.
//!
//! Rounding is round-half-to-even everywhere in the crate.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_header, read_u32, write_header, Tensor};

/// Minimum and maximum supported bit widths.
pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

/// Range widening applied to degenerate (all-equal) calibration tensors.
pub const DEGENERATE_RANGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub scale: f64,
    pub zero_point: u32,
    pub bit_width: u32,
}

impl QuantSpec {
    pub fn new(scale: f64, zero_point: u32, bit_width: u32) -> Result<Self> {
        let spec = Self {
            scale,
            zero_point,
            bit_width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bit_width) {
            return Err(Error::InvalidArgument(format!(
                "bit width {} outside [{MIN_BITS}, {MAX_BITS}]",
                self.bit_width
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive and finite, got {}",
                self.scale
            )));
        }
        if self.zero_point > self.qmax() {
            return Err(Error::InvalidArgument(format!(
                "zero point {} exceeds 2^{} - 1",
                self.zero_point, self.bit_width
            )));
        }
        Ok(())
    }

    /// Largest code, `2^b - 1`.
    pub fn qmax(&self) -> u32 {
        (1u32 << self.bit_width) - 1
    }

    /// Smallest and largest representable real values.
    pub fn range(&self) -> (f64, f64) {
        let z = self.zero_point as f64;
        (
            self.scale * (0.0 - z),
            self.scale * (self.qmax() as f64 - z),
        )
    }

    /// Quantizes one finite value.
    pub fn code_of(&self, x: f64) -> u32 {
        let v = (x / self.scale).round_ties_even() + self.zero_point as f64;
        v.clamp(0.0, self.qmax() as f64) as u32
    }

    pub fn value_of(&self, code: u32) -> f64 {
        self.scale * (code as f64 - self.zero_point as f64)
    }

    /// `dequantize(quantize(x))` for a single value.
    pub fn fake_quant(&self, x: f64) -> f64 {
        self.value_of(self.code_of(x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<u16>,
    spec: QuantSpec,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<u16>, spec: QuantSpec) -> Result<Self> {
        spec.validate()?;
        let n: usize = shape.iter().product();
        if n != codes.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not hold {} codes",
                codes.len()
            )));
        }
        if let Some(c) = codes.iter().find(|&&c| c as u32 > spec.qmax()) {
            return Err(Error::InvalidArgument(format!(
                "code {c} exceeds 2^{} - 1",
                spec.bit_width
            )));
        }
        Ok(Self { shape, codes, spec })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, &self.shape)?;
        w.write_all(&self.spec.scale.to_le_bytes())?;
        w.write_all(&self.spec.zero_point.to_le_bytes())?;
        w.write_all(&self.spec.bit_width.to_le_bytes())?;
        for c in &self.codes {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let shape = read_header(r)?;
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let scale = f64::from_le_bytes(buf8);
        let zero_point = read_u32(r)?;
        let bit_width = read_u32(r)?;
        let spec = QuantSpec::new(scale, zero_point, bit_width)
            .map_err(|e| Error::Format(format!("bad quantization header: {e}")))?;
        let n: usize = shape.iter().product();
        let mut codes = Vec::with_capacity(n);
        let mut buf2 = [0u8; 2];
        for _ in 0..n {
            r.read_exact(&mut buf2)?;
            codes.push(u16::from_le_bytes(buf2));
        }
        Self::new(shape, codes, spec)
    }
}

pub fn quantize(x: &Tensor, spec: QuantSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    x.check_finite()?;
    let codes = x.data().iter().map(|&v| spec.code_of(v) as u16).collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes,
        spec,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q.codes.iter().map(|&c| q.spec.value_of(c as u32)).collect();
    Tensor::new(q.shape.clone(), data).expect("quantized tensor shape is valid")
}

/// Asymmetric min-max calibration over a slice of values.
///
/// The range is extended to contain zero so that the zero point stays inside
/// `[0, 2^b - 1]` and every calibration value is representable.
pub fn fit_minmax_values(values: &[f64], bit_width: u32) -> Result<QuantSpec> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit quantization parameters to an empty tensor".into(),
        ));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let mut hi = values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    if hi - lo <= 0.0 {
        hi = lo + DEGENERATE_RANGE_EPS;
    }
    let qmax = ((1u32 << bit_width.clamp(MIN_BITS, MAX_BITS)) - 1) as f64;
    let scale = (hi - lo) / qmax;
    let zero_point = (-lo / scale).round_ties_even().clamp(0.0, qmax) as u32;
    QuantSpec::new(scale, zero_point, bit_width)
}

pub fn fit_qparams_minmax(x: &Tensor, bit_width: u32) -> Result<QuantSpec> {
    fit_minmax_values(x.data(), bit_width)
}
