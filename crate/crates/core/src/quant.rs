//! Quantization of trained latents and network weights.
//!
//! Latents use a unit step and round half to even. Weights use a per-tensor
//! power-of-two step chosen by grid search on the rate-distortion cost, and
//! are coded under a zero-mean discretized Laplace whose scale is the mean
//! absolute integer weight.

use crate::error::{Error, Result};
use crate::latent::LatentPyramid;
use crate::range_coder::{laplace_integer_cdf, Cdf, PROB_TOTAL};
use crate::tensor::Mat;
use crate::trainer::round_latent;

/// Latents beyond this magnitude are treated as a diverged run.
pub const MAX_LATENT: f32 = 32768.0;
/// Candidate weight steps are `2^-s` for `s` in this range.
pub const STEP_SHIFTS: std::ops::RangeInclusive<u8> = 4..=12;
/// Largest integer weight magnitude a step may produce.
pub const MAX_WEIGHT_INT: i32 = 2047;
/// Floor on the weight Laplace scale, in integer units.
pub const MIN_WEIGHT_SCALE: f32 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLevel {
    pub lo: i32,
    pub hi: i32,
    pub values: Vec<i32>,
}

impl QuantizedLevel {
    pub fn from_values(values: Vec<i32>) -> Self {
        let lo = values.iter().copied().min().unwrap_or(0);
        let hi = values.iter().copied().max().unwrap_or(0);
        Self { lo, hi, values }
    }

    pub fn alphabet(&self) -> usize {
        (self.hi as i64 - self.lo as i64 + 1) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedPyramid {
    pub attr_id: u8,
    pub levels: Vec<QuantizedLevel>,
}

impl QuantizedPyramid {
    pub fn dequantize(&self) -> LatentPyramid {
        LatentPyramid {
            attr_id: self.attr_id,
            levels: self
                .levels
                .iter()
                .map(|l| l.values.iter().map(|&v| v as f32).collect())
                .collect(),
        }
    }
}

pub fn quantize_latents(p: &LatentPyramid) -> Result<QuantizedPyramid> {
    let mut levels = Vec::with_capacity(p.levels.len());
    for (j, level) in p.levels.iter().enumerate() {
        let mut values = Vec::with_capacity(level.len());
        for (i, &v) in level.iter().enumerate() {
            if !v.is_finite() || v.abs() > MAX_LATENT {
                return Err(Error::Divergence(format!(
                    "latent {i} of level {j} is {v}, beyond +-{MAX_LATENT}"
                )));
            }
            values.push(round_latent(v) as i32);
        }
        let q = QuantizedLevel::from_values(values);
        if q.alphabet() > PROB_TOTAL as usize {
            return Err(Error::Divergence(format!(
                "level {j} spans {} latent values, more than the coder supports",
                q.alphabet()
            )));
        }
        levels.push(q);
    }
    Ok(QuantizedPyramid {
        attr_id: p.attr_id,
        levels,
    })
}

/// One weight tensor as integers times `2^-shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub shift: u8,
    pub values: Vec<i32>,
}

impl QuantizedTensor {
    pub fn step(&self) -> f32 {
        step(self.shift)
    }

    /// `value * step`, exact in f32 for the admitted ranges.
    pub fn dequantize(&self) -> Mat<f32> {
        let d = self.step();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.values.iter().map(|&v| v as f32 * d).collect(),
        }
    }

    pub fn max_abs(&self) -> i32 {
        self.values.iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    /// Laplace scale of the coding model, in integer units.
    pub fn scale(&self) -> f32 {
        weight_scale(&self.values)
    }
}

pub fn step(shift: u8) -> f32 {
    (-(shift as f32)).exp2()
}

pub fn weight_scale(values: &[i32]) -> f32 {
    if values.is_empty() {
        return MIN_WEIGHT_SCALE;
    }
    let sum: i64 = values.iter().map(|&v| v.abs() as i64).sum();
    (sum as f32 / values.len() as f32).max(MIN_WEIGHT_SCALE)
}

/// CDF shared by every weight of a tensor: alphabet `-max_abs..=max_abs`.
pub fn weight_cdf(max_abs: i32, scale: f32) -> Result<Cdf> {
    laplace_integer_cdf(0.0, scale, -max_abs, max_abs)
}

/// Quantize one tensor at `2^-shift`, or `None` if some weight would exceed
/// [`MAX_WEIGHT_INT`].
pub fn quantize_tensor(t: &Mat<f32>, shift: u8) -> Option<QuantizedTensor> {
    let inv = (shift as f32).exp2();
    let mut values = Vec::with_capacity(t.len());
    for &w in &t.data {
        let q = (w * inv).round_ties_even();
        if !(q.abs() <= MAX_WEIGHT_INT as f32) {
            return None;
        }
        values.push(q as i32);
    }
    Some(QuantizedTensor {
        rows: t.rows,
        cols: t.cols,
        shift,
        values,
    })
}

/// Exact codelength of the tensor's integers under its coding CDF.
pub fn weight_bits(q: &QuantizedTensor) -> Result<f64> {
    let cdf = weight_cdf(q.max_abs(), q.scale())?;
    let m = q.max_abs();
    Ok(q.values
        .iter()
        .map(|&v| -cdf.probability((v + m) as usize).log2())
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNet {
    pub tensors: Vec<QuantizedTensor>,
}

impl QuantizedNet {
    pub fn dequantize(&self) -> Vec<Mat<f32>> {
        self.tensors
            .iter()
            .map(QuantizedTensor::dequantize)
            .collect()
    }

    pub fn bits(&self) -> Result<f64> {
        self.tensors.iter().map(weight_bits).sum()
    }
}

/// Greedy per-tensor step search. Tensors are visited in order; each picks the
/// step minimizing `loss(tensors) + bits_weight * weight_bits`, with earlier
/// tensors already quantized and later ones still real-valued. `loss` sees the
/// full tensor list.
pub fn quantize_net(
    tensors: &[Mat<f32>],
    bits_weight: f64,
    mut loss: impl FnMut(&[Mat<f32>]) -> Result<f64>,
) -> Result<QuantizedNet> {
    let mut work = tensors.to_vec();
    let mut out = Vec::with_capacity(tensors.len());
    for t in 0..tensors.len() {
        let mut best: Option<(f64, QuantizedTensor)> = None;
        for shift in STEP_SHIFTS {
            let Some(q) = quantize_tensor(&tensors[t], shift) else {
                continue;
            };
            work[t] = q.dequantize();
            let cost = loss(&work)? + bits_weight * weight_bits(&q)?;
            if !cost.is_finite() {
                continue;
            }
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, q));
            }
        }
        let (_, q) = best.ok_or_else(|| {
            Error::Divergence(format!(
                "tensor {t} has no admissible quantization step (max |w| = {})",
                tensors[t].max_abs()
            ))
        })?;
        work[t] = q.dequantize();
        out.push(q);
    }
    Ok(QuantizedNet { tensors: out })
}
