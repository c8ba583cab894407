//! Symmetric uniform fake quantization.
//!
//! A tensor with max magnitude `m` is mapped onto the grid
//! `{−q..q}·s` with `q = 2^(k−1) − 1` and `s = m / q`. Values equal to `±m`
//! map back to exactly `±m`, so the max magnitude survives and a second pass
//! sees the same scale.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::conv::{conv2d_with, ConvGeometry};
use crate::numerics::tensor::{max_abs, Tensor4};

/// Precisions with energy entries in the hardware tables.
pub const SUPPORTED_BITS: [u32; 5] = [4, 6, 8, 12, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantScheme {
    SymmetricUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub scheme: QuantScheme,
}

impl QuantSpec {
    pub fn new(bits: u32) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bits) {
            bail!(
                InvalidArgument,
                "unsupported bit width {bits}; expected one of {SUPPORTED_BITS:?}"
            );
        }
        Ok(Self {
            bits,
            scheme: QuantScheme::SymmetricUniform,
        })
    }

    pub fn levels(&self) -> f64 {
        max_level(self.bits)
    }

    /// Per-tensor scale for `data`, or `None` for an all-zero tensor.
    pub fn scale_for(&self, data: &[f64]) -> Option<f64> {
        scale_for(data, self.bits)
    }
}

/// How the scale of a fake-quantized tensor is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantGranularity {
    /// One scale from the whole tensor (weights).
    PerTensor,
    /// One scale per batch item (activations), so a sample quantizes the
    /// same way alone or inside any batch.
    PerSample,
    /// Fixed scale; values beyond the grid are clipped and their
    /// straight-through gradient is zero.
    Fixed(f64),
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=31).contains(&bits) {
        bail!(InvalidArgument, "bit width {bits} outside [2, 31]");
    }
    Ok(())
}

fn max_level(bits: u32) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

fn scale_for(data: &[f64], bits: u32) -> Option<f64> {
    let m = max_abs(data);
    (m > 0.0).then(|| m / max_level(bits))
}

fn quantize_in_place(data: &mut [f64], bits: u32) {
    let m = max_abs(data);
    if m == 0.0 {
        return;
    }
    let levels = max_level(bits);
    let scale = m / levels;
    for v in data.iter_mut() {
        if v.abs() == m {
            continue;
        }
        let q = (*v / scale).round().clamp(-levels, levels);
        // levels·(m/levels) can land an ulp above m, which would change
        // the scale on a second pass.
        *v = if q.abs() == levels { m.copysign(q) } else { q * scale };
    }
}

/// Per-tensor quantization of a raw slice to `bits` (any width in 2..=31).
pub fn quantize_slice(data: &[f64], bits: u32) -> Result<Vec<f64>> {
    check_bits(bits)?;
    let mut out = data.to_vec();
    quantize_in_place(&mut out, bits);
    Ok(out)
}

/// Per-tensor quantization. All-zero tensors come back unchanged.
pub fn quantize_tensor(t: &Tensor4, spec: &QuantSpec) -> Tensor4 {
    let mut out = t.clone();
    quantize_in_place(out.data_mut(), spec.bits);
    out
}

/// Forward value plus straight-through pass mask (`None` = pass everywhere).
pub(crate) fn fake_quantize(
    t: &Tensor4,
    bits: u32,
    granularity: QuantGranularity,
) -> Result<(Tensor4, Option<Vec<bool>>)> {
    check_bits(bits)?;
    let mut out = t.clone();
    match granularity {
        QuantGranularity::PerTensor => {
            quantize_in_place(out.data_mut(), bits);
            Ok((out, None))
        }
        QuantGranularity::PerSample => {
            let item = t.shape().item_len();
            if item > 0 {
                for chunk in out.data_mut().chunks_mut(item) {
                    quantize_in_place(chunk, bits);
                }
            }
            Ok((out, None))
        }
        QuantGranularity::Fixed(scale) => {
            if !(scale > 0.0) || !scale.is_finite() {
                bail!(InvalidArgument, "fixed quantization scale must be > 0, got {scale}");
            }
            let levels = max_level(bits);
            let range = levels * scale;
            let mut pass = Vec::with_capacity(t.len());
            for v in out.data_mut() {
                pass.push(v.abs() <= range);
                *v = (*v / scale).round().clamp(-levels, levels) * scale;
            }
            Ok((out, Some(pass)))
        }
    }
}

/// Convolution of a quantized layer: weights quantized per tensor and,
/// when `quantize_activations` is set, inputs quantized per sample.
pub fn quantized_forward(
    weights: &Tensor4,
    input: &Tensor4,
    spec: &QuantSpec,
    stride: usize,
    padding: usize,
    quantize_activations: bool,
) -> Result<Tensor4> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, padding)?;
    let qw = quantize_tensor(weights, spec);
    let out = if quantize_activations {
        let (qx, _) = fake_quantize(input, spec.bits, QuantGranularity::PerSample)?;
        conv2d_with(&g, &qx, &qw, None)
    } else {
        conv2d_with(&g, input, &qw, None)
    };
    Ok(out)
}
