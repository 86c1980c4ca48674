//! Weight quantization in the BinaryConnect style: a full-precision latent
//! copy is what the optimizer updates, the forward pass sees quantized
//! values, and gradients pass straight through wherever the latent weight is
//! inside [-1, 1]. Latents are clipped back to [-1, 1] after every update
//! when quantizing.

use crate::error::{DppError, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
}

impl QuantSpec {
    pub fn new(bits: u8) -> Result<Self> {
        match bits {
            1 | 2 | 8 | 32 => Ok(Self { bits }),
            _ => Err(DppError::InvalidConfig(format!(
                "unsupported bit width {bits} (expected 1, 2, 8 or 32)"
            ))),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.bits == 32
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    /// Uniform step of the symmetric codebook over [-1, 1].
    pub fn delta(&self) -> f64 {
        2.0 / (self.levels() - 1) as f64
    }

    /// Codebook value of code `k`: the k-th of 2^bits levels from -1 to +1.
    /// Export and import both go through this, so decoded values are
    /// bit-identical to what the forward pass produced. The symmetric form
    /// keeps paired levels exact negatives of each other.
    pub fn level_value(&self, k: u64) -> f64 {
        debug_assert!(k < self.levels());
        if self.bits == 1 {
            if k == 0 { -1.0 } else { 1.0 }
        } else {
            let half = (self.levels() - 1) as f64;
            (2.0 * k as f64 - half) / half
        }
    }

    /// Code of the nearest codebook level after clipping to [-1, 1].
    pub fn encode(&self, w: f64) -> u64 {
        if self.bits == 1 {
            // sign(0) = +1
            return if w < 0.0 { 0 } else { 1 };
        }
        let x = w.clamp(-1.0, 1.0);
        ((x + 1.0) / self.delta()).round() as u64
    }

    pub fn quantize_value(&self, w: f64) -> f64 {
        if self.is_identity() {
            w
        } else {
            self.level_value(self.encode(w))
        }
    }
}

/// Quantize a latent tensor to the codebook. 32-bit is a pass-through.
pub fn quantize_forward<T: Scalar>(latent: &Tensor<T>, spec: QuantSpec) -> Result<Tensor<T>> {
    if !latent.is_finite() {
        return Err(DppError::NonFinite("quantize_forward"));
    }
    if spec.is_identity() {
        return Ok(latent.clone());
    }
    let data = latent
        .data()
        .iter()
        .map(|&w| T::from_f64(spec.quantize_value(w.to_f64_val())))
        .collect();
    Tensor::new(latent.shape().to_vec(), data)
}

/// Straight-through gate: the upstream gradient passes where the latent lies
/// in [-1, 1] and is zeroed outside.
pub fn ste_gate<T: Scalar>(latent: &[T], upstream: &[T], out: &mut [T]) {
    let one = T::one();
    for ((o, &l), &u) in out.iter_mut().zip(latent).zip(upstream) {
        if l.abs() <= one {
            *o = *o + u;
        }
    }
}

/// Post-update latent clip for sub-32-bit training.
pub fn clip_latent<T: Scalar>(latent: &mut Tensor<T>) {
    let one = T::one();
    for w in latent.data_mut() {
        if *w > one {
            *w = one;
        } else if *w < -one {
            *w = -one;
        }
    }
}
