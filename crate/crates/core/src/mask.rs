//! Trainable pruning logits, mask realization at the configured granularity,
//! and the entropy penalty that drives the mask distributions toward
//! confident selections.

use crate::error::{DppError, Result};
use crate::granularity::{GranularitySpec, LayerDims, LayerKind, MaskStructure};
use crate::gumbel::{relaxed_topk, GumbelNoiseField, RelaxedSlices};
use crate::tensor::{Scalar, Tensor};

/// Trainable unnormalized log-probabilities for one layer, stored
/// distribution-major as `[D, C]` together with the tying structure that maps
/// them onto the weight block.
#[derive(Debug, Clone)]
pub struct PruningLogits<T> {
    pub values: Tensor<T>,
    pub structure: MaskStructure,
}

/// Effective logits for a layer, every entry set to `init`.
pub fn build_logits<T: Scalar>(
    kind: LayerKind,
    dims: LayerDims,
    spec: GranularitySpec,
    init: T,
) -> Result<PruningLogits<T>> {
    let structure = spec.structure(kind, dims)?;
    Ok(PruningLogits {
        values: Tensor::filled(vec![structure.d, structure.c], init),
        structure,
    })
}

/// One mask draw: the hard K-hot mask broadcast to the full weight shape,
/// plus the effective-level hard/soft pair and the cached relaxation state.
#[derive(Debug, Clone)]
pub struct MaskRealization<T> {
    /// Full weight shape `[n_in, a, n_out]`; binary.
    pub full_hard: Tensor<T>,
    /// Effective `[D, C]`; binary with exactly K ones per row.
    pub eff_hard: Tensor<T>,
    /// Effective `[D, C]`; the backward surrogate.
    pub eff_soft: Tensor<T>,
    pub slices: RelaxedSlices,
}

/// Draw a mask from the logits at temperature `tau` using the given noise
/// field (shaped like the effective logits).
pub fn realize_mask<T: Scalar>(
    logits: &PruningLogits<T>,
    noise: &GumbelNoiseField,
    tau: f64,
) -> Result<MaskRealization<T>> {
    let st = logits.structure;
    let (eff_hard, eff_soft, slices) = relaxed_topk(&logits.values, noise, st.k, tau)?;
    let mut full = Tensor::zeros(vec![st.dims.n_in, st.dims.a, st.dims.n_out]);
    st.broadcast(eff_hard.data(), full.data_mut());
    Ok(MaskRealization {
        full_hard: full,
        eff_hard,
        eff_soft,
        slices,
    })
}

/// Mean over the layer's D distributions of the Shannon entropy (nats) of
/// the softmax-normalized logits, with the gradient w.r.t. the logits.
///
/// For softmax probabilities p, dH/dphi_j = -p_j (ln p_j + H).
pub fn entropy_penalty_with_grad<T: Scalar>(logits: &PruningLogits<T>) -> (f64, Vec<f64>) {
    let st = logits.structure;
    let (d, c) = (st.d, st.c);
    let mut total = 0.0f64;
    let mut grad = vec![0.0f64; d * c];
    let mut p = vec![0.0f64; c];
    for di in 0..d {
        let row = &logits.values.data()[di * c..(di + 1) * c];
        let max = row
            .iter()
            .map(|v| v.to_f64_val())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (pi, v) in p.iter_mut().zip(row) {
            *pi = (v.to_f64_val() - max).exp();
            z += *pi;
        }
        let mut h = 0.0;
        for pi in p.iter_mut() {
            *pi /= z;
            if *pi > 0.0 {
                h -= *pi * pi.ln();
            }
        }
        total += h;
        let gout = &mut grad[di * c..(di + 1) * c];
        for (g, &pi) in gout.iter_mut().zip(p.iter()) {
            *g = if pi > 0.0 { -pi * (pi.ln() + h) / d as f64 } else { 0.0 };
        }
    }
    (total / d as f64, grad)
}

/// Entropy penalty value only.
pub fn entropy_penalty<T: Scalar>(logits: &PruningLogits<T>) -> f64 {
    entropy_penalty_with_grad(logits).0
}

/// Elementwise mask application (value-level path used at inference).
pub fn apply_mask<T: Scalar>(weights: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    if weights.numel() != mask.numel() {
        return Err(DppError::ShapeMismatch(format!(
            "mask has {} entries, weights {}",
            mask.numel(),
            weights.numel()
        )));
    }
    let data = weights
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&w, &m)| w * m)
        .collect();
    Tensor::new(weights.shape().to_vec(), data)
}
