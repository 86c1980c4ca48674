//! Pruning granularities and the k-out-of-C structure they induce.
//!
//! A prunable layer is parameterised by a weight block of shape
//! `[n_in, a, n_out]` (a fully-connected layer is the `a = 1` case). A
//! granularity picks one axis as the pruning axis and ties the remaining
//! positions, which yields `D` independent categorical distributions with `C`
//! classes each, from which exactly `K` classes stay active.

use crate::error::{DppError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GranularityLevel {
    /// Individual weights: K of `a` per 2D kernel. For fully-connected
    /// layers this becomes K of `n_in` inputs per output neuron.
    Fine,
    /// Whole kernels: K of `n_in` per output map.
    Medium,
    /// Whole filters: K of `n_out` per layer.
    Coarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Fc,
    Conv,
}

/// Weight-block extents: `n_in` input channels, `a` kernel positions,
/// `n_out` output channels. Weights are stored row-major as
/// `[n_in][a][n_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub n_in: usize,
    pub a: usize,
    pub n_out: usize,
}

impl LayerDims {
    pub fn fc(n_in: usize, n_out: usize) -> Self {
        Self { n_in, a: 1, n_out }
    }

    pub fn weight_count(&self) -> usize {
        self.n_in * self.a * self.n_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySpec {
    pub level: GranularityLevel,
    pub k: usize,
}

/// Everything derived from (granularity, layer kind, dims): the pruning-axis
/// length `c`, the number of independent distributions `d`, the tied-block
/// size, and the active-weight count `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskStructure {
    pub level: GranularityLevel,
    pub kind: LayerKind,
    pub dims: LayerDims,
    pub k: usize,
    /// Classes per distribution.
    pub c: usize,
    /// Independent categorical distributions in the layer.
    pub d: usize,
    /// Weight positions tied to one logit.
    pub tie_block: usize,
}

impl GranularitySpec {
    pub fn structure(&self, kind: LayerKind, dims: LayerDims) -> Result<MaskStructure> {
        let (c, d, tie_block) = match (self.level, kind) {
            // A fully-connected layer activates K of n_in inputs per output
            // neuron, so Fine on Fc prunes along the input axis.
            (GranularityLevel::Fine, LayerKind::Fc) => (dims.n_in, dims.n_out, dims.a),
            (GranularityLevel::Fine, LayerKind::Conv) => (dims.a, dims.n_in * dims.n_out, 1),
            (GranularityLevel::Medium, _) => (dims.n_in, dims.n_out, dims.a),
            (GranularityLevel::Coarse, _) => (dims.n_out, 1, dims.n_in * dims.a),
        };
        if self.k < 1 || self.k > c {
            return Err(DppError::InvalidConfig(format!(
                "K = {} out of range for C = {c} ({:?} {:?} layer {:?})",
                self.k, self.level, kind, dims
            )));
        }
        Ok(MaskStructure {
            level: self.level,
            kind,
            dims,
            k: self.k,
            c,
            d,
            tie_block,
        })
    }
}

impl MaskStructure {
    /// Number of active weights in the layer.
    pub fn active_weights(&self) -> usize {
        self.d * self.k * self.tie_block
    }

    /// Effective trainable-logit shape `[n_in', a', n_out']`.
    pub fn effective_shape(&self) -> [usize; 3] {
        match (self.level, self.kind) {
            (GranularityLevel::Fine, LayerKind::Conv) => {
                [self.dims.n_in, self.dims.a, self.dims.n_out]
            }
            (GranularityLevel::Fine, LayerKind::Fc) | (GranularityLevel::Medium, _) => {
                [self.dims.n_in, 1, self.dims.n_out]
            }
            (GranularityLevel::Coarse, _) => [1, 1, self.dims.n_out],
        }
    }

    /// Scalar count a sparse layer occupies: active values plus whatever
    /// indexing the granularity needs.
    pub fn stored_values(&self) -> usize {
        let s = self.active_weights();
        match (self.level, self.kind) {
            (GranularityLevel::Fine, _) => 2 * s,
            (GranularityLevel::Medium, _) => s + self.k * self.dims.n_out,
            (GranularityLevel::Coarse, _) => s,
        }
    }

    /// Flat weight index of class `c` in distribution `d`, offset by `t`
    /// within the tied block.
    ///
    /// Logits are stored distribution-major as `[d][c]`; this is the bridge
    /// from that layout to the `[n_in][a][n_out]` weight layout.
    #[inline]
    pub fn weight_index(&self, d: usize, c: usize, t: usize) -> usize {
        let dims = &self.dims;
        match (self.level, self.kind) {
            (GranularityLevel::Fine, LayerKind::Conv) => {
                // d = (ci, co), c = kernel position, block of 1
                let ci = d / dims.n_out;
                let co = d % dims.n_out;
                (ci * dims.a + c) * dims.n_out + co
            }
            (GranularityLevel::Fine, LayerKind::Fc) | (GranularityLevel::Medium, _) => {
                // d = output map, c = input channel, block over kernel positions
                (c * dims.a + t) * dims.n_out + d
            }
            (GranularityLevel::Coarse, _) => {
                // single distribution over output filters, block over (ci, ka)
                t * dims.n_out + c
            }
        }
    }

    /// Expand an effective `[d][c]` mask to the full weight shape.
    pub fn broadcast<T: Copy>(&self, eff: &[T], full: &mut [T]) {
        debug_assert_eq!(eff.len(), self.d * self.c);
        debug_assert_eq!(full.len(), self.dims.weight_count());
        for d in 0..self.d {
            for c in 0..self.c {
                let v = eff[d * self.c + c];
                for t in 0..self.tie_block {
                    full[self.weight_index(d, c, t)] = v;
                }
            }
        }
    }

    /// Sum a full-shape gradient back onto the effective `[d][c]` layout
    /// (the gradient of a tied logit is the sum over its tied positions).
    pub fn reduce_sum<T: Scalar>(&self, full: &[T], eff: &mut [T]) {
        debug_assert_eq!(eff.len(), self.d * self.c);
        debug_assert_eq!(full.len(), self.dims.weight_count());
        for d in 0..self.d {
            for c in 0..self.c {
                let mut acc = T::zero();
                for t in 0..self.tie_block {
                    acc = acc + full[self.weight_index(d, c, t)];
                }
                eff[d * self.c + c] = acc;
            }
        }
    }
}

use crate::tensor::Scalar;

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(level: GranularityLevel, k: usize) -> GranularitySpec {
        GranularitySpec { level, k }
    }

    #[test]
    fn medium_effective_shape_matches_tying() {
        // 20 input maps, 5x5 kernels, 50 output maps
        let st = spec(GranularityLevel::Medium, 3)
            .structure(LayerKind::Conv, LayerDims { n_in: 20, a: 25, n_out: 50 })
            .unwrap();
        assert_eq!(st.effective_shape(), [20, 1, 50]);
        assert_eq!(st.c, 20);
        assert_eq!(st.d, 50);
        assert_eq!(st.active_weights(), 3 * 25 * 50);
        assert_eq!(st.stored_values(), 3 * 25 * 50 + 3 * 50);
    }

    #[test]
    fn coarse_effective_shape() {
        let st = spec(GranularityLevel::Coarse, 7)
            .structure(LayerKind::Conv, LayerDims { n_in: 16, a: 9, n_out: 64 })
            .unwrap();
        assert_eq!(st.effective_shape(), [1, 1, 64]);
        assert_eq!(st.d, 1);
        assert_eq!(st.c, 64);
        assert_eq!(st.active_weights(), 16 * 9 * 7);
        assert_eq!(st.stored_values(), 16 * 9 * 7);
    }

    #[test]
    fn fine_fc_is_input_axis() {
        let st = spec(GranularityLevel::Fine, 15)
            .structure(LayerKind::Fc, LayerDims::fc(784, 300))
            .unwrap();
        assert_eq!(st.effective_shape(), [784, 1, 300]);
        assert_eq!(st.c, 784);
        assert_eq!(st.d, 300);
        assert_eq!(st.active_weights(), 15 * 300);
        assert_eq!(st.stored_values(), 2 * 15 * 300);
    }

    #[test]
    fn fine_conv_is_kernel_axis() {
        let st = spec(GranularityLevel::Fine, 5)
            .structure(LayerKind::Conv, LayerDims { n_in: 20, a: 25, n_out: 50 })
            .unwrap();
        assert_eq!(st.effective_shape(), [20, 25, 50]);
        assert_eq!(st.c, 25);
        assert_eq!(st.d, 20 * 50);
        assert_eq!(st.active_weights(), 20 * 5 * 50);
    }

    #[test]
    fn k_out_of_range_rejected() {
        assert!(spec(GranularityLevel::Fine, 26)
            .structure(LayerKind::Conv, LayerDims { n_in: 2, a: 25, n_out: 3 })
            .is_err());
        assert!(spec(GranularityLevel::Fine, 0)
            .structure(LayerKind::Conv, LayerDims { n_in: 2, a: 25, n_out: 3 })
            .is_err());
    }

    #[test]
    fn broadcast_reduce_roundtrip_counts() {
        let st = spec(GranularityLevel::Medium, 2)
            .structure(LayerKind::Conv, LayerDims { n_in: 4, a: 9, n_out: 3 })
            .unwrap();
        let eff: Vec<f64> = (0..st.d * st.c).map(|i| i as f64).collect();
        let mut full = vec![0.0f64; st.dims.weight_count()];
        st.broadcast(&eff, &mut full);
        // every weight position covered exactly once
        let mut ones = vec![0.0f64; st.dims.weight_count()];
        st.broadcast(&vec![1.0f64; st.d * st.c], &mut ones);
        assert!(ones.iter().all(|&v| v == 1.0));
        // reduce of broadcast multiplies by the tie block size
        let mut back = vec![0.0f64; st.d * st.c];
        st.reduce_sum(&full, &mut back);
        for (b, e) in back.iter().zip(eff.iter()) {
            assert_eq!(*b, e * st.tie_block as f64);
        }
    }
}
