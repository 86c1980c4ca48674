//! Information-theoretic mask diagnostics: Monte Carlo inclusion marginals,
//! Average Pruning Entropy, mean-mask entropy and Pruning Diversity.
//!
//! All entropies are in nats. Marginal rows sum to K exactly because every
//! sample is a K-hot mask.

use crate::error::{DppError, Result};
use crate::gumbel::sample_gumbel;
use crate::mask::PruningLogits;
use crate::tensor::Scalar;
use rand::Rng;

/// Monte Carlo estimate of the D x C inclusion probabilities.
#[derive(Debug, Clone)]
pub struct MarginalEstimate {
    pub pi: Vec<f64>,
    pub d: usize,
    pub c: usize,
    pub k: usize,
    /// Sample count behind the estimate.
    pub samples: usize,
}

impl MarginalEstimate {
    /// Build directly from known probabilities (tests, closed-form cases).
    pub fn from_probabilities(pi: Vec<f64>, d: usize, c: usize, k: usize) -> Result<Self> {
        if pi.len() != d * c {
            return Err(DppError::ShapeMismatch(format!(
                "{} probabilities for D={d}, C={c}",
                pi.len()
            )));
        }
        Ok(Self { pi, d, c, k, samples: 0 })
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.pi[d * self.c..(d + 1) * self.c]
    }
}

/// Average `samples` hard-mask realizations drawn from the logits at noise
/// scale `beta`.
pub fn estimate_marginals<T: Scalar, R: Rng>(
    logits: &PruningLogits<T>,
    beta: f64,
    samples: usize,
    rng: &mut R,
) -> Result<MarginalEstimate> {
    if samples < 1 {
        return Err(DppError::InvalidConfig("need at least one sample".into()));
    }
    let st = logits.structure;
    let (d, c, k) = (st.d, st.c, st.k);
    let mut counts = vec![0u64; d * c];
    let vals = logits.values.data();
    let mut z = vec![0.0f64; c];
    let mut order: Vec<u32> = Vec::new();
    for _ in 0..samples {
        let noise = sample_gumbel(d * c, beta, rng)?;
        for di in 0..d {
            for ci in 0..c {
                z[ci] = vals[di * c + ci].to_f64_val() + beta * noise.values[di * c + ci];
            }
            order.clear();
            order.extend(0..c as u32);
            if k < c {
                order.select_nth_unstable_by(k - 1, |&i, &j| {
                    z[j as usize]
                        .partial_cmp(&z[i as usize])
                        .expect("finite logits")
                        .then(i.cmp(&j))
                });
            }
            for &ci in &order[..k] {
                counts[di * c + ci as usize] += 1;
            }
        }
    }
    let pi = counts
        .iter()
        .map(|&n| n as f64 / samples as f64)
        .collect();
    Ok(MarginalEstimate { pi, d, c, k, samples })
}

fn entropy_term(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Mean over the D distributions of the Shannon entropy of their inclusion
/// marginals: (1/D) sum_d -sum_c pi ln pi, with 0 ln 0 := 0.
pub fn average_pruning_entropy(est: &MarginalEstimate) -> f64 {
    let per_d: f64 = (0..est.d)
        .map(|d| est.row(d).iter().copied().map(entropy_term).sum::<f64>())
        .sum();
    per_d / est.d as f64
}

/// Entropy of the layer-average mask: -sum_c pi_bar ln pi_bar with
/// pi_bar = (1/D) sum_d pi_d.
pub fn mean_mask_entropy(est: &MarginalEstimate) -> f64 {
    (0..est.c)
        .map(|c| {
            let mean = (0..est.d).map(|d| est.row(d)[c]).sum::<f64>() / est.d as f64;
            entropy_term(mean)
        })
        .sum()
}

/// Mutual-information-style diversity: mean-mask entropy minus the Average
/// Pruning Entropy. Needs at least two distributions to be meaningful.
pub fn pruning_diversity(est: &MarginalEstimate) -> Result<f64> {
    if est.d < 2 {
        return Err(DppError::InvalidConfig(
            "pruning diversity needs D >= 2 distributions".into(),
        ));
    }
    Ok(mean_mask_entropy(est) - average_pruning_entropy(est))
}

/// Entropy upper bound for K-of-C masks: -K ln(K/C).
pub fn entropy_upper_bound(k: usize, c: usize) -> f64 {
    -(k as f64) * ((k as f64) / (c as f64)).ln()
}

/// Per-layer summary in nats plus bound-normalized variants.
#[derive(Debug, Clone, Copy)]
pub struct LayerMetrics {
    pub h_avg: f64,
    pub h_mean_mask: f64,
    /// `None` for single-distribution (coarse) layers.
    pub diversity: Option<f64>,
    pub upper_bound: f64,
    pub h_avg_normalized: f64,
    pub diversity_normalized: f64,
}

pub fn layer_metrics(est: &MarginalEstimate) -> LayerMetrics {
    let h_avg = average_pruning_entropy(est);
    let h_mean = mean_mask_entropy(est);
    let diversity = if est.d >= 2 { Some(h_mean - h_avg) } else { None };
    let u = entropy_upper_bound(est.k, est.c);
    let norm = |x: f64| if u > 0.0 { x / u } else { 0.0 };
    LayerMetrics {
        h_avg,
        h_mean_mask: h_mean,
        diversity,
        upper_bound: u,
        h_avg_normalized: norm(h_avg),
        diversity_normalized: norm(diversity.unwrap_or(0.0)),
    }
}
