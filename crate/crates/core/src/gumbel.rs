//! Gumbel top-K sampling of K-hot masks and its temperature relaxation.
//!
//! Hard masks come from perturbing logits with scaled Gumbel(0,1) noise and
//! keeping the K largest entries per distribution. The relaxed counterpart
//! used for gradients is K rounds of exclusion softmax: at step k the softmax
//! is taken over the classes not yet selected, the argmax joins the selected
//! set, and the soft mask is the sum of the K softmax vectors. Forward passes
//! use the hard mask; backward passes route through the soft one
//! (straight-through).
//!
//! Logits enter distribution-major as `[D, C]`; the pruning axis is always
//! the last axis here (granularity handles the layout mapping).

use crate::error::{DppError, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Standard Gumbel(0,1) quantile of a uniform draw: `-ln(-ln u)`.
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// I.i.d. Gumbel(0,1) draws shaped like the effective logits, plus the scale
/// applied when perturbing. A fresh field is drawn per mask realization.
#[derive(Debug, Clone)]
pub struct GumbelNoiseField {
    pub values: Vec<f64>,
    pub beta: f64,
}

/// Draw `count` Gumbel(0,1) samples. `beta` must lie in (0, 1]; a zero scale
/// (deterministic masks, used by tests) is also accepted.
pub fn sample_gumbel<R: Rng>(count: usize, beta: f64, rng: &mut R) -> Result<GumbelNoiseField> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(DppError::InvalidConfig(format!(
            "gumbel scale beta = {beta} outside [0, 1]"
        )));
    }
    let values = (0..count)
        .map(|_| {
            // uniform on (0,1): reject the (measure-zero) exact 0
            let mut u: f64 = rng.random();
            while u <= 0.0 {
                u = rng.random();
            }
            gumbel_from_uniform(u)
        })
        .collect();
    Ok(GumbelNoiseField { values, beta })
}

/// Linear temperature annealing over epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxationSchedule {
    pub tau_init: f64,
    pub tau_end: f64,
    pub n_epochs: usize,
}

impl RelaxationSchedule {
    pub fn new(tau_init: f64, tau_end: f64, n_epochs: usize) -> Result<Self> {
        if n_epochs == 0 || tau_end <= 0.0 || tau_init < tau_end {
            return Err(DppError::InvalidConfig(format!(
                "bad annealing schedule: tau {tau_init} -> {tau_end} over {n_epochs} epochs"
            )));
        }
        Ok(Self { tau_init, tau_end, n_epochs })
    }

    pub fn delta(&self) -> f64 {
        if self.n_epochs > 1 {
            (self.tau_init - self.tau_end) / (self.n_epochs - 1) as f64
        } else {
            0.0
        }
    }

    /// Temperature at a 1-based epoch.
    pub fn tau_at(&self, epoch: usize) -> Result<f64> {
        if epoch < 1 || epoch > self.n_epochs {
            return Err(DppError::InvalidConfig(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.n_epochs
            )));
        }
        Ok(self.tau_init - (epoch - 1) as f64 * self.delta())
    }
}

/// Indices 0..c sorted by descending value, ties broken by lowest index.
/// The comparator must match between the hard and relaxed paths so a zero
/// noise scale stays deterministic.
fn descending_order(z: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..z.len() as u32).collect();
    order.sort_unstable_by(|&i, &j| {
        z[j as usize]
            .partial_cmp(&z[i as usize])
            .expect("finite perturbed logits")
            .then(i.cmp(&j))
    });
    order
}

/// K-hot mask of the K largest entries along the last axis of a `[D, C]`
/// tensor. Ties break toward the lowest index.
pub fn hard_topk_khot<T: Scalar>(perturbed: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let c = *perturbed.shape().last().ok_or_else(|| {
        DppError::ShapeMismatch("hard_topk_khot on a rank-0 tensor".into())
    })?;
    if k < 1 || k > c {
        return Err(DppError::InvalidConfig(format!(
            "K = {k} out of range for C = {c}"
        )));
    }
    if !perturbed.is_finite() {
        return Err(DppError::NonFinite("hard_topk_khot"));
    }
    let mut out = Tensor::zeros(perturbed.shape().to_vec());
    for (slice_in, slice_out) in perturbed
        .data()
        .chunks_exact(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        let z: Vec<f64> = slice_in.iter().map(|v| v.to_f64_val()).collect();
        let order = descending_order(&z);
        for &i in &order[..k] {
            slice_out[i as usize] = T::one();
        }
    }
    Ok(out)
}

/// Cached quantities from one relaxed draw, enough to both replay the soft
/// Jacobian in the backward pass and expose the hard selection.
#[derive(Debug, Clone)]
pub struct RelaxedSlices {
    pub d: usize,
    pub c: usize,
    pub k: usize,
    pub tau: f64,
    /// Per distribution: class order by descending perturbed logit.
    order: Vec<u32>,
    /// Per distribution: exp((z - z_max)/tau) per class, in class order.
    exps: Vec<f64>,
}

impl RelaxedSlices {
    pub fn selected(&self, d: usize) -> &[u32] {
        &self.order[d * self.c..d * self.c + self.k]
    }

    /// dL/dlogits given dL/dsoft, accumulated into `grad` (length d*c).
    pub fn backward_into(&self, upstream: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(upstream.len(), self.d * self.c);
        debug_assert_eq!(grad.len(), self.d * self.c);
        let c = self.c;
        for di in 0..self.d {
            let order = &self.order[di * c..(di + 1) * c];
            let e = &self.exps[di * c..(di + 1) * c];
            let g = &upstream[di * c..(di + 1) * c];
            let gslice = &mut grad[di * c..(di + 1) * c];

            // Suffix sums over the descending order: w[r] = sum of e from
            // rank r on, eg[r] likewise for e*g.
            let mut w = vec![0.0f64; c + 1];
            let mut eg = vec![0.0f64; c + 1];
            for r in (0..c).rev() {
                let ci = order[r] as usize;
                w[r] = w[r + 1] + e[ci];
                eg[r] = eg[r + 1] + e[ci] * g[ci];
            }
            // Prefix sums over steps: p[m] = sum_{k<m} 1/w_k,
            // q[m] = sum_{k<m} eg_k / w_k^2.
            let mut p = vec![0.0f64; self.k + 1];
            let mut q = vec![0.0f64; self.k + 1];
            for k in 0..self.k {
                let (dp, dq) = if w[k] > 0.0 {
                    (1.0 / w[k], eg[k] / (w[k] * w[k]))
                } else {
                    (0.0, 0.0) // fully saturated step: locally flat
                };
                p[k + 1] = p[k] + dp;
                q[k + 1] = q[k] + dq;
            }
            for (rank, &ci) in order.iter().enumerate() {
                let ci = ci as usize;
                let m = (rank + 1).min(self.k);
                gslice[ci] += e[ci] / self.tau * (g[ci] * p[m] - q[m]);
            }
        }
    }
}

/// One relaxed top-K draw over `[D, C]` logits: the hard K-hot mask (exact-K
/// forward values), the soft mask (sum of the K exclusion softmaxes, the
/// backward surrogate), and the cached slices for the Jacobian.
pub fn relaxed_topk<T: Scalar>(
    logits: &Tensor<T>,
    noise: &GumbelNoiseField,
    k: usize,
    tau: f64,
) -> Result<(Tensor<T>, Tensor<T>, RelaxedSlices)> {
    let shape = logits.shape();
    let c = *shape.last().ok_or_else(|| {
        DppError::ShapeMismatch("relaxed_topk on a rank-0 tensor".into())
    })?;
    let d = logits.numel() / c;
    if k < 1 || k > c {
        return Err(DppError::InvalidConfig(format!(
            "K = {k} out of range for C = {c}"
        )));
    }
    if tau <= 0.0 {
        return Err(DppError::InvalidConfig(format!("tau = {tau} must be > 0")));
    }
    if noise.values.len() != logits.numel() {
        return Err(DppError::ShapeMismatch(format!(
            "noise field length {} != logits {}",
            noise.values.len(),
            logits.numel()
        )));
    }
    if !logits.is_finite() {
        return Err(DppError::NonFinite("relaxed_topk"));
    }

    let mut hard = Tensor::zeros(shape.to_vec());
    let mut soft = Tensor::zeros(shape.to_vec());
    let mut all_order = Vec::with_capacity(d * c);
    let mut all_exps = vec![0.0f64; d * c];

    for di in 0..d {
        let lo = di * c;
        let z: Vec<f64> = (0..c)
            .map(|ci| logits.data()[lo + ci].to_f64_val() + noise.beta * noise.values[lo + ci])
            .collect();
        let order = descending_order(&z);
        let z_max = z[order[0] as usize];
        let e = &mut all_exps[lo..lo + c];
        for ci in 0..c {
            e[ci] = ((z[ci] - z_max) / tau).exp();
        }

        // w[r]: suffix weight of the support at step r
        let mut w = vec![0.0f64; c + 1];
        for r in (0..c).rev() {
            w[r] = w[r + 1] + e[order[r] as usize];
        }
        // p[m] = sum_{k<m} 1/w_k; saturated steps contribute a unit spike at
        // the selected class instead.
        let mut p = vec![0.0f64; k + 1];
        for step in 0..k {
            let dp = if w[step] > 0.0 { 1.0 / w[step] } else { 0.0 };
            p[step + 1] = p[step] + dp;
            if w[step] <= 0.0 {
                soft.data_mut()[lo + order[step] as usize] = T::one();
            }
        }
        for (rank, &ci) in order.iter().enumerate() {
            let m = (rank + 1).min(k);
            let ci = ci as usize;
            let v = soft.data()[lo + ci].to_f64_val() + e[ci] * p[m];
            soft.data_mut()[lo + ci] = T::from_f64(v);
        }
        for &ci in &order[..k] {
            hard.data_mut()[lo + ci as usize] = T::one();
        }
        all_order.extend_from_slice(&order);
    }

    Ok((
        hard,
        soft,
        RelaxedSlices {
            d,
            c,
            k,
            tau,
            order: all_order,
            exps: all_exps,
        },
    ))
}
