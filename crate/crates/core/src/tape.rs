//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded in execution order; `backward` replays them in
//! reverse, accumulating gradients. The tape is rebuilt every mini-batch;
//! parameters live outside it and enter through [`Tape::leaf`].
//!
//! The two discrete operations carry their relaxed counterparts: the top-K
//! mask backpropagates through the exclusion-softmax surrogate and the
//! quantizer through the straight-through gate. Their forward value is the
//! hard/quantized one by default; tests can flip them to the surrogate
//! forward so the whole graph becomes differentiable and finite-difference
//! checkable.

use crate::error::{DppError, Result};
use crate::granularity::MaskStructure;
use crate::gumbel::{relaxed_topk, GumbelNoiseField, RelaxedSlices};
use crate::linalg;
use crate::mask::PruningLogits;
use crate::quant::{self, QuantSpec};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tensor recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Forward value emitted by the top-K mask op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Exact K-hot mask (training and inference).
    Hard,
    /// The softmax-sum surrogate (gradient checking).
    Soft,
}

/// Forward value emitted by the quantizer op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Nearest codebook level (training and inference).
    Codebook,
    /// Clip to [-1, 1] only; the function the straight-through gate is the
    /// exact gradient of (gradient checking).
    Surrogate,
}

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, geom: linalg::ConvGeom, cols: Vec<T> },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    AddBias { x: Var, bias: Var, channels: usize, inner: usize },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Reshape { x: Var },
    SoftmaxXent { logits: Var, softmax: Vec<T>, targets: Tensor<T> },
    TopkMask { logits: Var, slices: RelaxedSlices },
    TieBroadcast { eff: Var, structure: MaskStructure },
    EntropyPenalty { logits: Var, grad: Vec<f64> },
    QuantizeSte { w: Var },
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    grads: Vec<Vec<T>>,
    ops: Vec<Op<T>>,
    ran_backward: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let id = self.values.len();
        self.grads.push(vec![T::zero(); value.numel()]);
        self.values.push(value);
        self.ops.push(op);
        Var(id)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` loss w.r.t. `v` (zeros before then).
    pub fn grad(&self, v: Var) -> &[T] {
        &self.grads[v.0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DppError::ShapeMismatch(format!(
                "matmul {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        linalg::matmul(
            self.values[a.0].data(),
            self.values[b.0].data(),
            m,
            k,
            n,
            out.data_mut(),
        );
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// Valid-padding cross-correlation of `x [batch, c_in, h, w]` with
    /// `w [c_in, kh*kw, c_out]` (square kernels).
    pub fn conv2d(&mut self, x: Var, w: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let sx = self.values[x.0].shape().to_vec();
        let sw = self.values[w.0].shape().to_vec();
        if sx.len() != 4 || sw.len() != 3 || sw[1] != kh * kw || sw[0] != sx[1] {
            return Err(DppError::ShapeMismatch(format!(
                "conv2d x {sx:?} w {sw:?} kernel {kh}x{kw}"
            )));
        }
        let (batch, c_in, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let c_out = sw[2];
        if kh > h || kw > wdt {
            return Err(DppError::ShapeMismatch(format!(
                "kernel {kh}x{kw} larger than input {h}x{wdt}"
            )));
        }
        if stride == 0 || (h - kh) % stride != 0 || (wdt - kw) % stride != 0 {
            return Err(DppError::ShapeMismatch(format!(
                "non-integer output extent for input {h}x{wdt}, kernel {kh}x{kw}, stride {stride}"
            )));
        }
        let geom = linalg::ConvGeom {
            batch,
            c_in,
            h,
            w: wdt,
            kh,
            kw,
            c_out,
            stride,
            h_out: (h - kh) / stride + 1,
            w_out: (wdt - kw) / stride + 1,
        };
        let patch = geom.patch();
        let pos = geom.positions();
        let mut cols = vec![T::zero(); batch * pos * patch];
        linalg::im2col(self.values[x.0].data(), &geom, &mut cols);
        // cols [batch*pos, patch] x w [patch, c_out] -> [batch*pos, c_out]
        let mut prod = vec![T::zero(); batch * pos * c_out];
        linalg::matmul(&cols, self.values[w.0].data(), batch * pos, patch, c_out, &mut prod);
        // reorder to [batch, c_out, h_out, w_out]
        let mut out = Tensor::zeros(vec![batch, c_out, geom.h_out, geom.w_out]);
        let od = out.data_mut();
        for b in 0..batch {
            for p in 0..pos {
                let src = &prod[(b * pos + p) * c_out..(b * pos + p + 1) * c_out];
                for (co, &v) in src.iter().enumerate() {
                    od[(b * c_out + co) * pos + p] = v;
                }
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, geom, cols }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.values[x.0]
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor::new(self.values[x.0].shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu { x })
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(DppError::ShapeMismatch(format!(
                "maxpool2 needs [batch, c, even, even], got {s:?}"
            )));
        }
        let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(vec![batch, c, h / 2, w / 2]);
        let mut argmax = vec![0usize; out.numel()];
        linalg::maxpool2(self.values[x.0].data(), batch, c, h, w, out.data_mut(), &mut argmax);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    /// Add a per-channel bias: axis 1 of a rank-2 or rank-4 tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.values[x.0].shape().to_vec();
        let sb = self.values[bias.0].shape().to_vec();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(DppError::ShapeMismatch(format!(
                "add_bias x {sx:?} bias {sb:?}"
            )));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut out = self.values[x.0].clone();
        let bd = self.values[bias.0].data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bd[(i / inner) % channels];
        }
        Ok(self.push(out, Op::AddBias { x, bias, channels, inner }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(DppError::ShapeMismatch(format!(
                "mul {:?} x {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data).expect("same shape");
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(DppError::ShapeMismatch(format!(
                "add {:?} + {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data).expect("same shape");
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.values[x.0].data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(self.values[x.0].shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.values[x.0].data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.values[x.0].clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Mean cross-entropy between softmax(logits) and one-hot target rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let s = self.values[logits.0].shape().to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return Err(DppError::ShapeMismatch(format!(
                "cross entropy logits {s:?} targets {:?}",
                targets.shape()
            )));
        }
        if !self.values[logits.0].is_finite() {
            return Err(DppError::NonFinite("softmax_cross_entropy"));
        }
        let (batch, classes) = (s[0], s[1]);
        for row in targets.data().chunks_exact(classes) {
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || zeros != classes - 1 {
                return Err(DppError::InvalidConfig(
                    "targets must be one-hot rows".into(),
                ));
            }
        }
        let ld = self.values[logits.0].data();
        let mut softmax = vec![T::zero(); batch * classes];
        let mut loss = 0.0f64;
        for b in 0..batch {
            let row = &ld[b * classes..(b + 1) * classes];
            let max = row
                .iter()
                .map(|v| v.to_f64_val())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0f64;
            for v in row {
                z += (v.to_f64_val() - max).exp();
            }
            let log_z = z.ln() + max;
            let srow = &mut softmax[b * classes..(b + 1) * classes];
            for (sv, v) in srow.iter_mut().zip(row) {
                *sv = T::from_f64((v.to_f64_val() - log_z).exp());
            }
            let t_row = &targets.data()[b * classes..(b + 1) * classes];
            for (tv, v) in t_row.iter().zip(row) {
                if *tv == T::one() {
                    loss -= v.to_f64_val() - log_z;
                }
            }
        }
        loss /= batch as f64;
        let out = Tensor::scalar(T::from_f64(loss));
        Ok(self.push(out, Op::SoftmaxXent { logits, softmax, targets }))
    }

    /// Top-K mask over `[D, C]` logits. Hard forward, soft backward.
    pub fn topk_mask(
        &mut self,
        logits: Var,
        noise: &GumbelNoiseField,
        k: usize,
        tau: f64,
        mode: MaskMode,
    ) -> Result<Var> {
        let (hard, soft, slices) = relaxed_topk(&self.values[logits.0], noise, k, tau)?;
        let value = match mode {
            MaskMode::Hard => hard,
            MaskMode::Soft => soft,
        };
        Ok(self.push(value, Op::TopkMask { logits, slices }))
    }

    /// Expand an effective `[D, C]` mask to the full `[n_in, a, n_out]`
    /// weight shape; the backward pass sums gradients over tied positions.
    pub fn tie_broadcast(&mut self, eff: Var, structure: MaskStructure) -> Result<Var> {
        if self.values[eff.0].numel() != structure.d * structure.c {
            return Err(DppError::ShapeMismatch(format!(
                "effective mask {} entries, structure wants {}x{}",
                self.values[eff.0].numel(),
                structure.d,
                structure.c
            )));
        }
        let dims = structure.dims;
        let mut full = Tensor::zeros(vec![dims.n_in, dims.a, dims.n_out]);
        structure.broadcast(self.values[eff.0].data(), full.data_mut());
        Ok(self.push(full, Op::TieBroadcast { eff, structure }))
    }

    /// Mean per-distribution softmax entropy of `[D, C]` logits (scalar).
    pub fn entropy_penalty(&mut self, logits: Var, structure: MaskStructure) -> Result<Var> {
        if self.values[logits.0].numel() != structure.d * structure.c {
            return Err(DppError::ShapeMismatch(format!(
                "logits {} entries, structure wants {}x{}",
                self.values[logits.0].numel(),
                structure.d,
                structure.c
            )));
        }
        let pl = PruningLogits {
            values: self.values[logits.0].clone(),
            structure,
        };
        let (h, grad) = crate::mask::entropy_penalty_with_grad(&pl);
        Ok(self.push(
            Tensor::scalar(T::from_f64(h)),
            Op::EntropyPenalty { logits, grad },
        ))
    }

    /// Quantize latent weights; gradients pass straight through where the
    /// latent is inside [-1, 1].
    pub fn quantize_ste(&mut self, w: Var, spec: QuantSpec, mode: QuantMode) -> Result<Var> {
        let value = match (mode, spec.is_identity()) {
            (_, true) => self.values[w.0].clone(),
            (QuantMode::Codebook, false) => quant::quantize_forward(&self.values[w.0], spec)?,
            (QuantMode::Surrogate, false) => {
                if !self.values[w.0].is_finite() {
                    return Err(DppError::NonFinite("quantize_ste"));
                }
                let mut t = self.values[w.0].clone();
                quant::clip_latent(&mut t);
                t
            }
        };
        Ok(self.push(value, Op::QuantizeSte { w }))
    }

    /// Reverse sweep from a scalar loss. Leaf gradients are then readable
    /// via [`Tape::grad`]. Calling this twice without re-recording is an
    /// error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.ran_backward {
            return Err(DppError::BackwardTwice);
        }
        self.ran_backward = true;
        if self.values[loss.0].numel() != 1 {
            return Err(DppError::ShapeMismatch(
                "backward needs a scalar loss".into(),
            ));
        }
        self.grads[loss.0][0] = T::one();

        for i in (0..self.ops.len()).rev() {
            let (gbefore, gcur) = self.grads.split_at_mut(i);
            let upstream: &[T] = &gcur[0];
            if upstream.iter().all(|&g| g == T::zero()) {
                continue;
            }
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let sa = self.values[a.0].shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = self.values[b.0].shape()[1];
                    linalg::matmul_grad_a(
                        upstream,
                        self.values[b.0].data(),
                        m,
                        k,
                        n,
                        &mut gbefore[a.0],
                    );
                    linalg::matmul_grad_b(
                        self.values[a.0].data(),
                        upstream,
                        m,
                        k,
                        n,
                        &mut gbefore[b.0],
                    );
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let pos = geom.positions();
                    let patch = geom.patch();
                    let (batch, c_out) = (geom.batch, geom.c_out);
                    // un-reorder upstream to [batch*pos, c_out]
                    let mut dprod = vec![T::zero(); batch * pos * c_out];
                    for b in 0..batch {
                        for p in 0..pos {
                            for co in 0..c_out {
                                dprod[(b * pos + p) * c_out + co] =
                                    upstream[(b * c_out + co) * pos + p];
                            }
                        }
                    }
                    linalg::matmul_grad_b(cols, &dprod, batch * pos, patch, c_out, &mut gbefore[w.0]);
                    let mut dcols = vec![T::zero(); batch * pos * patch];
                    linalg::matmul_grad_a(
                        &dprod,
                        self.values[w.0].data(),
                        batch * pos,
                        patch,
                        c_out,
                        &mut dcols,
                    );
                    linalg::col2im_add(&dcols, geom, &mut gbefore[x.0]);
                }
                Op::Relu { x } => {
                    let xv = self.values[x.0].data();
                    for ((g, &u), &v) in gbefore[x.0].iter_mut().zip(upstream).zip(xv) {
                        if v > T::zero() {
                            *g = *g + u;
                        }
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let gx = &mut gbefore[x.0];
                    for (&src, &u) in argmax.iter().zip(upstream) {
                        gx[src] = gx[src] + u;
                    }
                }
                Op::AddBias { x, bias, channels, inner } => {
                    for (g, &u) in gbefore[x.0].iter_mut().zip(upstream) {
                        *g = *g + u;
                    }
                    let gb = &mut gbefore[bias.0];
                    for (i, &u) in upstream.iter().enumerate() {
                        let c = (i / inner) % channels;
                        gb[c] = gb[c] + u;
                    }
                }
                Op::Mul { a, b } => {
                    let bv = self.values[b.0].data();
                    for ((g, &u), &v) in gbefore[a.0].iter_mut().zip(upstream).zip(bv) {
                        *g = *g + u * v;
                    }
                    let av = self.values[a.0].data();
                    for ((g, &u), &v) in gbefore[b.0].iter_mut().zip(upstream).zip(av) {
                        *g = *g + u * v;
                    }
                }
                Op::Add { a, b } => {
                    for (g, &u) in gbefore[a.0].iter_mut().zip(upstream) {
                        *g = *g + u;
                    }
                    for (g, &u) in gbefore[b.0].iter_mut().zip(upstream) {
                        *g = *g + u;
                    }
                }
                Op::Scale { x, c } => {
                    for (g, &u) in gbefore[x.0].iter_mut().zip(upstream) {
                        *g = *g + u * *c;
                    }
                }
                Op::Sum { x } => {
                    let u = upstream[0];
                    for g in gbefore[x.0].iter_mut() {
                        *g = *g + u;
                    }
                }
                Op::Reshape { x } => {
                    for (g, &u) in gbefore[x.0].iter_mut().zip(upstream) {
                        *g = *g + u;
                    }
                }
                Op::SoftmaxXent { logits, softmax, targets } => {
                    let u = upstream[0];
                    let batch = T::from_f64(targets.shape()[0] as f64);
                    let gl = &mut gbefore[logits.0];
                    for ((g, &s), &t) in gl.iter_mut().zip(softmax.iter()).zip(targets.data()) {
                        *g = *g + u * (s - t) / batch;
                    }
                }
                Op::TopkMask { logits, slices } => {
                    let up: Vec<f64> = upstream.iter().map(|v| v.to_f64_val()).collect();
                    let mut grad = vec![0.0f64; up.len()];
                    slices.backward_into(&up, &mut grad);
                    for (g, d) in gbefore[logits.0].iter_mut().zip(grad) {
                        *g = *g + T::from_f64(d);
                    }
                }
                Op::TieBroadcast { eff, structure } => {
                    let mut reduced = vec![T::zero(); structure.d * structure.c];
                    structure.reduce_sum(upstream, &mut reduced);
                    for (g, r) in gbefore[eff.0].iter_mut().zip(reduced) {
                        *g = *g + r;
                    }
                }
                Op::EntropyPenalty { logits, grad } => {
                    let u = upstream[0];
                    for (g, &d) in gbefore[logits.0].iter_mut().zip(grad) {
                        *g = *g + u * T::from_f64(d);
                    }
                }
                Op::QuantizeSte { w } => {
                    let latent = self.values[w.0].data();
                    quant::ste_gate(latent, upstream, &mut gbefore[w.0]);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    /// Central finite differences of `f` at `x`.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            g[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn assert_close(analytic: &[f64], fd: &[f64], tol: f64, what: &str) {
        for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
            let denom = a.abs().max(f.abs()).max(1e-6);
            assert!(
                (a - f).abs() / denom < tol,
                "{what} entry {i}: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = Tape::<f32>::new();
        let i2 = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let z = t.leaf(Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
        let y = t.matmul(a, z).unwrap();
        assert_eq!(t.value(y).data(), &[0.0]);

        // inner extents 1 vs 2 disagree
        let bad = t.matmul(z, b);
        assert!(bad.is_err());
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let mut r = rng(1);
        let av = rand_vec(&mut r, 12);
        let bv = rand_vec(&mut r, 8);
        let gv = rand_vec(&mut r, 6);
        let f = |a: &[f64], b: &[f64]| -> f64 {
            let mut t = Tape::<f64>::new();
            let va = t.leaf(Tensor::new(vec![3, 4], a.to_vec()).unwrap());
            let vb = t.leaf(Tensor::new(vec![4, 2], b.to_vec()).unwrap());
            let y = t.matmul(va, vb).unwrap();
            t.value(y)
                .data()
                .iter()
                .zip(&gv)
                .map(|(yv, g)| yv * g)
                .sum()
        };

        let mut t = Tape::<f64>::new();
        let va = t.leaf(Tensor::new(vec![3, 4], av.clone()).unwrap());
        let vb = t.leaf(Tensor::new(vec![4, 2], bv.clone()).unwrap());
        let y = t.matmul(va, vb).unwrap();
        let gt = t.leaf(Tensor::new(vec![3, 2], gv.clone()).unwrap());
        let prod = t.mul(y, gt).unwrap();
        let loss = t.sum(prod);
        t.backward(loss).unwrap();

        let fa = fd_grad(&|a| f(a, &bv), &av, 1e-4);
        let fb = fd_grad(&|b| f(&av, b), &bv, 1e-4);
        assert_close(t.grad(va), &fa, 1e-4, "matmul dA");
        assert_close(t.grad(vb), &fb, 1e-4, "matmul dB");
    }

    #[test]
    fn conv2d_all_ones_and_delta_kernel() {
        // 1x1x3x3 ones, single 3x3 ones kernel -> [[9]]
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let w = t.leaf(Tensor::filled(vec![1, 9, 1], 1.0));
        let y = t.conv2d(x, w, 3, 3, 1).unwrap();
        assert_eq!(t.value(y).data(), &[9.0]);

        // delta kernel at the centre picks the central crop
        let mut t = Tape::<f32>::new();
        let xv: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let x = t.leaf(Tensor::new(vec![1, 1, 4, 4], xv).unwrap());
        let mut kv = vec![0.0f32; 9];
        kv[4] = 1.0; // centre of 3x3
        let w = t.leaf(Tensor::new(vec![1, 9, 1], kv).unwrap());
        let y = t.conv2d(x, w, 3, 3, 1).unwrap();
        // output position (oy, ox) reads input (oy+1, ox+1)
        assert_eq!(t.value(y).data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn conv2d_rejects_non_integer_output() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros(vec![1, 1, 5, 5]));
        let w = t.leaf(Tensor::zeros(vec![1, 4, 1]));
        assert!(t.conv2d(x, w, 2, 2, 2).is_err());
    }

    #[test]
    fn conv2d_gradient_matches_fd() {
        let mut r = rng(2);
        let xs = [2usize, 3, 8, 8];
        let ws = [3usize, 25, 4];
        let xv = rand_vec(&mut r, xs.iter().product());
        let wv = rand_vec(&mut r, ws.iter().product());
        let gn = 2 * 4 * 4 * 4;
        let gv = rand_vec(&mut r, gn);

        let f = |x: &[f64], w: &[f64]| -> f64 {
            let mut t = Tape::<f64>::new();
            let vx = t.leaf(Tensor::new(xs.to_vec(), x.to_vec()).unwrap());
            let vw = t.leaf(Tensor::new(ws.to_vec(), w.to_vec()).unwrap());
            let y = t.conv2d(vx, vw, 5, 5, 1).unwrap();
            t.value(y).data().iter().zip(&gv).map(|(a, b)| a * b).sum()
        };

        let mut t = Tape::<f64>::new();
        let vx = t.leaf(Tensor::new(xs.to_vec(), xv.clone()).unwrap());
        let vw = t.leaf(Tensor::new(ws.to_vec(), wv.clone()).unwrap());
        let y = t.conv2d(vx, vw, 5, 5, 1).unwrap();
        let gt = t.leaf(Tensor::new(vec![2, 4, 4, 4], gv.clone()).unwrap());
        let prod = t.mul(y, gt).unwrap();
        let loss = t.sum(prod);
        t.backward(loss).unwrap();

        let fx = fd_grad(&|x| f(x, &wv), &xv, 1e-4);
        let fw = fd_grad(&|w| f(&xv, w), &wv, 1e-4);
        assert_close(t.grad(vx), &fx, 1e-3, "conv dX");
        assert_close(t.grad(vw), &fw, 1e-3, "conv dW");
    }

    #[test]
    fn cross_entropy_peaked_and_uniform() {
        let mut t = Tape::<f64>::new();
        let mut logits = vec![0.0; 10];
        logits[3] = 50.0;
        let l = t.leaf(Tensor::new(vec![1, 10], logits).unwrap());
        let mut target = vec![0.0; 10];
        target[3] = 1.0;
        let loss = t
            .softmax_cross_entropy(l, Tensor::new(vec![1, 10], target).unwrap())
            .unwrap();
        assert!(t.value(loss).data()[0].abs() < 1e-12);

        let mut t = Tape::<f64>::new();
        let l = t.leaf(Tensor::zeros(vec![2, 10]));
        let mut targets = vec![0.0; 20];
        targets[4] = 1.0;
        targets[17] = 1.0;
        let loss = t
            .softmax_cross_entropy(l, Tensor::new(vec![2, 10], targets).unwrap())
            .unwrap();
        assert!((t.value(loss).data()[0] - (10f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_inputs() {
        let mut t = Tape::<f64>::new();
        let l = t.leaf(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        let tgt = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(t.softmax_cross_entropy(l, tgt).is_err());

        let mut t = Tape::<f64>::new();
        let l = t.leaf(Tensor::zeros(vec![1, 2]));
        let tgt = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(t.softmax_cross_entropy(l, tgt).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones_and_disconnected_stays_zero() {
        let mut t = Tape::<f32>::new();
        let w = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let unused = t.leaf(Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap());
        let loss = t.sum(w);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w), &[1.0; 4]);
        assert_eq!(t.grad(unused), &[0.0; 3]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut t = Tape::<f32>::new();
        let w = t.leaf(Tensor::scalar(2.0));
        let loss = t.sum(w);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(DppError::BackwardTwice)));
    }

    #[test]
    fn mlp_composite_gradient_matches_fd() {
        // two-layer MLP with relu, bias and cross entropy, all in one graph
        let mut r = rng(3);
        let w1v = rand_vec(&mut r, 5 * 4);
        let b1v = rand_vec(&mut r, 4);
        let w2v = rand_vec(&mut r, 4 * 3);
        let xv = rand_vec(&mut r, 2 * 5);
        let mut tv = vec![0.0; 2 * 3];
        tv[1] = 1.0;
        tv[3 + 2] = 1.0;

        let build = |w1: &[f64], b1: &[f64], w2: &[f64]| -> f64 {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::new(vec![2, 5], xv.clone()).unwrap());
            let vw1 = t.leaf(Tensor::new(vec![5, 4], w1.to_vec()).unwrap());
            let vb1 = t.leaf(Tensor::new(vec![4], b1.to_vec()).unwrap());
            let vw2 = t.leaf(Tensor::new(vec![4, 3], w2.to_vec()).unwrap());
            let h = t.matmul(x, vw1).unwrap();
            let h = t.add_bias(h, vb1).unwrap();
            let h = t.relu(h);
            let y = t.matmul(h, vw2).unwrap();
            let loss = t
                .softmax_cross_entropy(y, Tensor::new(vec![2, 3], tv.clone()).unwrap())
                .unwrap();
            t.value(loss).data()[0]
        };

        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![2, 5], xv.clone()).unwrap());
        let vw1 = t.leaf(Tensor::new(vec![5, 4], w1v.clone()).unwrap());
        let vb1 = t.leaf(Tensor::new(vec![4], b1v.clone()).unwrap());
        let vw2 = t.leaf(Tensor::new(vec![4, 3], w2v.clone()).unwrap());
        let h = t.matmul(x, vw1).unwrap();
        let h = t.add_bias(h, vb1).unwrap();
        let h = t.relu(h);
        let y = t.matmul(h, vw2).unwrap();
        let loss = t
            .softmax_cross_entropy(y, Tensor::new(vec![2, 3], tv.clone()).unwrap())
            .unwrap();
        t.backward(loss).unwrap();

        let f1 = fd_grad(&|w| build(w, &b1v, &w2v), &w1v, 1e-5);
        let f2 = fd_grad(&|b| build(&w1v, b, &w2v), &b1v, 1e-5);
        let f3 = fd_grad(&|w| build(&w1v, &b1v, w), &w2v, 1e-5);
        assert_close(t.grad(vw1), &f1, 1e-3, "mlp dW1");
        assert_close(t.grad(vb1), &f2, 1e-3, "mlp db1");
        assert_close(t.grad(vw2), &f3, 1e-3, "mlp dW2");
    }

    #[test]
    fn forward_linearity_of_matmul() {
        let mut r = rng(4);
        let av = rand_vec(&mut r, 6);
        let bv = rand_vec(&mut r, 6);
        let run = |scale: f64| -> Vec<f64> {
            let mut t = Tape::<f64>::new();
            let a = t.leaf(
                Tensor::new(vec![2, 3], av.iter().map(|v| v * scale).collect()).unwrap(),
            );
            let b = t.leaf(Tensor::new(vec![3, 2], bv.clone()).unwrap());
            let y = t.matmul(a, b).unwrap();
            t.value(y).data().to_vec()
        };
        let y1 = run(1.0);
        let y3 = run(3.0);
        for (a, b) in y1.iter().zip(&y3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_gradient_routes_to_argmax() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(
            Tensor::new(vec![1, 1, 2, 2], vec![1.0, 5.0, 2.0, 3.0]).unwrap(),
        );
        let y = t.maxpool2(x).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), &[0.0, 1.0, 0.0, 0.0]);
    }
}
