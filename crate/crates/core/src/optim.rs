//! Adam and SGD-with-momentum parameter updates.

use crate::error::{DppError, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimKind {
    Adam { lr: f64 },
    Sgd { lr: f64, momentum: f64 },
}

/// Per-parameter moment buffers.
#[derive(Debug, Clone)]
enum Moments<T> {
    Adam { m: Vec<T>, v: Vec<T> },
    Sgd { velocity: Vec<T> },
}

/// Optimizer over a fixed list of parameters, identified by registration
/// order.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimKind,
    step: u64,
    state: Vec<Moments<T>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimKind, param_sizes: &[usize]) -> Self {
        let state = param_sizes
            .iter()
            .map(|&n| match kind {
                OptimKind::Adam { .. } => Moments::Adam {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                },
                OptimKind::Sgd { .. } => Moments::Sgd {
                    velocity: vec![T::zero(); n],
                },
            })
            .collect();
        Self { kind, step: 0, state }
    }

    /// Advance the shared step counter; call once per mini-batch before
    /// updating the batch's parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one update to parameter `index` given its gradient.
    pub fn update(&mut self, index: usize, param: &mut Tensor<T>, grad: &[T]) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(DppError::ShapeMismatch(format!(
                "gradient length {} != parameter {}",
                grad.len(),
                param.numel()
            )));
        }
        match (&mut self.state[index], self.kind) {
            (Moments::Adam { m, v }, OptimKind::Adam { lr }) => {
                let b1 = T::from_f64(ADAM_BETA1);
                let b2 = T::from_f64(ADAM_BETA2);
                let one = T::one();
                let bias1 = T::from_f64(1.0 - ADAM_BETA1.powi(self.step as i32));
                let bias2 = T::from_f64(1.0 - ADAM_BETA2.powi(self.step as i32));
                let lr = T::from_f64(lr);
                let eps = T::from_f64(ADAM_EPS);
                for ((p, &g), (mi, vi)) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *mi = b1 * *mi + (one - b1) * g;
                    *vi = b2 * *vi + (one - b2) * g * g;
                    let m_hat = *mi / bias1;
                    let v_hat = *vi / bias2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            (Moments::Sgd { velocity }, OptimKind::Sgd { lr, momentum }) => {
                let mu = T::from_f64(momentum);
                let lr = T::from_f64(lr);
                for ((p, &g), vel) in param.data_mut().iter_mut().zip(grad).zip(velocity.iter_mut())
                {
                    *vel = mu * *vel + g;
                    *p = *p - lr * *vel;
                }
            }
            _ => unreachable!("moments always match the optimizer kind"),
        }
        Ok(())
    }
}
