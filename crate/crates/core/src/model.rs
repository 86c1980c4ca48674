//! Network definitions (LeNet300-100 and LeNet5-Caffe), parameter
//! initialization, the per-batch training graph, and mask-frozen prediction.

use crate::error::{DppError, Result};
use crate::granularity::{GranularitySpec, LayerDims, LayerKind};
use crate::gumbel::{sample_gumbel, GumbelNoiseField};
use crate::mask::{build_logits, realize_mask, PruningLogits};
use crate::mnist::Dataset;
use crate::quant::{quantize_forward, QuantSpec};
use crate::tape::{MaskMode, QuantMode, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchId {
    LeNet300_100,
    LeNet5Caffe,
}

impl ArchId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lenet300-100" => Ok(Self::LeNet300_100),
            "lenet5-caffe" => Ok(Self::LeNet5Caffe),
            other => Err(DppError::InvalidConfig(format!(
                "unknown architecture '{other}' (expected lenet300-100 or lenet5-caffe)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::LeNet300_100 => "lenet300-100",
            Self::LeNet5Caffe => "lenet5-caffe",
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Self::LeNet300_100 => 0,
            Self::LeNet5Caffe => 1,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Self::LeNet300_100),
            1 => Ok(Self::LeNet5Caffe),
            other => Err(DppError::Format(format!("unknown architecture tag {other}"))),
        }
    }

    pub fn layer_count(&self) -> usize {
        match self {
            Self::LeNet300_100 => 3,
            Self::LeNet5Caffe => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub conv: Option<ConvMeta>,
    pub dims: LayerDims,
    /// `[n_in, a, n_out]`
    pub weights: Tensor<f32>,
    /// `[n_out]`; never masked nor quantized.
    pub bias: Tensor<f32>,
    pub logits: PruningLogits<f32>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchId,
    pub layers: Vec<Layer>,
}

/// Trained state bundled with the settings evaluation needs.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub network: Network,
    pub bits: u8,
    pub beta: f64,
}

fn xavier_uniform<R: Rng>(dims: LayerDims, rng: &mut R) -> Tensor<f32> {
    let fan_in = (dims.n_in * dims.a) as f64;
    let fan_out = (dims.n_out * dims.a) as f64;
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    let data = (0..dims.weight_count())
        .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * limit) as f32)
        .collect();
    Tensor::new(vec![dims.n_in, dims.a, dims.n_out], data).expect("weight shape")
}

fn make_layer<R: Rng>(
    kind: LayerKind,
    conv: Option<ConvMeta>,
    dims: LayerDims,
    spec: GranularitySpec,
    rng: &mut R,
) -> Result<Layer> {
    Ok(Layer {
        kind,
        conv,
        dims,
        weights: xavier_uniform(dims, rng),
        bias: Tensor::zeros(vec![dims.n_out]),
        logits: build_logits(kind, dims, spec, 0.0f32)?,
    })
}

impl Network {
    /// Layer skeleton of an architecture: (kind, conv meta, dims).
    pub fn skeleton(arch: ArchId) -> Vec<(LayerKind, Option<ConvMeta>, LayerDims)> {
        let conv5 = Some(ConvMeta { kh: 5, kw: 5, stride: 1 });
        match arch {
            ArchId::LeNet300_100 => vec![
                (LayerKind::Fc, None, LayerDims::fc(784, 300)),
                (LayerKind::Fc, None, LayerDims::fc(300, 100)),
                (LayerKind::Fc, None, LayerDims::fc(100, 10)),
            ],
            ArchId::LeNet5Caffe => vec![
                (LayerKind::Conv, conv5, LayerDims { n_in: 1, a: 25, n_out: 20 }),
                (LayerKind::Conv, conv5, LayerDims { n_in: 20, a: 25, n_out: 50 }),
                (LayerKind::Fc, None, LayerDims::fc(800, 500)),
                (LayerKind::Fc, None, LayerDims::fc(500, 10)),
            ],
        }
    }

    pub fn build<R: Rng>(arch: ArchId, specs: &[GranularitySpec], rng: &mut R) -> Result<Self> {
        let skeleton = Self::skeleton(arch);
        if specs.len() != skeleton.len() {
            return Err(DppError::InvalidConfig(format!(
                "{} granularity specs for {} layers of {}",
                specs.len(),
                skeleton.len(),
                arch.name()
            )));
        }
        let layers = skeleton
            .into_iter()
            .zip(specs)
            .map(|((kind, conv, dims), &spec)| make_layer(kind, conv, dims, spec, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, layers })
    }

    /// Total dense weight count P (biases excluded).
    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.dims.weight_count()).sum()
    }

    /// Total active weights S under the configured granularities.
    pub fn total_active(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.logits.structure.active_weights())
            .sum()
    }

    /// Wire the architecture body given already-masked weight vars.
    fn wire(&self, tape: &mut Tape<f32>, x: Var, w: &[Var], b: &[Var]) -> Result<Var> {
        match self.arch {
            ArchId::LeNet300_100 => {
                let mut h = x;
                for (i, layer) in self.layers.iter().enumerate() {
                    let w2 = tape.reshape(w[i], vec![layer.dims.n_in, layer.dims.n_out])?;
                    h = tape.matmul(h, w2)?;
                    h = tape.add_bias(h, b[i])?;
                    if i + 1 < self.layers.len() {
                        h = tape.relu(h);
                    }
                }
                Ok(h)
            }
            ArchId::LeNet5Caffe => {
                let c = |l: &Layer| l.conv.expect("conv meta on conv layer");
                let (m0, m1) = (c(&self.layers[0]), c(&self.layers[1]));
                let h = tape.conv2d(x, w[0], m0.kh, m0.kw, m0.stride)?;
                let h = tape.add_bias(h, b[0])?;
                let h = tape.maxpool2(h)?;
                let h = tape.conv2d(h, w[1], m1.kh, m1.kw, m1.stride)?;
                let h = tape.add_bias(h, b[1])?;
                let h = tape.maxpool2(h)?;
                let batch = tape.value(h).shape()[0];
                let flat = tape.value(h).numel() / batch;
                let h = tape.reshape(h, vec![batch, flat])?;
                let w2 = tape.reshape(w[2], vec![self.layers[2].dims.n_in, self.layers[2].dims.n_out])?;
                let h = tape.matmul(h, w2)?;
                let h = tape.add_bias(h, b[2])?;
                let h = tape.relu(h);
                let w3 = tape.reshape(w[3], vec![self.layers[3].dims.n_in, self.layers[3].dims.n_out])?;
                let h = tape.matmul(h, w3)?;
                tape.add_bias(h, b[3])
            }
        }
    }

    /// Input batch tensor in the layout the architecture expects.
    pub fn input_batch(&self, data: &Dataset, indices: &[usize]) -> Tensor<f32> {
        match self.arch {
            ArchId::LeNet300_100 => data.flat_batch(indices),
            ArchId::LeNet5Caffe => data.nchw_batch(indices),
        }
    }

    /// Record one training step's graph: per layer draw a mask from the
    /// logits at temperature `tau`, apply it to the (optionally quantized)
    /// weights, and combine cross entropy with the entropy penalty.
    pub fn train_graph(
        &self,
        tape: &mut Tape<f32>,
        x: Tensor<f32>,
        targets: Tensor<f32>,
        noises: &[GumbelNoiseField],
        tau: f64,
        mu: f64,
        quant: QuantSpec,
    ) -> Result<TrainStep> {
        let x = tape.leaf(x);
        let mut wvars = Vec::new();
        let mut params = Vec::new();
        let mut penalties = Vec::new();
        let mut bvars = Vec::new();
        for (layer, noise) in self.layers.iter().zip(noises) {
            let w = tape.leaf(layer.weights.clone());
            let b = tape.leaf(layer.bias.clone());
            let phi = tape.leaf(layer.logits.values.clone());
            let st = layer.logits.structure;

            let qw = if quant.is_identity() {
                w
            } else {
                tape.quantize_ste(w, quant, QuantMode::Codebook)?
            };
            let eff = tape.topk_mask(phi, noise, st.k, tau, MaskMode::Hard)?;
            let full = tape.tie_broadcast(eff, st)?;
            let masked = tape.mul(qw, full)?;
            wvars.push(masked);
            bvars.push(b);
            if mu != 0.0 {
                // One entropy term per categorical distribution, summed over
                // the network, so the confidence pressure on a logit does not
                // shrink with layer width.
                let mean_h = tape.entropy_penalty(phi, st)?;
                penalties.push(tape.scale(mean_h, st.d as f32));
            }
            params.push(LayerVars { weights: w, bias: b, logits: phi });
        }
        let out = self.wire(tape, x, &wvars, &bvars)?;
        let ce = tape.softmax_cross_entropy(out, targets)?;
        let loss = if penalties.is_empty() {
            ce
        } else {
            let mut acc = penalties[0];
            for &p in &penalties[1..] {
                acc = tape.add(acc, p)?;
            }
            let scaled = tape.scale(acc, mu as f32);
            tape.add(ce, scaled)?
        };
        Ok(TrainStep { loss, cross_entropy: ce, logits_out: out, params })
    }

    /// Draw one hard mask per layer (full weight shape).
    pub fn draw_masks<R: Rng>(&self, beta: f64, rng: &mut R) -> Result<Vec<Tensor<f32>>> {
        self.layers
            .iter()
            .map(|layer| {
                let st = layer.logits.structure;
                let noise = sample_gumbel(st.d * st.c, beta, rng)?;
                Ok(realize_mask(&layer.logits, &noise, 1.0)?.full_hard)
            })
            .collect()
    }

    /// Forward pass with frozen masks; returns output logits.
    pub fn predict_logits(
        &self,
        x: Tensor<f32>,
        masks: &[Tensor<f32>],
        quant: QuantSpec,
    ) -> Result<Tensor<f32>> {
        if masks.len() != self.layers.len() {
            return Err(DppError::ShapeMismatch(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(x);
        let mut wvars = Vec::new();
        let mut bvars = Vec::new();
        for (layer, mask) in self.layers.iter().zip(masks) {
            let wq = quantize_forward(&layer.weights, quant)?;
            let w = tape.leaf(wq);
            let m = tape.leaf(mask.clone());
            wvars.push(tape.mul(w, m)?);
            bvars.push(tape.leaf(layer.bias.clone()));
        }
        let out = self.wire(&mut tape, x, &wvars, &bvars)?;
        Ok(tape.value(out).clone())
    }

    /// Accuracy over a dataset with frozen masks, evaluated in chunks.
    pub fn accuracy(
        &self,
        data: &Dataset,
        masks: &[Tensor<f32>],
        quant: QuantSpec,
        chunk: usize,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(DppError::Data("cannot evaluate on an empty dataset".into()));
        }
        let n = data.len();
        let mut correct = 0usize;
        let mut at = 0usize;
        while at < n {
            let hi = (at + chunk).min(n);
            let indices: Vec<usize> = (at..hi).collect();
            let x = self.input_batch(data, &indices);
            let logits = self.predict_logits(x, masks, quant)?;
            correct += count_correct(&logits, data, &indices);
            at = hi;
        }
        Ok(correct as f64 / n as f64)
    }
}

/// Tape handles of one layer's trainable parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weights: Var,
    pub bias: Var,
    pub logits: Var,
}

/// Handles out of [`Network::train_graph`].
#[derive(Debug, Clone)]
pub struct TrainStep {
    pub loss: Var,
    pub cross_entropy: Var,
    pub logits_out: Var,
    pub params: Vec<LayerVars>,
}

/// Count argmax hits of `[batch, 10]` logits against dataset labels.
pub fn count_correct(logits: &Tensor<f32>, data: &Dataset, indices: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(indices)
        .filter(|(row, &i)| {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(c, _)| c)
                .unwrap_or(0);
            pred == data.label(i) as usize
        })
        .count()
}
