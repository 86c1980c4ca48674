//! The joint training loop: per batch and per layer, draw Gumbel noise,
//! realize a hard mask, apply it to the (optionally quantized) weights, and
//! update weights, biases and pruning logits from the combined
//! cross-entropy + entropy-penalty loss through the relaxed backward path.
//! Temperature anneals linearly per epoch; metrics are logged per epoch.

use crate::error::{DppError, Result};
use crate::granularity::GranularitySpec;
use crate::gumbel::{sample_gumbel, RelaxationSchedule};
use crate::metrics::{estimate_marginals, layer_metrics, LayerMetrics};
use crate::mnist::Dataset;
use crate::model::{count_correct, ArchId, ModelState, Network};
use crate::optim::{OptimKind, Optimizer};
use crate::quant::{clip_latent, QuantSpec};
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Full training configuration. Defaults mirror the MNIST recipe: Adam at
/// lr 0.001, mu = 0.005, beta = 1, batch 128, tau annealed 5.0 -> 0.5,
/// Xavier-uniform init.
///
/// The entropy penalty is averaged over pruned layers before scaling by
/// `mu`, and the cross entropy is averaged over the batch, so `mu`
/// trades off against a mean loss.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: ArchId,
    pub layers: Vec<GranularitySpec>,
    pub mu: f64,
    pub beta: f64,
    pub optimizer: OptimKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau_init: f64,
    pub tau_end: f64,
    pub bits: u8,
    pub seed: u64,
    /// Mask draws per layer behind the per-epoch marginal estimates.
    pub metric_samples: usize,
}

impl TrainConfig {
    pub fn mnist_defaults(arch: ArchId, layers: Vec<GranularitySpec>) -> Self {
        Self {
            arch,
            layers,
            mu: 0.005,
            beta: 1.0,
            optimizer: OptimKind::Adam { lr: 0.001 },
            batch_size: 128,
            epochs: 30,
            tau_init: 5.0,
            tau_end: 0.5,
            bits: 32,
            seed: 0,
            metric_samples: 100,
        }
    }

    pub fn quant(&self) -> Result<QuantSpec> {
        QuantSpec::new(self.bits)
    }
}

/// One metrics row, mirrored into metrics.csv.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub tau: f64,
    pub layers: Vec<LayerMetrics>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub rows: Vec<EpochRow>,
}

// Independent deterministic RNG streams derived from the master seed, so
// e.g. data order never perturbs mask draws.
mod stream {
    pub const INIT: u64 = 1;
    pub const GUMBEL: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const EPOCH_EVAL: u64 = 4;
    pub const METRICS: u64 = 5;

    fn splitmix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn seed(master: u64, id: u64, index: u64) -> u64 {
        splitmix(splitmix(master ^ splitmix(id)) ^ index)
    }
}

pub fn rng_stream(master: u64, id: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream::seed(master, id, index))
}

/// Run the full training loop.
pub fn train(cfg: &TrainConfig, train_data: &Dataset, test_data: &Dataset) -> Result<TrainOutcome> {
    if train_data.is_empty() {
        return Err(DppError::Data("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(DppError::InvalidConfig("batch_size must be positive".into()));
    }
    let quant = cfg.quant()?;
    if !(cfg.beta > 0.0 && cfg.beta <= 1.0) {
        return Err(DppError::InvalidConfig(format!(
            "beta = {} outside (0, 1]",
            cfg.beta
        )));
    }
    let schedule = RelaxationSchedule::new(cfg.tau_init, cfg.tau_end, cfg.epochs)?;

    let mut init_rng = rng_stream(cfg.seed, stream::INIT, 0);
    let mut network = Network::build(cfg.arch, &cfg.layers, &mut init_rng)?;

    let param_sizes: Vec<usize> = network
        .layers
        .iter()
        .flat_map(|l| {
            [
                l.weights.numel(),
                l.bias.numel(),
                l.logits.values.numel(),
            ]
        })
        .collect();
    let mut optimizer = Optimizer::<f32>::new(cfg.optimizer, &param_sizes);
    let mut gumbel_rng = rng_stream(cfg.seed, stream::GUMBEL, 0);

    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let tau = schedule.tau_at(epoch)?;
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng_stream(cfg.seed, stream::SHUFFLE, epoch as u64));

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = network.input_batch(train_data, batch);
            let targets = train_data.one_hot(batch);
            let noises = network
                .layers
                .iter()
                .map(|l| {
                    let st = l.logits.structure;
                    sample_gumbel(st.d * st.c, cfg.beta, &mut gumbel_rng)
                })
                .collect::<Result<Vec<_>>>()?;

            let mut tape = Tape::new();
            let step = network.train_graph(&mut tape, x, targets, &noises, tau, cfg.mu, quant)?;
            let loss = tape.value(step.loss).data()[0] as f64;
            if !loss.is_finite() {
                return Err(DppError::Diverged { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            correct += count_correct(tape.value(step.logits_out), train_data, batch);

            tape.backward(step.loss)?;
            optimizer.begin_step();
            for (li, vars) in step.params.iter().enumerate() {
                let layer = &mut network.layers[li];
                optimizer.update(3 * li, &mut layer.weights, tape.grad(vars.weights))?;
                optimizer.update(3 * li + 1, &mut layer.bias, tape.grad(vars.bias))?;
                optimizer.update(3 * li + 2, &mut layer.logits.values, tape.grad(vars.logits))?;
                if !quant.is_identity() {
                    clip_latent(&mut layer.weights);
                }
            }
        }

        let train_loss = loss_sum / train_data.len() as f64;
        let train_acc = correct as f64 / train_data.len() as f64;

        let mut eval_rng = rng_stream(cfg.seed, stream::EPOCH_EVAL, epoch as u64);
        let masks = network.draw_masks(cfg.beta, &mut eval_rng)?;
        let test_acc = if test_data.is_empty() {
            f64::NAN
        } else {
            network.accuracy(test_data, &masks, quant, 1000)?
        };

        let layers = network
            .layers
            .iter()
            .enumerate()
            .map(|(li, layer)| {
                let mut rng = rng_stream(
                    cfg.seed,
                    stream::METRICS,
                    (epoch as u64) << 16 | li as u64,
                );
                let est =
                    estimate_marginals(&layer.logits, cfg.beta, cfg.metric_samples, &mut rng)?;
                Ok(layer_metrics(&est))
            })
            .collect::<Result<Vec<_>>>()?;

        rows.push(EpochRow {
            epoch,
            train_loss,
            train_acc,
            test_acc,
            tau,
            layers,
        });
    }

    Ok(TrainOutcome {
        state: ModelState {
            network,
            bits: cfg.bits,
            beta: cfg.beta,
        },
        rows,
    })
}

/// Inference-time evaluation: draw exactly one hard mask per layer from the
/// trained logits, freeze it, and score the dataset.
pub fn evaluate(state: &ModelState, data: &Dataset, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = state.network.draw_masks(state.beta, &mut rng)?;
    state
        .network
        .accuracy(data, &masks, QuantSpec::new(state.bits)?, 1000)
}

/// metrics.csv text: header plus one row per epoch with per-layer
/// bound-normalized entropy and diversity columns.
pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,test_acc,tau");
    if let Some(first) = rows.first() {
        for i in 1..=first.layers.len() {
            out.push_str(&format!(",H_norm_{i},I_norm_{i}"));
        }
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            row.epoch, row.train_loss, row.train_acc, row.test_acc, row.tau
        ));
        for lm in &row.layers {
            out.push_str(&format!(
                ",{:.6},{:.6}",
                lm.h_avg_normalized, lm.diversity_normalized
            ));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granularity::{GranularityLevel, GranularitySpec};
    use rand::Rng;

    fn fine(k: usize) -> GranularitySpec {
        GranularitySpec { level: GranularityLevel::Fine, k }
    }

    /// Small synthetic dataset with a learnable signal: the label's quadrant
    /// block of the image is brightened.
    fn synthetic(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = vec![0u8; n * 784];
        let mut labels = vec![0u8; n];
        for i in 0..n {
            let label = rng.random_range(0..10u8);
            labels[i] = label;
            for p in 0..784 {
                pixels[i * 784 + p] = rng.random_range(0..60u8);
            }
            let row0 = (label as usize % 5) * 5;
            let col0 = (label as usize / 5) * 14;
            for r in row0..row0 + 5 {
                for c in col0..col0 + 14 {
                    pixels[i * 784 + r * 28 + c] = 200 + (rng.random_range(0..50u8));
                }
            }
        }
        Dataset::from_raw(pixels, labels, 28, 28).unwrap()
    }

    fn tiny_config(epochs: usize, mu: f64, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::mnist_defaults(
            ArchId::LeNet300_100,
            vec![fine(15), fine(6), fine(6)],
        );
        cfg.epochs = epochs;
        cfg.mu = mu;
        cfg.seed = seed;
        cfg
    }

    #[test]
    fn fixed_seed_gives_bit_identical_metrics() {
        let data = synthetic(256, 1);
        let test = synthetic(64, 2);
        let cfg = tiny_config(2, 0.005, 42);
        let a = train(&cfg, &data, &test).unwrap();
        let b = train(&cfg, &data, &test).unwrap();
        assert_eq!(metrics_csv(&a.rows), metrics_csv(&b.rows));
        for (la, lb) in a.state.network.layers.iter().zip(&b.state.network.layers) {
            assert_eq!(la.weights.data(), lb.weights.data());
            assert_eq!(la.logits.values.data(), lb.logits.values.data());
        }
    }

    #[test]
    fn mu_scales_the_entropy_term_in_logit_gradients() {
        // With a non-uniform Phi, the logit gradient at mu > 0 differs from
        // the mu = 0 gradient by exactly the mu-scaled entropy gradient.
        use crate::gumbel::sample_gumbel;
        use crate::mask::entropy_penalty_with_grad;
        use crate::tape::Tape;

        let data = synthetic(8, 30);
        let idx: Vec<usize> = (0..8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut net = Network::build(
            ArchId::LeNet300_100,
            &[fine(15), fine(6), fine(6)],
            &mut rng,
        )
        .unwrap();
        for layer in &mut net.layers {
            for v in layer.logits.values.data_mut() {
                *v = rng.random::<f32>() * 2.0 - 1.0;
            }
        }
        let noises: Vec<_> = net
            .layers
            .iter()
            .map(|l| {
                let st = l.logits.structure;
                sample_gumbel(st.d * st.c, 1.0, &mut rng).unwrap()
            })
            .collect();
        let quant = QuantSpec::new(32).unwrap();
        let run = |mu: f64| -> Vec<Vec<f32>> {
            let mut tape = Tape::new();
            let step = net
                .train_graph(
                    &mut tape,
                    net.input_batch(&data, &idx),
                    data.one_hot(&idx),
                    &noises,
                    2.0,
                    mu,
                    quant,
                )
                .unwrap();
            tape.backward(step.loss).unwrap();
            step.params
                .iter()
                .map(|v| tape.grad(v.logits).to_vec())
                .collect()
        };
        let g0 = run(0.0);
        let g1 = run(0.005);
        for (li, layer) in net.layers.iter().enumerate() {
            let (_, ent_grad) = entropy_penalty_with_grad(&layer.logits);
            let d = layer.logits.structure.d as f64;
            let mut checked = 0;
            for i in 0..ent_grad.len() {
                let expected = 0.005 * d * ent_grad[i];
                if expected.abs() < 1e-12 {
                    continue;
                }
                let got = (g1[li][i] - g0[li][i]) as f64;
                assert!(
                    (got - expected).abs() <= expected.abs() * 0.05 + 1e-7,
                    "layer {li} logit {i}: penalty part {got} vs {expected}"
                );
                checked += 1;
            }
            assert!(checked > 0, "layer {li}: no non-trivial entropy gradient entries");
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let data = synthetic(128, 5);
        let cfg = tiny_config(2, 0.005, 9);
        let out = train(&cfg, &data, &data).unwrap();
        let csv = metrics_csv(&out.rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,train_loss,train_acc,test_acc,tau,H_norm_1,I_norm_1,H_norm_2,I_norm_2,H_norm_3,I_norm_3"
        );
        assert_eq!(csv.lines().count(), 1 + cfg.epochs);
        let first = lines.next().unwrap();
        assert!(first.starts_with("1,"));
        // tau at epoch 1 is tau_init
        assert_eq!(first.split(',').nth(4).unwrap(), "5.000000");
    }

    #[test]
    fn evaluate_draws_frozen_mask_and_rejects_empty() {
        let data = synthetic(128, 6);
        let cfg = tiny_config(2, 0.005, 11);
        let out = train(&cfg, &data, &data).unwrap();
        let acc = evaluate(&out.state, &data, 5).unwrap();
        assert!(acc >= 0.0 && acc <= 1.0);
        let empty = Dataset::from_raw(vec![], vec![], 28, 28).unwrap();
        assert!(evaluate(&out.state, &empty, 5).is_err());
    }

    #[test]
    fn dense_configuration_trains_and_matches_plain_eval() {
        // K = C everywhere: masks are all-ones, evaluation must match a
        // forward pass with explicit all-ones masks.
        let data = synthetic(256, 8);
        let mut cfg = TrainConfig::mnist_defaults(
            ArchId::LeNet300_100,
            vec![fine(784), fine(300), fine(100)],
        );
        cfg.epochs = 2;
        cfg.seed = 3;
        let out = train(&cfg, &data, &data).unwrap();
        let acc_drawn = evaluate(&out.state, &data, 17).unwrap();
        let net = &out.state.network;
        let ones: Vec<_> = net
            .layers
            .iter()
            .map(|l| crate::tensor::Tensor::filled(vec![l.dims.n_in, l.dims.a, l.dims.n_out], 1.0f32))
            .collect();
        let acc_ones = net
            .accuracy(&data, &ones, QuantSpec::new(32).unwrap(), 500)
            .unwrap();
        assert_eq!(acc_drawn, acc_ones);
    }
}
