//! TOML run configuration.
//!
//! ```toml
//! arch = "lenet300-100"
//! epochs = 30
//! # everything else falls back to the MNIST defaults
//!
//! [optimizer]
//! kind = "adam"
//! lr = 0.001
//!
//! [[layers]]
//! granularity = "fine"
//! k = 15
//! ```

use crate::error::{DppError, Result};
use crate::granularity::{GranularityLevel, GranularitySpec};
use crate::model::ArchId;
use crate::optim::OptimKind;
use crate::train::TrainConfig;
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    arch: String,
    layers: Vec<RawLayer>,
    epochs: Option<usize>,
    mu: Option<f64>,
    beta: Option<f64>,
    batch_size: Option<usize>,
    tau_init: Option<f64>,
    tau_end: Option<f64>,
    bits: Option<u8>,
    seed: Option<u64>,
    metric_samples: Option<usize>,
    optimizer: Option<OptimKind>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    granularity: GranularityLevel,
    k: usize,
}

/// Parse a config file; unset fields take the MNIST defaults.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| DppError::InvalidConfig(e.to_string()))?;
    let arch = ArchId::parse(&raw.arch)?;
    let layers: Vec<GranularitySpec> = raw
        .layers
        .iter()
        .map(|l| GranularitySpec { level: l.granularity, k: l.k })
        .collect();
    if layers.len() != arch.layer_count() {
        return Err(DppError::InvalidConfig(format!(
            "{} layer entries for {} which has {} prunable layers",
            layers.len(),
            arch.name(),
            arch.layer_count()
        )));
    }
    let mut cfg = TrainConfig::mnist_defaults(arch, layers);
    if let Some(v) = raw.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = raw.mu {
        cfg.mu = v;
    }
    if let Some(v) = raw.beta {
        cfg.beta = v;
    }
    if let Some(v) = raw.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = raw.tau_init {
        cfg.tau_init = v;
    }
    if let Some(v) = raw.tau_end {
        cfg.tau_end = v;
    }
    if let Some(v) = raw.bits {
        cfg.bits = v;
    }
    if let Some(v) = raw.seed {
        cfg.seed = v;
    }
    if let Some(v) = raw.metric_samples {
        cfg.metric_samples = v;
    }
    if let Some(v) = raw.optimizer {
        cfg.optimizer = v;
    }
    // fail fast on bad K / bit width
    for (spec, (kind, _, dims)) in cfg.layers.iter().zip(crate::model::Network::skeleton(arch)) {
        spec.structure(kind, dims)?;
    }
    cfg.quant()?;
    Ok(cfg)
}

pub fn parse_file(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        DppError::Data(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
arch = "lenet300-100"
epochs = 5
bits = 2
seed = 3

[optimizer]
kind = "adam"
lr = 0.002

[[layers]]
granularity = "fine"
k = 150

[[layers]]
granularity = "fine"
k = 105

[[layers]]
granularity = "fine"
k = 40
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = parse(GOOD).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.bits, 2);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.mu, 0.005);
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.tau_init, 5.0);
        assert_eq!(cfg.layers[0].k, 150);
        assert!(matches!(cfg.optimizer, OptimKind::Adam { lr } if lr == 0.002));
    }

    #[test]
    fn wrong_layer_count_rejected() {
        let bad = GOOD.replace(
            "[[layers]]\ngranularity = \"fine\"\nk = 40\n",
            "",
        );
        assert!(parse(&bad).is_err());
    }

    #[test]
    fn k_out_of_range_rejected() {
        let bad = GOOD.replace("k = 150", "k = 1500");
        assert!(parse(&bad).is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        let bad = format!("{GOOD}\nlearning_rate = 3.0\n");
        assert!(parse(&bad).is_err());
    }
}
