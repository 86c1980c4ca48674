//! Dense-baseline probe: K = C on all layers.

use dpp_core::granularity::{GranularityLevel, GranularitySpec};
use dpp_core::mnist::{load_mnist_idx, test_pair, train_pair};
use dpp_core::model::ArchId;
use dpp_core::train::{train, TrainConfig};
use std::path::Path;
use std::time::Instant;

fn fine(k: usize) -> GranularitySpec {
    GranularitySpec { level: GranularityLevel::Fine, k }
}

fn main() {
    let dir = Path::new("data");
    let (ti, tl) = train_pair(dir);
    let (si, sl) = test_pair(dir);
    let train_data = load_mnist_idx(&ti, &tl).unwrap();
    let test_data = load_mnist_idx(&si, &sl).unwrap();

    let mut cfg = TrainConfig::mnist_defaults(
        ArchId::LeNet300_100,
        vec![fine(784), fine(300), fine(100)],
    );
    cfg.epochs = 2;
    cfg.seed = 1;
    cfg.mu = 0.0;
    let t0 = Instant::now();
    let out = train(&cfg, &train_data, &test_data).unwrap();
    println!("dense 2 epochs in {:.1?}", t0.elapsed());
    for row in &out.rows {
        println!(
            "epoch {}: loss {:.4} train {:.4} test {:.4}",
            row.epoch, row.train_loss, row.train_acc, row.test_acc
        );
    }
}
