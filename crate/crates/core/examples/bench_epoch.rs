//! One-epoch timing probe on real MNIST.

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
    println!("loaded {} train / {} test", train_data.len(), test_data.len());

    let mut cfg = TrainConfig::mnist_defaults(
        ArchId::LeNet300_100,
        vec![fine(15), fine(6), fine(6)],
    );
    cfg.epochs = 1;
    cfg.seed = 1;
    let t0 = Instant::now();
    let out = train(&cfg, &train_data, &test_data).unwrap();
    let dt = t0.elapsed();
    let row = &out.rows[0];
    println!(
        "epoch 1 in {:.1?}: train_loss {:.4} train_acc {:.4} test_acc {:.4}",
        dt, row.train_loss, row.train_acc, row.test_acc
    );
}
