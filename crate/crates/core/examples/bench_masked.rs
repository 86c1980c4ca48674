//! Masked-training trajectory probe.

use dpp_core::granularity::{GranularityLevel, GranularitySpec};
use dpp_core::mnist::{load_mnist_idx, test_pair, train_pair};
use dpp_core::model::ArchId;
use dpp_core::train::{train, TrainConfig};
use std::path::Path;

fn fine(k: usize) -> GranularitySpec {
    GranularitySpec { level: GranularityLevel::Fine, k }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let dir = Path::new("data");
    let (ti, tl) = train_pair(dir);
    let (si, sl) = test_pair(dir);
    let train_data = load_mnist_idx(&ti, &tl).unwrap();
    let test_data = load_mnist_idx(&si, &sl).unwrap();

    let mut cfg = TrainConfig::mnist_defaults(
        ArchId::LeNet300_100,
        vec![fine(15), fine(6), fine(6)],
    );
    cfg.epochs = epochs;
    cfg.seed = 1;
    let out = train(&cfg, &train_data, &test_data).unwrap();
    for row in &out.rows {
        let h: Vec<String> = row.layers.iter().map(|l| format!("{:.3}", l.h_avg_normalized)).collect();
        let i: Vec<String> = row.layers.iter().map(|l| format!("{:.3}", l.diversity_normalized)).collect();
        println!(
            "epoch {:2}: loss {:.4} train {:.4} test {:.4} tau {:.2} H [{}] I [{}]",
            row.epoch, row.train_loss, row.train_acc, row.test_acc, row.tau,
            h.join(" "), i.join(" ")
        );
    }
}
