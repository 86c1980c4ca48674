//! Command-line front end: train, eval, export, inspect, metrics.

use clap::{Parser, Subcommand};
use dpp_core::error::Result;
use dpp_core::metrics::{estimate_marginals, layer_metrics};
use dpp_core::mnist::{default_data_dir, load_mnist_idx, test_pair, train_pair, Dataset};
use dpp_core::train::{evaluate, metrics_csv, rng_stream, train};
use dpp_core::{config, sparse, state};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dppkit", version, about = "k-out-of-n probabilistic pruning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file; writes metrics.csv, model.dpps and
    /// state.dppt into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// MNIST IDX directory (defaults to $DPP_DATA_DIR, then ./data)
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained state on the test set with one freshly drawn mask.
    Eval {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Re-export a trained state as a sparse .dpps model.
    Export {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the storage and compression report of a .dpps model.
    Inspect {
        file: PathBuf,
        /// JSON-lines instead of CSV
        #[arg(long)]
        json: bool,
    },
    /// Print per-layer mask confidence/diversity metrics of a trained state.
    Metrics {
        #[arg(long)]
        state: PathBuf,
        /// Mask draws per layer
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_data(dir: &Option<PathBuf>) -> Result<(Dataset, Dataset)> {
    let dir = dir.clone().unwrap_or_else(default_data_dir);
    let (ti, tl) = train_pair(&dir);
    let (si, sl) = test_pair(&dir);
    Ok((load_mnist_idx(&ti, &tl)?, load_mnist_idx(&si, &sl)?))
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, data_dir, out } => {
            let mut cfg = config::parse_file(&config)?;
            cfg.seed = seed;
            let (train_data, test_data) = load_data(&data_dir)?;
            std::fs::create_dir_all(&out)?;
            let outcome = train(&cfg, &train_data, &test_data)?;
            std::fs::write(out.join("metrics.csv"), metrics_csv(&outcome.rows))?;
            state::save(&outcome.state, &out.join("state.dppt"))?;
            let mut rng = rng_stream(cfg.seed, 0xE0, 0);
            let masks = outcome.state.network.draw_masks(cfg.beta, &mut rng)?;
            let bytes = sparse::export(&outcome.state, &masks)?;
            std::fs::write(out.join("model.dpps"), bytes)?;
            let last = outcome.rows.last().expect("at least one epoch");
            println!(
                "trained {} epochs: train_acc {:.4} test_acc {:.4}",
                last.epoch, last.train_acc, last.test_acc
            );
            println!("wrote {}", out.join("metrics.csv").display());
            println!("wrote {}", out.join("state.dppt").display());
            println!("wrote {}", out.join("model.dpps").display());
        }
        Command::Eval { state: state_path, seed, data_dir } => {
            let st = state::load(&state_path)?;
            let (_, test_data) = load_data(&data_dir)?;
            let acc = evaluate(&st, &test_data, seed)?;
            println!("test_acc {acc:.4}");
        }
        Command::Export { state: state_path, seed, out } => {
            let st = state::load(&state_path)?;
            let mut rng = rng_stream(seed, 0xE0, 0);
            let masks = st.network.draw_masks(st.beta, &mut rng)?;
            let bytes = sparse::export(&st, &masks)?;
            std::fs::write(&out, bytes)?;
            println!("wrote {}", out.display());
        }
        Command::Inspect { file, json } => {
            let bytes = std::fs::read(&file).map_err(|e| {
                dpp_core::DppError::Data(format!("cannot read {}: {e}", file.display()))
            })?;
            let model = sparse::import(&bytes)?;
            let report = model.report();
            if json {
                print!("{}", report.to_json_lines());
            } else {
                print!("{}", report.to_csv());
            }
        }
        Command::Metrics { state: state_path, samples, seed } => {
            let st = state::load(&state_path)?;
            println!("layer,H_avg,H_norm,I,I_norm,upper_bound");
            for (i, layer) in st.network.layers.iter().enumerate() {
                let mut rng = rng_stream(seed, 0xE1, i as u64);
                let est = estimate_marginals(&layer.logits, st.beta, samples, &mut rng)?;
                let m = layer_metrics(&est);
                println!(
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    i + 1,
                    m.h_avg,
                    m.h_avg_normalized,
                    m.diversity.unwrap_or(f64::NAN),
                    m.diversity_normalized,
                    m.upper_bound
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dppkit: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn data_dir_fallback_is_env_or_local() {
        let d = default_data_dir();
        assert!(d == Path::new("data") || std::env::var_os("DPP_DATA_DIR").is_some());
    }
}
