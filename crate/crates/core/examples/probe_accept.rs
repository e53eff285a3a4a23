//! Scouting run for the desk-scale acceptance settings: trains both
//! algorithms on a MNIST subset and prints per-epoch metrics plus the
//! test accuracy.

use capsnet_core::data::SplitName;
use capsnet_core::routing::RoutingAlgorithm;
use capsnet_core::train::{self, Precision, RunConfig};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let data_dir = std::env::var("CAPSNET_DATA_DIR").unwrap_or_else(|_| "data".to_string());
    for algorithm in [RoutingAlgorithm::CognitiveConsistency, RoutingAlgorithm::Baseline] {
        let config = RunConfig {
            data_dir: PathBuf::from(&data_dir),
            algorithm,
            routing_iters: 3,
            epochs,
            seed: 7,
            precision: Precision::F32,
            train_limit: 5000,
            val_limit: 1000,
            test_limit: 1000,
            output_dir: PathBuf::from(format!("/tmp/probe-{}", algorithm.name())),
            ..RunConfig::default()
        };
        let t0 = std::time::Instant::now();
        let outcome = train::train(&config).unwrap();
        for row in &outcome.history {
            println!(
                "{} epoch {}: train_loss {:.4} train_acc {:.4} val_acc {:.4} ({:.0}s)",
                algorithm.name(),
                row.epoch,
                row.train_loss,
                row.train_acc,
                row.val_acc,
                row.wall_seconds
            );
        }
        let test = train::evaluate_checkpoint(&outcome.checkpoint_path, SplitName::Test, None)
            .unwrap();
        println!(
            "{}: test accuracy {:.4} ({} samples), total {:.0}s",
            algorithm.name(),
            test.accuracy,
            test.samples,
            t0.elapsed().as_secs_f64()
        );
    }
}
