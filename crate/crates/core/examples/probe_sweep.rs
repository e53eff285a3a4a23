//! Scouting run for the Fashion-MNIST iteration sweep.

use capsnet_core::data::DatasetKind;
use capsnet_core::train::{self, Precision, RunConfig};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let data_dir = std::env::var("CAPSNET_DATA_DIR").unwrap_or_else(|_| "data".to_string());
    let config = RunConfig {
        dataset: DatasetKind::FashionMnist,
        data_dir: PathBuf::from(&data_dir),
        epochs,
        seed: 7,
        precision: Precision::F32,
        train_limit: 10_000,
        val_limit: 1000,
        test_limit: 2000,
        output_dir: PathBuf::from("/tmp/probe-sweep"),
        ..RunConfig::default()
    };
    let t0 = std::time::Instant::now();
    let report = train::sweep(&config, &[1, 3]).unwrap();
    print!("{}", report.to_table());
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
