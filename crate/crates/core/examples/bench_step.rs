//! Rough timing of one desk-preset training step (forward + loss +
//! backward) at both precisions. Run with --release for realistic numbers.

use capsnet_core::model::{self, Mode, ModelConfig, Parameters, Preset};
use capsnet_core::routing::{RoutingAlgorithm, RoutingConfig};
use capsnet_core::tensor::{Real, Tensor};
use std::time::Instant;

fn bench<T: Real>(label: &str, batch: usize, steps: usize) {
    let config = ModelConfig::preset(
        Preset::Desk,
        (1, 28, 28),
        RoutingConfig::new(RoutingAlgorithm::CognitiveConsistency, 3),
    );
    let params = Parameters::<T>::init(&config, 7).unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let images = Tensor::<T>::randn(&[batch, 1, 28, 28], 0.3, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    let loss_cfg = model::MarginLossConfig::default();

    // warmup
    let caps = model::forward(&params, &images, &config, Mode::Train).unwrap();
    let loss = model::margin_loss(&caps, &labels, &loss_cfg).unwrap();
    loss.backward().unwrap();
    params.zero_grad();

    let t0 = Instant::now();
    for _ in 0..steps {
        let caps = model::forward(&params, &images, &config, Mode::Train).unwrap();
        let loss = model::margin_loss(&caps, &labels, &loss_cfg).unwrap();
        loss.backward().unwrap();
        params.zero_grad();
    }
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!(
        "{label}: {:.1} ms/step (batch {batch}) -> {:.1} s per 5000-sample epoch",
        dt * 1e3,
        dt * (5000.0 / batch as f64)
    );
}

fn main() {
    bench::<f64>("f64", 64, 5);
    bench::<f32>("f32", 64, 5);
}
