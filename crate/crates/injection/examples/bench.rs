use injection::config::{LossWeights, ModelConfig, TrainConfig};
use injection::data::{make_toy_dataset, ToySpec};
use injection::rng::RandomSource;
use injection::trainer::{train, TrainOptions, TrainState};
use std::time::Instant;

fn main() {
    let model = ModelConfig {
        image_size: 32,
        in_channels: 3,
        num_domains: 2,
        latent_dim: 8,
        base_width: 8,
        depth: 2,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        batch_size: 8,
        epochs_constant: 10000,
        epochs_decay: 0,
        seed: 7,
        ..TrainConfig::default()
    };
    let ds = make_toy_dataset(
        &ToySpec { num_domains: 2, per_domain: 32, image_size: 32 },
        &mut RandomSource::new(7, "toy"),
    )
    .unwrap();
    let mut state = TrainState::new(model, LossWeights::default(), tc).unwrap();
    let out = std::path::Path::new("/tmp/bench/out");
    let t0 = Instant::now();
    train(&mut state, &ds, out, &TrainOptions { max_steps: Some(30) }).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("30 steps in {dt:.2}s -> {:.0} ms/step, 2000 steps ~ {:.1} min", dt / 30.0 * 1000.0, dt / 30.0 * 2000.0 / 60.0);
}
