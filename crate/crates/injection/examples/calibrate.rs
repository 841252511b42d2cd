//! Desk calibration for the toy-scale trend checks: trains the model
//! variants the acceptance suite uses and prints the quantities it asserts.
//!
//! Usage: calibrate [steps] [encoded|forward] [lr] [seed]

use injection::config::{Backbone, CycleLatent, LossWeights, ModelConfig, TrainConfig};
use injection::data::{make_toy_dataset, ToySpec};
use injection::metrics::{diversity_all_pairs, fid, FrozenConvExtractor};
use injection::nn::discriminate;
use injection::rng::RandomSource;
use injection::tensor::{Tape, Tensor};
use injection::trainer::{train, translate_images, TrainOptions, TrainState};
use std::time::Instant;

fn model(backbone: Backbone) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        in_channels: 3,
        num_domains: 2,
        latent_dim: 8,
        base_width: 8,
        depth: 2,
        backbone,
        ..ModelConfig::default()
    }
}

fn cls_accuracy(state: &TrainState, ds: &injection::data::Dataset) -> f64 {
    let tape = Tape::new();
    let dv = state.discriminator.bind(&tape);
    let mut correct = 0usize;
    let mut total = 0usize;
    for (k, domain) in ds.domains.iter().enumerate() {
        for img in &domain.images {
            let batch = Tensor::new(vec![1, 3, 32, 32], img.data().to_vec());
            let (_, logits) =
                discriminate(&tape, &state.discriminator, &dv, tape.input(batch)).unwrap();
            let row = tape.value(logits);
            let pred = row
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == k {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let cycle = match args.get(2).map(|s| s.as_str()) {
        Some("forward") => CycleLatent::Forward,
        _ => CycleLatent::Encoded,
    };
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(7);
    let decay = args.get(5).map(|s| s == "decay").unwrap_or(false);
    println!("steps={steps} cycle={cycle:?} lr={lr} seed={seed} decay={decay}");

    let (constant, decay_epochs) = if decay { (125, 125) } else { (10000, 0) };
    let train_cfg = TrainConfig {
        batch_size: 8,
        base_lr: lr,
        epochs_constant: constant,
        epochs_decay: decay_epochs,
        seed,
        cycle_latent: cycle,
        ..TrainConfig::default()
    };

    let ds = make_toy_dataset(
        &ToySpec {
            num_domains: 2,
            per_domain: 32,
            image_size: 32,
        },
        &mut RandomSource::new(42, "toy"),
    )
    .unwrap();
    let fx = FrozenConvExtractor::new(3, FrozenConvExtractor::DEFAULT_SEED);
    let d0 = &ds.domains[0].images;
    let d1 = &ds.domains[1].images;

    let variants_of_first = |state: &TrainState, label: &str| -> f64 {
        let sources = vec![d0[0].clone(); 64];
        let outs = translate_images(
            &state.generator,
            &state.model,
            &sources,
            1,
            &mut RandomSource::new(1234, "variants"),
        )
        .unwrap();
        let div = diversity_all_pairs(&outs, &fx).unwrap();
        println!("{label}: diversity(64 variants, all pairs) = {div:.6}");
        div
    };

    let run = |backbone: Backbone, lambda_latent: f64| -> TrainState {
        let weights = LossWeights {
            lambda_latent,
            ..LossWeights::default()
        };
        let mut state = TrainState::new(model(backbone), weights, train_cfg.clone()).unwrap();
        let out = std::env::temp_dir().join(format!(
            "inj-calib-{}-{backbone:?}-{lambda_latent}-{cycle:?}-{lr}",
            std::process::id()
        ));
        let _ = std::fs::remove_dir_all(&out);
        let t0 = Instant::now();
        train(&mut state, &ds, &out, &TrainOptions { max_steps: Some(steps) }).unwrap();
        // final latent loss from the log tail
        let log = std::fs::read_to_string(out.join("train.log")).unwrap();
        let last_latent = log
            .lines()
            .rev()
            .find(|l| l.contains("phase=g"))
            .and_then(|l| l.split("latent_l1=").nth(1))
            .and_then(|s| s.split(',').next())
            .unwrap_or("?")
            .to_string();
        println!(
            "trained {backbone:?} lat={lambda_latent}: {steps} steps in {:.0}s, final latent_l1={last_latent}",
            t0.elapsed().as_secs_f64()
        );
        state
    };

    let unet10 = run(Backbone::Unet, 10.0);
    println!("unet10: D_cls acc = {:.4}", cls_accuracy(&unet10, &ds));
    let sources: Vec<Tensor> = (0..256).map(|i| d0[i % d0.len()].clone()).collect();
    let generated = translate_images(
        &unet10.generator,
        &unet10.model,
        &sources,
        1,
        &mut RandomSource::new(99, "eval-z"),
    )
    .unwrap();
    let fid_gen = fid(d1, &generated, &fx, 256, true, &mut RandomSource::new(5, "fid")).unwrap();
    let fid_real = fid(d1, d0, &fx, 256, true, &mut RandomSource::new(5, "fid")).unwrap();
    println!("unet10: FID(gen d0->d1 vs d1) = {fid_gen:.4}, FID(d0 vs d1) = {fid_real:.4}");
    let div10 = variants_of_first(&unet10, "unet10");

    let unet0 = run(Backbone::Unet, 0.0);
    let div0 = variants_of_first(&unet0, "unet0");
    println!("ratio div10/div0 = {:.2}", div10 / div0.max(1e-12));

    let resnet10 = run(Backbone::Resnet, 10.0);
    let divres = variants_of_first(&resnet10, "resnet10");
    println!(
        "unet {div10:.6} vs resnet {divres:.6} -> unet higher: {}",
        div10 > divres
    );
}
