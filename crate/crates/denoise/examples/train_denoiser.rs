//! Trains a small residual denoiser on synthetic textures and saves the
//! model next to its loss log.
//!
//! Run with: cargo run --example train_denoiser

use std::fs;
use std::path::PathBuf;

use denoise::synth;
use denoise::train::{loss_log_csv, train};
use denoise::{AdamConfig, NetworkConfig, NoiseSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = PathBuf::from("target/example-output/train_denoiser");
    fs::create_dir_all(&out_dir)?;

    // Eight smooth textures stand in for a photo corpus.
    let corpus = synth::demo_corpus(8, 96, 96, 1);
    let spec = NoiseSpec::Gaussian { sigma_255: 25.0 };

    // A slice of the full-size architecture, sized to train in seconds.
    let net_cfg = NetworkConfig {
        depth: 4,
        feed_channels: 15,
        skip_connections: true,
        seed: 0,
    };
    let train_cfg = TrainConfig {
        steps: 200,
        batch_size: 8,
        patch: 48,
        loss_margin: 10,
        adam: AdamConfig {
            alpha: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };

    println!(
        "training depth-{} net ({} parameters) on {} images, {}",
        net_cfg.depth,
        denoise::net::param_count(&net_cfg),
        corpus.len(),
        spec.describe()
    );
    let outcome = train(&corpus, net_cfg, &train_cfg, &spec, None)?;

    let first = outcome.loss_log.first().expect("loss was logged");
    let last = outcome.loss_log.last().expect("loss was logged");
    println!(
        "loss: {:.5} (step {}) -> {:.5} (step {}) in {:.1}s",
        first.loss,
        first.step,
        last.loss,
        last.step,
        last.wall_ms as f64 / 1000.0
    );

    let model_path = out_dir.join("model.dnet");
    outcome
        .network
        .save(&spec, &outcome.fingerprint, &model_path)?;
    fs::write(out_dir.join("loss.csv"), loss_log_csv(&outcome.loss_log))?;
    println!("wrote {} and loss.csv", model_path.display());
    Ok(())
}
