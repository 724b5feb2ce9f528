//! Renders the per-layer noise estimates of a trained model as images —
//! the gradual part of gradual residual denoising made visible.
//!
//! Run with: cargo run --example visualize_estimates

use std::fs;
use std::path::PathBuf;

use denoise::image_io::{save_image, to_net_range};
use denoise::net::visualize_estimates;
use denoise::noise::corrupt;
use denoise::synth;
use denoise::train::train;
use denoise::{AdamConfig, NetworkConfig, NoiseSpec, SeededRng, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = PathBuf::from("target/example-output/visualize_estimates");
    fs::create_dir_all(&out_dir)?;
    let spec = NoiseSpec::Gaussian { sigma_255: 25.0 };

    let corpus = synth::demo_corpus(6, 96, 96, 33);
    let outcome = train(
        &corpus,
        NetworkConfig {
            depth: 5,
            feed_channels: 15,
            skip_connections: true,
            seed: 0,
        },
        &TrainConfig {
            steps: 250,
            batch_size: 8,
            patch: 48,
            loss_margin: 10,
            adam: AdamConfig {
                alpha: 1e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        },
        &spec,
        None,
    )?;

    let mut rng = SeededRng::new(4);
    let noisy = corrupt(&synth::textured(96, 96, 777), &spec, &mut rng)?;
    let trace = outcome.network.forward(&to_net_range(&noisy), false)?;

    // Mid-gray means "this layer contributes nothing here"; darker and
    // lighter pixels are negative and positive corrections on a shared
    // symmetric scale.
    let layers: Vec<usize> = (1..=5).collect();
    let images = visualize_estimates(&trace, &layers)?;
    for (layer, img) in layers.iter().zip(&images) {
        let path = out_dir.join(format!("estimate-{layer:02}.png"));
        save_image(img, &path)?;
        println!("layer {layer}: wrote {}", path.display());
    }
    save_image(&noisy, out_dir.join("noisy.png"))?;
    println!("wrote noisy.png alongside the estimates");
    Ok(())
}
