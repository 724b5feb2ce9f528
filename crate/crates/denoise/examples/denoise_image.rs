//! Corrupts a synthetic image, denoises it with a freshly trained model,
//! and reports the PSNR before and after.
//!
//! Run with: cargo run --example denoise_image

use std::fs;
use std::path::PathBuf;

use denoise::eval::{denoise_image, psnr};
use denoise::image_io::save_image;
use denoise::noise::corrupt;
use denoise::synth;
use denoise::train::train;
use denoise::{AdamConfig, NetworkConfig, NoiseSpec, SeededRng, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = PathBuf::from("target/example-output/denoise_image");
    fs::create_dir_all(&out_dir)?;
    let spec = NoiseSpec::Gaussian { sigma_255: 25.0 };

    // Train on one family of textures; hold one image out.
    let corpus = synth::demo_corpus(8, 96, 96, 7);
    let held_out = synth::textured(96, 96, 9999);
    let outcome = train(
        &corpus,
        NetworkConfig {
            depth: 4,
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

    let mut rng = SeededRng::new(42);
    let noisy = corrupt(&held_out, &spec, &mut rng)?;
    let restored = denoise_image(&outcome.network, &noisy, 10)?;

    println!("noisy    PSNR: {:6.2} dB", psnr(&held_out, &noisy)?);
    println!("denoised PSNR: {:6.2} dB", psnr(&held_out, &restored)?);

    save_image(&held_out, out_dir.join("clean.png"))?;
    save_image(&noisy, out_dir.join("noisy.png"))?;
    save_image(&restored, out_dir.join("denoised.png"))?;
    println!("wrote clean/noisy/denoised PNGs to {}", out_dir.display());
    Ok(())
}
