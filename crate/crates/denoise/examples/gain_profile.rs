//! Ranks per-image PSNR gains of a trained model against a baseline —
//! here the "do nothing" baseline, i.e. each image's mean noisy PSNR.
//!
//! Run with: cargo run --example gain_profile

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use denoise::eval::{evaluate, gain_profile, profile_csv};
use denoise::synth;
use denoise::train::train;
use denoise::{AdamConfig, BaselineScores, NetworkConfig, NoiseSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = PathBuf::from("target/example-output/gain_profile");
    fs::create_dir_all(&out_dir)?;
    let spec = NoiseSpec::Gaussian { sigma_255: 25.0 };

    let corpus = synth::demo_corpus(8, 96, 96, 21);
    let eval_corpus = synth::demo_corpus(6, 96, 96, 600);
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

    let report = evaluate(&eval_corpus, &outcome.network, &spec, 3, 1, 10)?;

    // Build the baseline from the same records: per image, the mean PSNR
    // of the *noisy* input. Gains are then "dB better than doing
    // nothing", so a working model wins on every image.
    let mut noisy_psnrs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &report.records {
        noisy_psnrs.entry(r.image.clone()).or_default().push(r.psnr_noisy);
    }
    let baseline = BaselineScores(
        noisy_psnrs
            .into_iter()
            .map(|(id, v)| (id, v.iter().sum::<f64>() / v.len() as f64))
            .collect(),
    );

    let profile = gain_profile(&report, &baseline)?;
    print!("{}", profile_csv(&profile));
    println!(
        "win rate {:.2}, zero-crossing fraction {:.2} over {} images",
        profile.win_rate,
        profile.zero_crossing_fraction,
        profile.entries.len()
    );

    fs::write(out_dir.join("baseline.csv"), baseline.to_csv())?;
    fs::write(out_dir.join("profile.csv"), profile_csv(&profile))?;
    println!("wrote baseline.csv and profile.csv to {}", out_dir.display());
    Ok(())
}
