//! Class-aware denoising end to end: trains a per-class specialist and a
//! class-agnostic fallback, registers both, and routes noisy images by
//! classifier prediction versus a perfect oracle.
//!
//! Run with: cargo run --example route_denoise

use std::fs;
use std::path::PathBuf;

use denoise::eval::psnr;
use denoise::noise::corrupt;
use denoise::router::{
    paired_route_eval, route_denoise, train_classifier, ClassifierTrainConfig, DenoiserRegistry,
    RegistryEntry, RouteMode, TrunkStage, AGNOSTIC,
};
use denoise::synth;
use denoise::train::train;
use denoise::{
    AdamConfig, ClassifierConfig, GrayImage, NetworkConfig, NoiseSpec, SeededRng, TrainConfig,
};

fn train_model(corpus: &[GrayImage], spec: &NoiseSpec, seed: u64) -> denoise::TrainOutcome {
    train(
        corpus,
        NetworkConfig {
            depth: 3,
            feed_channels: 11,
            skip_connections: true,
            seed,
        },
        &TrainConfig {
            steps: 150,
            batch_size: 8,
            patch: 48,
            loss_margin: 10,
            adam: AdamConfig {
                alpha: 1e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        },
        spec,
        None,
    )
    .expect("training succeeds")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = PathBuf::from("target/example-output/route_denoise");
    fs::create_dir_all(&out_dir)?;
    let spec = NoiseSpec::Gaussian { sigma_255: 25.0 };
    let side = 64;
    let (samples, classes) = synth::three_class_corpus(8, side, 5);

    // A specialist for the "stripes" class and an agnostic fallback
    // trained on everything.
    let stripes: Vec<GrayImage> = samples
        .iter()
        .filter(|(_, l)| *l == 0)
        .map(|(img, _)| img.clone())
        .collect();
    let everything: Vec<GrayImage> = samples.iter().map(|(img, _)| img.clone()).collect();
    println!("training the stripes specialist...");
    let specialist = train_model(&stripes, &spec, 100);
    println!("training the agnostic fallback...");
    let fallback = train_model(&everything, &spec, 200);

    let stripes_path = out_dir.join("stripes.dnet");
    let agnostic_path = out_dir.join("agnostic.dnet");
    specialist.network.save(&spec, &specialist.fingerprint, &stripes_path)?;
    fallback.network.save(&spec, &fallback.fingerprint, &agnostic_path)?;

    let registry = DenoiserRegistry::from_entries(
        vec![
            RegistryEntry {
                class: "stripes".into(),
                noise: spec,
                model: PathBuf::from("stripes.dnet"),
            },
            RegistryEntry {
                class: AGNOSTIC.into(),
                noise: spec,
                model: PathBuf::from("agnostic.dnet"),
            },
        ],
        &out_dir,
    )?;
    fs::write(out_dir.join("registry.json"), registry.to_json())?;

    println!("training the classifier...");
    let classifier = train_classifier(
        &samples,
        &classes,
        &ClassifierConfig {
            trunk: vec![
                TrunkStage { channels: 8, downsample: true },
                TrunkStage { channels: 16, downsample: true },
                TrunkStage { channels: 32, downsample: true },
            ],
            fc: vec![48, classes.len()],
            keep_prob: 0.5,
            input_side: side,
            seed: 7,
        },
        &ClassifierTrainConfig {
            steps: 200,
            batch_size: 16,
            adam: AdamConfig {
                alpha: 1e-3,
                ..AdamConfig::default()
            },
            seed: 1,
            log_every: 50,
        },
        &spec,
    )?
    .classifier;

    // Route one noisy stripes image both ways.
    let clean = &samples[0].0;
    let mut rng = SeededRng::new(9);
    let noisy = corrupt(clean, &spec, &mut rng)?;
    let by_oracle = route_denoise(&noisy, &registry, RouteMode::Oracle(&classes[0]), &spec, 10)?;
    let by_class = route_denoise(&noisy, &registry, RouteMode::Classifier(&classifier), &spec, 10)?;
    println!(
        "oracle routed to {:?}: {:.2} dB; classifier predicted {:?} (model {:?}): {:.2} dB",
        by_oracle.model_class,
        psnr(clean, &by_oracle.image)?,
        by_class.label.name,
        by_class.model_class,
        psnr(clean, &by_class.image)?
    );

    // Paired comparison over the whole corpus on shared realizations.
    let records = paired_route_eval(&samples, &classes, &registry, &classifier, &spec, 2, 3, 10)?;
    let n = records.len() as f64;
    let agree = records
        .iter()
        .filter(|r| r.predicted_class == r.oracle_class)
        .count();
    let mean_gap: f64 = records
        .iter()
        .map(|r| r.psnr_oracle - r.psnr_predicted)
        .sum::<f64>()
        / n;
    println!(
        "paired evaluation: {} records, routing agreement {}/{}, mean oracle advantage {:.3} dB",
        records.len(),
        agree,
        records.len(),
        mean_gap
    );
    Ok(())
}
