//! Trains the routing classifier on three synthetic texture classes and
//! measures accuracy on fresh noise realizations.
//!
//! Run with: cargo run --example train_classifier

use std::fs;
use std::path::PathBuf;

use denoise::noise::corrupt;
use denoise::router::{train_classifier, ClassifierTrainConfig, TrunkStage};
use denoise::synth;
use denoise::{AdamConfig, ClassifierConfig, NoiseSpec, SeededRng};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = PathBuf::from("target/example-output/train_classifier");
    fs::create_dir_all(&out_dir)?;
    let spec = NoiseSpec::Gaussian { sigma_255: 25.0 };

    let side = 64;
    let (samples, classes) = synth::three_class_corpus(12, side, 42);
    let cfg = ClassifierConfig {
        trunk: vec![
            TrunkStage { channels: 8, downsample: true },
            TrunkStage { channels: 16, downsample: true },
            TrunkStage { channels: 32, downsample: true },
        ],
        fc: vec![48, classes.len()],
        keep_prob: 0.5,
        input_side: side,
        seed: 7,
    };
    let tcfg = ClassifierTrainConfig {
        steps: 200,
        batch_size: 16,
        adam: AdamConfig {
            alpha: 1e-3,
            ..AdamConfig::default()
        },
        seed: 1,
        log_every: 25,
    };

    println!(
        "training a {}-parameter classifier on {} noisy images",
        denoise::router::classifier_param_count(&cfg),
        samples.len()
    );
    let outcome = train_classifier(&samples, &classes, &cfg, &tcfg, &spec)?;
    for r in &outcome.loss_log {
        println!("step {:4}: loss {:.4}", r.step, r.loss);
    }

    // Score on the same images but *different* noise draws.
    let eval_root = SeededRng::new(0xF00D);
    let mut correct = 0;
    for (i, (img, label)) in samples.iter().enumerate() {
        let mut rng = eval_root.derive(i as u64);
        let noisy = corrupt(img, &spec, &mut rng)?;
        let (predicted, _) = outcome.classifier.classify(&noisy)?;
        if predicted.index == *label {
            correct += 1;
        }
    }
    println!(
        "accuracy on fresh realizations: {}/{} = {:.1}%",
        correct,
        samples.len(),
        100.0 * correct as f64 / samples.len() as f64
    );

    let path = out_dir.join("classifier.dcls");
    outcome.classifier.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}
