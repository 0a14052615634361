//! Trains a small transformer-attractor model on simulated one- and
//! two-speaker conversations and reports validation DER per epoch.
//!
//! `RUST_LOG=info cargo run --release --example train_toy [epochs]`

use eend::attractors_ta::{CombinerKind, TaConfig};
use eend::encoder::EncoderConfig;
use eend::model::{AttractorKind, Model, ModelConfig};
use eend::numerics::{AdamConfig, Schedule};
use eend::scoring::InferenceConfig;
use eend::simulator::{make_dataset, SimulationConfig};
use eend::training::{aggregate_der, evaluate, train, EpochMetrics, Example, TrainConfig};

fn main() -> eend::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(30);
    let sim = SimulationConfig {
        min_speakers: 1,
        max_speakers: 2,
        duration_s: 20.0,
        ..SimulationConfig::default()
    };
    let examples = |n, seed| -> eend::Result<Vec<Example>> {
        Ok(make_dataset(&sim, n, seed)?.iter().map(Example::from_mixture).collect())
    };
    let train_set = examples(200, 1000)?;
    let valid_set = examples(50, 900_000)?;
    let cfg = ModelConfig {
        attractor: AttractorKind::Ta,
        dropout: 0.0,
        encoder: EncoderConfig {
            num_blocks: 2,
            model_dim: 64,
            heads: 4,
            ff_dim: 256,
            ..EncoderConfig::default()
        },
        ta: TaConfig {
            num_layers: 1,
            heads: 4,
            ff_dim: 256,
            combiner: CombinerKind::Amp(1.0),
        },
        ..ModelConfig::default()
    };
    let (mut store, model) = Model::build::<f32>(&cfg, 7)?;
    let infer = InferenceConfig::default();
    let before = aggregate_der(&evaluate(&model, &store, &valid_set, &infer)?)?;
    println!("{} trainable parameters, untrained DER {before:.3}", store.num_trainable());
    let tc = TrainConfig {
        epochs,
        optimizer: AdamConfig {
            lr: 0.02,
            schedule: Schedule::Noam { warmup: 400 },
            ..AdamConfig::default()
        },
        crop_frames: 500,
        batch_size: 8,
        average_best: 5,
        // synthetic features are isotropic, so rotations are label-preserving
        rotate_features: true,
        ..TrainConfig::default()
    };
    let outcome = train(&model, &mut store, &train_set, &valid_set, &tc, &infer, None)?;
    println!("{}", EpochMetrics::HEADER);
    for m in &outcome.metrics {
        println!("{}", m.to_line());
    }
    if let Some(avg) = outcome.averaged {
        store.load_values(&avg)?;
        let scores = evaluate(&model, &store, &valid_set, &infer)?;
        let hits = scores.iter().filter(|s| s.ref_speakers == s.hyp_speakers).count();
        println!(
            "averaged model: DER {:.3}, speaker count accuracy {:.2}",
            aggregate_der(&scores)?,
            hits as f64 / scores.len() as f64
        );
    }
    Ok(())
}
