//! Compares analytic gradients of the training loss with central finite
//! differences on a tiny model of each attractor kind.
//!
//! `cargo run --release --example gradient_check`

use eend::attractors_ta::TaConfig;
use eend::encoder::EncoderConfig;
use eend::model::{AttractorKind, Model, ModelConfig};
use eend::numerics::{grad_check, grad_check_filtered, Tensor};
use eend::training::{mixture_loss, PitSearch};

fn main() -> eend::Result<()> {
    let x = Tensor::from_fn(5, 6, |i, j| ((i * 3 + j * 5) % 7) as f64 / 7.0 - 0.5);
    let y = Tensor::from_fn(6, 2, |t, s| ((t + s) % 3 == 0) as u8 as f64);
    for kind in [AttractorKind::Eda, AttractorKind::EdaCsv, AttractorKind::Ta] {
        let cfg = ModelConfig {
            attractor: kind,
            max_speakers: 2,
            dropout: 0.0,
            encoder: EncoderConfig {
                input_dim: 5,
                num_blocks: 1,
                model_dim: 8,
                heads: 2,
                ff_dim: 16,
                conv_kernel: 3,
                use_csv_token: true,
            },
            ta: TaConfig {
                num_layers: 1,
                heads: 2,
                ff_dim: 16,
                ..TaConfig::default()
            },
            ..ModelConfig::default()
        };
        let (mut store, model) = Model::build::<f64>(&cfg, 0)?;
        let diar = grad_check(
            &mut store,
            |g| Ok(mixture_loss(&model, g, &x, &y, 0.0, PitSearch::Exhaustive, 0)?.0.total),
            1e-5,
        )?;
        // the existence loss does not reach the encoder
        let full = grad_check_filtered(
            &mut store,
            |g| Ok(mixture_loss(&model, g, &x, &y, 1.0, PitSearch::Exhaustive, 0)?.0.total),
            1e-5,
            |n| !n.starts_with("encoder."),
        )?;
        println!(
            "{:8} diarization loss: {} entries, max rel error {:.2e}; full loss after the encoder: {} entries, {:.2e}",
            kind.name(),
            diar.entries_checked,
            diar.max_rel_error,
            full.entries_checked,
            full.max_rel_error
        );
    }
    Ok(())
}
