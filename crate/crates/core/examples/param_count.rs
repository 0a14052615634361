//! Counts trainable parameters of the EDA and transformer-attractor models
//! at the default (full-size) dimensions.
//!
//! `cargo run --example param_count`

use eend::commands::cmd_params;
use eend::encoder::EncoderConfig;
use eend::model::{AttractorKind, ModelConfig};

fn main() -> eend::Result<()> {
    let ta = ModelConfig::default();
    let eda = ModelConfig {
        attractor: AttractorKind::Eda,
        encoder: EncoderConfig {
            use_csv_token: false,
            ..ta.encoder.clone()
        },
        ..ta.clone()
    };
    let eda = cmd_params(&eda)?;
    let ta = cmd_params(&ta)?;
    print!("{}\n{}", eda.format(), ta.format());
    println!(
        "\ntransformer attractors add {:.3}M parameters",
        (ta.total as f64 - eda.total as f64) / 1e6
    );
    Ok(())
}
