//! Simulates conversations and reports how the pause length controls overlap.
//!
//! `cargo run --example simulate_mixtures`

use eend::features::format_rttm;
use eend::simulator::{make_dataset, overlap_ratio, SimulationConfig};

fn main() -> eend::Result<()> {
    let cfg = SimulationConfig::default();
    let mixtures = make_dataset(&cfg, 200, 42)?;
    println!("speakers\tbeta\tmixtures\tmean_overlap");
    for (&k, &beta) in &cfg.betas {
        let ratios: Vec<f64> = mixtures
            .iter()
            .filter(|m| m.true_num_speakers == k)
            .map(|m| overlap_ratio(&m.labels))
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
        println!("{k}\t{beta}\t{}\t{mean:.3}", ratios.len());
    }
    let m = &mixtures[0];
    println!(
        "\n{}: {} speakers, features {}x{}",
        m.id,
        m.true_num_speakers,
        m.features.features.rows(),
        m.features.num_frames()
    );
    print!("{}", format_rttm(&m.segments));
    Ok(())
}
