//! Speaker counting from existence probabilities: EDA stops at the first
//! attractor at or below the threshold, transformer attractors keep the
//! longest prefix above it.
//!
//! `cargo run --example speaker_counting`

use eend::attractors_eda::eda_count;
use eend::attractors_ta::ta_infer_count;

fn main() -> eend::Result<()> {
    let cases: [&[f64]; 4] = [
        &[0.9, 0.8, 0.2, 0.1],
        &[0.9, 0.4, 0.7, 0.1],
        &[0.3, 0.9, 0.9, 0.9],
        &[0.99, 0.98, 0.97, 0.96],
    ];
    println!("existence\teda(cap 3)\tta");
    for q in cases {
        let eda = eda_count(|i| Ok(q.get(i).copied().unwrap_or(0.0)), 0.5, 3)?;
        println!("{q:?}\t{eda}\t{}", ta_infer_count(q, 0.5));
    }
    Ok(())
}
