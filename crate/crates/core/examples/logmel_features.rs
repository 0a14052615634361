//! Extracts normalized, subsampled log-mel features from a WAV file.
//!
//! `cargo run --example logmel_features [input.wav]`; without an argument a
//! two-tone test signal is written to the temp directory and used instead.

use std::path::PathBuf;

use eend::features::{logmel_extract, normalize, read_wav, subsample, write_wav};

fn main() -> eend::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let sr = 16000u32;
            let samples: Vec<f64> = (0..3 * sr)
                .map(|i| {
                    let t = i as f64 / sr as f64;
                    let f = if t < 1.5 { 440.0 } else { 1760.0 };
                    0.5 * (2.0 * std::f64::consts::PI * f * t).sin()
                })
                .collect();
            let p = std::env::temp_dir().join("eend_tones.wav");
            write_wav(&p, &samples, sr)?;
            p
        }
    };
    let (audio, sr) = read_wav(&path)?;
    let raw = logmel_extract(&audio, sr, 23)?;
    let feats = subsample(&normalize(&raw), 10)?;
    println!(
        "{}: {} samples at {sr} Hz -> {} frames of {} mel bands -> {} frames every {:.2} s",
        path.display(),
        audio.len(),
        raw.num_frames(),
        raw.features.rows(),
        feats.num_frames(),
        feats.timing().frame_shift_s
    );
    // the loudest band moves up when the tone changes
    let peak = |t: usize| {
        (0..feats.features.rows())
            .max_by(|&a, &b| feats.features.get(a, t).total_cmp(&feats.features.get(b, t)))
            .unwrap()
    };
    println!("peak band at start {}, at end {}", peak(1), peak(feats.num_frames() - 2));
    Ok(())
}
