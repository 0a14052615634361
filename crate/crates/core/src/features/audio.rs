use std::path::Path;

use crate::error::{Error, Result};

/// Reads 16-bit PCM WAV, returning the first channel scaled to `[-1, 1)` and
/// the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Input(format!(
            "{}: only 16-bit PCM is supported",
            path.display()
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let mut out = Vec::new();
    for (i, s) in reader.samples::<i16>().enumerate() {
        let s = s.map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        if i % channels == 0 {
            out.push(s as f64 / 32768.0);
        }
    }
    Ok((out, spec.sample_rate))
}

/// Writes mono 16-bit PCM, clipping to `[-1, 1]`.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| Error::Input(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}
