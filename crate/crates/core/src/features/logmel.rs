use rustfft::{num_complex::Complex, FftPlanner};

use super::{FeatureSequence, DEFAULT_FRAME_LENGTH_S, DEFAULT_FRAME_SHIFT_S};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Energy floor applied before the logarithm.
pub const MEL_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Triangular filters on the mel scale between 0 Hz and Nyquist, as an
/// `n_mels × (fft_size/2 + 1)` matrix. Also returns the band centers in Hz.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> (Tensor<f64>, Vec<f64>) {
    let nyquist = sample_rate as f64 / 2.0;
    let bins = fft_size / 2 + 1;
    let max_mel = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let fb = Tensor::from_fn(n_mels, bins, |m, k| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    });
    (fb, edges[1..=n_mels].to_vec())
}

/// Log mel filterbank energies with a 25 ms Hamming window and 10 ms hop.
///
/// Frame count is `floor((len - window) / hop) + 1`.
pub fn logmel_extract(audio: &[f64], sample_rate: u32, n_mels: usize) -> Result<FeatureSequence> {
    if sample_rate != 8000 && sample_rate != 16000 {
        return Err(Error::Input(format!(
            "sample rate {sample_rate} Hz is not supported (8000 or 16000)"
        )));
    }
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be positive".into()));
    }
    let window = (DEFAULT_FRAME_LENGTH_S * sample_rate as f64).round() as usize;
    let hop = (DEFAULT_FRAME_SHIFT_S * sample_rate as f64).round() as usize;
    if audio.len() < window {
        return Err(Error::Input(format!(
            "audio has {} samples, shorter than one {window}-sample window",
            audio.len()
        )));
    }
    let frames = (audio.len() - window) / hop + 1;
    let fft_size = window.next_power_of_two();
    let (fb, _) = mel_filterbank(n_mels, fft_size, sample_rate);
    let bins = fft_size / 2 + 1;
    let hamming: Vec<f64> = (0..window)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (window - 1) as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut power = vec![0.0; bins];
    let mut out = Tensor::zeros(&[n_mels, frames]);
    for t in 0..frames {
        let chunk = &audio[t * hop..t * hop + window];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < window {
                Complex::new(chunk[i] * hamming[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for m in 0..n_mels {
            let row = &fb.data()[m * bins..(m + 1) * bins];
            let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.set(m, t, e.max(MEL_FLOOR).ln());
        }
    }
    FeatureSequence::new(out, DEFAULT_FRAME_SHIFT_S, DEFAULT_FRAME_LENGTH_S, sample_rate)
}

/// Per-dimension mean and variance normalization over the recording.
pub fn normalize(f: &FeatureSequence) -> FeatureSequence {
    let (d, t) = f.features.dims();
    let mut out = f.features.clone();
    for i in 0..d {
        let row = &mut out.data_mut()[i * t..(i + 1) * t];
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let inv = 1.0 / (var + 1e-10).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    FeatureSequence {
        features: out,
        ..f.clone()
    }
}

/// Averages each group of `factor` consecutive frames. A trailing partial
/// group is zero-padded to full size before averaging.
pub fn subsample(f: &FeatureSequence, factor: usize) -> Result<FeatureSequence> {
    if factor == 0 {
        return Err(Error::Config("subsampling factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(f.clone());
    }
    let (d, t) = f.features.dims();
    let out_t = t.div_ceil(factor);
    let inv = 1.0 / factor as f64;
    let out = Tensor::from_fn(d, out_t, |i, j| {
        let end = ((j + 1) * factor).min(t);
        (j * factor..end).map(|k| f.features.get(i, k)).sum::<f64>() * inv
    });
    Ok(FeatureSequence {
        features: out,
        frame_shift_s: f.frame_shift_s * factor as f64,
        frame_length_s: f.frame_length_s + (factor - 1) as f64 * f.frame_shift_s,
        sample_rate: f.sample_rate,
    })
}
