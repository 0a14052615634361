//! Synthetic multi-speaker conversations: renewal-process speech activity
//! plus additive Gaussian speaker signatures as features.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{
    labels_from_segments, FeatureSequence, FrameTiming, LabelMatrix, SegmentList,
    DEFAULT_NUM_MELS,
};
use crate::numerics::Tensor;

pub const UTTERANCE_MEAN_S: f64 = 2.0;
pub const UTTERANCE_STD_S: f64 = 1.0;
pub const UTTERANCE_MIN_S: f64 = 0.3;
/// Frame shift of simulated features (10 ms hop after 10x subsampling).
pub const SIM_FRAME_SHIFT_S: f64 = 0.1;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.3;

/// Parameters of one simulated recording.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub num_speakers: usize,
    /// Mean pause between a speaker's utterances, in seconds.
    pub beta: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 {
            return Err(Error::Config("mixture needs at least one speaker".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.duration_s >= UTTERANCE_MIN_S) {
            return Err(Error::Config(format!(
                "duration must be at least {UTTERANCE_MIN_S} s, got {}",
                self.duration_s
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        (self.duration_s / SIM_FRAME_SHIFT_S).round() as usize
    }
}

/// One simulated recording with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticMixture {
    pub id: String,
    pub features: FeatureSequence,
    pub labels: LabelMatrix,
    pub segments: SegmentList,
    pub true_num_speakers: usize,
}

fn speaker_ids(n: usize) -> Vec<String> {
    (0..n).map(|s| format!("spk{s}")).collect()
}

fn utterance_length(rng: &mut ChaCha8Rng) -> f64 {
    let normal = Normal::new(UTTERANCE_MEAN_S, UTTERANCE_STD_S).expect("valid normal");
    loop {
        let v = normal.sample(rng);
        if v >= UTTERANCE_MIN_S {
            return v;
        }
    }
}

/// Alternating pause/utterance renewal process per speaker, rendered as
/// frame labels at [`SIM_FRAME_SHIFT_S`]. Every speaker gets at least one
/// utterance that covers at least one frame.
pub fn simulate_activity(spec: &MixtureSpec) -> Result<LabelMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pause = Exp::new(1.0 / spec.beta).expect("positive rate");
    let ids = speaker_ids(spec.num_speakers);
    let timing = FrameTiming::uniform(SIM_FRAME_SHIFT_S, spec.num_frames());
    let dur = timing.duration_s();
    let mut segs = SegmentList::new("sim");
    for id in &ids {
        let mut t = pause.sample(&mut rng);
        let mut placed = false;
        while t + UTTERANCE_MIN_S <= dur {
            let len = utterance_length(&mut rng).min(dur - t);
            segs.push(id.clone(), t, len)?;
            placed = true;
            t += len + pause.sample(&mut rng);
        }
        if !placed {
            let len = utterance_length(&mut rng).min(dur);
            let onset = rng.random_range(0.0..=dur - len);
            segs.push(id.clone(), onset, len)?;
        }
    }
    labels_from_segments(&segs, timing, &ids)
}

/// Fraction of speech frames in which two or more speakers are active.
pub fn overlap_ratio(labels: &LabelMatrix) -> f64 {
    let (mut speech, mut overlap) = (0usize, 0usize);
    for t in 0..labels.num_frames() {
        let n = (0..labels.num_speakers()).filter(|&s| labels.is_active(t, s)).count();
        speech += (n >= 1) as usize;
        overlap += (n >= 2) as usize;
    }
    if speech == 0 {
        0.0
    } else {
        overlap as f64 / speech as f64
    }
}

/// Unit-norm speaker signatures, mutually orthogonal when `n <= dim`.
pub fn speaker_signatures(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(v);
        }
    }
    out
}

/// Frame feature = sum of active speakers' signatures + N(0, sigma^2) noise.
pub fn synthesize_features(
    labels: &LabelMatrix,
    spec: &MixtureSpec,
    dim: usize,
    sigma: f64,
) -> Result<FeatureSequence> {
    if dim == 0 || !(sigma >= 0.0) {
        return Err(Error::Config("feature dim must be positive and sigma nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let sigs = speaker_signatures(labels.num_speakers(), dim, &mut rng);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let t_len = labels.num_frames();
    let mut x = Tensor::zeros(&[dim, t_len]);
    for t in 0..t_len {
        for d in 0..dim {
            let mut v = sigma * noise.sample(&mut rng);
            for (s, sig) in sigs.iter().enumerate() {
                if labels.is_active(t, s) {
                    v += sig[d];
                }
            }
            x.set(d, t, v);
        }
    }
    FeatureSequence::new(x, labels.timing.frame_shift_s, labels.timing.frame_length_s, 0)
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub min_speakers: usize,
    pub max_speakers: usize,
    /// Mean pause per speaker count.
    pub betas: BTreeMap<usize, f64>,
    pub duration_s: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            min_speakers: 1,
            max_speakers: 4,
            betas: [(1, 2.0), (2, 2.0), (3, 5.0), (4, 9.0)].into_iter().collect(),
            duration_s: 30.0,
            feature_dim: DEFAULT_NUM_MELS,
            noise_sigma: DEFAULT_NOISE_SIGMA,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_speakers == 0 || self.min_speakers > self.max_speakers {
            return Err(Error::Config(format!(
                "speaker range {}..{} is empty or starts at zero",
                self.min_speakers, self.max_speakers
            )));
        }
        for k in self.min_speakers..=self.max_speakers {
            if !self.betas.contains_key(&k) {
                return Err(Error::Config(format!("missing key sim.beta.{k}")));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("sim.feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Generates one mixture; the speaker count is drawn uniformly from the
/// configured range using `seed`.
pub fn make_mixture(cfg: &SimulationConfig, id: String, seed: u64) -> Result<SyntheticMixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let num_speakers = rng.random_range(cfg.min_speakers..=cfg.max_speakers);
    let spec = MixtureSpec {
        num_speakers,
        beta: cfg.betas[&num_speakers],
        duration_s: cfg.duration_s,
        seed,
    };
    let labels = simulate_activity(&spec)?;
    let features = synthesize_features(&labels, &spec, cfg.feature_dim, cfg.noise_sigma)?;
    let segments = labels.to_segments(&id, 0.0);
    Ok(SyntheticMixture {
        id,
        features,
        labels,
        segments,
        true_num_speakers: num_speakers,
    })
}

/// `n` mixtures; mixture `i` is seeded with `seed + i`.
pub fn make_dataset(cfg: &SimulationConfig, n: usize, seed: u64) -> Result<Vec<SyntheticMixture>> {
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| make_mixture(cfg, format!("mix{i:05}"), seed.wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, beta: f64, dur: f64, seed: u64) -> MixtureSpec {
        MixtureSpec {
            num_speakers: n,
            beta,
            duration_s: dur,
            seed,
        }
    }

    #[test]
    fn single_speaker_never_overlaps() {
        let l = simulate_activity(&spec(1, 2.0, 60.0, 3)).unwrap();
        assert_eq!(overlap_ratio(&l), 0.0);
        assert_eq!(l.num_frames(), 600);
    }

    #[test]
    fn every_speaker_is_active() {
        for seed in 0..200 {
            let l = simulate_activity(&spec(4, 9.0, 5.0, seed)).unwrap();
            for s in 0..4 {
                assert!(l.active_frames(s) > 0, "seed {seed} speaker {s}");
            }
        }
    }

    #[test]
    fn overlap_falls_with_beta() {
        let mean = |beta: f64| {
            (0..100)
                .map(|seed| overlap_ratio(&simulate_activity(&spec(2, beta, 120.0, seed)).unwrap()))
                .sum::<f64>()
                / 100.0
        };
        let (a, b, c) = (mean(2.0), mean(5.0), mean(9.0));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn silence_features_are_centered() {
        let s = spec(1, 2.0, 60.0, 1);
        let l = LabelMatrix::zeros(FrameTiming::uniform(0.1, 600), vec!["a".into()]);
        let f = synthesize_features(&l, &s, 23, 0.3).unwrap();
        let bound = 3.0 * 0.3 / (600f64).sqrt();
        for d in 0..23 {
            let m: f64 = (0..600).map(|t| f.features.get(d, t)).sum::<f64>() / 600.0;
            assert!(m.abs() <= bound, "dim {d} mean {m}");
        }
    }

    #[test]
    fn low_noise_frames_match_signature() {
        let s = spec(2, 2.0, 30.0, 5);
        let l = simulate_activity(&s).unwrap();
        let f = synthesize_features(&l, &s, 23, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(1);
        let sigs = speaker_signatures(2, 23, &mut rng);
        for t in 0..l.num_frames() {
            let mut expect = [0.0; 23];
            for (s, sig) in sigs.iter().enumerate() {
                if l.is_active(t, s) {
                    expect.iter_mut().zip(sig).for_each(|(e, v)| *e += v);
                }
            }
            for d in 0..23 {
                assert!((f.features.get(d, t) - expect[d]).abs() < 1e-3);
            }
        }
        let dot: f64 = sigs[0].iter().zip(&sigs[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let cfg = SimulationConfig {
            duration_s: 5.0,
            ..Default::default()
        };
        assert!(make_dataset(&cfg, 0, 1).unwrap().is_empty());
        let a = make_dataset(&cfg, 100, 9).unwrap();
        let b = make_dataset(&cfg, 100, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.features, y.features);
        }
        let big = make_dataset(&cfg, 400, 9).unwrap();
        for k in 1..=4 {
            let c = big.iter().filter(|m| m.true_num_speakers == k).count();
            assert!(c >= 60, "count {k}: {c}");
        }
    }

    #[test]
    fn missing_beta_is_config_error() {
        let mut cfg = SimulationConfig::default();
        cfg.betas.remove(&3);
        match make_dataset(&cfg, 1, 0) {
            Err(Error::Config(m)) => assert!(m.contains("sim.beta.3")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
