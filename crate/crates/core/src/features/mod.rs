//! Acoustic features, frame labels, and RTTM segment files.

mod audio;
mod labels;
mod logmel;
mod rttm;

pub use audio::{read_wav, write_wav};
pub use labels::{labels_from_segments, LabelMatrix};
pub use logmel::{logmel_extract, mel_filterbank, normalize, subsample, MEL_FLOOR};
pub use rttm::{format_rttm, parse_rttm, read_rttm, write_rttm};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_NUM_MELS: usize = 23;
pub const DEFAULT_FRAME_SHIFT_S: f64 = 0.010;
pub const DEFAULT_FRAME_LENGTH_S: f64 = 0.025;

/// Placement of frames on the time axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTiming {
    pub frame_shift_s: f64,
    pub frame_length_s: f64,
    pub num_frames: usize,
}

impl FrameTiming {
    /// Frames whose length equals their shift, as produced by the simulator.
    pub fn uniform(frame_shift_s: f64, num_frames: usize) -> Self {
        Self {
            frame_shift_s,
            frame_length_s: frame_shift_s,
            num_frames,
        }
    }

    pub fn center(&self, t: usize) -> f64 {
        t as f64 * self.frame_shift_s + 0.5 * self.frame_length_s
    }

    pub fn duration_s(&self) -> f64 {
        self.num_frames as f64 * self.frame_shift_s
    }
}

/// `D' × T` feature matrix with its frame timing.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub features: Tensor<f64>,
    pub frame_shift_s: f64,
    pub frame_length_s: f64,
    pub sample_rate: u32,
}

impl FeatureSequence {
    pub fn new(
        features: Tensor<f64>,
        frame_shift_s: f64,
        frame_length_s: f64,
        sample_rate: u32,
    ) -> Result<Self> {
        if features.cols() == 0 {
            return Err(Error::Input("feature sequence has no frames".into()));
        }
        if frame_shift_s <= 0.0 || frame_length_s <= 0.0 {
            return Err(Error::Input("frame shift and length must be positive".into()));
        }
        if !features.all_finite() {
            return Err(Error::Numeric("feature sequence has non-finite values".into()));
        }
        Ok(Self {
            features,
            frame_shift_s,
            frame_length_s,
            sample_rate,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.features.cols()
    }

    pub fn timing(&self) -> FrameTiming {
        FrameTiming {
            frame_shift_s: self.frame_shift_s,
            frame_length_s: self.frame_length_s,
            num_frames: self.num_frames(),
        }
    }

    /// Serializes as named tensors: `features` plus a `timing` row holding
    /// shift, length and sample rate.
    pub fn to_tensors(&self) -> Vec<(String, Tensor<f64>)> {
        vec![
            ("features".to_string(), self.features.clone()),
            (
                "timing".to_string(),
                Tensor::from_vec(
                    &[1, 3],
                    vec![
                        self.frame_shift_s,
                        self.frame_length_s,
                        self.sample_rate as f64,
                    ],
                )
                .expect("fixed shape"),
            ),
        ]
    }

    pub fn from_tensors(tensors: Vec<(String, Tensor<f64>)>) -> Result<Self> {
        let mut features = None;
        let mut timing = None;
        for (name, t) in tensors {
            match name.as_str() {
                "features" => features = Some(t),
                "timing" => timing = Some(t),
                other => return Err(Error::Load(format!("unexpected tensor {other} in feature file"))),
            }
        }
        let (Some(f), Some(tm)) = (features, timing) else {
            return Err(Error::Load("feature file needs `features` and `timing`".into()));
        };
        if tm.len() != 3 {
            return Err(Error::Load("timing tensor must hold 3 values".into()));
        }
        let d = tm.data();
        Self::new(f, d[0], d[1], d[2] as u32)
    }
}

/// One speaker turn.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub speaker: String,
    pub onset_s: f64,
    pub duration_s: f64,
}

impl Segment {
    pub fn end_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }
}

/// Speaker turns of one recording.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SegmentList {
    pub recording_id: String,
    pub segments: Vec<Segment>,
}

impl SegmentList {
    pub fn new(recording_id: impl Into<String>) -> Self {
        Self {
            recording_id: recording_id.into(),
            segments: Vec::new(),
        }
    }

    pub fn push(&mut self, speaker: impl Into<String>, onset_s: f64, duration_s: f64) -> Result<()> {
        if !(duration_s > 0.0) || !(onset_s >= 0.0) {
            return Err(Error::Input(format!(
                "segment needs onset >= 0 and duration > 0 (got {onset_s}, {duration_s})"
            )));
        }
        self.segments.push(Segment {
            speaker: speaker.into(),
            onset_s,
            duration_s,
        });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    /// Distinct speaker ids in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.segments {
            if !out.contains(&s.speaker) {
                out.push(s.speaker.clone());
            }
        }
        out
    }
}
