use super::{FrameTiming, SegmentList};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Tolerance for a frame center sitting exactly on a segment boundary.
const BOUNDARY_TOL: f64 = 1e-9;

/// `T × S` binary speech activity, one column per speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub labels: Tensor<f64>,
    pub timing: FrameTiming,
    pub speakers: Vec<String>,
}

impl LabelMatrix {
    pub fn zeros(timing: FrameTiming, speakers: Vec<String>) -> Self {
        Self {
            labels: Tensor::zeros(&[timing.num_frames, speakers.len()]),
            timing,
            speakers,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.labels.rows()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_active(&self, t: usize, s: usize) -> bool {
        self.labels.get(t, s) > 0.5
    }

    pub fn active_frames(&self, s: usize) -> usize {
        (0..self.num_frames()).filter(|&t| self.is_active(t, s)).count()
    }

    /// Drops speakers with no active frame.
    pub fn without_silent_speakers(&self) -> Self {
        let keep: Vec<usize> = (0..self.num_speakers())
            .filter(|&s| self.active_frames(s) > 0)
            .collect();
        Self {
            labels: self.labels.select_cols(&keep),
            timing: self.timing,
            speakers: keep.iter().map(|&s| self.speakers[s].clone()).collect(),
        }
    }

    /// Maximal runs of active frames per speaker as time segments, each run
    /// spanning half a shift either side of its first and last frame centers.
    /// Runs shorter than `min_segment_s` are dropped.
    pub fn to_segments(&self, recording_id: &str, min_segment_s: f64) -> SegmentList {
        let mut out = SegmentList::new(recording_id);
        let half = 0.5 * self.timing.frame_shift_s;
        let t_max = self.num_frames();
        for s in 0..self.num_speakers() {
            let mut t = 0;
            while t < t_max {
                if !self.is_active(t, s) {
                    t += 1;
                    continue;
                }
                let start = t;
                while t < t_max && self.is_active(t, s) {
                    t += 1;
                }
                let onset = (self.timing.center(start) - half).max(0.0);
                let dur = self.timing.center(t - 1) + half - onset;
                if dur >= min_segment_s && dur > 0.0 {
                    out.push(self.speakers[s].clone(), onset, dur)
                        .expect("runs have positive length");
                }
            }
        }
        out.segments
            .sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.speaker.cmp(&b.speaker)));
        out
    }

    /// Frames `start..start+len`.
    pub fn crop(&self, start: usize, len: usize) -> Self {
        let s = self.num_speakers();
        let data = self.labels.data()[start * s..(start + len) * s].to_vec();
        Self {
            labels: Tensor::from_vec(&[len, s], data).expect("crop within bounds"),
            timing: FrameTiming {
                num_frames: len,
                ..self.timing
            },
            speakers: self.speakers.clone(),
        }
    }
}

/// Marks frame `t` active for speaker `s` when the frame center lies inside
/// any of that speaker's segments (boundaries count as inside).
pub fn labels_from_segments(
    segs: &SegmentList,
    timing: FrameTiming,
    speakers: &[String],
) -> Result<LabelMatrix> {
    let mut out = LabelMatrix::zeros(timing, speakers.to_vec());
    for seg in &segs.segments {
        let s = speakers
            .iter()
            .position(|id| *id == seg.speaker)
            .ok_or_else(|| Error::Input(format!("unknown speaker id {}", seg.speaker)))?;
        let (on, off) = (seg.onset_s, seg.end_s());
        // first frame whose center could be >= onset
        let first = ((on - 0.5 * timing.frame_length_s) / timing.frame_shift_s - 1.0)
            .floor()
            .max(0.0) as usize;
        for t in first..timing.num_frames {
            let c = timing.center(t);
            if c > off + BOUNDARY_TOL {
                break;
            }
            if c >= on - BOUNDARY_TOL {
                out.labels.set(t, s, 1.0);
            }
        }
    }
    Ok(out)
}
