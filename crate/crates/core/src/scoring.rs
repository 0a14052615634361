//! Post-processing of posteriors and diarization error rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};
use crate::features::{LabelMatrix, SegmentList};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub diar_threshold: f64,
    pub exist_threshold: f64,
    pub collar_s: f64,
    pub min_segment_s: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            diar_threshold: 0.5,
            exist_threshold: 0.5,
            collar_s: 0.0,
            min_segment_s: 0.0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("infer.diar_threshold", self.diar_threshold),
            ("infer.exist_threshold", self.exist_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.collar_s >= 0.0) || !(self.min_segment_s >= 0.0) {
            return Err(Error::Config("collar and min segment must be nonnegative".into()));
        }
        Ok(())
    }
}

/// 1 where the posterior is strictly above `threshold`.
pub fn binarize(p: &Tensor<f64>, threshold: f64) -> Tensor<f64> {
    p.map(|v| if v > threshold { 1.0 } else { 0.0 })
}

/// Maximal active runs per speaker as segments.
pub fn segments_from_labels(y: &LabelMatrix, recording_id: &str, min_segment_s: f64) -> SegmentList {
    y.to_segments(recording_id, min_segment_s)
}

/// Error times in seconds; summing over recordings and dividing once gives
/// the corpus-level rate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DerTotals {
    pub scored_speech_s: f64,
    pub miss_s: f64,
    pub false_alarm_s: f64,
    pub confusion_s: f64,
}

impl DerTotals {
    pub fn add(&mut self, other: &DerTotals) {
        self.scored_speech_s += other.scored_speech_s;
        self.miss_s += other.miss_s;
        self.false_alarm_s += other.false_alarm_s;
        self.confusion_s += other.confusion_s;
    }

    pub fn report(&self) -> Result<DerReport> {
        if !(self.scored_speech_s > 0.0) {
            return Err(Error::UndefinedDer("reference has no scored speech".into()));
        }
        let r = |x: f64| x / self.scored_speech_s;
        let (miss, false_alarm, confusion) = (r(self.miss_s), r(self.false_alarm_s), r(self.confusion_s));
        Ok(DerReport {
            der: miss + false_alarm + confusion,
            miss,
            false_alarm,
            confusion,
            scored_speech_s: self.scored_speech_s,
            speaker_map: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerReport {
    pub der: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub scored_speech_s: f64,
    /// Hypothesis speaker and the reference speaker it maps to.
    pub speaker_map: Vec<(String, Option<String>)>,
}

/// Per-recording DER with its raw totals.
pub fn der_totals(reference: &SegmentList, hypothesis: &SegmentList, cfg: &InferenceConfig) -> Result<(DerTotals, Vec<(String, Option<String>)>)> {
    let ref_spk = reference.speakers();
    let hyp_spk = hypothesis.speakers();
    let ref_idx: BTreeMap<&str, usize> = ref_spk.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let hyp_idx: BTreeMap<&str, usize> = hyp_spk.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let collar = cfg.collar_s;
    let mut no_score: Vec<(f64, f64)> = Vec::new();
    let mut cuts: Vec<f64> = Vec::new();
    for s in &reference.segments {
        cuts.extend([s.onset_s, s.end_s()]);
        if collar > 0.0 {
            for b in [s.onset_s, s.end_s()] {
                no_score.push((b - collar, b + collar));
                cuts.extend([b - collar, b + collar]);
            }
        }
    }
    for s in &hypothesis.segments {
        cuts.extend([s.onset_s, s.end_s()]);
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    // elementary intervals: (duration, active ref ids, active hyp ids)
    let mut pieces: Vec<(f64, Vec<usize>, Vec<usize>)> = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        if no_score.iter().any(|&(lo, hi)| mid > lo && mid < hi) {
            continue;
        }
        let active = |segs: &SegmentList, idx: &BTreeMap<&str, usize>| {
            let mut v: Vec<usize> = segs
                .segments
                .iter()
                .filter(|s| s.onset_s < mid && mid < s.end_s())
                .map(|s| idx[s.speaker.as_str()])
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let r = active(reference, &ref_idx);
        let h = active(hypothesis, &hyp_idx);
        if !r.is_empty() || !h.is_empty() {
            pieces.push((b - a, r, h));
        }
    }

    let mut overlap = vec![vec![0.0; hyp_spk.len()]; ref_spk.len()];
    for (d, r, h) in &pieces {
        for &i in r {
            for &j in h {
                overlap[i][j] += d;
            }
        }
    }
    let neg: Vec<Vec<f64>> = overlap.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
    let ref_of_hyp = {
        let mut m = vec![None; hyp_spk.len()];
        for (i, j) in min_cost_assignment(&neg).into_iter().enumerate() {
            if let Some(j) = j {
                m[j] = Some(i);
            }
        }
        m
    };

    let mut t = DerTotals::default();
    for (d, r, h) in &pieces {
        let (nr, nh) = (r.len() as f64, h.len() as f64);
        let correct = h
            .iter()
            .filter(|&&j| ref_of_hyp[j].is_some_and(|i| r.contains(&i)))
            .count() as f64;
        t.scored_speech_s += nr * d;
        t.miss_s += (nr - nh).max(0.0) * d;
        t.false_alarm_s += (nh - nr).max(0.0) * d;
        t.confusion_s += (nr.min(nh) - correct) * d;
    }
    let map = hyp_spk
        .iter()
        .enumerate()
        .map(|(j, h)| (h.clone(), ref_of_hyp[j].map(|i| ref_spk[i].clone())))
        .collect();
    Ok((t, map))
}

/// Time-weighted miss, false alarm and confusion under the optimal
/// one-to-one speaker mapping.
pub fn der(reference: &SegmentList, hypothesis: &SegmentList, cfg: &InferenceConfig) -> Result<DerReport> {
    let (t, map) = der_totals(reference, hypothesis, cfg)?;
    let mut r = t.report()?;
    r.speaker_map = map;
    Ok(r)
}

/// Fraction of recordings whose estimated speaker count is exact.
pub fn count_accuracy(refs: &[usize], hyps: &[usize]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Input(format!(
            "{} reference counts vs {} estimates",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Input("no speaker counts to compare".into()));
    }
    let hits = refs.iter().zip(hyps).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / refs.len() as f64)
}

/// One scored recording.
#[derive(Clone, Debug)]
pub struct FileScore {
    pub file: String,
    pub totals: DerTotals,
    pub ref_speakers: usize,
    pub hyp_speakers: usize,
}

/// Text report: per-file rows, an aggregate row, and aggregates grouped by
/// true speaker count.
pub fn format_score_report(files: &[FileScore]) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "file\tder\tmiss\tfa\tconfusion\tref_speakers\thyp_speakers");
    let row = |s: &mut String, name: &str, t: &DerTotals, r: &str, h: &str| -> Result<()> {
        let rep = t.report()?;
        let _ = writeln!(
            s,
            "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{r}\t{h}",
            rep.der, rep.miss, rep.false_alarm, rep.confusion
        );
        Ok(())
    };
    let mut all = DerTotals::default();
    let mut by_count: BTreeMap<usize, (DerTotals, usize, usize)> = BTreeMap::new();
    for f in files {
        row(&mut s, &f.file, &f.totals, &f.ref_speakers.to_string(), &f.hyp_speakers.to_string())?;
        all.add(&f.totals);
        let e = by_count.entry(f.ref_speakers).or_default();
        e.0.add(&f.totals);
        e.1 += 1;
        e.2 += (f.ref_speakers == f.hyp_speakers) as usize;
    }
    let refs: Vec<usize> = files.iter().map(|f| f.ref_speakers).collect();
    let hyps: Vec<usize> = files.iter().map(|f| f.hyp_speakers).collect();
    row(&mut s, "ALL", &all, "-", "-")?;
    let _ = writeln!(s);
    let _ = writeln!(s, "speakers\tfiles\tder\tmiss\tfa\tconfusion\tcount_acc");
    for (k, (t, n, hit)) in &by_count {
        match t.report() {
            Ok(rep) => {
                let _ = writeln!(
                    s,
                    "NS{k}\t{n}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    rep.der, rep.miss, rep.false_alarm, rep.confusion,
                    *hit as f64 / *n as f64
                );
            }
            Err(_) => {
                let _ = writeln!(s, "NS{k}\t{n}\t-\t-\t-\t-\t{:.4}", *hit as f64 / *n as f64);
            }
        }
    }
    if !files.is_empty() {
        let _ = writeln!(s, "count_accuracy\t{:.4}", count_accuracy(&refs, &hyps)?);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segs(items: &[(&str, f64, f64)]) -> SegmentList {
        let mut s = SegmentList::new("r");
        for &(spk, on, dur) in items {
            s.push(spk, on, dur).unwrap();
        }
        s
    }

    fn cfg() -> InferenceConfig {
        InferenceConfig::default()
    }

    #[test]
    fn identical_is_zero() {
        let r = segs(&[("a", 0.0, 3.0), ("b", 2.0, 4.0)]);
        let rep = der(&r, &r, &cfg()).unwrap();
        assert_eq!(rep.der, 0.0);
    }

    #[test]
    fn empty_hypothesis_is_all_miss() {
        let r = segs(&[("a", 0.0, 3.0), ("b", 2.0, 4.0)]);
        let rep = der(&r, &SegmentList::new("r"), &cfg()).unwrap();
        assert_eq!(rep.der, 1.0);
        assert_eq!(rep.miss, 1.0);
    }

    #[test]
    fn partial_miss() {
        let rep = der(&segs(&[("A", 0.0, 10.0)]), &segs(&[("X", 0.0, 8.0)]), &cfg()).unwrap();
        assert!((rep.miss - 0.2).abs() < 1e-12);
        assert_eq!(rep.false_alarm, 0.0);
        assert_eq!(rep.confusion, 0.0);
        assert!((rep.der - 0.2).abs() < 1e-12);
        assert_eq!(rep.speaker_map, vec![("X".to_string(), Some("A".to_string()))]);
    }

    #[test]
    fn full_overlap_single_hypothesis() {
        let rep = der(
            &segs(&[("A", 0.0, 10.0), ("B", 0.0, 10.0)]),
            &segs(&[("X", 0.0, 10.0)]),
            &cfg(),
        )
        .unwrap();
        assert!((rep.der - 0.5).abs() < 1e-12);
        assert_eq!(rep.scored_speech_s, 20.0);
    }

    #[test]
    fn empty_reference_is_undefined() {
        let r = der(&SegmentList::new("r"), &segs(&[("X", 0.0, 1.0)]), &cfg());
        assert!(matches!(r, Err(Error::UndefinedDer(_))));
    }

    #[test]
    fn collar_removes_boundaries() {
        let c = InferenceConfig {
            collar_s: 0.5,
            ..cfg()
        };
        let rep = der(&segs(&[("A", 0.0, 10.0)]), &segs(&[("X", 0.4, 9.2)]), &c).unwrap();
        assert_eq!(rep.der, 0.0);
        assert!((rep.scored_speech_s - 9.0).abs() < 1e-12);
    }

    #[test]
    fn counts() {
        assert_eq!(count_accuracy(&[2, 3, 1, 4], &[2, 3, 2, 4]).unwrap(), 0.75);
        assert_eq!(count_accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(count_accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert!(count_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn binarize_is_strict() {
        let p = Tensor::full(&[3, 2], 0.5);
        assert_eq!(binarize(&p, 0.5).sum(), 0.0);
    }
}
