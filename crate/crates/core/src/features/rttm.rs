use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::SegmentList;
use crate::error::{Error, Result};

/// Parses `SPEAKER` records. Other record types and blank lines are skipped.
///
/// All records must share one recording id; an empty input yields an empty
/// list named `default_id`.
pub fn parse_rttm(text: &str, source: &Path, default_id: &str) -> Result<SegmentList> {
    let mut out = SegmentList::new(default_id);
    let mut seen_id = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Parse {
            path: source.to_path_buf(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') {
            continue;
        }
        if fields[0] != "SPEAKER" {
            continue;
        }
        if fields.len() < 8 {
            return Err(err(format!("expected at least 8 fields, found {}", fields.len())));
        }
        let onset: f64 = fields[3]
            .parse()
            .map_err(|_| err(format!("bad onset {:?}", fields[3])))?;
        let duration: f64 = fields[4]
            .parse()
            .map_err(|_| err(format!("bad duration {:?}", fields[4])))?;
        if !seen_id {
            out.recording_id = fields[1].to_string();
            seen_id = true;
        } else if out.recording_id != fields[1] {
            return Err(err(format!(
                "recording {} mixed with {}",
                fields[1], out.recording_id
            )));
        }
        out.push(fields[7], onset, duration).map_err(|e| err(e.to_string()))?;
    }
    Ok(out)
}

pub fn read_rttm(path: &Path) -> Result<SegmentList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_rttm(&text, path, &stem)
}

/// One `SPEAKER` line per segment, times with millisecond precision.
pub fn format_rttm(segs: &SegmentList) -> String {
    let mut s = String::new();
    for seg in &segs.segments {
        let _ = writeln!(
            s,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            segs.recording_id, seg.onset_s, seg.duration_s, seg.speaker
        );
    }
    s
}

pub fn write_rttm(segs: &SegmentList, path: &Path) -> Result<()> {
    fs::write(path, format_rttm(segs)).map_err(|e| Error::io(path, e))
}
