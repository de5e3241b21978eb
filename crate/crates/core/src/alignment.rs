//! Frame-level matching of EEG segments to teacher sequences.
//!
//! Ranges are 0-based and half-open.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::signal_prep::{EegSegment, SEGMENT_S};
use crate::teacher::{ExcerptTeacher, TeacherKind, TeacherSequence};

/// Largest float error tolerated when flooring `rate · t0`.
const FLOOR_EPS: f64 = 1e-9;
/// Overrun past the chunk end that is snapped back rather than rejected.
const SNAP_S: f64 = 0.1;

fn frame_slice(t0_s: f64, rate: f64, len: usize, chunk_frames: usize) -> Result<Range<usize>> {
    if !(t0_s >= 0.0) || !t0_s.is_finite() {
        return Err(Error::invalid(format!("segment start {t0_s} must be finite and non-negative")));
    }
    let mut i0 = (rate * t0_s + FLOOR_EPS).floor() as usize;
    if i0 + len > chunk_frames {
        let over = i0 + len - chunk_frames;
        if len > chunk_frames || over as f64 > (SNAP_S * rate).floor() {
            return Err(Error::data(format!(
                "frames {i0}..{} outside chunk of {chunk_frames}",
                i0 + len
            )));
        }
        i0 = chunk_frames - len;
    }
    Ok(i0..i0 + len)
}

/// 150 frames at 50 Hz starting at `floor(50 t0)`.
pub fn surp_ent_slice(t0_s: f64, chunk_frames: usize) -> Result<Range<usize>> {
    frame_slice(t0_s, 50.0, 150, chunk_frames)
}

/// 75 frames at 25 Hz starting at `floor(25 t0)`.
pub fn muq_slice(t0_s: f64, chunk_frames: usize) -> Result<Range<usize>> {
    frame_slice(t0_s, 25.0, 75, chunk_frames)
}

/// Index of the segment start closest to `t0_s` among segments that fit in
/// `[0, chunk_s)`; ties go to the earlier start.
pub fn select_predictive_segment(t0_s: f64, starts: &[f64], chunk_s: f64) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in starts.iter().enumerate() {
        if s < 0.0 || s + SEGMENT_S > chunk_s + FLOOR_EPS {
            continue;
        }
        let d = (s - t0_s).abs();
        let better = match best {
            None => true,
            Some((bi, bd)) => d < bd - FLOOR_EPS || (d <= bd + FLOOR_EPS && s < starts[bi]),
        };
        if better {
            best = Some((i, d));
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::data(format!("no teacher segment inside the chunk for t0 = {t0_s}")))
}

/// The teacher sequence matching a segment that starts at `t0_s` in its chunk.
pub fn teacher_for(t0_s: f64, teacher: &ExcerptTeacher, chunk_s: f64) -> Result<TeacherSequence> {
    match teacher {
        ExcerptTeacher::Chunk(seq) => {
            let r = match seq.kind {
                TeacherKind::Muq => muq_slice(t0_s, seq.frames())?,
                _ => surp_ent_slice(t0_s, seq.frames())?,
            };
            seq.slice(r.start, r.end)
        }
        ExcerptTeacher::Segments(segs) => {
            let starts: Vec<f64> = segs.iter().map(|s| s.start_s).collect();
            Ok(segs[select_predictive_segment(t0_s, &starts, chunk_s)?].clone())
        }
    }
}

/// An EEG segment with its matched teacher sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedExample {
    pub eeg: EegSegment,
    pub teacher: TeacherSequence,
}

impl AlignedExample {
    pub fn kind(&self) -> TeacherKind {
        self.teacher.kind
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_examples() {
        assert_eq!(surp_ent_slice(0.0, 1500).unwrap(), 0..150);
        assert_eq!(surp_ent_slice(1.2, 1500).unwrap(), 60..210);
        assert_eq!(surp_ent_slice(2.5, 1500).unwrap().start, 125);
        assert_eq!(muq_slice(0.0, 750).unwrap(), 0..75);
        assert_eq!(muq_slice(1.2, 750).unwrap(), 30..105);
        assert_eq!(muq_slice(2.52, 750).unwrap().start, 63);
    }

    #[test]
    fn overrun_snaps_or_fails() {
        assert_eq!(surp_ent_slice(27.02, 1500).unwrap(), 1350..1500);
        assert!(surp_ent_slice(27.5, 1500).is_err());
        assert!(surp_ent_slice(-0.1, 1500).is_err());
    }

    #[test]
    fn closest_start_examples() {
        assert_eq!(select_predictive_segment(2.53, &[2.4, 2.5, 2.6], 30.0).unwrap(), 1);
        assert_eq!(select_predictive_segment(2.6, &[2.4, 2.5, 2.6], 30.0).unwrap(), 2);
        assert_eq!(select_predictive_segment(2.55, &[2.5, 2.6], 30.0).unwrap(), 0);
        assert_eq!(select_predictive_segment(2.55, &[2.6, 2.5], 30.0).unwrap(), 1);
        assert!(select_predictive_segment(1.0, &[28.0], 30.0).is_err());
    }
}
