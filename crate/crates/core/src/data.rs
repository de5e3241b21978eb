//! Windows of recordings selected for training or evaluation.

use std::collections::BTreeSet;

use crate::alignment::{teacher_for, AlignedExample};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::signal_prep::{
    make_excerpts, make_segment, EegSegment, Excerpt, ExcerptRef, ExtractMode, Recording, SegmentGeometry,
    EXCERPT_S,
};
use crate::teacher::{TeacherKind, TeacherSet};

/// One sliding window of one excerpt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowItem {
    pub recording: usize,
    pub excerpt: Excerpt,
    pub window: usize,
}

impl WindowItem {
    pub fn label(&self) -> usize {
        self.excerpt.r#ref.song_id
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub recordings: Vec<Recording>,
    pub geom: SegmentGeometry,
}

impl Dataset {
    pub fn new(recordings: Vec<Recording>, geom: SegmentGeometry) -> Result<Self> {
        if let Some(r) = recordings.iter().find(|r| r.sample_rate != geom.rate) {
            return Err(Error::data(format!(
                "recording of subject {} song {} is at {} Hz, geometry expects {}",
                r.subject_id, r.song_id, r.sample_rate, geom.rate
            )));
        }
        Ok(Dataset { recordings, geom })
    }

    pub fn excerpt_refs(&self) -> Result<Vec<ExcerptRef>> {
        let mut out = Vec::new();
        for r in &self.recordings {
            out.extend(make_excerpts(r, EXCERPT_S)?.into_iter().map(|e| e.r#ref));
        }
        Ok(out)
    }

    /// Every window of every excerpt in `excerpts`, in recording, excerpt and window order.
    pub fn items(&self, excerpts: &BTreeSet<ExcerptRef>) -> Result<Vec<WindowItem>> {
        let mut out = Vec::new();
        for (ri, r) in self.recordings.iter().enumerate() {
            for e in make_excerpts(r, EXCERPT_S)? {
                if !excerpts.contains(&e.r#ref) {
                    continue;
                }
                let n = self.geom.window_count(e.len_samples(r.sample_rate));
                out.extend((0..n).map(|w| WindowItem {
                    recording: ri,
                    excerpt: e,
                    window: w,
                }));
            }
        }
        Ok(out)
    }

    pub fn segment(&self, item: &WindowItem, mode: ExtractMode, rng: &mut StreamRng) -> Result<EegSegment> {
        make_segment(
            &self.recordings[item.recording],
            &item.excerpt,
            &self.geom,
            item.window,
            mode,
            rng,
        )
    }

    /// The segment with its matched teacher sequence of `kind`.
    pub fn aligned(
        &self,
        item: &WindowItem,
        mode: ExtractMode,
        rng: &mut StreamRng,
        teachers: &TeacherSet,
        kind: TeacherKind,
    ) -> Result<AlignedExample> {
        let eeg = self.segment(item, mode, rng)?;
        let r = item.excerpt.r#ref;
        let t = teachers.get(kind, r.song_id, r.excerpt_index)?;
        let teacher = teacher_for(eeg.t0_s, t, EXCERPT_S)?;
        Ok(AlignedExample { eeg, teacher })
    }
}
