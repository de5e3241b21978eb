//! Teacher sequences and their on-disk form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::quantile::TeacherKind;
use crate::error::{Error, Result};
use crate::io;

/// Continuous values and their discrete tokens on one time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSequence {
    pub kind: TeacherKind,
    /// `frames × raw_dim`, row-major.
    pub raw: Vec<f32>,
    pub raw_dim: usize,
    pub disc: Vec<u8>,
    pub frame_rate_hz: f64,
    /// Time of frame 0 relative to the start of its chunk, in seconds.
    pub start_s: f64,
}

impl TeacherSequence {
    pub fn new(
        kind: TeacherKind,
        raw: Vec<f32>,
        raw_dim: usize,
        disc: Vec<u8>,
        start_s: f64,
    ) -> Result<Self> {
        if raw_dim == 0 || raw.len() != disc.len() * raw_dim {
            return Err(Error::shape(format!(
                "{} raw values for {} tokens of dimension {raw_dim}",
                raw.len(),
                disc.len()
            )));
        }
        Ok(TeacherSequence {
            kind,
            raw,
            raw_dim,
            disc,
            frame_rate_hz: kind.frame_rate_hz(),
            start_s,
        })
    }

    pub fn frames(&self) -> usize {
        self.disc.len()
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<TeacherSequence> {
        if start > end || end > self.frames() {
            return Err(Error::data(format!(
                "teacher frames {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        Ok(TeacherSequence {
            kind: self.kind,
            raw: self.raw[start * self.raw_dim..end * self.raw_dim].to_vec(),
            raw_dim: self.raw_dim,
            disc: self.disc[start..end].to_vec(),
            frame_rate_hz: self.frame_rate_hz,
            start_s: self.start_s + start as f64 / self.frame_rate_hz,
        })
    }
}

/// Teacher data for one 30-s chunk of a song.
#[derive(Clone, Debug, PartialEq)]
pub enum ExcerptTeacher {
    /// One sequence spanning the chunk.
    Chunk(TeacherSequence),
    /// Fixed-length segment sequences at the starts contained in the chunk,
    /// ordered by start.
    Segments(Vec<TeacherSequence>),
}

impl ExcerptTeacher {
    pub fn kind(&self) -> Option<TeacherKind> {
        match self {
            ExcerptTeacher::Chunk(s) => Some(s.kind),
            ExcerptTeacher::Segments(v) => v.first().map(|s| s.kind),
        }
    }

    pub fn blocks(&self) -> &[TeacherSequence] {
        match self {
            ExcerptTeacher::Chunk(s) => std::slice::from_ref(s),
            ExcerptTeacher::Segments(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherFileMeta {
    pub kind: TeacherKind,
    pub song_id: usize,
    pub chunk_index: usize,
    pub frame_rate_hz: f64,
    pub raw_dim: usize,
    pub frames_per_block: Vec<usize>,
    /// Start of each block relative to the chunk.
    pub segment_start_s: Vec<f64>,
    /// `None` for chunk-spanning arrays.
    pub context_window_s: Option<f64>,
    /// Size of the discrete alphabet.
    pub vocab_size: usize,
    pub segmented: bool,
}

/// Writes `<stem>.bin` as consecutive blocks of `raw` (f32 LE) then `disc`
/// (u8), plus `<stem>.json`.
pub fn save_excerpt_teacher(
    stem: &Path,
    teacher: &ExcerptTeacher,
    song_id: usize,
    chunk_index: usize,
    context_window_s: Option<f64>,
    vocab_size: usize,
) -> Result<()> {
    let blocks = teacher.blocks();
    let kind = teacher
        .kind()
        .ok_or_else(|| Error::invalid("cannot save an empty teacher"))?;
    let mut bytes = Vec::new();
    for b in blocks {
        bytes.extend_from_slice(&io::f32_bytes(&b.raw));
        bytes.extend_from_slice(&b.disc);
    }
    io::write_bytes(&stem.with_extension("bin"), &bytes)?;
    let meta = TeacherFileMeta {
        kind,
        song_id,
        chunk_index,
        frame_rate_hz: kind.frame_rate_hz(),
        raw_dim: blocks[0].raw_dim,
        frames_per_block: blocks.iter().map(|b| b.frames()).collect(),
        segment_start_s: blocks.iter().map(|b| b.start_s).collect(),
        context_window_s,
        vocab_size,
        segmented: matches!(teacher, ExcerptTeacher::Segments(_)),
    };
    io::write_json(&stem.with_extension("json"), &meta)
}

pub fn load_excerpt_teacher(stem: &Path) -> Result<(ExcerptTeacher, TeacherFileMeta)> {
    let bin = stem.with_extension("bin");
    let meta: TeacherFileMeta = io::read_json(&stem.with_extension("json"))?;
    let bytes = io::read_bytes(&bin)?;
    let mut off = 0;
    let mut blocks = Vec::with_capacity(meta.frames_per_block.len());
    if meta.frames_per_block.len() != meta.segment_start_s.len() {
        return Err(Error::data(format!("{}: block lists disagree", bin.display())));
    }
    for (&frames, &start) in meta.frames_per_block.iter().zip(&meta.segment_start_s) {
        let raw_len = frames * meta.raw_dim * 4;
        if off + raw_len + frames > bytes.len() {
            return Err(Error::data(format!("{}: truncated teacher file", bin.display())));
        }
        let raw = io::f32_from_bytes(&bytes[off..off + raw_len], &bin)?;
        off += raw_len;
        let disc = bytes[off..off + frames].to_vec();
        off += frames;
        blocks.push(TeacherSequence::new(meta.kind, raw, meta.raw_dim, disc, start)?);
    }
    if off != bytes.len() {
        return Err(Error::data(format!("{}: trailing bytes", bin.display())));
    }
    let teacher = if meta.segmented {
        ExcerptTeacher::Segments(blocks)
    } else {
        let only = blocks
            .pop()
            .filter(|_| meta.frames_per_block.len() == 1)
            .ok_or_else(|| Error::data(format!("{}: expected one block", bin.display())))?;
        ExcerptTeacher::Chunk(only)
    };
    Ok((teacher, meta))
}
