//! Recordings, 30-s excerpts, stratified splits, delayed sliding windows and
//! robust per-segment normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, StreamRng};

pub const DEFAULT_RATE_HZ: f64 = 125.0;
pub const EXCERPT_S: f64 = 30.0;
pub const MAX_DURATION_S: f64 = 240.0;
pub const WINDOW_S: f64 = 8.0;
pub const STRIDE_S: f64 = 1.6;
pub const SEGMENT_S: f64 = 3.0;
pub const DELAY_MS: f64 = 200.0;
pub const CLAMP: f32 = 20.0;

/// Multichannel recording, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub channels: usize,
    pub sample_rate: f64,
    /// `channels × len` values, channel-major.
    pub samples: Vec<f32>,
    pub song_id: usize,
    pub subject_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub channels: usize,
    pub sample_rate: f64,
    pub song_id: usize,
    pub subject_id: usize,
}

impl Recording {
    pub fn new(
        channels: usize,
        sample_rate: f64,
        samples: Vec<f32>,
        song_id: usize,
        subject_id: usize,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("recording needs at least one channel"));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::invalid(format!("sample rate {sample_rate} must be > 0")));
        }
        if !samples.len().is_multiple_of(channels) {
            return Err(Error::data(format!(
                "{} samples do not split into {channels} channels",
                samples.len()
            )));
        }
        Ok(Recording {
            channels,
            sample_rate,
            samples,
            song_id,
            subject_id,
        })
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.len();
        &self.samples[c * n..(c + 1) * n]
    }

    pub fn meta(&self) -> RecordingMeta {
        RecordingMeta {
            channels: self.channels,
            sample_rate: self.sample_rate,
            song_id: self.song_id,
            subject_id: self.subject_id,
        }
    }

    /// Writes `<stem>.bin` (little-endian f32, channel-major) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let mut bytes = Vec::with_capacity(self.samples.len() * 4);
        for v in &self.samples {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&self.meta()).map_err(|e| Error::json(&json, e))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let meta: RecordingMeta = serde_json::from_str(&text).map_err(|e| Error::json(&json, e))?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::data(format!("{}: not a whole number of f32", bin.display())));
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Recording::new(meta.channels, meta.sample_rate, samples, meta.song_id, meta.subject_id)
    }
}

/// Keeps at most `round(max_s · rate)` samples per channel; the prefix is unchanged.
pub fn truncate_recording(rec: &Recording, max_s: f64) -> Result<Recording> {
    if !(max_s > 0.0) {
        return Err(Error::invalid(format!("max duration {max_s} must be > 0")));
    }
    let keep = ((max_s * rec.sample_rate).round() as usize).min(rec.len());
    let n = rec.len();
    let mut samples = Vec::with_capacity(keep * rec.channels);
    for c in 0..rec.channels {
        samples.extend_from_slice(&rec.samples[c * n..c * n + keep]);
    }
    Ok(Recording {
        samples,
        ..rec.clone()
    })
}

/// Identifies one excerpt of one recording.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExcerptRef {
    pub subject_id: usize,
    pub song_id: usize,
    pub excerpt_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Excerpt {
    pub r#ref: ExcerptRef,
    pub start_s: f64,
    pub duration_s: f64,
}

impl Excerpt {
    pub fn start_sample(&self, rate: f64) -> usize {
        (self.start_s * rate).round() as usize
    }

    pub fn len_samples(&self, rate: f64) -> usize {
        (self.duration_s * rate).round() as usize
    }
}

/// Contiguous non-overlapping excerpts; the trailing remainder is dropped.
pub fn make_excerpts(rec: &Recording, len_s: f64) -> Result<Vec<Excerpt>> {
    if !(len_s > 0.0) {
        return Err(Error::invalid(format!("excerpt length {len_s} must be > 0")));
    }
    let per = (len_s * rec.sample_rate).round() as usize;
    let count = if per == 0 { 0 } else { rec.len() / per };
    Ok((0..count)
        .map(|i| Excerpt {
            r#ref: ExcerptRef {
                subject_id: rec.subject_id,
                song_id: rec.song_id,
                excerpt_index: i,
            },
            start_s: i as f64 * len_s,
            duration_s: len_s,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_excerpts: BTreeSet<ExcerptRef>,
    pub val_excerpts: BTreeSet<ExcerptRef>,
    pub split_seed: u64,
}

impl SplitAssignment {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Number of validation items a stratum of `n` gets for a train fraction `ratio`.
pub fn stratum_val_count(n: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * n as f64).round() as usize).min(n)
}

/// Per-song stratified train/validation split. Each song's excerpts are
/// shuffled with a song-specific stream of `seed`, and `round((1-ratio)·n)`
/// of them go to validation.
pub fn stratified_split(excerpts: &[ExcerptRef], ratio: f64, seed: u64) -> Result<SplitAssignment> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("train ratio {ratio} outside [0, 1]")));
    }
    if excerpts.is_empty() {
        return Err(Error::data("no excerpts to split"));
    }
    let mut by_song: BTreeMap<usize, Vec<ExcerptRef>> = BTreeMap::new();
    for e in excerpts {
        by_song.entry(e.song_id).or_default().push(*e);
    }
    let mut split = SplitAssignment {
        train_excerpts: BTreeSet::new(),
        val_excerpts: BTreeSet::new(),
        split_seed: seed,
    };
    for (song, mut items) in by_song {
        items.sort();
        items.dedup();
        let mut rng = substream(seed, "split", &[song as u64]);
        items.shuffle(&mut rng);
        let n_val = stratum_val_count(items.len(), ratio);
        for (i, e) in items.into_iter().enumerate() {
            if i < n_val {
                split.val_excerpts.insert(e);
            } else {
                split.train_excerpts.insert(e);
            }
        }
    }
    Ok(split)
}

/// Samples to skip for a stimulus-to-response delay; halves round away from zero.
pub fn delay_samples(delay_ms: f64, rate: f64) -> usize {
    (delay_ms * rate / 1000.0).round() as usize
}

/// The excerpt's samples with the extraction origin advanced by the delay.
/// Fails if the shift leaves no data.
pub fn apply_stimulus_delay(excerpt_samples: &[f32], delay_ms: f64, rate: f64) -> Result<&[f32]> {
    let shift = delay_samples(delay_ms, rate);
    excerpt_samples.get(shift..).filter(|_| shift <= excerpt_samples.len()).ok_or_else(|| {
        Error::data(format!(
            "delay of {shift} samples exceeds {} available",
            excerpt_samples.len()
        ))
    })
}

/// Window start times: `0, stride, 2·stride, …` while `start + window ≤ duration`.
pub fn make_windows(duration_s: f64, window_s: f64, stride_s: f64) -> Vec<f64> {
    if !(stride_s > 0.0) || window_s > duration_s + 1e-9 {
        return Vec::new();
    }
    let count = ((duration_s - window_s) / stride_s + 1e-9).floor() as usize + 1;
    (0..count).map(|i| i as f64 * stride_s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractMode {
    Train,
    Eval,
}

/// Geometry of window/segment extraction within an excerpt, in samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentGeometry {
    pub rate: f64,
    pub window: usize,
    pub stride: usize,
    pub segment: usize,
    pub delay: usize,
}

impl SegmentGeometry {
    pub fn new(rate: f64, window_s: f64, stride_s: f64, segment_s: f64, delay_ms: f64) -> Self {
        SegmentGeometry {
            rate,
            window: (window_s * rate).round() as usize,
            stride: (stride_s * rate).round() as usize,
            segment: (segment_s * rate).round() as usize,
            delay: delay_samples(delay_ms, rate),
        }
    }

    pub fn paper(rate: f64) -> Self {
        Self::new(rate, WINDOW_S, STRIDE_S, SEGMENT_S, DELAY_MS)
    }

    pub fn window_count(&self, excerpt_len: usize) -> usize {
        if excerpt_len < self.window {
            0
        } else {
            (excerpt_len - self.window) / self.stride + 1
        }
    }

    /// Offset of the segment start within a window, in samples, and the
    /// segment start time `t0` within the excerpt, in seconds.
    ///
    /// Eval mode uses the window center: `t0 = window_start + (window - segment) / 2`
    /// on the feature clock, with the EEG offset rounded down to a whole sample.
    /// Train mode draws a whole-sample offset uniformly from the valid range.
    pub fn segment_start(&self, window_index: usize, mode: ExtractMode, rng: &mut StreamRng) -> (usize, f64) {
        let slack = self.window - self.segment;
        let ws = window_index * self.stride;
        match mode {
            ExtractMode::Eval => {
                let t0 = (ws as f64 + slack as f64 / 2.0) / self.rate;
                (ws + slack / 2, t0)
            }
            ExtractMode::Train => {
                let k = rng.random_range(0..=slack);
                (ws + k, (ws + k) as f64 / self.rate)
            }
        }
    }
}

/// Raw `channels × segment` slice of an excerpt for a segment starting at
/// `start` samples (feature clock); EEG is read `delay` samples later.
pub fn extract_segment(
    rec: &Recording,
    excerpt: &Excerpt,
    geom: &SegmentGeometry,
    start: usize,
) -> Result<Vec<f32>> {
    let ex_start = excerpt.start_sample(rec.sample_rate);
    let ex_len = excerpt.len_samples(rec.sample_rate);
    let begin = start + geom.delay;
    if begin + geom.segment > ex_len || ex_start + ex_len > rec.len() {
        return Err(Error::data(format!(
            "segment at {start}+{} (delay {}) runs past excerpt of {ex_len} samples",
            geom.segment, geom.delay
        )));
    }
    let n = rec.len();
    let mut out = Vec::with_capacity(rec.channels * geom.segment);
    for c in 0..rec.channels {
        let base = c * n + ex_start + begin;
        out.extend_from_slice(&rec.samples[base..base + geom.segment]);
    }
    Ok(out)
}

/// Linear-interpolation quantile of sorted data (`q ∈ [0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Robust scaling per channel: `(x - median) / IQR`, clamped to `[-20, 20]`.
/// A zero IQR divides by 1.
pub fn normalize_segment(raw: &[f32], channels: usize) -> Result<Vec<f32>> {
    if channels == 0 || !raw.len().is_multiple_of(channels) {
        return Err(Error::shape(format!("{} values into {channels} channels", raw.len())));
    }
    let n = raw.len() / channels;
    if n < 2 {
        return Err(Error::invalid("normalization needs at least 2 samples per channel"));
    }
    let mut out = Vec::with_capacity(raw.len());
    let mut sorted = vec![0.0f64; n];
    for ch in raw.chunks(n) {
        for (s, &v) in sorted.iter_mut().zip(ch) {
            *s = v as f64;
        }
        sorted.sort_by(f64::total_cmp);
        let median = quantile_sorted(&sorted, 0.5);
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let scale = if iqr == 0.0 { 1.0 } else { iqr };
        out.extend(ch.iter().map(|&v| {
            let z = (v as f64 - median) / scale;
            (z as f32).clamp(-CLAMP, CLAMP)
        }));
    }
    Ok(out)
}

/// One normalized segment with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EegSegment {
    /// `channels × width`, channel-major.
    pub values: Vec<f32>,
    pub channels: usize,
    pub t0_s: f64,
    pub song_id: usize,
    pub excerpt: ExcerptRef,
    pub window_index: usize,
    pub sample_id: String,
}

pub fn sample_id(e: &ExcerptRef, window_index: usize) -> String {
    format!(
        "{}_{}_{}_{}",
        e.subject_id, e.song_id, e.excerpt_index, window_index
    )
}

/// Extracts and normalizes the segment for one window.
pub fn make_segment(
    rec: &Recording,
    excerpt: &Excerpt,
    geom: &SegmentGeometry,
    window_index: usize,
    mode: ExtractMode,
    rng: &mut StreamRng,
) -> Result<EegSegment> {
    let (start, t0_s) = geom.segment_start(window_index, mode, rng);
    let raw = extract_segment(rec, excerpt, geom, start)?;
    Ok(EegSegment {
        values: normalize_segment(&raw, rec.channels)?,
        channels: rec.channels,
        t0_s,
        song_id: rec.song_id,
        excerpt: excerpt.r#ref,
        window_index,
        sample_id: sample_id(&excerpt.r#ref, window_index),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seconds: f64, rate: f64) -> Recording {
        let n = (seconds * rate).round() as usize;
        let samples = (0..2 * n).map(|i| i as f32).collect();
        Recording::new(2, rate, samples, 3, 1).unwrap()
    }

    #[test]
    fn truncation_keeps_prefix() {
        let r = rec(300.0, 10.0);
        let t = truncate_recording(&r, 240.0).unwrap();
        assert_eq!(t.len(), 2400);
        assert_eq!(t.channel(0), &r.channel(0)[..2400]);
        assert_eq!(t.channel(1), &r.channel(1)[..2400]);
        let short = rec(100.0, 10.0);
        assert_eq!(truncate_recording(&short, 240.0).unwrap(), short);
        let odd = rec(240.5, 125.0);
        assert_eq!(truncate_recording(&odd, 240.0).unwrap().len(), 30000);
        assert!(truncate_recording(&odd, 0.0).is_err());
    }

    #[test]
    fn excerpts_drop_the_remainder() {
        let starts: Vec<f64> = make_excerpts(&rec(240.0, 10.0), 30.0)
            .unwrap()
            .iter()
            .map(|e| e.start_s)
            .collect();
        assert_eq!(starts, (0..8).map(|i| 30.0 * i as f64).collect::<Vec<_>>());
        assert_eq!(make_excerpts(&rec(30.0, 10.0), 30.0).unwrap().len(), 1);
        assert_eq!(make_excerpts(&rec(59.0, 10.0), 30.0).unwrap().len(), 1);
        assert!(make_excerpts(&rec(29.0, 10.0), 30.0).unwrap().is_empty());
    }

    fn refs(songs: usize, per: usize) -> Vec<ExcerptRef> {
        (0..songs)
            .flat_map(|s| {
                (0..per).map(move |i| ExcerptRef {
                    subject_id: 0,
                    song_id: s,
                    excerpt_index: i,
                })
            })
            .collect()
    }

    #[test]
    fn stratified_split_allocates_per_song() {
        let split = stratified_split(&refs(10, 8), 0.75, 42).unwrap();
        for s in 0..10 {
            assert_eq!(split.val_excerpts.iter().filter(|e| e.song_id == s).count(), 2);
            assert_eq!(split.train_excerpts.iter().filter(|e| e.song_id == s).count(), 6);
        }
        assert!(split.train_excerpts.is_disjoint(&split.val_excerpts));
        let one = stratified_split(&refs(1, 4), 0.75, 42).unwrap();
        assert_eq!((one.train_excerpts.len(), one.val_excerpts.len()), (3, 1));
        assert_eq!(split, stratified_split(&refs(10, 8), 0.75, 42).unwrap());
        assert!(stratified_split(&[], 0.75, 42).is_err());
    }

    #[test]
    fn delay_rounding() {
        assert_eq!(delay_samples(200.0, 125.0), 25);
        assert_eq!(delay_samples(0.0, 125.0), 0);
        assert_eq!(delay_samples(100.0, 125.0), 13);
        let xs = [1.0f32; 30];
        assert_eq!(apply_stimulus_delay(&xs, 200.0, 125.0).unwrap().len(), 5);
        assert_eq!(apply_stimulus_delay(&xs, 0.0, 125.0).unwrap().len(), 30);
        assert!(apply_stimulus_delay(&xs[..10], 200.0, 125.0).is_err());
    }

    #[test]
    fn window_counts() {
        let w = make_windows(30.0, 8.0, 1.6);
        assert_eq!(w.len(), 14);
        assert!((w[13] - 20.8).abs() < 1e-9);
        assert_eq!(make_windows(8.0, 8.0, 1.6).len(), 1);
        assert_eq!(make_windows(9.6, 8.0, 1.6).len(), 2);
        assert!(make_windows(7.9, 8.0, 1.6).is_empty());
        let g = SegmentGeometry::paper(125.0);
        assert_eq!(g.window_count(3750), 14);
    }

    #[test]
    fn eval_segment_is_centered() {
        let g = SegmentGeometry::paper(125.0);
        let mut rng = substream(0, "t", &[]);
        let (start, t0) = g.segment_start(0, ExtractMode::Eval, &mut rng);
        assert_eq!(t0, 2.5);
        assert_eq!(start, 312);
        let (_, t0b) = g.segment_start(3, ExtractMode::Eval, &mut rng);
        assert!((t0b - (3.0 * 1.6 + 2.5)).abs() < 1e-12);
    }

    #[test]
    fn train_segment_stays_in_window() {
        let g = SegmentGeometry::paper(125.0);
        for w in 0..14 {
            let mut rng = substream(7, "offset", &[w as u64]);
            for _ in 0..200 {
                let (start, t0) = g.segment_start(w, ExtractMode::Train, &mut rng);
                let ws = w * g.stride;
                assert!(start >= ws && start + g.segment <= ws + g.window);
                assert!(t0 + 3.0 <= (ws as f64) / 125.0 + 8.0 + 1e-12);
            }
        }
        let a = g.segment_start(2, ExtractMode::Train, &mut substream(1, "o", &[]));
        let b = g.segment_start(2, ExtractMode::Train, &mut substream(1, "o", &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn normalization_examples() {
        let out = normalize_segment(&[1.0, 2.0, 3.0, 4.0, 5.0], 1).unwrap();
        assert_eq!(out, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(normalize_segment(&[7.0; 6], 2).unwrap(), vec![0.0; 6]);
        let spiky = normalize_segment(&[0.0, 0.0, 1.0, 1.0, 100.0], 1).unwrap();
        assert_eq!(spiky[4], 20.0);
        assert!(normalize_segment(&[1.0], 1).is_err());
    }

    #[test]
    fn segments_from_the_last_window_fit_after_delay() {
        let r = Recording::new(1, 125.0, vec![0.5; 3750], 0, 0).unwrap();
        let ex = make_excerpts(&r, 30.0).unwrap()[0];
        let g = SegmentGeometry::paper(125.0);
        let mut rng = substream(0, "t", &[]);
        for w in 0..g.window_count(3750) {
            for mode in [ExtractMode::Eval, ExtractMode::Train] {
                let seg = make_segment(&r, &ex, &g, w, mode, &mut rng).unwrap();
                assert_eq!(seg.values.len(), 375);
            }
        }
        assert_eq!(sample_id(&ex.r#ref, 13), "0_0_0_13");
    }

    #[test]
    fn recording_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = rec(2.0, 10.0);
        r.save(&dir.path().join("r")).unwrap();
        assert_eq!(Recording::load(&dir.path().join("r")).unwrap(), r);
    }
}
