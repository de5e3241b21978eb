//! Frame-wise surprisal and entropy from autoregressive token logits.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::par::{self, Execution};

pub const TOKEN_RATE_HZ: f64 = 50.0;
pub const SEGMENT_FRAMES: usize = 150;
pub const SEGMENT_STRIDE_FRAMES: usize = 5;
pub const CHUNK_FRAMES: usize = 1500;
pub const CONTEXT_WINDOWS_S: [f64; 3] = [8.0, 16.0, 32.0];

/// Half-open frame ranges `[stride·j, stride·j + len)` that fit in `t_frames`.
pub fn enumerate_segments(t_frames: usize, len: usize, stride: usize) -> Vec<(usize, usize)> {
    if t_frames < len || stride == 0 {
        return Vec::new();
    }
    let n = (t_frames - len) / stride + 1;
    (0..n).map(|j| (j * stride, j * stride + len)).collect()
}

/// Context length in frames for a window of `w_s` seconds; only 8, 16 and 32 s are accepted.
pub fn context_frames(w_s: f64) -> Result<usize> {
    if CONTEXT_WINDOWS_S.contains(&w_s) {
        Ok((TOKEN_RATE_HZ * w_s).round() as usize)
    } else {
        Err(Error::invalid(format!(
            "context window must be one of 8, 16 or 32 s, got {w_s}"
        )))
    }
}

/// Tokens in `[end - w_frames, end)`, left-padded with `pad` before frame 0.
pub fn build_context(tokens: &[u32], end: usize, w_frames: usize, pad: u32) -> Result<Vec<u32>> {
    if end > tokens.len() {
        return Err(Error::invalid(format!(
            "context end {end} beyond {} tokens",
            tokens.len()
        )));
    }
    let real = end.min(w_frames);
    let mut ctx = vec![pad; w_frames - real];
    ctx.extend_from_slice(&tokens[end - real..end]);
    Ok(ctx)
}

/// Pre-softmax scores, `rows × vocab`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitWindow {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl LogitWindow {
    pub fn new(rows: usize, vocab: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * vocab {
            return Err(Error::shape(format!(
                "logit window {rows}×{vocab} given {} values",
                data.len()
            )));
        }
        Ok(LogitWindow { rows, vocab, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.vocab..(r + 1) * self.vocab]
    }
}

/// Per-row surprisal `-ln p(observed)` and entropy of the softmax, in nats.
pub fn surprisal_entropy(logits: &LogitWindow, observed: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
    if logits.rows != observed.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} observed tokens",
            logits.rows,
            observed.len()
        )));
    }
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logits"));
    }
    let ln_v = (logits.vocab as f64).ln();
    let mut s = Vec::with_capacity(observed.len());
    let mut h = Vec::with_capacity(observed.len());
    for (r, &z) in observed.iter().enumerate() {
        let z = z as usize;
        if z >= logits.vocab {
            return Err(Error::data(format!(
                "observed token {z} outside vocabulary of {}",
                logits.vocab
            )));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        let mut ent = 0.0;
        for &x in row {
            let lp = x - lse;
            ent -= lp.exp() * lp;
        }
        // Rounding can leave either value a few ulps outside its range.
        s.push((lse - row[z]).max(0.0));
        h.push(ent.clamp(0.0, ln_v));
    }
    Ok((s, h))
}

/// A request for logits. `tokens` is the full context, with pad tokens in
/// front of `tokens[real_from]`; the real tokens are song frames starting at
/// `span_start`.
#[derive(Clone, Copy, Debug)]
pub struct ContextQuery<'a> {
    pub song: usize,
    pub tokens: &'a [u32],
    pub real_from: usize,
    pub span_start: usize,
    /// Number of trailing positions to score.
    pub tail: usize,
}

impl ContextQuery<'_> {
    /// Absolute song frames read by this query.
    pub fn span(&self) -> (usize, usize) {
        (
            self.span_start,
            self.span_start + self.tokens.len() - self.real_from,
        )
    }
}

/// Source of next-token logits.
pub trait LogitProvider: Sync {
    fn vocab_size(&self) -> usize;

    /// Reserved id outside the observable vocabulary.
    fn pad_token(&self) -> u32 {
        self.vocab_size() as u32
    }

    /// Logits for the last `q.tail` positions of `q.tokens`. Row `r` scores
    /// position `len - tail + r` given only the tokens before it.
    fn logits(&self, q: &ContextQuery<'_>) -> Result<LogitWindow>;
}

/// First-order Markov chain: position `t` is scored by the log transition row
/// of token `t - 1`, or by the stationary distribution when there is no real
/// predecessor.
#[derive(Clone, Debug)]
pub struct MarkovLogitProvider {
    vocab: usize,
    log_p: Vec<f64>,
    stationary: Vec<f64>,
    log_stationary: Vec<f64>,
}

fn safe_ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

impl MarkovLogitProvider {
    pub fn new(transition: &[f64], vocab: usize) -> Result<Self> {
        if vocab == 0 || transition.len() != vocab * vocab {
            return Err(Error::shape(format!(
                "transition matrix needs {vocab}×{vocab} entries, got {}",
                transition.len()
            )));
        }
        for (i, row) in transition.chunks_exact(vocab).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(format!("transition row {i} has invalid entries")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "transition row {i} sums to {sum}, not 1"
                )));
            }
        }
        let stationary = stationary_distribution(transition, vocab);
        Ok(MarkovLogitProvider {
            vocab,
            log_p: transition.iter().map(|&p| safe_ln(p)).collect(),
            log_stationary: stationary.iter().map(|&p| safe_ln(p)).collect(),
            stationary,
        })
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn transition_ln(&self, from: usize, to: usize) -> f64 {
        self.log_p[from * self.vocab + to]
    }
}

/// Stationary distribution by power iteration on the lazy chain `(I + P) / 2`,
/// which has the same fixed point and converges for periodic chains too.
fn stationary_distribution(p: &[f64], v: usize) -> Vec<f64> {
    let mut pi = vec![1.0 / v as f64; v];
    for _ in 0..100_000 {
        let mut next = vec![0.0; v];
        for (i, row) in p.chunks_exact(v).enumerate() {
            for (n, &pij) in next.iter_mut().zip(row) {
                *n += pi[i] * pij;
            }
        }
        let mut delta = 0.0;
        for (n, &old) in next.iter_mut().zip(&pi) {
            *n = 0.5 * (*n + old);
            delta += (*n - old).abs();
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

impl LogitProvider for MarkovLogitProvider {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn logits(&self, q: &ContextQuery<'_>) -> Result<LogitWindow> {
        let n = q.tokens.len();
        if q.tail > n {
            return Err(Error::invalid(format!("tail {} longer than context {n}", q.tail)));
        }
        let pad = self.pad_token();
        let mut data = Vec::with_capacity(q.tail * self.vocab);
        for pos in n - q.tail..n {
            let prev = if pos == 0 { pad } else { q.tokens[pos - 1] };
            if prev == pad {
                data.extend_from_slice(&self.log_stationary);
            } else if (prev as usize) < self.vocab {
                let p = prev as usize;
                data.extend_from_slice(&self.log_p[p * self.vocab..(p + 1) * self.vocab]);
            } else {
                return Err(Error::data(format!("context token {prev} outside vocabulary")));
            }
        }
        LogitWindow::new(q.tail, self.vocab, data)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LogitFileMeta {
    vocab_size: usize,
    frames: usize,
}

/// Logits exported by an external model, one `frames × vocab` f32 array per
/// song. Row `t` scores frame `t`. The exporter decides what context each row
/// saw; queries only select rows by span end.
#[derive(Clone, Debug)]
pub struct FileLogitProvider {
    vocab: usize,
    songs: BTreeMap<usize, Vec<f32>>,
}

impl FileLogitProvider {
    pub fn export(dir: &Path, song: usize, vocab: usize, logits: &[f32]) -> Result<()> {
        if vocab == 0 || !logits.len().is_multiple_of(vocab) {
            return Err(Error::shape("logit array is not frames × vocab"));
        }
        let stem = dir.join(format!("song_{song}"));
        io::write_f32(&stem.with_extension("bin"), logits)?;
        io::write_json(
            &stem.with_extension("json"),
            &LogitFileMeta {
                vocab_size: vocab,
                frames: logits.len() / vocab,
            },
        )
    }

    pub fn load(dir: &Path, songs: &[usize]) -> Result<Self> {
        let mut vocab = None;
        let mut map = BTreeMap::new();
        for &s in songs {
            let stem = dir.join(format!("song_{s}"));
            let meta: LogitFileMeta = io::read_json(&stem.with_extension("json"))?;
            let data = io::read_f32(&stem.with_extension("bin"))?;
            if data.len() != meta.frames * meta.vocab_size {
                return Err(Error::data(format!("song {s}: logit file size disagrees with metadata")));
            }
            if *vocab.get_or_insert(meta.vocab_size) != meta.vocab_size {
                return Err(Error::data("logit files disagree on vocabulary size"));
            }
            map.insert(s, data);
        }
        let vocab = vocab.ok_or_else(|| Error::invalid("no songs requested"))?;
        Ok(FileLogitProvider { vocab, songs: map })
    }
}

impl LogitProvider for FileLogitProvider {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn logits(&self, q: &ContextQuery<'_>) -> Result<LogitWindow> {
        let data = self
            .songs
            .get(&q.song)
            .ok_or_else(|| Error::data(format!("no exported logits for song {}", q.song)))?;
        let (_, end) = q.span();
        let frames = data.len() / self.vocab;
        if end > frames || q.tail > end {
            return Err(Error::data(format!(
                "song {}: rows {}..{end} outside {frames} exported frames",
                q.song,
                end.saturating_sub(q.tail)
            )));
        }
        let rows = &data[(end - q.tail) * self.vocab..end * self.vocab];
        LogitWindow::new(q.tail, self.vocab, rows.iter().map(|&v| v as f64).collect())
    }
}

/// One recorded provider call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct TraceRecord {
    pub song: usize,
    pub start: usize,
    pub end: usize,
    /// The query's real tokens equal the song tokens at its declared span.
    pub content_matches: bool,
}

/// Wraps a provider and records the song frames each call reads.
pub struct TracingProvider<'p, P> {
    inner: &'p P,
    songs: BTreeMap<usize, Vec<u32>>,
    records: Mutex<Vec<TraceRecord>>,
}

impl<'p, P: LogitProvider> TracingProvider<'p, P> {
    pub fn new(inner: &'p P, songs: BTreeMap<usize, Vec<u32>>) -> Self {
        TracingProvider {
            inner,
            songs,
            records: Mutex::new(Vec::new()),
        }
    }

    /// Recorded calls in sorted order.
    pub fn records(&self) -> Vec<TraceRecord> {
        let mut r = self.records.lock().unwrap().clone();
        r.sort();
        r
    }

    /// Calls that read across a chunk boundary or misreport what they read.
    pub fn chunk_violations(&self, chunk_frames: usize) -> Vec<TraceRecord> {
        self.records()
            .into_iter()
            .filter(|r| {
                !r.content_matches
                    || (r.end > r.start && r.start / chunk_frames != (r.end - 1) / chunk_frames)
            })
            .collect()
    }
}

impl<P: LogitProvider> LogitProvider for TracingProvider<'_, P> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn pad_token(&self) -> u32 {
        self.inner.pad_token()
    }

    fn logits(&self, q: &ContextQuery<'_>) -> Result<LogitWindow> {
        let (start, end) = q.span();
        let content_matches = self
            .songs
            .get(&q.song)
            .and_then(|t| t.get(start..end))
            .is_some_and(|t| t == &q.tokens[q.real_from..]);
        self.records.lock().unwrap().push(TraceRecord {
            song: q.song,
            start,
            end,
            content_matches,
        });
        self.inner.logits(q)
    }
}

/// Surprisal and entropy of one 150-frame segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSegment {
    pub index: usize,
    pub start_frame: usize,
    pub segment_start_s: f64,
    pub surprisal: Vec<f64>,
    pub entropy: Vec<f64>,
}

/// Sliding-window features over a whole song: segment `j` covers
/// `[5j, 5j + 150)` and is scored with the `w_frames` tokens before its end.
pub fn sliding_window_features<P: LogitProvider + ?Sized>(
    song: usize,
    tokens: &[u32],
    w_frames: usize,
    provider: &P,
    exec: Execution,
) -> Result<Vec<PredictiveSegment>> {
    if w_frames < SEGMENT_FRAMES {
        return Err(Error::invalid(format!(
            "context of {w_frames} frames is shorter than a segment"
        )));
    }
    let pad = provider.pad_token();
    let segs = enumerate_segments(tokens.len(), SEGMENT_FRAMES, SEGMENT_STRIDE_FRAMES);
    let indexed: Vec<(usize, (usize, usize))> = segs.into_iter().enumerate().collect();
    par::try_map(exec, &indexed, |&(j, (s, e))| {
        let ctx = build_context(tokens, e, w_frames, pad)?;
        let real = e.min(w_frames);
        let q = ContextQuery {
            song,
            tokens: &ctx,
            real_from: w_frames - real,
            span_start: e - real,
            tail: SEGMENT_FRAMES,
        };
        let logits = provider.logits(&q)?;
        let (surprisal, entropy) = surprisal_entropy(&logits, &tokens[s..e])?;
        Ok(PredictiveSegment {
            index: j,
            start_frame: s,
            segment_start_s: s as f64 / TOKEN_RATE_HZ,
            surprisal,
            entropy,
        })
    })
}

/// Features of one chunk computed with context restricted to that chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkFeatures {
    pub chunk: usize,
    pub start_frame: usize,
    pub surprisal: Vec<f64>,
    pub entropy: Vec<f64>,
}

/// Chunk-isolated features: every chunk of `chunk_frames` tokens is scored on
/// its own, so frame 0 of a chunk has no context. A short final chunk yields
/// correspondingly shorter arrays.
pub fn chunk_based_features<P: LogitProvider + ?Sized>(
    song: usize,
    tokens: &[u32],
    chunk_frames: usize,
    provider: &P,
    exec: Execution,
) -> Result<Vec<ChunkFeatures>> {
    if chunk_frames == 0 {
        return Err(Error::invalid("chunk length must be positive"));
    }
    let n = tokens.len().div_ceil(chunk_frames);
    let chunks: Vec<usize> = (0..n).collect();
    par::try_map(exec, &chunks, |&c| {
        let start = c * chunk_frames;
        let slice = &tokens[start..(start + chunk_frames).min(tokens.len())];
        let q = ContextQuery {
            song,
            tokens: slice,
            real_from: 0,
            span_start: start,
            tail: slice.len(),
        };
        let logits = provider.logits(&q)?;
        let (surprisal, entropy) = surprisal_entropy(&logits, slice)?;
        Ok(ChunkFeatures {
            chunk: c,
            start_frame: start,
            surprisal,
            entropy,
        })
    })
}
