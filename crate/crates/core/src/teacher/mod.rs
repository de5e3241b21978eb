//! Teacher sequences: k-means tokens of frame embeddings, and quantile-binned
//! surprisal and entropy of an autoregressive token model.

pub mod kmeans;
pub mod predictive;
pub mod quantile;
pub mod store;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use kmeans::{fit_kmeans, KMeansCodebook, KMeansConfig};
pub use predictive::{
    build_context, chunk_based_features, context_frames, enumerate_segments, sliding_window_features,
    surprisal_entropy, ChunkFeatures, ContextQuery, FileLogitProvider, LogitProvider, LogitWindow,
    MarkovLogitProvider, PredictiveSegment, TraceRecord, TracingProvider, CHUNK_FRAMES, SEGMENT_FRAMES,
    TOKEN_RATE_HZ,
};
pub use quantile::{fit_quantile_bins, QuantileBins, TeacherKind};
pub use store::{load_excerpt_teacher, save_excerpt_teacher, ExcerptTeacher, TeacherSequence};

use crate::error::{Error, Result};
use crate::io;
use crate::par::{self, Execution};

pub const EMBED_RATE_HZ: f64 = 25.0;
pub const EMBED_CHUNK_FRAMES: usize = 750;

/// Per-song inputs: acoustic model tokens at 50 Hz and frame embeddings at 25 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct SongStream {
    pub song_id: usize,
    pub tokens: Vec<u32>,
    /// `frames × embed_dim`, row-major.
    pub embeddings: Vec<f32>,
    pub embed_dim: usize,
}

impl SongStream {
    /// Whole 30-s chunks available in both streams.
    pub fn full_chunks(&self) -> usize {
        let emb_frames = self.embeddings.len() / self.embed_dim.max(1);
        (self.tokens.len() / CHUNK_FRAMES).min(emb_frames / EMBED_CHUNK_FRAMES)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub kmeans: KMeansConfig,
    pub bins: usize,
    /// Context window `W` for sliding-window features, in seconds.
    pub context_window_s: f64,
    /// Score each 30-s chunk in isolation instead of sliding over the song.
    pub chunk_mode: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            kmeans: KMeansConfig::default(),
            bins: 128,
            context_window_s: 8.0,
            chunk_mode: false,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=256).contains(&self.kmeans.k) || !(1..=256).contains(&self.bins) {
            return Err(Error::Config("codebook size and bin count must be in 1..=256".into()));
        }
        context_frames(self.context_window_s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Context window recorded in file metadata.
    fn predictive_window(&self) -> Option<f64> {
        (!self.chunk_mode).then_some(self.context_window_s)
    }
}

/// Teacher data of one kind, keyed by `(song, chunk)`.
pub type TeacherBank = BTreeMap<(usize, usize), ExcerptTeacher>;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSet {
    pub config: TeacherConfig,
    pub codebook: KMeansCodebook,
    pub surprisal_bins: QuantileBins,
    pub entropy_bins: QuantileBins,
    pub banks: BTreeMap<TeacherKind, TeacherBank>,
}

impl TeacherSet {
    pub fn bank(&self, kind: TeacherKind) -> &TeacherBank {
        &self.banks[&kind]
    }

    pub fn get(&self, kind: TeacherKind, song: usize, chunk: usize) -> Result<&ExcerptTeacher> {
        self.banks[&kind].get(&(song, chunk)).ok_or_else(|| {
            Error::data(format!("no {kind} teacher for song {song}, chunk {chunk}"))
        })
    }
}

fn seq_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

/// Builds all three teacher kinds for `songs`. The codebook is fit on every
/// full-chunk embedding frame; quantile bins are fit on every computed
/// surprisal or entropy value, pooled across songs and segments.
pub fn build_teachers<P: LogitProvider + ?Sized>(
    songs: &[SongStream],
    cfg: &TeacherConfig,
    provider: &P,
    exec: Execution,
) -> Result<TeacherSet> {
    cfg.validate()?;
    if songs.is_empty() {
        return Err(Error::invalid("no songs"));
    }
    let dim = songs[0].embed_dim;
    if songs.iter().any(|s| s.embed_dim != dim) {
        return Err(Error::shape("songs disagree on embedding dimension"));
    }

    // Acoustic tokens.
    let mut pooled = Vec::new();
    for s in songs {
        pooled.extend_from_slice(&s.embeddings[..s.full_chunks() * EMBED_CHUNK_FRAMES * dim]);
    }
    let codebook = fit_kmeans(&pooled, dim, &cfg.kmeans, exec)?;
    drop(pooled);
    let mut muq = TeacherBank::new();
    for s in songs {
        for c in 0..s.full_chunks() {
            let frames = &s.embeddings[c * EMBED_CHUNK_FRAMES * dim..(c + 1) * EMBED_CHUNK_FRAMES * dim];
            let disc = codebook
                .assign_tokens(frames, exec)?
                .into_iter()
                .map(|t| t as u8)
                .collect();
            let seq = TeacherSequence::new(TeacherKind::Muq, frames.to_vec(), dim, disc, 0.0)?;
            muq.insert((s.song_id, c), ExcerptTeacher::Chunk(seq));
        }
    }

    // Predictive features, on whole chunks only.
    let (surp, ent) = if cfg.chunk_mode {
        build_chunked(songs, cfg, provider, exec)?
    } else {
        build_sliding(songs, cfg, provider, exec)?
    };

    let mut banks = BTreeMap::new();
    banks.insert(TeacherKind::Muq, muq);
    banks.insert(TeacherKind::Surprisal, surp.1);
    banks.insert(TeacherKind::Entropy, ent.1);
    Ok(TeacherSet {
        config: cfg.clone(),
        codebook,
        surprisal_bins: surp.0,
        entropy_bins: ent.0,
        banks,
    })
}

type Built = (QuantileBins, TeacherBank);

fn build_sliding<P: LogitProvider + ?Sized>(
    songs: &[SongStream],
    cfg: &TeacherConfig,
    provider: &P,
    exec: Execution,
) -> Result<(Built, Built)> {
    let w = context_frames(cfg.context_window_s)?;
    let mut per_song = Vec::with_capacity(songs.len());
    for s in songs {
        let tokens = &s.tokens[..s.full_chunks() * CHUNK_FRAMES];
        per_song.push(sliding_window_features(s.song_id, tokens, w, provider, exec)?);
    }
    let pool = |f: fn(&PredictiveSegment) -> &[f64]| -> Vec<f64> {
        per_song.iter().flatten().flat_map(|p| f(p).iter().copied()).collect()
    };
    let sb = fit_quantile_bins(&pool(|p| &p.surprisal), cfg.bins, TeacherKind::Surprisal)?;
    let eb = fit_quantile_bins(&pool(|p| &p.entropy), cfg.bins, TeacherKind::Entropy)?;
    let mut surp = TeacherBank::new();
    let mut ent = TeacherBank::new();
    for (s, segs) in songs.iter().zip(&per_song) {
        for c in 0..s.full_chunks() {
            let (lo, hi) = (c * CHUNK_FRAMES, (c + 1) * CHUNK_FRAMES);
            let inside: Vec<&PredictiveSegment> = segs
                .iter()
                .filter(|p| p.start_frame >= lo && p.start_frame + SEGMENT_FRAMES <= hi)
                .collect();
            let mk = |kind, bins: &QuantileBins, values: &dyn Fn(&PredictiveSegment) -> &[f64]| {
                inside
                    .iter()
                    .map(|p| {
                        let v = values(p);
                        TeacherSequence::new(
                            kind,
                            seq_f32(v),
                            1,
                            bins.discretize_all(v),
                            (p.start_frame - lo) as f64 / TOKEN_RATE_HZ,
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            };
            surp.insert(
                (s.song_id, c),
                ExcerptTeacher::Segments(mk(TeacherKind::Surprisal, &sb, &|p| &p.surprisal)?),
            );
            ent.insert(
                (s.song_id, c),
                ExcerptTeacher::Segments(mk(TeacherKind::Entropy, &eb, &|p| &p.entropy)?),
            );
        }
    }
    Ok(((sb, surp), (eb, ent)))
}

fn build_chunked<P: LogitProvider + ?Sized>(
    songs: &[SongStream],
    cfg: &TeacherConfig,
    provider: &P,
    exec: Execution,
) -> Result<(Built, Built)> {
    let per_song = par::try_map(exec, songs, |s| {
        let tokens = &s.tokens[..s.full_chunks() * CHUNK_FRAMES];
        chunk_based_features(s.song_id, tokens, CHUNK_FRAMES, provider, exec)
    })?;
    let all_s: Vec<f64> = per_song.iter().flatten().flat_map(|c| c.surprisal.iter().copied()).collect();
    let all_h: Vec<f64> = per_song.iter().flatten().flat_map(|c| c.entropy.iter().copied()).collect();
    let sb = fit_quantile_bins(&all_s, cfg.bins, TeacherKind::Surprisal)?;
    let eb = fit_quantile_bins(&all_h, cfg.bins, TeacherKind::Entropy)?;
    let mut surp = TeacherBank::new();
    let mut ent = TeacherBank::new();
    for (s, chunks) in songs.iter().zip(&per_song) {
        for c in chunks {
            let seq = |kind, bins: &QuantileBins, v: &[f64]| {
                TeacherSequence::new(kind, seq_f32(v), 1, bins.discretize_all(v), 0.0)
            };
            surp.insert(
                (s.song_id, c.chunk),
                ExcerptTeacher::Chunk(seq(TeacherKind::Surprisal, &sb, &c.surprisal)?),
            );
            ent.insert(
                (s.song_id, c.chunk),
                ExcerptTeacher::Chunk(seq(TeacherKind::Entropy, &eb, &c.entropy)?),
            );
        }
    }
    Ok(((sb, surp), (eb, ent)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TeacherIndex {
    config: TeacherConfig,
    excerpts: Vec<(usize, usize)>,
}

impl TeacherSet {
    /// Writes the codebook, both bin sets and one file pair per kind and chunk under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.codebook.save(&dir.join("codebook"))?;
        self.surprisal_bins.save(&dir.join("bins_surprisal"))?;
        self.entropy_bins.save(&dir.join("bins_entropy"))?;
        for (kind, bank) in &self.banks {
            let (window, vocab) = match kind {
                TeacherKind::Muq => (None, self.codebook.k()),
                _ => (self.config.predictive_window(), self.config.bins),
            };
            for (&(song, chunk), t) in bank {
                let stem = dir.join(kind.name()).join(format!("song{song}_chunk{chunk}"));
                save_excerpt_teacher(&stem, t, song, chunk, window, vocab)?;
            }
        }
        let index = TeacherIndex {
            config: self.config.clone(),
            excerpts: self.banks[&TeacherKind::Muq].keys().copied().collect(),
        };
        io::write_json(&dir.join("teachers.json"), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: TeacherIndex = io::read_json(&dir.join("teachers.json"))?;
        let mut banks = BTreeMap::new();
        for kind in TeacherKind::ALL {
            let mut bank = TeacherBank::new();
            for &(song, chunk) in &index.excerpts {
                let stem = dir.join(kind.name()).join(format!("song{song}_chunk{chunk}"));
                bank.insert((song, chunk), load_excerpt_teacher(&stem)?.0);
            }
            banks.insert(kind, bank);
        }
        Ok(TeacherSet {
            config: index.config,
            codebook: KMeansCodebook::load(&dir.join("codebook"))?,
            surprisal_bins: QuantileBins::load(&dir.join("bins_surprisal"))?,
            entropy_bins: QuantileBins::load(&dir.join("bins_entropy"))?,
            banks,
        })
    }
}
