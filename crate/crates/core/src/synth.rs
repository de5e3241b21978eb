//! Synthetic songs and recordings for desk-scale runs.
//!
//! Each song is a token chain drawn from a mix of a shared Markov chain and a
//! song-specific one. Embeddings follow the tokens plus a periodic drift at a
//! song-specific tempo.
//! EEG mixes song-specific oscillations with teacher-driven components read
//! 200 ms earlier, plus Gaussian noise.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{substream, StreamRng};
use crate::signal_prep::{delay_samples, Recording, DELAY_MS};
use crate::teacher::{SongStream, EMBED_RATE_HZ, TOKEN_RATE_HZ};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub songs: usize,
    pub subjects: usize,
    pub channels: usize,
    pub duration_s: f64,
    pub sample_rate: f64,
    pub vocab: usize,
    pub embed_dim: usize,
    /// Weight of the teacher-driven part of the EEG, in `[0, 1]`.
    pub coupling: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            songs: 10,
            subjects: 2,
            channels: 8,
            duration_s: 60.0,
            sample_rate: 125.0,
            vocab: 32,
            embed_dim: 8,
            coupling: 0.8,
            noise: 1.0,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.songs < 2 {
            return Err(Error::Config("synthetic data needs at least two songs".into()));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Config(format!("coupling {} outside [0, 1]", self.coupling)));
        }
        if self.subjects == 0 || self.channels == 0 || self.vocab < 2 || self.embed_dim == 0 {
            return Err(Error::Config("subjects, channels, embed_dim must be positive and vocab ≥ 2".into()));
        }
        if !(self.duration_s > 0.0) || !(self.sample_rate > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("duration, sample rate and noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub recordings: Vec<Recording>,
    pub songs: Vec<SongStream>,
    /// Shared `vocab × vocab` transition matrix, the stand-in token model.
    pub transition: Vec<f64>,
}

fn dirichlet_rows(rng: &mut StreamRng, v: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut out = Vec::with_capacity(v * v);
    for _ in 0..v {
        let mut row: Vec<f64> = (0..v).map(|_| gamma.sample(rng) + 1e-6).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
        // Renormalize once more so the row sums to 1 within rounding.
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
        out.extend(row);
    }
    out
}

fn draw(rng: &mut StreamRng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-frame surprisal and entropy of `tokens` under `p`, with the first
/// frame scored against the uniform distribution.
fn chain_features(tokens: &[u32], p: &[f64], v: usize) -> (Vec<f64>, Vec<f64>) {
    let mut s = Vec::with_capacity(tokens.len());
    let mut h = Vec::with_capacity(tokens.len());
    for (t, &z) in tokens.iter().enumerate() {
        if t == 0 {
            s.push((v as f64).ln());
            h.push((v as f64).ln());
            continue;
        }
        let row = &p[tokens[t - 1] as usize * v..(tokens[t - 1] as usize + 1) * v];
        s.push(-row[z as usize].ln());
        h.push(-row.iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>());
    }
    (s, h)
}

fn standardize(x: &mut [f64], mean: f64, std: f64) {
    let inv = 1.0 / std.max(1e-12);
    x.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (v, d) = (spec.vocab, spec.embed_dim);
    let transition = dirichlet_rows(&mut substream(spec.seed, "synth.markov", &[]), v, 0.3);
    let token_frames = (spec.duration_s * TOKEN_RATE_HZ).round() as usize;
    let embed_frames = token_frames / 2;

    let mut table_rng = substream(spec.seed, "synth.embedding", &[]);
    let table: Vec<f64> = (0..v * d).map(|_| normal(&mut table_rng)).collect();

    // Songs.
    let mut songs = Vec::with_capacity(spec.songs);
    for s in 0..spec.songs {
        let mut rng = substream(spec.seed, "synth.song", &[s as u64]);
        let own = dirichlet_rows(&mut rng, v, 0.3);
        let q: Vec<f64> = transition.iter().zip(&own).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        let mut tokens = Vec::with_capacity(token_frames);
        let mut z = rng.random_range(0..v);
        for _ in 0..token_frames {
            tokens.push(z as u32);
            z = draw(&mut rng, &q[z * v..(z + 1) * v]);
        }
        // Song-specific rhythmic drift: distinct tempo per song.
        let gain: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let tempo = 1.0 + 0.3 * s as f64 + rng.random_range(0.0..0.1);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut embeddings = Vec::with_capacity(embed_frames * d);
        for j in 0..embed_frames {
            let z = tokens[2 * j] as usize;
            let beat = (std::f64::consts::TAU * tempo * j as f64 / EMBED_RATE_HZ + phase).sin();
            for k in 0..d {
                let val = table[z * d + k] + gain[k] * beat + 0.1 * normal(&mut rng);
                embeddings.push(val as f32);
            }
        }
        songs.push(SongStream {
            song_id: s,
            tokens,
            embeddings,
            embed_dim: d,
        });
    }

    // Teacher drives on the 50 Hz grid, standardized over all songs.
    let feats: Vec<(Vec<f64>, Vec<f64>)> = songs
        .iter()
        .map(|s| chain_features(&s.tokens, &transition, v))
        .collect();
    let all_s: Vec<f64> = feats.iter().flat_map(|f| f.0.iter().copied()).collect();
    let all_h: Vec<f64> = feats.iter().flat_map(|f| f.1.iter().copied()).collect();
    let (ms, ss) = mean_std(&all_s);
    let (mh, sh) = mean_std(&all_h);

    let c = spec.channels;
    let mut ch_rng = substream(spec.seed, "synth.channels", &[]);
    let a: Vec<f64> = (0..c).map(|_| normal(&mut ch_rng)).collect();
    let b: Vec<f64> = (0..c).map(|_| normal(&mut ch_rng)).collect();
    let proj: Vec<f64> = (0..c * d)
        .map(|_| normal(&mut ch_rng) / (d as f64).sqrt())
        .collect();

    let n = (spec.duration_s * spec.sample_rate).round() as usize;
    let delay = delay_samples(DELAY_MS, spec.sample_rate);
    let kappa = spec.coupling;
    let mut recordings = Vec::with_capacity(spec.songs * spec.subjects);
    for subject in 0..spec.subjects {
        for (s, song) in songs.iter().enumerate() {
            let (mut fs, mut fh) = feats[s].clone();
            standardize(&mut fs, ms, ss);
            standardize(&mut fh, mh, sh);
            let mut osc = substream(spec.seed, "synth.oscillators", &[s as u64]);
            let waves: Vec<(f64, f64)> = (0..3)
                .map(|_| (osc.random_range(2.0..12.0), osc.random_range(0.0..std::f64::consts::TAU)))
                .collect();
            let weights: Vec<f64> = (0..c * 3).map(|_| normal(&mut osc)).collect();
            let mut noise = substream(spec.seed, "synth.noise", &[subject as u64, s as u64]);
            let mut samples = vec![0f32; c * n];
            for ch in 0..c {
                for t in 0..n {
                    let time = t as f64 / spec.sample_rate;
                    let mut song_part = 0.0;
                    for (k, &(f, ph)) in waves.iter().enumerate() {
                        song_part += weights[ch * 3 + k] * (std::f64::consts::TAU * f * time + ph).sin();
                    }
                    let drive = if t >= delay {
                        let src = (t - delay) as f64 / spec.sample_rate;
                        let fr = ((src * TOKEN_RATE_HZ) as usize).min(song.tokens.len() - 1);
                        let ej = (fr / 2).min(song.embeddings.len() / d - 1);
                        let m = &song.embeddings[ej * d..(ej + 1) * d];
                        let e: f64 = m
                            .iter()
                            .zip(&proj[ch * d..(ch + 1) * d])
                            .map(|(&x, &w)| x as f64 * w)
                            .sum();
                        a[ch] * fs[fr] + b[ch] * fh[fr] + e
                    } else {
                        0.0
                    };
                    let eps = if spec.noise > 0.0 { spec.noise * normal(&mut noise) } else { 0.0 };
                    samples[ch * n + t] = ((1.0 - kappa) * song_part + kappa * drive + eps) as f32;
                }
            }
            recordings.push(Recording::new(c, spec.sample_rate, samples, s, subject)?);
        }
    }
    Ok(SyntheticData {
        spec: spec.clone(),
        recordings,
        songs,
        transition,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SongIndex {
    pub vocab: usize,
    pub embed_dim: usize,
    pub songs: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarkovFile {
    pub vocab: usize,
    pub transition: Vec<f64>,
}

pub fn recording_stem(dir: &Path, subject: usize, song: usize) -> std::path::PathBuf {
    dir.join(format!("sub{subject:02}_song{song:02}"))
}

/// Writes recordings, song streams and the transition matrix under `dir`.
pub fn save_synthetic(data: &SyntheticData, dir: &Path) -> Result<()> {
    let rec_dir = dir.join("recordings");
    for r in &data.recordings {
        std::fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
        r.save(&recording_stem(&rec_dir, r.subject_id, r.song_id))?;
    }
    save_songs(&data.songs, &dir.join("songs"))?;
    io::write_json(
        &dir.join("markov.json"),
        &MarkovFile {
            vocab: data.spec.vocab,
            transition: data.transition.clone(),
        },
    )?;
    io::write_json(&dir.join("synth.json"), &data.spec)
}

pub fn save_songs(songs: &[SongStream], dir: &Path) -> Result<()> {
    let embed_dim = songs.first().map_or(0, |s| s.embed_dim);
    let mut vocab = 0;
    for s in songs {
        let mut bytes = Vec::with_capacity(s.tokens.len() * 4);
        for t in &s.tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
            vocab = vocab.max(*t as usize + 1);
        }
        io::write_bytes(&dir.join(format!("song{:02}_tokens.bin", s.song_id)), &bytes)?;
        io::write_f32(&dir.join(format!("song{:02}_embed.bin", s.song_id)), &s.embeddings)?;
    }
    io::write_json(
        &dir.join("songs.json"),
        &SongIndex {
            vocab,
            embed_dim,
            songs: songs.iter().map(|s| s.song_id).collect(),
        },
    )
}

pub fn load_songs(dir: &Path) -> Result<Vec<SongStream>> {
    let index: SongIndex = io::read_json(&dir.join("songs.json"))?;
    index
        .songs
        .iter()
        .map(|&id| {
            let tp = dir.join(format!("song{id:02}_tokens.bin"));
            let bytes = io::read_bytes(&tp)?;
            if bytes.len() % 4 != 0 {
                return Err(Error::data(format!("{}: not whole u32 tokens", tp.display())));
            }
            let tokens = bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let embeddings = io::read_f32(&dir.join(format!("song{id:02}_embed.bin")))?;
            if embeddings.len() % index.embed_dim.max(1) != 0 {
                return Err(Error::data(format!("song {id}: embeddings not a whole number of frames")));
            }
            Ok(SongStream {
                song_id: id,
                tokens,
                embeddings,
                embed_dim: index.embed_dim,
            })
        })
        .collect()
}

pub fn load_recordings(dir: &Path) -> Result<Vec<Recording>> {
    let mut stems: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| p.with_extension(""))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::data(format!("no recordings in {}", dir.display())));
    }
    stems.iter().map(|s| Recording::load(s)).collect()
}
