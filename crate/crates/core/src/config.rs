//! Pipeline configuration: one TOML file covering every stage.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::AdamConfig;
use crate::signal_prep::{SegmentGeometry, DEFAULT_RATE_HZ, MAX_DURATION_S};
use crate::synth::SyntheticSpec;
use crate::teacher::{TeacherConfig, TeacherKind};
use crate::training::{Stage, TrainPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Root of every stage directory.
    pub work_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated by the `synth` stage under `<work_dir>/synth`.
    Synthetic,
    /// Exported recordings, song streams and token-model outputs.
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub recordings_dir: Option<PathBuf>,
    pub songs_dir: Option<PathBuf>,
    /// Per-song next-token logits; takes precedence over `markov_path`.
    pub logits_dir: Option<PathBuf>,
    /// Transition matrix of a first-order token model.
    pub markov_path: Option<PathBuf>,
    pub sample_rate: f64,
    pub max_duration_s: f64,
    pub train_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            recordings_dir: None,
            songs_dir: None,
            logits_dir: None,
            markov_path: None,
            sample_rate: DEFAULT_RATE_HZ,
            max_duration_s: MAX_DURATION_S,
            train_ratio: 0.75,
            split_seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRun {
    pub teacher: TeacherKind,
    pub seed: u64,
}

impl PretrainRun {
    pub fn tag(&self) -> String {
        format!("{}-s{}", self.teacher, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub runs: Vec<PretrainRun>,
}

/// Fine-tuning covers every pretraining run, keeping its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullscratchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub name: String,
    /// Model tags, e.g. `finetune-muq-s42` or `fullscratch-s0`.
    pub members: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub synth: SyntheticSpec,
    pub teacher: TeacherConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub fullscratch: FullscratchConfig,
    pub ensembles: Vec<EnsembleSpec>,
    /// Pairs of model or ensemble tags compared with McNemar's test. Empty
    /// means every fine-tuned model and ensemble against every from-scratch model.
    #[serde(default)]
    pub comparisons: Vec<(String, String)>,
}

pub fn finetune_tag(run: &PretrainRun) -> String {
    format!("finetune-{}", run.tag())
}

pub fn fullscratch_tag(seed: u64) -> String {
    format!("fullscratch-s{seed}")
}

const PAPER_SEEDS: [u64; 3] = [0, 1, 42];

fn teacher_runs(seed: u64) -> Vec<PretrainRun> {
    TeacherKind::ALL
        .iter()
        .map(|&teacher| PretrainRun { teacher, seed })
        .collect()
}

fn default_ensembles(runs: &[PretrainRun], seeds: &[u64]) -> Vec<EnsembleSpec> {
    vec![
        EnsembleSpec {
            name: "ensemble-teachers".into(),
            members: runs.iter().filter(|r| r.seed == 42).map(finetune_tag).collect(),
        },
        EnsembleSpec {
            name: "ensemble-seeds".into(),
            members: seeds.iter().map(|&s| fullscratch_tag(s)).collect(),
        },
    ]
}

impl PipelineConfig {
    /// Values reported for the full-scale experiments.
    pub fn paper() -> Self {
        let runs = teacher_runs(42);
        PipelineConfig {
            paths: PathsConfig {
                work_dir: "runs/paper".into(),
            },
            data: DataConfig::default(),
            synth: SyntheticSpec {
                channels: 128,
                ..SyntheticSpec::default()
            },
            teacher: TeacherConfig {
                context_window_s: 16.0,
                ..TeacherConfig::default()
            },
            model: ModelConfig::default(),
            pretrain: PretrainConfig {
                epochs: 10_000,
                batch_size: 48,
                lr: 0.003,
                runs: runs.clone(),
            },
            finetune: FinetuneConfig {
                epochs: 3_500,
                batch_size: 48,
                lr: 0.003,
            },
            fullscratch: FullscratchConfig {
                epochs: 3_500,
                batch_size: 48,
                lr: 0.003,
                seeds: PAPER_SEEDS.to_vec(),
            },
            ensembles: default_ensembles(&runs, &PAPER_SEEDS),
            comparisons: Vec::new(),
        }
    }

    /// Shrunken model and synthetic data sized for one CPU core.
    pub fn desk() -> Self {
        let mut runs = teacher_runs(42);
        runs.extend([0, 1].map(|seed| PretrainRun {
            teacher: TeacherKind::Muq,
            seed,
        }));
        let synth = SyntheticSpec {
            subjects: 1,
            noise: 0.5,
            ..SyntheticSpec::default()
        };
        PipelineConfig {
            paths: PathsConfig {
                work_dir: "runs/desk".into(),
            },
            data: DataConfig::default(),
            teacher: TeacherConfig {
                context_window_s: 16.0,
                ..TeacherConfig::default()
            },
            model: ModelConfig {
                channels: synth.channels,
                conv_channels: [4, 8, 16],
                embed_dim: 16,
                heads: 2,
                head_hidden: 16,
                ..ModelConfig::default()
            },
            synth,
            pretrain: PretrainConfig {
                epochs: 15,
                batch_size: 16,
                lr: 0.003,
                runs: runs.clone(),
            },
            finetune: FinetuneConfig {
                epochs: 15,
                batch_size: 16,
                lr: 0.003,
            },
            fullscratch: FullscratchConfig {
                epochs: 15,
                batch_size: 16,
                lr: 0.003,
                seeds: PAPER_SEEDS.to_vec(),
            },
            ensembles: default_ensembles(&runs, &PAPER_SEEDS),
            comparisons: Vec::new(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected paper or desk)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.work_dir);
        for p in [
            &mut self.data.recordings_dir,
            &mut self.data.songs_dir,
            &mut self.data.logits_dir,
            &mut self.data.markov_path,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn geometry(&self) -> SegmentGeometry {
        SegmentGeometry::paper(self.data.sample_rate)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.teacher.validate()?;
        self.model.validate()?;
        if self.model.teacher.is_some() {
            return bad("model.teacher is set per pretraining run and must be left out".into());
        }
        if self.model.vocab != self.teacher.kmeans.k || self.model.vocab != self.teacher.bins {
            return bad(format!(
                "model.vocab {} must equal teacher.kmeans.k {} and teacher.bins {}",
                self.model.vocab, self.teacher.kmeans.k, self.teacher.bins
            ));
        }
        if (self.model.rate as f64 - self.data.sample_rate).abs() > 1e-9 {
            return bad(format!(
                "model.rate {} differs from data.sample_rate {}",
                self.model.rate, self.data.sample_rate
            ));
        }
        if !(0.0..1.0).contains(&self.data.train_ratio) || self.data.train_ratio == 0.0 {
            return bad(format!("data.train_ratio {} outside (0, 1)", self.data.train_ratio));
        }
        if !(self.data.max_duration_s > 0.0) {
            return bad("data.max_duration_s must be positive".into());
        }
        match self.data.source {
            DataSource::Synthetic => {
                self.synth.validate()?;
                if self.synth.channels != self.model.channels {
                    return bad(format!(
                        "synth.channels {} differs from model.channels {}",
                        self.synth.channels, self.model.channels
                    ));
                }
                if (self.synth.sample_rate - self.data.sample_rate).abs() > 1e-9 {
                    return bad("synth.sample_rate differs from data.sample_rate".into());
                }
                if self.synth.songs != self.model.classes {
                    return bad(format!(
                        "synth.songs {} differs from model.classes {}",
                        self.synth.songs, self.model.classes
                    ));
                }
            }
            DataSource::Files => {
                if self.data.recordings_dir.is_none() || self.data.songs_dir.is_none() {
                    return bad("file data needs data.recordings_dir and data.songs_dir".into());
                }
                if self.data.logits_dir.is_none() && self.data.markov_path.is_none() {
                    return bad("file data needs data.logits_dir or data.markov_path".into());
                }
            }
        }
        for (name, epochs, batch, lr) in [
            ("pretrain", self.pretrain.epochs, self.pretrain.batch_size, self.pretrain.lr),
            ("finetune", self.finetune.epochs, self.finetune.batch_size, self.finetune.lr),
            ("fullscratch", self.fullscratch.epochs, self.fullscratch.batch_size, self.fullscratch.lr),
        ] {
            if epochs == 0 || batch == 0 || !(lr > 0.0) {
                return bad(format!("{name}: epochs, batch_size and lr must be positive"));
            }
        }
        let mut tags = BTreeSet::new();
        for r in &self.pretrain.runs {
            if !tags.insert(finetune_tag(r)) {
                return bad(format!("pretraining run {} listed twice", r.tag()));
            }
        }
        for &s in &self.fullscratch.seeds {
            if !tags.insert(fullscratch_tag(s)) {
                return bad(format!("fullscratch seed {s} listed twice"));
            }
        }
        for e in &self.ensembles {
            if e.members.is_empty() {
                return bad(format!("ensemble {} has no members", e.name));
            }
            if let Some(m) = e.members.iter().find(|m| !tags.contains(*m)) {
                return bad(format!("ensemble {} names unknown model {m}", e.name));
            }
            if e.name.is_empty() || e.name.contains(['/', '\\']) {
                return bad(format!("ensemble name {:?} is not a valid file name", e.name));
            }
        }
        for e in &self.ensembles {
            if !tags.insert(e.name.clone()) {
                return bad(format!("ensemble name {} clashes with another tag", e.name));
            }
        }
        if let Some((a, b)) = self
            .comparisons
            .iter()
            .find(|(a, b)| !tags.contains(a) || !tags.contains(b))
        {
            return bad(format!("comparison ({a}, {b}) names an unknown model"));
        }
        Ok(())
    }

    fn adam(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    pub fn pretrain_plan(&self, run: &PretrainRun) -> TrainPlan {
        TrainPlan {
            stage: Stage::Pretrain,
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            adam: Self::adam(self.pretrain.lr),
            seed: run.seed,
            teacher: Some(run.teacher),
        }
    }

    pub fn finetune_plan(&self, seed: u64) -> TrainPlan {
        TrainPlan {
            stage: Stage::Finetune,
            epochs: self.finetune.epochs,
            batch_size: self.finetune.batch_size,
            adam: Self::adam(self.finetune.lr),
            seed,
            teacher: None,
        }
    }

    pub fn fullscratch_plan(&self, seed: u64) -> TrainPlan {
        TrainPlan {
            stage: Stage::Fullscratch,
            epochs: self.fullscratch.epochs,
            batch_size: self.fullscratch.batch_size,
            adam: Self::adam(self.fullscratch.lr),
            seed,
            teacher: None,
        }
    }

    /// Every single-model tag, fine-tuned first.
    pub fn model_tags(&self) -> Vec<String> {
        self.pretrain
            .runs
            .iter()
            .map(finetune_tag)
            .chain(self.fullscratch.seeds.iter().map(|&s| fullscratch_tag(s)))
            .collect()
    }

    pub fn comparison_pairs(&self) -> Vec<(String, String)> {
        if !self.comparisons.is_empty() {
            return self.comparisons.clone();
        }
        let scratch: Vec<String> = self.fullscratch.seeds.iter().map(|&s| fullscratch_tag(s)).collect();
        let mut out = Vec::new();
        let challengers = self
            .pretrain
            .runs
            .iter()
            .map(finetune_tag)
            .chain(self.ensembles.iter().map(|e| e.name.clone()));
        for a in challengers {
            for b in &scratch {
                out.push((a.clone(), b.clone()));
            }
        }
        for (i, a) in self.ensembles.iter().enumerate() {
            for b in &self.ensembles[i + 1..] {
                out.push((a.name.clone(), b.name.clone()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [PipelineConfig::paper(), PipelineConfig::desk()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = PipelineConfig::desk().to_toml().unwrap();
        let err = PipelineConfig::from_toml(&format!("bogus = 1\n{text}")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = PipelineConfig::from_toml(&text.replace("[model]", "[model]\nlayers = 3")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn context_window_must_be_listed() {
        let mut cfg = PipelineConfig::desk();
        cfg.teacher.context_window_s = 10.0;
        assert!(cfg.validate().is_err());
        cfg.teacher.context_window_s = 32.0;
        cfg.validate().unwrap();
    }

    #[test]
    fn default_comparisons_cover_every_baseline() {
        let cfg = PipelineConfig::paper();
        let pairs = cfg.comparison_pairs();
        // 3 fine-tuned + 2 ensembles against 3 seeds, plus the ensemble pair.
        assert_eq!(pairs.len(), 5 * 3 + 1);
        assert!(pairs.contains(&("ensemble-teachers".into(), "ensemble-seeds".into())));
    }
}
