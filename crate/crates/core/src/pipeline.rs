//! Stage runner. Each stage reads its inputs from the work directory, writes
//! its outputs to `<work_dir>/<stage>/` and finishes with a `manifest.json`
//! holding the portable config, digests of the upstream manifests and digests
//! of every output file. Metric logs carry wall-clock times, so they are
//! listed in the manifest without a digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{finetune_tag, fullscratch_tag, DataSource, PipelineConfig};
use crate::data::{Dataset, WindowItem};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, comparison_report, config_hash, ensemble, evaluate_model, ComparisonReport, PredictionCache};
use crate::io;
use crate::par::Execution;
use crate::signal_prep::{stratified_split, truncate_recording, Recording, SplitAssignment};
use crate::synth::{generate_synthetic, load_recordings, load_songs, save_synthetic, MarkovFile};
use crate::teacher::{
    build_teachers, FileLogitProvider, LogitProvider, MarkovLogitProvider, SongStream, TeacherSet, TracingProvider,
    CHUNK_FRAMES,
};
use crate::training::{finetune_model, init_model, load_trained, pretrain_model, save_trained, stage_paths, Trainer};

pub const STAGES: [&str; 9] = [
    "synth",
    "prep",
    "features",
    "pretrain",
    "finetune",
    "fullscratch",
    "evaluate",
    "ensemble",
    "report",
];

const LOG_SUFFIX: &str = ".log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub config: PipelineConfig,
    /// Upstream stage name to the digest of its manifest.
    pub inputs: BTreeMap<String, String>,
    /// Path relative to the stage directory to its digest; logs map to `null`.
    pub outputs: BTreeMap<String, Option<String>>,
    pub summary: serde_json::Value,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(io::read_bytes(path)?)))
}

fn list_files(dir: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let here = dir.join(rel);
    let mut entries: Vec<_> = std::fs::read_dir(&here)
        .map_err(|e| Error::io(&here, e))?
        .filter_map(|e| e.ok())
        .collect();
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let r = rel.join(e.file_name());
        if e.path().is_dir() {
            list_files(dir, &r, out)?;
        } else {
            out.push(r);
        }
    }
    Ok(())
}

fn rel_key(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub exec: Execution,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config, exec })
    }

    pub fn work_dir(&self) -> &Path {
        &self.config.paths.work_dir
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.work_dir().join(stage)
    }

    /// Config with paths expressed relative to the work directory where possible.
    pub fn portable_config(&self) -> PipelineConfig {
        let mut c = self.config.clone();
        let root = self.config.paths.work_dir.clone();
        let rel = |p: &mut PathBuf| {
            if let Ok(r) = p.strip_prefix(&root) {
                *p = Path::new(".").join(r);
            }
        };
        for p in [
            &mut c.data.recordings_dir,
            &mut c.data.songs_dir,
            &mut c.data.logits_dir,
            &mut c.data.markov_path,
        ]
        .into_iter()
        .flatten()
        {
            rel(p);
        }
        c.paths.work_dir = PathBuf::from(".");
        c
    }

    fn fresh_dir(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn write_manifest(&self, stage: &str, upstream: &[&str], summary: serde_json::Value) -> Result<StageManifest> {
        let dir = self.stage_dir(stage);
        let mut inputs = BTreeMap::new();
        for up in upstream {
            let p = self.stage_dir(up).join("manifest.json");
            if p.exists() {
                inputs.insert(up.to_string(), sha256_file(&p)?);
            }
        }
        let mut files = Vec::new();
        list_files(&dir, Path::new(""), &mut files)?;
        let mut outputs = BTreeMap::new();
        for f in files {
            let key = rel_key(&f);
            if key == "manifest.json" {
                continue;
            }
            let digest = if key.ends_with(LOG_SUFFIX) {
                None
            } else {
                Some(sha256_file(&dir.join(&f))?)
            };
            outputs.insert(key, digest);
        }
        let config = self.portable_config();
        let m = StageManifest {
            stage: stage.to_string(),
            config_hash: config_hash(&config),
            config,
            inputs,
            outputs,
            summary,
        };
        io::write_json(&dir.join("manifest.json"), &m)?;
        Ok(m)
    }

    fn require(&self, stage: &str) -> Result<()> {
        let p = self.stage_dir(stage).join("manifest.json");
        if !p.exists() {
            return Err(Error::data(format!(
                "stage {stage} has not been run: {} is missing",
                p.display()
            )));
        }
        Ok(())
    }

    fn data_dir(&self, given: &Option<PathBuf>, synth_sub: &str) -> Result<PathBuf> {
        match self.config.data.source {
            DataSource::Synthetic => {
                self.require("synth")?;
                Ok(self.stage_dir("synth").join(synth_sub))
            }
            DataSource::Files => given
                .clone()
                .ok_or_else(|| Error::Config(format!("data source needs a {synth_sub} directory"))),
        }
    }

    pub fn load_recordings(&self) -> Result<Vec<Recording>> {
        let dir = self.data_dir(&self.config.data.recordings_dir, "recordings")?;
        load_recordings(&dir)?
            .iter()
            .map(|r| truncate_recording(r, self.config.data.max_duration_s))
            .collect()
    }

    pub fn load_songs(&self) -> Result<Vec<SongStream>> {
        load_songs(&self.data_dir(&self.config.data.songs_dir, "songs")?)
    }

    pub fn synth(&self) -> Result<StageManifest> {
        if self.config.data.source != DataSource::Synthetic {
            return Err(Error::Config("synth stage needs data.source = \"synthetic\"".into()));
        }
        let dir = self.fresh_dir("synth")?;
        let data = generate_synthetic(&self.config.synth)?;
        save_synthetic(&data, &dir)?;
        let summary = serde_json::json!({
            "recordings": data.recordings.len(),
            "songs": data.songs.len(),
        });
        self.write_manifest("synth", &[], summary)
    }

    pub fn prep(&self) -> Result<StageManifest> {
        let recordings = self.load_recordings()?;
        let ds = Dataset::new(recordings, self.config.geometry())?;
        let refs = ds.excerpt_refs()?;
        let split = stratified_split(&refs, self.config.data.train_ratio, self.config.data.split_seed)?;
        let dir = self.fresh_dir("prep")?;
        split.save(&dir.join("split.json"))?;
        let summary = serde_json::json!({
            "recordings": ds.recordings.len(),
            "train_excerpts": split.train_excerpts.len(),
            "val_excerpts": split.val_excerpts.len(),
            "train_windows": ds.items(&split.train_excerpts)?.len(),
            "val_windows": ds.items(&split.val_excerpts)?.len(),
        });
        self.write_manifest("prep", &["synth"], summary)
    }

    /// Dataset with the train and validation windows of the saved split.
    pub fn dataset(&self) -> Result<(Dataset, Vec<WindowItem>, Vec<WindowItem>)> {
        self.require("prep")?;
        let split = SplitAssignment::load(&self.stage_dir("prep").join("split.json"))?;
        let ds = Dataset::new(self.load_recordings()?, self.config.geometry())?;
        let train = ds.items(&split.train_excerpts)?;
        let val = ds.items(&split.val_excerpts)?;
        Ok((ds, train, val))
    }

    fn markov_provider(&self) -> Result<MarkovLogitProvider> {
        let path = match (&self.config.data.markov_path, self.config.data.source) {
            (Some(p), _) => p.clone(),
            (None, DataSource::Synthetic) => self.stage_dir("synth").join("markov.json"),
            (None, DataSource::Files) => {
                return Err(Error::Config("no token model: set data.logits_dir or data.markov_path".into()))
            }
        };
        let m: MarkovFile = io::read_json(&path)?;
        MarkovLogitProvider::new(&m.transition, m.vocab)
    }

    fn traced_teachers<P: LogitProvider>(&self, songs: &[SongStream], provider: &P) -> Result<(TeacherSet, usize, usize)> {
        let tokens = songs.iter().map(|s| (s.song_id, s.tokens.clone())).collect();
        let tracer = TracingProvider::new(provider, tokens);
        let set = build_teachers(songs, &self.config.teacher, &tracer, self.exec)?;
        let calls = tracer.records().len();
        let violations = if self.config.teacher.chunk_mode {
            tracer.chunk_violations(CHUNK_FRAMES).len()
        } else {
            0
        };
        Ok((set, calls, violations))
    }

    pub fn features(&self) -> Result<StageManifest> {
        let songs = self.load_songs()?;
        let (set, calls, violations) = match &self.config.data.logits_dir {
            Some(dir) => {
                let ids: Vec<usize> = songs.iter().map(|s| s.song_id).collect();
                self.traced_teachers(&songs, &FileLogitProvider::load(dir, &ids)?)?
            }
            None => self.traced_teachers(&songs, &self.markov_provider()?)?,
        };
        if violations > 0 {
            return Err(Error::data(format!(
                "chunk mode read {violations} token spans across a chunk boundary"
            )));
        }
        let dir = self.fresh_dir("features")?;
        set.save(&dir)?;
        let summary = serde_json::json!({
            "songs": songs.len(),
            "excerpts": set.bank(crate::teacher::TeacherKind::Muq).len(),
            "provider_calls": calls,
            "chunk_mode": self.config.teacher.chunk_mode,
            "chunk_violations": violations,
            "kmeans_inertia": set.codebook.meta.inertia,
        });
        self.write_manifest("features", &["synth"], summary)
    }

    pub fn load_teachers(&self) -> Result<TeacherSet> {
        self.require("features")?;
        TeacherSet::load(&self.stage_dir("features"))
    }

    pub fn pretrain(&self) -> Result<StageManifest> {
        let (ds, train, _) = self.dataset()?;
        let teachers = self.load_teachers()?;
        let dir = self.fresh_dir("pretrain")?;
        let trainer = Trainer {
            data: &ds,
            items: &train,
            teachers: Some(&teachers),
            exec: self.exec,
        };
        let mut summary = serde_json::Map::new();
        for run in &self.config.pretrain.runs {
            let plan = self.config.pretrain_plan(run);
            let mut t = pretrain_model(&self.config.model, run.teacher, teachers.codebook.dim(), run.seed)?;
            let (stem, log) = stage_paths(&dir, &run.tag());
            let logs = trainer.run(&mut t, &plan, Some(&log))?;
            save_trained(&stem, &t, &plan)?;
            summary.insert(run.tag(), serde_json::json!({ "final_loss": logs.last().map(|l| l.loss) }));
        }
        self.write_manifest("pretrain", &["prep", "features"], summary.into())
    }

    pub fn finetune(&self) -> Result<StageManifest> {
        self.require("pretrain")?;
        let (ds, train, _) = self.dataset()?;
        let dir = self.fresh_dir("finetune")?;
        let trainer = Trainer {
            data: &ds,
            items: &train,
            teachers: None,
            exec: self.exec,
        };
        let mut summary = serde_json::Map::new();
        for run in &self.config.pretrain.runs {
            let (pre, _) = load_trained(&self.stage_dir("pretrain").join(run.tag()))?;
            let plan = self.config.finetune_plan(run.seed);
            let mut t = finetune_model(&pre, run.seed)?;
            let tag = finetune_tag(run);
            let (stem, log) = stage_paths(&dir, &tag);
            let logs = trainer.run(&mut t, &plan, Some(&log))?;
            save_trained(&stem, &t, &plan)?;
            summary.insert(tag, serde_json::json!({ "final_loss": logs.last().map(|l| l.loss) }));
        }
        self.write_manifest("finetune", &["prep", "pretrain"], summary.into())
    }

    pub fn fullscratch(&self) -> Result<StageManifest> {
        let (ds, train, _) = self.dataset()?;
        let dir = self.fresh_dir("fullscratch")?;
        let trainer = Trainer {
            data: &ds,
            items: &train,
            teachers: None,
            exec: self.exec,
        };
        let mut summary = serde_json::Map::new();
        for &seed in &self.config.fullscratch.seeds {
            let plan = self.config.fullscratch_plan(seed);
            let mut t = init_model(self.config.model.clone(), seed)?;
            let tag = fullscratch_tag(seed);
            let (stem, log) = stage_paths(&dir, &tag);
            let logs = trainer.run(&mut t, &plan, Some(&log))?;
            save_trained(&stem, &t, &plan)?;
            summary.insert(tag, serde_json::json!({ "final_loss": logs.last().map(|l| l.loss) }));
        }
        self.write_manifest("fullscratch", &["prep"], summary.into())
    }

    fn checkpoint_stem(&self, tag: &str) -> PathBuf {
        let stage = if tag.starts_with("finetune-") { "finetune" } else { "fullscratch" };
        self.stage_dir(stage).join(tag)
    }

    pub fn cache_path(&self, tag: &str) -> PathBuf {
        if self.config.ensembles.iter().any(|e| e.name == tag) {
            self.stage_dir("ensemble").join(format!("{tag}.cache.jsonl"))
        } else {
            self.stage_dir("evaluate").join(format!("{tag}.cache.jsonl"))
        }
    }

    pub fn evaluate(&self) -> Result<StageManifest> {
        let (ds, _, val) = self.dataset()?;
        let tags = self.config.model_tags();
        let mut summary = serde_json::Map::new();
        let mut caches = Vec::with_capacity(tags.len());
        for tag in &tags {
            let (t, _) = load_trained(&self.checkpoint_stem(tag))?;
            let cache = evaluate_model(&t, &ds, &val, tag, self.exec)?;
            summary.insert(tag.clone(), serde_json::json!({ "accuracy": accuracy(&cache) }));
            caches.push(cache);
        }
        self.fresh_dir("evaluate")?;
        for (tag, cache) in tags.iter().zip(&caches) {
            cache.save(&self.cache_path(tag))?;
        }
        self.write_manifest("evaluate", &["finetune", "fullscratch"], summary.into())
    }

    pub fn ensemble(&self) -> Result<StageManifest> {
        self.require("evaluate")?;
        self.fresh_dir("ensemble")?;
        let mut summary = serde_json::Map::new();
        for spec in &self.config.ensembles {
            let members = spec
                .members
                .iter()
                .map(|m| PredictionCache::load(&self.cache_path(m)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PredictionCache> = members.iter().collect();
            let ens = ensemble(&refs, &spec.name)?;
            summary.insert(spec.name.clone(), serde_json::json!({ "accuracy": accuracy(&ens) }));
            ens.save(&self.cache_path(&spec.name))?;
        }
        self.write_manifest("ensemble", &["evaluate"], summary.into())
    }

    pub fn report(&self) -> Result<ComparisonReport> {
        self.require("evaluate")?;
        if !self.config.ensembles.is_empty() {
            self.require("ensemble")?;
        }
        let tags: Vec<String> = self
            .config
            .model_tags()
            .into_iter()
            .chain(self.config.ensembles.iter().map(|e| e.name.clone()))
            .collect();
        let caches = tags
            .iter()
            .map(|t| PredictionCache::load(&self.cache_path(t)))
            .collect::<Result<Vec<_>>>()?;
        let index = |t: &str| tags.iter().position(|x| x == t).expect("validated tag");
        let pairs: Vec<(usize, usize)> = self
            .config
            .comparison_pairs()
            .iter()
            .map(|(a, b)| (index(a), index(b)))
            .collect();
        let refs: Vec<&PredictionCache> = caches.iter().collect();
        let report = comparison_report(&refs, &pairs)?;
        let dir = self.fresh_dir("report")?;
        report.save(&dir.join("report"))?;
        self.write_manifest("report", &["evaluate", "ensemble"], serde_json::Value::Null)?;
        Ok(report)
    }

    /// Runs `stage` by name; `report` output is written but not returned.
    pub fn run_stage(&self, stage: &str) -> Result<()> {
        match stage {
            "synth" => self.synth().map(drop),
            "prep" => self.prep().map(drop),
            "features" => self.features().map(drop),
            "pretrain" => self.pretrain().map(drop),
            "finetune" => self.finetune().map(drop),
            "fullscratch" => self.fullscratch().map(drop),
            "evaluate" => self.evaluate().map(drop),
            "ensemble" => self.ensemble().map(drop),
            "report" => self.report().map(drop),
            other => Err(Error::invalid(format!("unknown stage {other}"))),
        }
    }

    /// Every stage in order; `synth` only for synthetic data.
    pub fn run_all(&self) -> Result<ComparisonReport> {
        for stage in &STAGES[..STAGES.len() - 1] {
            if *stage == "synth" && self.config.data.source != DataSource::Synthetic {
                continue;
            }
            log::info!("stage {stage}");
            self.run_stage(stage)?;
        }
        self.report()
    }
}
