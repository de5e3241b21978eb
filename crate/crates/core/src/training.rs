//! Pretraining, fine-tuning and from-scratch training loops.
//!
//! Each sample runs encoder (and decoder) on its own tape, in parallel. The
//! classification head runs once per batch on the stacked class tokens,
//! because its batch normalization couples the samples. Gradients from the
//! head are fed back into each sample tape, and per-sample parameter
//! gradients are summed in sample order, so results do not depend on the
//! execution mode.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, WindowItem};
use crate::error::{Error, Result};
use crate::model::{argmax, sample_mask, strip_decoder, MaskSet, ModelConfig, PredAnnModel, TeacherSpec};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, RngState};
use crate::nn::{accumulate, Adam, AdamConfig, Graph, ParamGrads, ParamStore, Tensor, Var};
use crate::par::{self, Execution};
use crate::rng::substream;
use crate::signal_prep::ExtractMode;
use crate::teacher::{TeacherKind, TeacherSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Fullscratch,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Fullscratch => "fullscratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Pretraining only.
    pub teacher: Option<TeacherKind>,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        match (self.stage, self.teacher) {
            (Stage::Pretrain, None) => Err(Error::Config("pretraining needs a teacher kind".into())),
            (Stage::Pretrain, Some(_)) | (_, None) => Ok(()),
            (s, Some(_)) => Err(Error::Config(format!("{} takes no teacher kind", s.name()))),
        }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub seed: u64,
    pub epoch: usize,
    pub loss: f64,
    pub l_c: f64,
    pub l_m: Option<f64>,
    pub train_acc: f64,
    pub steps: usize,
    pub skipped_batches: usize,
    /// Excluded from reproducibility comparisons.
    pub wall_s: f64,
}

/// Losses of one batch, before any update.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub l_c: f64,
    pub l_m: Option<f64>,
    pub correct: usize,
}

/// A model with its parameters.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: PredAnnModel,
    pub store: ParamStore<f32>,
}

/// Inputs of one training sample.
struct Prepared {
    values: Vec<f32>,
    label: usize,
    teacher: Option<(Vec<f32>, Vec<u8>, MaskSet)>,
    key: u64,
}

struct SampleFwd<'a> {
    g: Graph<'a, f32>,
    h_cls: Var,
    l_m: Option<Var>,
}

/// Everything needed to run training steps over a dataset.
pub struct Trainer<'d> {
    pub data: &'d Dataset,
    pub items: &'d [WindowItem],
    pub teachers: Option<&'d TeacherSet>,
    pub exec: Execution,
}

impl<'d> Trainer<'d> {
    fn prepare(&self, model: &PredAnnModel, plan: &TrainPlan, epoch: usize, idx: usize) -> Result<Prepared> {
        let item = &self.items[idx];
        let key = idx as u64;
        let mut off = substream(plan.seed, "offset", &[epoch as u64, key]);
        let teacher_kind = model.config.teacher.as_ref().map(|t| t.kind);
        match (teacher_kind, self.teachers) {
            (Some(kind), Some(ts)) if model.config.w_m != 0.0 => {
                let ex = self.data.aligned(item, ExtractMode::Train, &mut off, ts, kind)?;
                let spec = model.config.teacher.as_ref().unwrap();
                let mut mrng = substream(plan.seed, "mask", &[epoch as u64, key]);
                let mask = sample_mask(spec.length, model.config.mask_ratio, &mut mrng);
                Ok(Prepared {
                    values: ex.eeg.values,
                    label: item.label(),
                    teacher: Some((ex.teacher.raw, ex.teacher.disc, mask)),
                    key,
                })
            }
            (Some(_), None) if model.config.w_m != 0.0 => {
                Err(Error::invalid("pretraining needs teacher sequences"))
            }
            _ => Ok(Prepared {
                values: self.data.segment(item, ExtractMode::Train, &mut off)?.values,
                label: item.label(),
                teacher: None,
                key,
            }),
        }
    }

    fn forward_sample<'a>(
        model: &PredAnnModel,
        store: &'a ParamStore<f32>,
        p: &Prepared,
        seed: u64,
        epoch: usize,
    ) -> Result<SampleFwd<'a>> {
        let mut g = Graph::training(store, substream(seed, "dropout", &[epoch as u64, p.key]));
        let sv = model.encode_segment(&mut g, &p.values)?;
        let l_m = match &p.teacher {
            Some((raw, disc, mask)) => {
                let u = model.decoder_input(&mut g, raw, mask)?;
                let logits = model.decode(&mut g, sv.states, u)?;
                model.masked_loss(&mut g, logits, disc, mask)?
            }
            None => None,
        };
        Ok(SampleFwd {
            g,
            h_cls: sv.h_cls,
            l_m,
        })
    }

    /// Forward and backward over one batch. Returns the losses, the summed
    /// gradients and the head's batch statistics.
    #[allow(clippy::type_complexity)]
    fn batch_grads(
        &self,
        model: &PredAnnModel,
        store: &ParamStore<f32>,
        prepared: &[Prepared],
        seed: u64,
        epoch: usize,
    ) -> Result<(BatchLoss, ParamGrads<f32>, Option<crate::nn::layers::BatchStats<f32>>)> {
        let b = prepared.len();
        let cfg = &model.config;
        let fwd = par::try_map(self.exec, prepared, |p| Self::forward_sample(model, store, p, seed, epoch))?;
        let d = cfg.embed_dim;
        let mut hs = Vec::with_capacity(b * d);
        for f in &fwd {
            hs.extend_from_slice(f.g.tape.value(f.h_cls).data());
        }
        let labels: Vec<usize> = prepared.iter().map(|p| p.label).collect();

        let mut total: ParamGrads<f32> = Vec::new();
        let mut dh: Option<Tensor<f32>> = None;
        let mut stats = None;
        let mut l_c = 0.0;
        let mut correct = 0;
        if cfg.w_c != 0.0 {
            let mut hg = Graph::new(store);
            let h = hg.tape.leaf(Tensor::new(&[b, d], hs)?, true);
            let (logits, st) = model.classify_train(&mut hg, h)?;
            let lv = hg.tape.value(logits);
            correct = (0..b).filter(|&i| argmax(lv.row(i)) == labels[i]).count();
            let lc = hg.tape.cross_entropy(logits, &labels)?;
            l_c = hg.tape.value(lc).data()[0] as f64;
            let seed_t = Tensor::scalar(cfg.w_c as f32);
            let mut grads = hg.tape.backward(&[(lc, &seed_t)])?;
            dh = grads.take(h);
            total = hg.param_grads(&mut grads);
            stats = Some(st);
        }

        let lm_vals: Vec<f64> = fwd
            .iter()
            .filter_map(|f| f.l_m.map(|v| f.g.tape.value(v).data()[0] as f64))
            .collect();
        let l_m = (!lm_vals.is_empty()).then(|| lm_vals.iter().sum::<f64>() / lm_vals.len() as f64);
        let lm_seed = Tensor::scalar((cfg.w_m / lm_vals.len().max(1) as f64) as f32);
        let indexed: Vec<(usize, SampleFwd<'_>)> = fwd.into_iter().enumerate().collect();
        let per = par::map_owned(self.exec, indexed, |(i, f)| -> Result<ParamGrads<f32>> {
            let mut seeds: Vec<(Var, &Tensor<f32>)> = Vec::new();
            let row;
            if let Some(dh) = &dh {
                row = Tensor::new(&[1, d], dh.row(i).to_vec())?;
                seeds.push((f.h_cls, &row));
            }
            if let Some(lm) = f.l_m {
                seeds.push((lm, &lm_seed));
            }
            if seeds.is_empty() {
                return Ok(Vec::new());
            }
            let mut gr = f.g.tape.backward(&seeds)?;
            Ok(f.g.param_grads(&mut gr))
        });
        for g in per {
            accumulate(&mut total, g?);
        }
        let loss = crate::model::combine_losses(cfg.w_c, l_c, cfg.w_m, l_m);
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite loss {loss} at epoch {epoch}")));
        }
        Ok((
            BatchLoss {
                loss,
                l_c,
                l_m,
                correct,
            },
            total,
            stats,
        ))
    }

    /// Training-mode losses of the batch `indices` at `epoch`, without updating.
    pub fn batch_loss(
        &self,
        trained: &Trained,
        plan: &TrainPlan,
        epoch: usize,
        indices: &[usize],
    ) -> Result<BatchLoss> {
        let prepared = par::try_map(self.exec, indices, |&i| self.prepare(&trained.model, plan, epoch, i))?;
        Ok(self
            .batch_grads(&trained.model, &trained.store, &prepared, plan.seed, epoch)?
            .0)
    }

    /// Batches of one epoch: a seeded shuffle cut into `batch_size` pieces,
    /// keeping the last partial batch.
    pub fn epoch_batches(&self, plan: &TrainPlan, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut substream(plan.seed, "shuffle", &[epoch as u64]));
        order.chunks(plan.batch_size).map(|c| c.to_vec()).collect()
    }

    /// Runs `plan.epochs` epochs, appending one line per epoch to `log_path`.
    pub fn run(&self, trained: &mut Trained, plan: &TrainPlan, log_path: Option<&Path>) -> Result<Vec<EpochLog>> {
        plan.validate()?;
        if self.items.is_empty() {
            return Err(Error::data("no training windows"));
        }
        let mut adam = Adam::new(plan.adam, &trained.store);
        let mut logs = Vec::with_capacity(plan.epochs);
        for epoch in 0..plan.epochs {
            let started = Instant::now();
            let (mut loss, mut l_c, mut l_m, mut lm_n, mut correct, mut seen, mut steps, mut skipped) =
                (0.0, 0.0, 0.0, 0usize, 0usize, 0usize, 0usize, 0usize);
            for batch in self.epoch_batches(plan, epoch) {
                if batch.len() < 2 && trained.model.config.w_c != 0.0 {
                    log::warn!("epoch {epoch}: skipping a batch of {} sample", batch.len());
                    skipped += 1;
                    continue;
                }
                let prepared =
                    par::try_map(self.exec, &batch, |&i| self.prepare(&trained.model, plan, epoch, i))?;
                let (bl, grads, stats) =
                    self.batch_grads(&trained.model, &trained.store, &prepared, plan.seed, epoch)?;
                adam.step(&mut trained.store, &grads)?;
                if let Some(st) = stats {
                    trained.model.update_bn(&mut trained.store, &st);
                }
                let n = batch.len();
                loss += bl.loss * n as f64;
                l_c += bl.l_c * n as f64;
                if let Some(m) = bl.l_m {
                    l_m += m * n as f64;
                    lm_n += n;
                }
                correct += bl.correct;
                seen += n;
                steps += 1;
            }
            let denom = seen.max(1) as f64;
            let entry = EpochLog {
                stage: plan.stage,
                seed: plan.seed,
                epoch,
                loss: loss / denom,
                l_c: l_c / denom,
                l_m: (lm_n > 0).then(|| l_m / lm_n as f64),
                train_acc: correct as f64 / denom,
                steps,
                skipped_batches: skipped,
                wall_s: started.elapsed().as_secs_f64(),
            };
            log::info!(
                "{} epoch {epoch}: loss {:.4} acc {:.3}",
                plan.stage.name(),
                entry.loss,
                entry.train_acc
            );
            if let Some(p) = log_path {
                append_log(p, &entry)?;
            }
            logs.push(entry);
        }
        Ok(logs)
    }
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(entry).map_err(|e| Error::json(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_metric_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// Fresh model and parameters drawn from the seed's init stream.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Trained> {
    let mut store = ParamStore::new();
    let model = PredAnnModel::new(config, &mut store, &mut substream(seed, "init", &[]))?;
    Ok(Trained { model, store })
}

/// Model for pretraining against teacher `kind`.
pub fn pretrain_model(base: &ModelConfig, kind: TeacherKind, muq_dim: usize, seed: u64) -> Result<Trained> {
    let config = ModelConfig {
        teacher: Some(TeacherSpec::for_kind(kind, muq_dim)),
        ..base.clone()
    };
    init_model(config, seed)
}

/// Decoder-free model whose encoder and head come from `pretrained`.
pub fn finetune_model(pretrained: &Trained, seed: u64) -> Result<Trained> {
    let mut t = init_model(pretrained.model.config.without_decoder(), seed)?;
    t.store.load_from(&strip_decoder(&pretrained.store))?;
    Ok(t)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    plan: TrainPlan,
}

pub fn save_trained(stem: &Path, trained: &Trained, plan: &TrainPlan) -> Result<()> {
    let meta = serde_json::to_value(CheckpointMeta {
        config: trained.model.config.clone(),
        plan: plan.clone(),
    })
    .map_err(|e| Error::json(stem, e))?;
    let rng = RngState {
        root_seed: plan.seed,
        epoch: plan.epochs as u64,
        step: 0,
    };
    save_checkpoint(stem, &trained.store, rng, meta)
}

pub fn load_trained(stem: &Path) -> Result<(Trained, TrainPlan)> {
    let (store, manifest) = load_checkpoint(stem)?;
    let meta: CheckpointMeta =
        serde_json::from_value(manifest.meta).map_err(|e| Error::json(stem.with_extension("json"), e))?;
    let mut t = init_model(meta.config, meta.plan.seed)?;
    t.store.load_from(&store)?;
    Ok((t, meta.plan))
}

/// Where a stage writes its outputs.
pub fn stage_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(name), dir.join(format!("{name}.log.jsonl")))
}
