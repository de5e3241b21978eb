//! Validation inference, logit caches, ensembles and paired significance tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, WindowItem};
use crate::error::{Error, Result};
use crate::model::argmax;
use crate::nn::Graph;
use crate::par::{self, Execution};
use crate::rng::substream;
use crate::signal_prep::{sample_id, ExtractMode};
use crate::training::Trained;

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub model_tag: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub sample_id: String,
    pub label: usize,
    pub logits: Vec<f64>,
}

/// Per-sample class logits keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionCache {
    pub header: CacheHeader,
    pub entries: BTreeMap<String, (usize, Vec<f64>)>,
}

fn argmax64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl PredictionCache {
    pub fn new(model_tag: impl Into<String>, config_hash: impl Into<String>) -> Self {
        PredictionCache {
            header: CacheHeader {
                model_tag: model_tag.into(),
                config_hash: config_hash.into(),
            },
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, sample_id: String, label: usize, logits: Vec<f64>) -> Result<()> {
        if self.entries.insert(sample_id.clone(), (label, logits)).is_some() {
            return Err(Error::data(format!("duplicate sample id {sample_id}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prediction(&self, sample_id: &str) -> Option<usize> {
        self.entries.get(sample_id).map(|(_, l)| argmax64(l))
    }

    pub fn predictions(&self) -> BTreeMap<&str, usize> {
        self.entries
            .iter()
            .map(|(k, (_, l))| (k.as_str(), argmax64(l)))
            .collect()
    }

    /// One header line, then one JSON record per sample in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(&self.header).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        for (id, (label, logits)) in &self.entries {
            let e = CacheEntry {
                sample_id: id.clone(),
                label: *label,
                logits: logits.clone(),
            };
            text.push_str(&serde_json::to_string(&e).map_err(|e| Error::json(path, e))?);
            text.push('\n');
        }
        crate::io::write_bytes(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header: CacheHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::data(format!("{}: empty cache", path.display())))?,
        )
        .map_err(|e| Error::json(path, e))?;
        let mut cache = PredictionCache {
            header,
            entries: BTreeMap::new(),
        };
        for l in lines.filter(|l| !l.trim().is_empty()) {
            let e: CacheEntry = serde_json::from_str(l).map_err(|e| Error::json(path, e))?;
            cache.insert(e.sample_id, e.label, e.logits)?;
        }
        Ok(cache)
    }
}

/// Class logits for every item's centered segment.
pub fn evaluate_model(
    trained: &Trained,
    data: &Dataset,
    items: &[WindowItem],
    model_tag: &str,
    exec: Execution,
) -> Result<PredictionCache> {
    let rows = par::try_map(exec, items, |item| -> Result<(String, usize, Vec<f64>)> {
        // Center extraction draws nothing; the stream only satisfies the signature.
        let mut rng = substream(0, "eval", &[]);
        let seg = data.segment(item, ExtractMode::Eval, &mut rng)?;
        let mut g = Graph::new(&trained.store);
        let sv = trained.model.encode_segment(&mut g, &seg.values)?;
        let logits = trained.model.classify_eval(&mut g, sv.h_cls)?;
        let l = g.tape.value(logits).data();
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite logits for {}", seg.sample_id)));
        }
        Ok((seg.sample_id, item.label(), l.iter().map(|&v| v as f64).collect()))
    })?;
    let mut cache = PredictionCache::new(model_tag, config_hash(&trained.model.config));
    for (id, label, logits) in rows {
        cache.insert(id, label, logits)?;
    }
    Ok(cache)
}

/// Accuracy computed directly from the model, without a cache.
pub fn online_accuracy(trained: &Trained, data: &Dataset, items: &[WindowItem]) -> Result<f64> {
    let mut correct = 0;
    for item in items {
        let seg = data.segment(item, ExtractMode::Eval, &mut substream(0, "eval", &[]))?;
        debug_assert_eq!(seg.sample_id, sample_id(&item.excerpt.r#ref, item.window));
        let mut g = Graph::new(&trained.store);
        let sv = trained.model.encode_segment(&mut g, &seg.values)?;
        let logits = trained.model.classify_eval(&mut g, sv.h_cls)?;
        if argmax(g.tape.value(logits).data()) == item.label() {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len().max(1) as f64)
}

/// Equal-weight average of the members' softmax probabilities. The result
/// stores `ln p_ens` as logits, so its softmax is the ensemble distribution.
pub fn ensemble(caches: &[&PredictionCache], tag: &str) -> Result<PredictionCache> {
    let first = caches
        .first()
        .ok_or_else(|| Error::invalid("ensemble of no models"))?;
    for c in &caches[1..] {
        if c.entries.len() != first.entries.len() || c.entries.keys().ne(first.entries.keys()) {
            return Err(Error::data(format!(
                "caches {} and {} cover different samples",
                first.header.model_tag, c.header.model_tag
            )));
        }
    }
    let hashes: Vec<&str> = caches.iter().map(|c| c.header.config_hash.as_str()).collect();
    let mut out = PredictionCache::new(tag, config_hash(&hashes));
    let k = caches.len() as f64;
    for (id, (label, _)) in &first.entries {
        let mut mean: Vec<f64> = Vec::new();
        for c in caches {
            let (l2, logits) = &c.entries[id];
            if l2 != label {
                return Err(Error::data(format!("caches disagree on the label of {id}")));
            }
            let p = softmax64(logits);
            if mean.is_empty() {
                mean = vec![0.0; p.len()];
            }
            if p.len() != mean.len() {
                return Err(Error::data(format!("caches disagree on class count for {id}")));
            }
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / k;
            }
        }
        out.insert(id.clone(), *label, mean.iter().map(|p| p.ln()).collect())?;
    }
    Ok(out)
}

/// Ensemble class distribution of one sample.
pub fn ensemble_probs(cache: &PredictionCache, sample_id: &str) -> Option<Vec<f64>> {
    cache.entries.get(sample_id).map(|(_, l)| softmax64(l))
}

pub fn accuracy(cache: &PredictionCache) -> f64 {
    if cache.is_empty() {
        return 0.0;
    }
    let correct = cache
        .entries
        .values()
        .filter(|(label, l)| argmax64(l) == *label)
        .count();
    correct as f64 / cache.len() as f64
}

/// Counts over shared samples: both correct, only A, only B, neither.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }
}

pub fn contingency(x: &PredictionCache, y: &PredictionCache) -> ContingencyTable {
    let mut t = ContingencyTable { a: 0, b: 0, c: 0, d: 0 };
    for (id, (label, lx)) in &x.entries {
        let Some((_, ly)) = y.entries.get(id) else {
            continue;
        };
        match (argmax64(lx) == *label, argmax64(ly) == *label) {
            (true, true) => t.a += 1,
            (true, false) => t.b += 1,
            (false, true) => t.c += 1,
            (false, false) => t.d += 1,
        }
    }
    t
}

/// `P(X ≤ k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_half_cdf(n: u64, k: u64) -> f64 {
    if k >= n {
        return 1.0;
    }
    if n <= 1000 {
        let mut pmf = 0.5f64.powi(n as i32);
        let mut sum = pmf;
        for i in 0..k {
            pmf = pmf * (n - i) as f64 / (i + 1) as f64;
            sum += pmf;
        }
        sum.min(1.0)
    } else {
        let nf = n as f64;
        let base = libm::lgamma(nf + 1.0) - nf * std::f64::consts::LN_2;
        let logs: Vec<f64> = (0..=k)
            .map(|i| base - libm::lgamma(i as f64 + 1.0) - libm::lgamma((n - i) as f64 + 1.0))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
            .exp()
            .min(1.0)
    }
}

/// Exact two-sided McNemar test on the discordant counts: twice the smaller
/// binomial tail, capped at 1.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    (2.0 * binomial_half_cdf(n, b.min(c))).min(1.0)
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_a: String,
    pub model_b: String,
    pub acc_a: f64,
    pub acc_b: f64,
    pub delta: f64,
    pub table: ContingencyTable,
    pub p_value: f64,
    pub stars: String,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub accuracies: Vec<(String, f64)>,
    pub rows: Vec<ComparisonRow>,
}

/// Accuracy of every cache plus a McNemar row for each `(a, b)` index pair.
pub fn comparison_report(caches: &[&PredictionCache], pairs: &[(usize, usize)]) -> Result<ComparisonReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let (x, y) = match (caches.get(i), caches.get(j)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::invalid(format!("comparison pair ({i}, {j}) out of range"))),
        };
        let table = contingency(x, y);
        let p = mcnemar_exact(table.b, table.c);
        let (acc_a, acc_b) = (accuracy(x), accuracy(y));
        rows.push(ComparisonRow {
            model_a: x.header.model_tag.clone(),
            model_b: y.header.model_tag.clone(),
            acc_a,
            acc_b,
            delta: acc_a - acc_b,
            table,
            p_value: p,
            stars: significance_stars(p).to_string(),
            significant: p < 0.05,
        });
    }
    Ok(ComparisonReport {
        accuracies: caches
            .iter()
            .map(|c| (c.header.model_tag.clone(), accuracy(c)))
            .collect(),
        rows,
    })
}

impl ComparisonReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = self
            .accuracies
            .iter()
            .map(|(t, _)| t.len())
            .chain(self.rows.iter().flat_map(|r| [r.model_a.len(), r.model_b.len()]))
            .max()
            .unwrap_or(5)
            .max(5);
        let _ = writeln!(s, "{:<w$}  {:>8}", "model", "accuracy");
        for (t, a) in &self.accuracies {
            let _ = writeln!(s, "{t:<w$}  {a:>8.4}");
        }
        if !self.rows.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "{:<w$}  {:<w$}  {:>8}  {:>5}  {:>5}  {:>10}  sig",
                "model A", "model B", "delta", "b", "c", "p"
            );
            for r in &self.rows {
                let _ = writeln!(
                    s,
                    "{:<w$}  {:<w$}  {:>+8.4}  {:>5}  {:>5}  {:>10.3e}  {}",
                    r.model_a, r.model_b, r.delta, r.table.b, r.table.c, r.p_value, r.stars
                );
            }
        }
        s
    }

    /// Writes `<stem>.txt` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        crate::io::write_bytes(&stem.with_extension("txt"), self.to_text().as_bytes())?;
        crate::io::write_json(&stem.with_extension("json"), self)
    }
}
