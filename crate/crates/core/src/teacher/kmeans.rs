//! K-means codebook for tokenizing frame embeddings.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::par::{self, Execution};
use crate::rng::substream;

const BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    /// Stop once the L2 norm of the total centroid shift falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 128,
            seed: 0,
            restarts: 10,
            tol: 1e-6,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansMeta {
    pub k: usize,
    pub dim: usize,
    pub init: String,
    pub restarts: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub inertia: f64,
    pub best_restart: usize,
    pub iterations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansCodebook {
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    pub meta: KMeansMeta,
}

struct Run {
    centroids: Vec<f64>,
    inertia: f64,
    iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance for every point.
fn assign_all(points: &[f64], centroids: &[f64], dim: usize, exec: Execution) -> Vec<(usize, f64)> {
    let n = points.len() / dim;
    let blocks = n.div_ceil(BLOCK);
    par::map_range(exec, blocks, |b| {
        let end = ((b + 1) * BLOCK).min(n);
        (b * BLOCK..end)
            .map(|i| nearest(&points[i * dim..(i + 1) * dim], centroids, dim))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Greedy k-means++ seeding: each new center is the best of `2 + ln k`
/// D²-weighted candidates by resulting potential.
fn seed_plus_plus(
    points: &[f64],
    dim: usize,
    k: usize,
    rng: &mut impl Rng,
    exec: Execution,
) -> Vec<f64> {
    let n = points.len() / dim;
    let trials = 2 + (k as f64).ln().floor() as usize;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(point(first));
    let mut closest: Vec<f64> = par::map_range(exec, n, |i| sq_dist(point(i), point(first)));
    let mut potential: f64 = closest.iter().sum();
    for _ in 1..k {
        let candidates: Vec<usize> = (0..trials)
            .map(|_| {
                if potential <= 0.0 {
                    return rng.random_range(0..n);
                }
                let target = rng.random::<f64>() * potential;
                let mut acc = 0.0;
                for (i, d) in closest.iter().enumerate() {
                    acc += d;
                    if acc > target {
                        return i;
                    }
                }
                n - 1
            })
            .collect();
        let scored = par::map(exec, &candidates, |&c| {
            let upd: Vec<f64> = closest
                .iter()
                .enumerate()
                .map(|(i, &d)| d.min(sq_dist(point(i), point(c))))
                .collect();
            let pot: f64 = upd.iter().sum();
            (pot, upd)
        });
        let mut best = 0;
        for (j, s) in scored.iter().enumerate() {
            if s.0 < scored[best].0 {
                best = j;
            }
        }
        centers.extend_from_slice(point(candidates[best]));
        let (pot, upd) = scored.into_iter().nth(best).unwrap();
        potential = pot;
        closest = upd;
    }
    centers
}

fn lloyd(points: &[f64], dim: usize, cfg: &KMeansConfig, restart: usize, exec: Execution) -> Run {
    let n = points.len() / dim;
    let k = cfg.k;
    let mut rng = substream(cfg.seed, "kmeans", &[restart as u64]);
    let mut centroids = seed_plus_plus(points, dim, k, &mut rng, exec);
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let labels = assign_all(points, &centroids, dim, exec);
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, p) in sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&points[i * dim..(i + 1) * dim])
            {
                *s += p;
            }
        }
        let mut next = centroids.clone();
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            // Farthest points first; ties resolved by index.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| labels[b].1.total_cmp(&labels[a].1).then(a.cmp(&b)));
            for (&c, &i) in empty.iter().zip(&order) {
                next[c * dim..(c + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in next[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }
        let shift = sq_dist(&next, &centroids).sqrt();
        centroids = next;
        if shift < cfg.tol && empty.is_empty() {
            break;
        }
    }
    let labels: Vec<usize> = assign_all(points, &centroids, dim, exec).iter().map(|&(c, _)| c).collect();
    let centroids = hartigan(points, dim, k, labels, centroids, cfg.max_iter);
    let inertia = assign_all(points, &centroids, dim, exec)
        .iter()
        .map(|&(_, d)| d)
        .sum();
    Run {
        centroids,
        inertia,
        iterations,
    }
}

/// Single-point transfers that lower the inertia, applied until none is left.
/// Lloyd fixed points can still be one move away from a better partition.
fn hartigan(
    points: &[f64],
    dim: usize,
    k: usize,
    mut labels: Vec<usize>,
    init: Vec<f64>,
    max_passes: usize,
) -> Vec<f64> {
    let n = labels.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k * dim];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, p) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
            *s += p;
        }
    }
    let mut means = init;
    let refresh = |means: &mut [f64], sums: &[f64], counts: &[usize], c: usize| {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (m, s) in means[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *m = s * inv;
            }
        }
    };
    for c in 0..k {
        refresh(&mut means, &sums, &counts, c);
    }
    for _ in 0..max_passes {
        let mut moved = false;
        for i in 0..n {
            let a = labels[i];
            if counts[a] < 2 {
                continue;
            }
            let x = &points[i * dim..(i + 1) * dim];
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * sq_dist(x, &means[a * dim..(a + 1) * dim]);
            let mut best = (a, remove);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let add = nb / (nb + 1.0) * sq_dist(x, &means[b * dim..(b + 1) * dim]);
                if add < best.1 {
                    best = (b, add);
                }
            }
            let (b, add) = best;
            if b == a || remove - add <= 1e-12 * (1.0 + remove) {
                continue;
            }
            for d in 0..dim {
                sums[a * dim + d] -= x[d];
                sums[b * dim + d] += x[d];
            }
            counts[a] -= 1;
            counts[b] += 1;
            labels[i] = b;
            refresh(&mut means, &sums, &counts, a);
            refresh(&mut means, &sums, &counts, b);
            moved = true;
        }
        if !moved {
            break;
        }
    }
    means
}

/// Fits `cfg.k` centroids to `data` (`n × dim`, row-major). Each restart is
/// seeded from its own stream; the lowest-inertia restart wins, ties to the
/// earliest.
pub fn fit_kmeans(data: &[f32], dim: usize, cfg: &KMeansConfig, exec: Execution) -> Result<KMeansCodebook> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::shape(format!(
            "{} values do not form rows of dimension {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if cfg.k == 0 || n < cfg.k {
        return Err(Error::invalid(format!(
            "k-means needs at least k={} points, got {n}",
            cfg.k
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::invalid("k-means needs at least one restart"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite embedding value"));
    }
    let points: Vec<f64> = data.iter().map(|&v| v as f64).collect();
    let runs: Vec<Run> = par::map_range(exec, cfg.restarts, |r| lloyd(&points, dim, cfg, r, exec));
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.inertia < runs[best].inertia {
            best = i;
        }
    }
    let meta = KMeansMeta {
        k: cfg.k,
        dim,
        init: "k-means++".into(),
        restarts: cfg.restarts,
        seed: cfg.seed,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        inertia: runs[best].inertia,
        best_restart: best,
        iterations: runs.iter().map(|r| r.iterations).collect(),
    };
    Ok(KMeansCodebook {
        centroids: runs[best].centroids.iter().map(|&v| v as f32).collect(),
        meta,
    })
}

impl KMeansCodebook {
    pub fn from_centroids(centroids: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::shape("centroid table is not k × dim"));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite centroid"));
        }
        let k = centroids.len() / dim;
        Ok(KMeansCodebook {
            centroids,
            meta: KMeansMeta {
                k,
                dim,
                init: "given".into(),
                restarts: 0,
                seed: 0,
                tol: 0.0,
                max_iter: 0,
                inertia: f64::NAN,
                best_restart: 0,
                iterations: Vec::new(),
            },
        })
    }

    pub fn k(&self) -> usize {
        self.meta.k
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn centroid(&self, k: usize) -> &[f32] {
        &self.centroids[k * self.dim()..(k + 1) * self.dim()]
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, frame: &[f32]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.k() {
            let d: f64 = frame
                .iter()
                .zip(self.centroid(k))
                .map(|(&a, &b)| {
                    let t = a as f64 - b as f64;
                    t * t
                })
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Tokens for `frames` (`n × dim`, row-major).
    pub fn assign_tokens(&self, frames: &[f32], exec: Execution) -> Result<Vec<u32>> {
        let dim = self.dim();
        if !frames.len().is_multiple_of(dim) {
            return Err(Error::shape(format!(
                "{} values do not form frames of dimension {dim}",
                frames.len()
            )));
        }
        let rows: Vec<&[f32]> = frames.chunks_exact(dim).collect();
        Ok(par::map(exec, &rows, |f| self.nearest(f) as u32))
    }

    /// Writes `<stem>.bin` (f32 centroids) and `<stem>.json` (fit metadata).
    pub fn save(&self, stem: &Path) -> Result<()> {
        io::write_f32(&stem.with_extension("bin"), &self.centroids)?;
        io::write_json(&stem.with_extension("json"), &self.meta)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let meta: KMeansMeta = io::read_json(&stem.with_extension("json"))?;
        let centroids = io::read_f32(&stem.with_extension("bin"))?;
        if centroids.len() != meta.k * meta.dim {
            return Err(Error::data(format!(
                "codebook has {} values, metadata says {}×{}",
                centroids.len(),
                meta.k,
                meta.dim
            )));
        }
        Ok(KMeansCodebook { centroids, meta })
    }
}
