//! Global quantile binning of continuous teacher values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::signal_prep::quantile_sorted;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Muq,
    Surprisal,
    Entropy,
}

impl TeacherKind {
    pub const ALL: [TeacherKind; 3] = [TeacherKind::Muq, TeacherKind::Surprisal, TeacherKind::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::Muq => "muq",
            TeacherKind::Surprisal => "surprisal",
            TeacherKind::Entropy => "entropy",
        }
    }

    pub fn frame_rate_hz(self) -> f64 {
        match self {
            TeacherKind::Muq => 25.0,
            _ => 50.0,
        }
    }

    /// Frames covering one 3-s segment.
    pub fn segment_frames(self) -> usize {
        match self {
            TeacherKind::Muq => 75,
            _ => 150,
        }
    }
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "muq" => Ok(TeacherKind::Muq),
            "surprisal" => Ok(TeacherKind::Surprisal),
            "entropy" => Ok(TeacherKind::Entropy),
            _ => Err(Error::invalid(format!("unknown teacher kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBins {
    /// `bins + 1` non-decreasing edges; first and last are the pool min and max.
    pub edges: Vec<f64>,
    pub feature: TeacherKind,
}

/// Edges at the `k / bins` linear-interpolation quantiles of `values`.
pub fn fit_quantile_bins(values: &[f64], bins: usize, feature: TeacherKind) -> Result<QuantileBins> {
    if values.is_empty() {
        return Err(Error::invalid("cannot fit quantile bins to an empty pool"));
    }
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite value in quantile pool"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges = (0..=bins)
        .map(|k| quantile_sorted(&sorted, k as f64 / bins as f64))
        .collect();
    Ok(QuantileBins { edges, feature })
}

impl QuantileBins {
    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Largest `b` with `edges[b] <= value`, clamped to `[0, bins - 1]`.
    pub fn discretize(&self, value: f64) -> usize {
        let at_or_below = self.edges.partition_point(|&e| e <= value);
        at_or_below.saturating_sub(1).min(self.bins() - 1)
    }

    pub fn discretize_all(&self, values: &[f64]) -> Vec<u8> {
        values.iter().map(|&v| self.discretize(v) as u8).collect()
    }

    /// Writes `<stem>.bin` (edges as f32) and `<stem>.json`, which also keeps
    /// the full-precision edges used for discretization.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let f: Vec<f32> = self.edges.iter().map(|&e| e as f32).collect();
        io::write_f32(&stem.with_extension("bin"), &f)?;
        io::write_json(&stem.with_extension("json"), self)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bins: QuantileBins = io::read_json(&stem.with_extension("json"))?;
        if bins.edges.len() < 2 || bins.edges.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::data("quantile edges must be at least two non-decreasing values"));
        }
        Ok(bins)
    }
}
