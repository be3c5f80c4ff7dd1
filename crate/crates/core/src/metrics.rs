//! Sørensen–Dice scoring and median/min/max summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel is foreground iff `p >= threshold`.
pub fn binarize(prob: &Grid, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let data = prob
        .data()
        .iter()
        .map(|&p| (p >= threshold) as u8)
        .collect();
    Mask::new(prob.height(), prob.width(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceScore {
    pub value: f64,
    /// Both masks were empty; `value` is 1 by convention.
    pub both_empty: bool,
}

/// `2|X ∩ Y| / (|X| + |Y|)`.
pub fn dice(x: &Mask, y: &Mask) -> Result<DiceScore> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!(
            "dice: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        inter += (a & b) as usize;
        total += (a + b) as usize;
    }
    Ok(if total == 0 {
        DiceScore {
            value: 1.0,
            both_empty: true,
        }
    } else {
        DiceScore {
            value: 2.0 * inter as f64 / total as f64,
            both_empty: false,
        }
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub name: String,
    pub param_count: usize,
}

impl ModelMeta {
    pub fn new(name: impl Into<String>, param_count: usize) -> Self {
        ModelMeta {
            name: name.into(),
            param_count,
        }
    }
}

/// One row of a Model / Size / Median / Min / Max table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub model: String,
    pub param_count: usize,
    pub scores: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-image Dice summary.
pub type DiceResult = ScoreSummary;

/// Median uses the lower-middle element for even counts so it is always an
/// observed score.
pub fn summarize(scores: &[f64], meta: ModelMeta) -> Result<ScoreSummary> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot summarize an empty score list".into(),
        ));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score list".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ScoreSummary {
        model: meta.name,
        param_count: meta.param_count,
        scores: scores.to_vec(),
        median: sorted[(sorted.len() - 1) / 2],
        min: sorted[0],
        max: sorted[sorted.len() - 1],
    })
}

/// Mean score per group, in ascending group order.
pub fn group_means(scores: &[f64], groups: &[u32]) -> Result<Vec<(u32, f64)>> {
    if scores.len() != groups.len() {
        return Err(Error::Shape("one group label per score is required".into()));
    }
    let mut acc: std::collections::BTreeMap<u32, (f64, usize)> = Default::default();
    for (&s, &g) in scores.iter().zip(groups) {
        let e = acc.entry(g).or_default();
        e.0 += s;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(g, (s, n))| (g, s / n as f64))
        .collect())
}
