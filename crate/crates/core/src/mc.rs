//! Monte-Carlo dropout sampling and per-pixel uncertainty.
//!
//! With `T` sampled foreground probabilities `p_t` at a pixel and the binary
//! entropy `H(p) = -(p ln p + (1-p) ln(1-p))`:
//!
//! * predictive entropy `U = H(mean_t p_t)`
//! * aleatoric uncertainty `A = mean_t H(p_t)`, the Monte Carlo estimate of the
//!   expected entropy under the approximate posterior
//! * epistemic uncertainty `U - A`, non-negative by concavity of `H`
//!
//! All quantities are in nats. Sample probabilities are clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` once, when an [`McPrediction`] is assembled, so
//! that every derived map is computed from the same values.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::PROB_EPS;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::layers::Mode;
use crate::metrics::{summarize, ModelMeta, ScoreSummary};
use crate::rng::{derive_stream, Stream};
use crate::tensor::Tensor;
use crate::unet::ModelGraph;

pub const DEFAULT_SAMPLES: usize = 20;

/// Samples evaluated per batched forward pass.
const SAMPLE_CHUNK: usize = 8;

/// Stream-path tag for Monte Carlo sampling.
const MC_STREAM: u64 = 0x4d43;

/// Binary entropy in nats with the probability clamped to `[ε, 1-ε]`.
///
/// Computed from the larger class probability so `U(p) == U(1-p)` holds
/// bit-for-bit.
pub fn binary_entropy(p: f64) -> f64 {
    let a = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let hi = a.max(1.0 - a);
    let lo = 1.0 - hi;
    (-(hi * hi.ln() + lo * lo.ln())).clamp(0.0, LN_2)
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Elementwise binary entropy of a probability map.
pub fn pixel_entropy(p: &Grid) -> Grid {
    p.map(binary_entropy)
}

fn check_stack(samples: &[Grid]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one sample is required".into()))?;
    if samples.iter().any(|s| s.dims() != first.dims()) {
        return Err(Error::Shape("samples must share H×W".into()));
    }
    Ok(first.dims())
}

/// Per-pixel running mean of `f(sample)`. The incremental form returns `x`
/// exactly when every sample is `x`, which keeps epistemic at exactly zero
/// for identical samples.
fn running_mean(samples: &[Grid], f: impl Fn(f64) -> f64) -> Result<Grid> {
    let (h, w) = check_stack(samples)?;
    let mut acc = vec![0.0; h * w];
    for (k, s) in samples.iter().enumerate() {
        let n = (k + 1) as f64;
        acc.iter_mut()
            .zip(s.data())
            .for_each(|(a, &p)| *a += (f(p) - *a) / n);
    }
    Grid::new(h, w, acc)
}

/// Elementwise mean of the clamped samples.
pub fn mean_probability(samples: &[Grid]) -> Result<Grid> {
    running_mean(samples, clamp_prob)
}

/// Entropy of the mean prediction.
pub fn predictive_entropy(samples: &[Grid]) -> Result<Grid> {
    Ok(pixel_entropy(&mean_probability(samples)?))
}

/// Mean per-sample entropy map and its pixel average.
pub fn aleatoric_uncertainty(samples: &[Grid]) -> Result<(Grid, f64)> {
    let map = running_mean(samples, binary_entropy)?;
    let scalar = map.mean();
    Ok((map, scalar))
}

/// `entropy_map - aleatoric_map`, floored at zero.
pub fn epistemic_uncertainty(pred: &McPrediction) -> Grid {
    let data = pred
        .entropy_map
        .data()
        .iter()
        .zip(pred.aleatoric_map.data())
        .map(|(u, a)| (u - a).max(0.0))
        .collect();
    Grid::new(pred.entropy_map.height(), pred.entropy_map.width(), data).expect("same extent")
}

/// Runs `t` forward passes in MC-active mode. Sample `s` draws its dropout
/// masks from the stream derived from `(seed, s)`, so results are independent
/// of chunking and thread count.
pub fn mc_sample(model: &ModelGraph, image: &Tensor, t: usize, seed: u64) -> Result<Vec<Grid>> {
    if t == 0 {
        return Err(Error::InvalidArgument(
            "sample count T must be at least 1".into(),
        ));
    }
    let single = match image.shape() {
        [_, _, _] => {
            image
                .clone()
                .reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?
        }
        [1, _, _, _] => image.clone(),
        s => return Err(Error::Shape(format!("expected one C×H×W image, got {s:?}"))),
    };
    model.check_input(single.shape())?;
    let mut out = Vec::with_capacity(t);
    let mut start = 0;
    while start < t {
        let end = (start + SAMPLE_CHUNK).min(t);
        let copies: Vec<Tensor> = (start..end).map(|_| single.clone()).collect();
        let batch = Tensor::stack(&copies)?;
        let mut streams: Vec<Stream> = (start..end)
            .map(|s| derive_stream(seed, &[MC_STREAM, s as u64]))
            .collect();
        let probs = model.forward_seg(&batch, Mode::McActive, &mut streams)?;
        for i in 0..end - start {
            out.push(Grid::from_tensor(&probs.batch_item(i)?)?);
        }
        start = end;
    }
    Ok(out)
}

/// Sampled maps plus every derived uncertainty map for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    /// Clamped sample probabilities.
    pub samples: Vec<Grid>,
    pub mean_prob: Grid,
    pub entropy_map: Grid,
    pub aleatoric_map: Grid,
    pub epistemic_map: Grid,
    pub t: usize,
    pub seed: u64,
}

impl McPrediction {
    pub fn from_samples(samples: Vec<Grid>, seed: u64) -> Result<Self> {
        check_stack(&samples)?;
        let samples: Vec<Grid> = samples.iter().map(|s| s.map(clamp_prob)).collect();
        let mean_prob = mean_probability(&samples)?;
        let entropy_map = pixel_entropy(&mean_prob);
        let (aleatoric_map, _) = aleatoric_uncertainty(&samples)?;
        let t = samples.len();
        let mut pred = McPrediction {
            epistemic_map: entropy_map.clone(),
            samples,
            mean_prob,
            entropy_map,
            aleatoric_map,
            t,
            seed,
        };
        pred.epistemic_map = epistemic_uncertainty(&pred);
        Ok(pred)
    }

    pub fn predict(model: &ModelGraph, image: &Tensor, t: usize, seed: u64) -> Result<Self> {
        Self::from_samples(mc_sample(model, image, t, seed)?, seed)
    }

    pub fn aleatoric_score(&self) -> f64 {
        self.aleatoric_map.mean()
    }

    /// Image-level uncertainty under the given reduction.
    pub fn uncertainty_score(&self, reduction: UncertaintyReduction, threshold: f64) -> f64 {
        match reduction {
            UncertaintyReduction::PixelMean => self.aleatoric_score(),
            UncertaintyReduction::PredictedForegroundMean => {
                let (sum, n) = self
                    .aleatoric_map
                    .data()
                    .iter()
                    .zip(self.mean_prob.data())
                    .filter(|(_, &p)| p >= threshold)
                    .fold((0.0, 0usize), |(s, n), (&a, _)| (s + a, n + 1));
                if n == 0 {
                    0.0
                } else {
                    sum / n as f64
                }
            }
        }
    }

    pub fn record(&self) -> PredictionRecord {
        PredictionRecord {
            samples: self.t,
            seed: self.seed,
            height: self.mean_prob.height(),
            width: self.mean_prob.width(),
            mean_probability: self.mean_prob.mean(),
            mean_entropy: self.entropy_map.mean(),
            mean_aleatoric: self.aleatoric_map.mean(),
            mean_epistemic: self.epistemic_map.mean(),
            max_entropy: self.entropy_map.data().iter().cloned().fold(0.0, f64::max),
        }
    }
}

/// Metadata written next to exported prediction maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub samples: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub mean_probability: f64,
    pub mean_entropy: f64,
    pub mean_aleatoric: f64,
    pub mean_epistemic: f64,
    pub max_entropy: f64,
}

/// How a per-pixel aleatoric map is reduced to one image-level number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyReduction {
    #[default]
    PixelMean,
    /// Mean over pixels whose mean probability reaches the threshold; 0 when
    /// no pixel does.
    PredictedForegroundMean,
}

/// Median/min/max of per-image uncertainty scores.
pub fn model_uncertainty_score(
    predictions: &[McPrediction],
    reduction: UncertaintyReduction,
    threshold: f64,
    meta: ModelMeta,
) -> Result<ScoreSummary> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to summarize".into()));
    }
    let scores: Vec<f64> = predictions
        .iter()
        .map(|p| p.uncertainty_score(reduction, threshold))
        .collect();
    summarize(&scores, meta)
}
