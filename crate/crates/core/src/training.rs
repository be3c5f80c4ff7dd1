//! BCE loss, Adam, flip/rotate augmentation, early stopping and the training
//! loop.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, PROB_EPS};
use crate::data::{SegDataset, SegItem, Split};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::layers::Mode;
use crate::metrics::{binarize, dice, DEFAULT_THRESHOLD};
use crate::rng::{derive_stream, Stream};
use crate::tensor::Tensor;
use crate::unet::ModelGraph;

use rand::seq::SliceRandom;

const SHUFFLE_STREAM: u64 = 0x5348;
const DROPOUT_STREAM: u64 = 0x4450;

fn check_binary(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument(format!("{what} must be binary")));
    }
    Ok(())
}

/// Mean binary cross-entropy of clamped probabilities against a binary target.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Shape(format!(
            "bce: prediction {:?} vs target {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    check_binary(tape.value(target).data(), "bce target")?;
    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)?;
    let ln_p = tape.ln(p)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let ln_q = tape.ln(q)?;
    let y_not = tape.affine(target, -1.0, 1.0)?;
    let pos = tape.mul(target, ln_p)?;
    let neg = tape.mul(y_not, ln_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll)?;
    tape.affine(mean, -1.0, 0.0)
}

/// Plain-value counterpart of [`bce_loss`].
pub fn bce_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "bce: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    check_binary(target, "bce target")?;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient λ; `λ·w` is added to each gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Vec<f64>> = params.into_iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            v: zeros.clone(),
            m: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::Shape(format!(
                "adam: parameter {i} has mismatched gradient length"
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] + cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Remaps every pixel: output `(r, c)` takes input `src(r, c)`.
fn remap_image(image: &Tensor, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for c in 0..ch {
        for r in 0..h {
            for col in 0..w {
                let (sr, sc) = src(r, col);
                out[(c * h + r) * w + col] = d[(c * h + sr) * w + sc];
            }
        }
    }
    Tensor::new(image.shape(), out).expect("same shape")
}

fn remap_mask(mask: &Mask, src: impl Fn(usize, usize) -> (usize, usize)) -> Mask {
    let (h, w) = mask.dims();
    let mut out = Mask::zeros(h, w).expect("non-empty");
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = src(r, c);
            out.set(r, c, mask.get(sr, sc));
        }
    }
    out
}

fn transformed(
    item: &SegItem,
    suffix: &str,
    src: impl Fn(usize, usize) -> (usize, usize) + Copy,
) -> SegItem {
    SegItem {
        stem: format!("{}_{suffix}", item.stem),
        image: remap_image(&item.image, src),
        mask: remap_mask(&item.mask, src),
        group: item.group,
        split: item.split,
        synth: None,
    }
}

/// Appends a horizontal flip and a 90° counter-clockwise rotation of every
/// pair, in that order, after the originals. Images must be square.
pub fn augment(dataset: &SegDataset) -> Result<SegDataset> {
    let (h, w) = (dataset.height, dataset.width);
    if h != w {
        return Err(Error::Data(format!(
            "rotation needs square images, got {h}×{w}"
        )));
    }
    let mut items = dataset.items.clone();
    items.extend(
        dataset
            .items
            .iter()
            .map(|it| transformed(it, "flip", |r, c| (r, w - 1 - c))),
    );
    items.extend(
        dataset
            .items
            .iter()
            .map(|it| transformed(it, "rot90", |r, c| (c, w - 1 - r))),
    );
    SegDataset::new(items)
}

/// Stops once `patience` epochs pass without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config(
                "early-stop patience must be at least 1".into(),
            ));
        }
        Ok(EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        })
    }

    /// Records `metric` (higher is better) for `epoch`; returns whether it
    /// is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            early_stop_patience: 10,
            augment: true,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config(
                "epochs, batch_size and patience must be at least 1".into(),
            ));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
            || self.weight_decay < 0.0
        {
            return Err(Error::Config(
                "learning rate and eps must be positive, weight decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_dice\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_dice
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    /// Parameters and running statistics from the best validation epoch.
    pub model: ModelGraph,
    pub history: TrainHistory,
}

fn stack_images(items: &[&SegItem]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = items
        .iter()
        .map(|it| {
            let s = it.image.shape();
            it.image.clone().reshape(&[1, s[0], s[1], s[2]])
        })
        .collect::<Result<_>>()?;
    let masks: Vec<Tensor> = items
        .iter()
        .map(|it| {
            let (h, w) = it.mask.dims();
            it.mask.to_tensor().reshape(&[1, 1, h, w])
        })
        .collect::<Result<_>>()?;
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Mean BCE and mean Dice of inference-mode predictions.
pub fn evaluate_split(
    model: &ModelGraph,
    items: &[&SegItem],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let (mut loss, mut dice_sum) = (0.0, 0.0);
    for chunk in items.chunks(batch_size.max(1)) {
        let (x, y) = stack_images(chunk)?;
        let probs = model.forward_seg(&x, Mode::Inference, &mut [])?;
        loss += bce_value(probs.data(), y.data())? * chunk.len() as f64;
        for (i, item) in chunk.iter().enumerate() {
            let grid = Grid::from_tensor(&probs.batch_item(i)?)?;
            dice_sum += dice(&binarize(&grid, DEFAULT_THRESHOLD)?, &item.mask)?.value;
        }
    }
    let n = items.len() as f64;
    Ok((loss / n, dice_sum / n))
}

/// One optimizer step on a minibatch; returns the batch loss.
pub fn train_step(
    model: &mut ModelGraph,
    state: &mut AdamState,
    adam: &AdamConfig,
    x: &Tensor,
    y: &Tensor,
    streams: &mut [Stream],
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let yv = tape.leaf(y.clone());
    let pass = model.forward(&mut tape, xv, Mode::Train, streams, true)?;
    let loss = bce_loss(&mut tape, pass.output, yv)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = pass
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    drop(tape);
    adam_step(&mut model.params_mut(), &grads, state, adam)?;
    model.apply_batch_stats(&pass.batch_stats)?;
    Ok(value)
}

/// Trains on the `Train` split and early-stops on mean validation Dice.
/// `on_epoch` sees every record as it is produced.
pub fn train(
    mut model: ModelGraph,
    data: &SegDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check_group_isolation()?;
    let train_base = SegDataset::new(data.subset(Split::Train).into_iter().cloned().collect())
        .map_err(|_| Error::Data("train split is empty".into()))?;
    let val: Vec<&SegItem> = data.subset(Split::Val);
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let train_set = if cfg.augment {
        augment(&train_base)?
    } else {
        train_base
    };

    let adam = cfg.adam();
    let mut state = AdamState::new(model.params());
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience)?;
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut derive_stream(
            cfg.seed,
            &[SHUFFLE_STREAM, epoch as u64],
        ));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&SegItem> = idx.iter().map(|&i| &train_set.items[i]).collect();
            let (x, y) = stack_images(&items)?;
            let mut streams: Vec<Stream> = (0..items.len())
                .map(|k| {
                    derive_stream(
                        cfg.seed,
                        &[DROPOUT_STREAM, epoch as u64, b as u64, k as u64],
                    )
                })
                .collect();
            let loss = match train_step(&mut model, &mut state, &adam, &x, &y, &mut streams) {
                Ok(l) => l,
                Err(e) if e.is_numeric() => {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            loss_sum += loss * items.len() as f64;
        }
        let (val_loss, val_dice) = evaluate_split(&model, &val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_dice,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if stopper.observe(epoch, val_dice) {
            best = model.clone();
        }
        history.stopped_epoch = epoch;
        if stopper.should_stop() {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok(TrainOutcome {
        model: best,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split, SynthConfig};
    use crate::unet::{build_unet, UNetConfig};

    fn bce_of(p: &[f64], y: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::new(&[p.len()], p.to_vec()).unwrap());
        let yv = tape.leaf(Tensor::new(&[y.len()], y.to_vec()).unwrap());
        let l = bce_loss(&mut tape, pv, yv).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_of(&[0.5; 4], &[0.0, 1.0, 1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_of(&[0.8], &[1.0]) - 0.223_143_551_314_209_7).abs() < 1e-12);
        let perfect = bce_of(&[0.0, 1.0], &[0.0, 1.0]);
        assert!(perfect >= 0.0 && perfect <= -(1.0f64 - 1e-7).ln() + 1e-18);
        assert_eq!(
            bce_value(&[0.3, 0.9], &[0.0, 1.0]).unwrap(),
            bce_of(&[0.3, 0.9], &[0.0, 1.0])
        );
    }

    #[test]
    fn bce_errors() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(&[2], vec![0.3, 0.4]).unwrap());
        let y = tape.leaf(Tensor::new(&[2], vec![0.5, 1.0]).unwrap());
        assert!(bce_loss(&mut tape, p, y).is_err());
        let y3 = tape.leaf(Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap());
        assert!(bce_loss(&mut tape, p, y3).is_err());
    }

    fn scalar_adam(g: impl Fn(f64) -> f64, w0: f64, steps: usize, c: &AdamConfig) -> Vec<f64> {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let grad = g(w) + c.weight_decay * w;
            m = c.beta1 * m + (1.0 - c.beta1) * grad;
            v = c.beta2 * v + (1.0 - c.beta2) * grad * grad;
            let mh = m / (1.0 - c.beta1.powi(t as i32));
            let vh = v / (1.0 - c.beta2.powi(t as i32));
            w -= c.learning_rate * mh / (vh.sqrt() + c.eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut w = Tensor::new(&[3], vec![0.5, -0.2, 1.0]).unwrap();
        let mut st = AdamState::new([&w]);
        adam_step(&mut [&mut w], &[vec![0.0; 3]], &mut st, &cfg).unwrap();
        assert_eq!(w.data(), &[0.5, -0.2, 1.0]);

        let mut w = Tensor::scalar(2.0);
        let mut st = AdamState::new([&w]);
        adam_step(&mut [&mut w], &[vec![1.0]], &mut st, &cfg).unwrap();
        assert!((w.item() - (2.0 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_scalar_oracle_on_quadratic() {
        for cfg in [
            AdamConfig::default(),
            AdamConfig {
                weight_decay: 0.05,
                ..AdamConfig::default()
            },
        ] {
            let expected = scalar_adam(|w| 2.0 * w, 1.5, 5, &cfg);
            let mut w = Tensor::scalar(1.5);
            let mut st = AdamState::new([&w]);
            for e in expected {
                let g = 2.0 * w.item();
                adam_step(&mut [&mut w], &[vec![g]], &mut st, &cfg).unwrap();
                assert!((w.item() - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut w = Tensor::scalar(1.0);
        let mut st = AdamState::new([&w]);
        let err = adam_step(
            &mut [&mut w],
            &[vec![f64::NAN]],
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn weight_decay_adds_lambda_w() {
        // the decayed gradient differs from the plain one by exactly λ·w
        let cfg = AdamConfig {
            weight_decay: 0.3,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            learning_rate: 1.0,
        };
        let mut w = Tensor::scalar(2.0);
        let mut st = AdamState::new([&w]);
        adam_step(&mut [&mut w], &[vec![0.4]], &mut st, &cfg).unwrap();
        assert_eq!(st.m[0][0] - 0.4, 0.3 * 2.0);
    }

    fn toy(count: usize) -> SegDataset {
        let mut ds = generate_synthetic(&SynthConfig {
            count,
            extent: 16,
            groups: 4,
            radius: [2.0, 3.0],
            ..SynthConfig::default()
        })
        .unwrap();
        split(&mut ds, [0.5, 0.25, 0.25], 3).unwrap();
        ds
    }

    #[test]
    fn augmentation_geometry() {
        let ds = toy(4);
        let aug = augment(&ds).unwrap();
        assert_eq!(aug.len(), 12);
        let w = ds.width;
        for (i, item) in ds.items.iter().enumerate() {
            let flip = &aug.items[4 + i];
            let rot = &aug.items[8 + i];
            assert_eq!(flip.group, item.group);
            assert_eq!(flip.mask.count(), item.mask.count());
            assert_eq!(rot.mask.count(), item.mask.count());
            for r in 0..w {
                for c in 0..w {
                    assert_eq!(flip.mask.get(r, w - 1 - c), item.mask.get(r, c));
                    // counter-clockwise: the top-right corner moves to the top-left
                    assert_eq!(rot.mask.get(w - 1 - c, r), item.mask.get(r, c));
                }
            }
        }
    }

    #[test]
    fn symmetric_image_augments_to_copies() {
        let mut ds = generate_synthetic(&SynthConfig {
            count: 1,
            extent: 16,
            groups: 1,
            radius: [2.0, 3.0],
            ..SynthConfig::default()
        })
        .unwrap();
        ds.items[0].image = Tensor::new(&[3, 16, 16], 0.4).unwrap();
        ds.items[0].mask = Mask::zeros(16, 16).unwrap();
        let aug = augment(&ds).unwrap();
        assert!(aug
            .items
            .iter()
            .all(|i| i.image == ds.items[0].image && i.mask == ds.items[0].mask));
    }

    #[test]
    fn early_stop_on_decreasing_metric() {
        let mut es = EarlyStopping::new(2).unwrap();
        let mut stopped = 0;
        for (epoch, dice) in [(1, 0.9), (2, 0.8), (3, 0.7), (4, 0.6)] {
            es.observe(epoch, dice);
            if es.should_stop() {
                stopped = epoch;
                break;
            }
        }
        assert_eq!((stopped, es.best_epoch()), (3, 1));
        assert!(EarlyStopping::new(0).is_err());
    }

    fn tiny_model() -> ModelGraph {
        build_unet(&UNetConfig {
            input_extent: 16,
            base_width: 2,
            depth: 2,
            bottleneck_extent: 4,
            ..UNetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn one_epoch_bookkeeping() {
        let ds = toy(8);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let out = train(tiny_model(), &ds, &cfg, |_| seen += 1).unwrap();
        assert_eq!((out.history.epochs.len(), seen), (1, 1));
        assert_eq!((out.history.best_epoch, out.history.stopped_epoch), (1, 1));
        assert_eq!(out.history.to_csv().lines().count(), 2);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = toy(8);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let a = train(tiny_model(), &ds, &cfg, |_| {}).unwrap();
        let b = train(tiny_model(), &ds, &cfg, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(
            crate::checkpoint::encode(&a.model).unwrap(),
            crate::checkpoint::encode(&b.model).unwrap()
        );
    }

    #[test]
    fn empty_validation_split_is_an_error() {
        let mut ds = toy(8);
        for item in &mut ds.items {
            if item.split == Split::Val {
                item.split = Split::Train;
            }
        }
        assert!(train(tiny_model(), &ds, &TrainConfig::default(), |_| {}).is_err());
    }

    #[test]
    fn leaked_group_is_an_error() {
        let mut ds = toy(8);
        let g = ds.items[0].group;
        let other = (1..ds.len()).find(|&i| ds.items[i].group == g).unwrap();
        ds.items[other].split = if ds.items[0].split == Split::Test {
            Split::Val
        } else {
            Split::Test
        };
        assert!(train(tiny_model(), &ds, &TrainConfig::default(), |_| {}).is_err());
    }
}
