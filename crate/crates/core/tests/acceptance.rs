//! Acceptance suite. Runs each criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.

use std::f64::consts::LN_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mcdseg::autodiff::{Tape, Var};
use mcdseg::checkpoint;
use mcdseg::data::{generate_synthetic, split, SegDataset, Split, SynthConfig};
use mcdseg::gradcheck::grad_check;
use mcdseg::grid::{Grid, Mask};
use mcdseg::layers::{DropoutLayer, Mode};
use mcdseg::mc::{
    aleatoric_uncertainty, mc_sample, pixel_entropy, predictive_entropy, McPrediction,
    UncertaintyReduction,
};
use mcdseg::metrics::{binarize, dice, summarize, ModelMeta};
use mcdseg::report::{self, EvaluationRecord};
use mcdseg::rng::{derive_stream, seeded};
use mcdseg::tensor::Tensor;
use mcdseg::training::{bce_loss, train, TrainConfig};
use mcdseg::unet::{build_unet, ModelGraph, UNetConfig};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| rng.random_range(lo..hi))
            .collect::<Vec<f64>>(),
    )
    .unwrap()
}

/// Values bounded away from zero so no element sits on an activation kink.
fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// A shuffled ladder with spacing 0.01, so every pooling window has a clear
/// maximum.
fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).unwrap()
}

/// `Σ y ⊙ r` with fixed random weights, so every output element matters.
fn weighted_sum(tape: &mut Tape, y: Var, r: &Tensor) -> mcdseg::Result<Var> {
    let rv = tape.leaf(r.clone());
    let p = tape.mul(y, rv)?;
    tape.sum(p)
}

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-6;

fn grad_case(name: &str, seed: u64) -> mcdseg::Result<f64> {
    let mut rng = derive_stream(seed, &[name.len() as u64, name.as_bytes()[0] as u64]);
    match name {
        "conv" => {
            let (stride, pad) = if seed.is_multiple_of(2) {
                (1, 1)
            } else {
                (2, 0)
            };
            let x = uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
            let w = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
            let b = uniform(&mut rng, &[3], -0.5, 0.5);
            let ho = (5 + 2 * pad - 3) / stride + 1;
            let r = uniform(&mut rng, &[2, 3, ho, ho], -1.0, 1.0);
            grad_check(&[x, w, b], GRAD_EPS, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                weighted_sum(t, y, &r)
            })
        }
        "batchnorm-train" => {
            let x = uniform(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
            let g = uniform(&mut rng, &[2], 0.5, 1.5);
            let b = uniform(&mut rng, &[2], -0.5, 0.5);
            let r = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
            grad_check(&[x, g, b], GRAD_EPS, |t, v| {
                let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, &r)
            })
        }
        "dropout-p0" => {
            let x = uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
            let r = uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
            let layer = DropoutLayer::new(0.0)?;
            grad_check(&[x], GRAD_EPS, |t, v| {
                let mut streams = vec![derive_stream(seed, &[0]), derive_stream(seed, &[1])];
                let y = layer.forward(t, v[0], Mode::Train, &mut streams)?;
                weighted_sum(t, y, &r)
            })
        }
        "dropout-masked" => {
            let x = uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
            let r = uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
            grad_check(&[x], GRAD_EPS, |t, v| {
                // re-seeded on every call so the mask is fixed
                let mut streams = vec![derive_stream(seed, &[0]), derive_stream(seed, &[1])];
                let y = t.dropout(v[0], 0.3, &mut streams)?;
                weighted_sum(t, y, &r)
            })
        }
        "relu" | "leaky-relu" | "sigmoid" => {
            let x = off_kink(&mut rng, &[2, 3, 2, 2]);
            let r = uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
            grad_check(&[x], GRAD_EPS, |t, v| {
                let y = match name {
                    "relu" => t.relu(v[0])?,
                    "leaky-relu" => t.leaky_relu(v[0], 0.1)?,
                    _ => t.sigmoid(v[0])?,
                };
                weighted_sum(t, y, &r)
            })
        }
        "maxpool" => {
            let x = distinct(&mut rng, &[2, 2, 4, 4]);
            let r = uniform(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
            grad_check(&[x], GRAD_EPS, |t, v| {
                let y = t.max_pool2(v[0])?;
                weighted_sum(t, y, &r)
            })
        }
        "upsample" => {
            let x = uniform(&mut rng, &[2, 2, 2, 3], -1.0, 1.0);
            let r = uniform(&mut rng, &[2, 2, 4, 6], -1.0, 1.0);
            grad_check(&[x], GRAD_EPS, |t, v| {
                let y = t.upsample2(v[0])?;
                weighted_sum(t, y, &r)
            })
        }
        "concat" => {
            let a = uniform(&mut rng, &[2, 1, 3, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
            let r = uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
            grad_check(&[a, b], GRAD_EPS, |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                weighted_sum(t, y, &r)
            })
        }
        "bce-head" => {
            let z = uniform(&mut rng, &[2, 1, 3, 3], -3.0, 3.0);
            let y: Vec<f64> = (0..18).map(|_| rng.random_range(0..2) as f64).collect();
            let y = Tensor::new(&[2, 1, 3, 3], y)?;
            grad_check(&[z], GRAD_EPS, |t, v| {
                let p = t.sigmoid(v[0])?;
                let yv = t.leaf(y.clone());
                bce_loss(t, p, yv)
            })
        }
        other => unreachable!("unknown layer {other}"),
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let layers = [
        "conv",
        "batchnorm-train",
        "dropout-p0",
        "dropout-masked",
        "relu",
        "leaky-relu",
        "sigmoid",
        "maxpool",
        "upsample",
        "concat",
        "bce-head",
    ];
    let mut worst = (0.0f64, "", 0u64);
    for name in layers {
        for seed in 0..10 {
            let err = grad_case(name, seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            if err > worst.0 {
                worst = (err, name, seed);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.0 < GRAD_TOL && secs < 60.0,
        format!(
            "{} layer types x 10 seeds, worst rel err {:.2e} ({} seed {}), {:.1}s",
            layers.len(),
            worst.0,
            worst.1,
            worst.2,
            secs
        ),
    )
}

// ---------------------------------------------------------------- entropy

fn entropy_oracle(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

fn entropy_suite() -> Outcome {
    let points = [0.0, 0.25, 0.5, 0.75, 1.0];
    let g = Grid::new(1, 5, points.to_vec()).unwrap();
    let u = pixel_entropy(&g);
    let closed = u
        .data()
        .iter()
        .zip(points)
        .map(|(v, p)| (v - entropy_oracle(p)).abs())
        .fold(0.0, f64::max);
    let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
    let flipped: Vec<f64> = grid.iter().map(|p| 1.0 - p).collect();
    let a = pixel_entropy(&Grid::new(1, 1001, grid).unwrap());
    let b = pixel_entropy(&Grid::new(1, 1001, flipped).unwrap());
    let symmetric = a.data() == b.data();
    let bounded = a.data().iter().all(|&v| (0.0..=LN_2).contains(&v));
    check(
        closed < 1e-9 && symmetric && bounded,
        format!(
            "closed-form err {closed:.1e}, symmetry exact: {symmetric}, in [0, ln2]: {bounded}"
        ),
    )
}

// ---------------------------------------------------------------- decomposition

fn uncertainty_decomposition() -> Outcome {
    let (t, h, w) = (16, 32, 32);
    let mut worst_order = f64::NEG_INFINITY;
    let mut worst_diff = 0.0f64;
    for stack in 0..50u64 {
        let mut rng = seeded(1000 + stack);
        let raw: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                (0..h * w)
                    .map(|_| match rng.random_range(0..10) {
                        0 => 0.0,
                        1 => 1.0,
                        _ => rng.random::<f64>(),
                    })
                    .collect()
            })
            .collect();
        let samples: Vec<Grid> = raw
            .iter()
            .map(|d| Grid::new(h, w, d.clone()).unwrap())
            .collect();
        let u = predictive_entropy(&samples).unwrap();
        let (a, _) = aleatoric_uncertainty(&samples).unwrap();
        for (x, y) in a.data().iter().zip(u.data()) {
            worst_order = worst_order.max(x - y);
        }
        let pred = McPrediction::from_samples(samples, stack).unwrap();
        for px in 0..h * w {
            let clamped: Vec<f64> = raw.iter().map(|d| d[px].clamp(1e-7, 1.0 - 1e-7)).collect();
            let mean = clamped.iter().sum::<f64>() / t as f64;
            let u_ref = entropy_oracle(mean);
            let a_ref = clamped.iter().map(|&p| entropy_oracle(p)).sum::<f64>() / t as f64;
            worst_diff =
                worst_diff.max((pred.epistemic_map.data()[px] - (u_ref - a_ref).max(0.0)).abs());
        }
    }
    check(
        worst_order <= 1e-12 && worst_diff <= 1e-12,
        format!("50 stacks T=16 32x32: max(A-U) {worst_order:.1e}, epistemic vs oracle {worst_diff:.1e}"),
    )
}

// ---------------------------------------------------------------- dice

fn dice_oracle() -> Outcome {
    let mut rng = seeded(77);
    let mut exact = true;
    for _ in 0..100 {
        let a: Vec<u8> = (0..256).map(|_| rng.random_range(0..2)).collect();
        let b: Vec<u8> = (0..256).map(|_| rng.random_range(0..2)).collect();
        let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
        for i in 0..256 {
            inter += (a[i] == 1 && b[i] == 1) as usize;
            sa += a[i] as usize;
            sb += b[i] as usize;
        }
        let expected = if sa + sb == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (sa + sb) as f64
        };
        let got = dice(
            &Mask::new(16, 16, a).unwrap(),
            &Mask::new(16, 16, b).unwrap(),
        )
        .unwrap()
        .value;
        exact &= got == expected;
    }
    let x = Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
    let disjoint = Mask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let half = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
    let self_one = dice(&x, &x).unwrap().value == 1.0;
    let zero = dice(&x, &disjoint).unwrap().value == 0.0;
    let half_ok = dice(&x, &half).unwrap().value == 0.5;
    check(
        exact && self_one && zero && half_ok,
        format!("100 random 16x16 pairs exact: {exact}; self 1: {self_one}; disjoint 0: {zero}; half 0.5: {half_ok}"),
    )
}

// ---------------------------------------------------------------- architecture

fn architecture_count() -> Outcome {
    let model = build_unet(&UNetConfig::default()).unwrap();
    let convs = model.conv_layer_count();
    let params = model.param_count();
    let rel = (params as f64 - 494_000.0).abs() / 494_000.0;
    check(
        convs == 23 && rel <= 0.05,
        format!(
            "{convs} conv layers, {params} parameters ({:+.2}% vs 494,000)",
            100.0 * (params as f64 / 494_000.0 - 1.0)
        ),
    )
}

// ---------------------------------------------------------------- degeneracy

fn mc_degeneracy() -> Outcome {
    let model = build_unet(&UNetConfig {
        dropout_rate: 0.0,
        ..UNetConfig::default()
    })
    .unwrap();
    let ds = generate_synthetic(&SynthConfig {
        count: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let samples = mc_sample(&model, &ds.items[0].image, 5, 3).unwrap();
    let identical = samples.iter().all(|s| s == &samples[0]);
    let pred = McPrediction::from_samples(samples, 3).unwrap();
    let zero = pred.epistemic_map.data().iter().all(|&v| v == 0.0);
    check(
        identical && zero,
        format!("p=0, T=5: samples identical {identical}, epistemic exactly 0 {zero}"),
    )
}

// ---------------------------------------------------------------- report

fn report_fidelity() -> Outcome {
    let params = build_unet(&UNetConfig::default()).unwrap().param_count();
    let rec = EvaluationRecord {
        model: "MCD UNet".into(),
        param_count: params,
        samples: 20,
        seed: 0,
        threshold: 0.5,
        reduction: UncertaintyReduction::PixelMean,
        stems: vec!["a".into(), "b".into(), "c".into()],
        groups: vec![0, 1, 2],
        dice: vec![0.591, 0.470, 0.650],
        uncertainty: vec![0.007, 0.016, 0.004],
    };
    let rep = report::cmd_report(&[rec]).unwrap();
    let dice_row = "MCD UNet | 494K | 0.591 | 0.470 | 0.650";
    let unc_row = "MCD UNet | 494K | 0.007 | 0.004 | 0.016";
    let lines: Vec<&str> = rep.text.lines().collect();
    let ok = lines.contains(&dice_row) && lines.contains(&unc_row);
    let summary_ok = rep.dice[0].median == 0.591 && rep.uncertainty[0].max == 0.016;
    check(
        ok && summary_ok,
        format!("rows {:?} / {:?} present: {ok}", dice_row, unc_row),
    )
}

// ---------------------------------------------------------------- training

fn desk_dataset() -> SegDataset {
    let mut ds = generate_synthetic(&SynthConfig::default()).unwrap();
    split(&mut ds, [0.7, 0.15, 0.15], 42).unwrap();
    ds
}

const MC_SAMPLES: usize = 20;
const MC_SEED: u64 = 0;

fn predictions(model: &ModelGraph, ds: &SegDataset) -> Vec<McPrediction> {
    ds.subset(Split::Test)
        .iter()
        .map(|it| McPrediction::predict(model, &it.image, MC_SAMPLES, MC_SEED).unwrap())
        .collect()
}

fn prediction_bytes(preds: &[McPrediction]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in preds {
        for g in [
            &p.mean_prob,
            &p.entropy_map,
            &p.aleatoric_map,
            &p.epistemic_map,
        ] {
            out.extend(report::encode_grid(g));
        }
        out.extend(serde_json::to_vec(&p.record()).unwrap());
    }
    out
}

struct DeskRun {
    ds: SegDataset,
    preds: Vec<McPrediction>,
    elapsed: Duration,
    best_epoch: usize,
    stopped_epoch: usize,
    checksum: u64,
    history: String,
    model: ModelGraph,
    prediction_bytes: Vec<u8>,
}

fn desk_run(label: &str) -> DeskRun {
    let start = Instant::now();
    let ds = desk_dataset();
    let out = train(
        build_unet(&UNetConfig::default()).unwrap(),
        &ds,
        &TrainConfig::default(),
        |r| {
            eprintln!(
                "  [{label}] epoch {:3}  train {:.4}  val {:.4}  dice {:.4}  [{:.0}s]",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.val_dice,
                start.elapsed().as_secs_f64()
            )
        },
    )
    .unwrap();
    let preds = predictions(&out.model, &ds);
    DeskRun {
        elapsed: start.elapsed(),
        checksum: checkpoint::checksum(&out.model).unwrap(),
        history: out.history.to_csv(),
        prediction_bytes: prediction_bytes(&preds),
        best_epoch: out.history.best_epoch,
        stopped_epoch: out.history.stopped_epoch,
        model: out.model,
        ds,
        preds,
    }
}

fn determinism(a: &DeskRun, b: &DeskRun) -> Outcome {
    let history = a.history == b.history;
    let bytes = a.prediction_bytes == b.prediction_bytes;
    check(
        a.checksum == b.checksum && history && bytes,
        format!(
            "two full desk runs: checksum {:016x} vs {:016x}, history equal {history}, {} prediction bytes equal {bytes}",
            a.checksum,
            b.checksum,
            a.prediction_bytes.len()
        ),
    )
}

fn end_to_end(run: &DeskRun) -> Outcome {
    let test = run.ds.subset(Split::Test);
    let scores: Vec<f64> = test
        .iter()
        .zip(&run.preds)
        .map(|(it, p)| {
            dice(&binarize(&p.mean_prob, 0.5).unwrap(), &it.mask)
                .unwrap()
                .value
        })
        .collect();
    let s = summarize(&scores, ModelMeta::new("MCD UNet", 0)).unwrap();
    let mins = run.elapsed.as_secs_f64() / 60.0;
    check(
        s.median >= 0.70 && mins <= 30.0,
        format!(
            "{} test images, median Dice {:.3} (min {:.3}, max {:.3}), best epoch {} of {}, {:.1} min",
            scores.len(),
            s.median,
            s.min,
            s.max,
            run.best_epoch,
            run.stopped_epoch,
            mins
        ),
    )
}

fn ring_property(run: &DeskRun) -> Outcome {
    let test = run.ds.subset(Split::Test);
    let (mut passing, mut counted) = (0, 0);
    let mut ratios = Vec::new();
    for (it, p) in test.iter().zip(&run.preds) {
        let band = it.mask.boundary_band();
        if band.count() == 0 {
            continue;
        }
        let (mut sb, mut nb, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&u, &b) in p.entropy_map.data().iter().zip(band.data()) {
            if b == 1 {
                sb += u;
                nb += 1;
            } else {
                so += u;
                no += 1;
            }
        }
        let ratio = (sb / nb as f64) / (so / no as f64);
        ratios.push(ratio);
        counted += 1;
        passing += (ratio >= 1.5) as usize;
    }
    ratios.sort_by(f64::total_cmp);
    let frac = passing as f64 / counted.max(1) as f64;
    check(
        counted > 0 && frac >= 0.8,
        format!(
            "{passing}/{counted} test images with band/rest entropy >= 1.5 ({:.0}%), median ratio {:.1}",
            100.0 * frac,
            ratios.get(ratios.len() / 2).copied().unwrap_or(f64::NAN)
        ),
    )
}

/// Not a headline criterion: large-T means from two seeds agree at every
/// pixel on the trained model.
fn large_t_consistency(run: &DeskRun) -> Outcome {
    let img = &run.ds.subset(Split::Test)[0].image;
    let m = &run.model;
    let a = McPrediction::predict(m, img, 500, 1).map_err(|e| e.to_string())?;
    let b = McPrediction::predict(m, img, 500, 2).map_err(|e| e.to_string())?;
    let worst = a
        .mean_prob
        .data()
        .iter()
        .zip(b.mean_prob.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    check(
        worst < 0.02,
        format!("T=500, seeds 1 and 2: max pixel difference {worst:.4}"),
    )
}

// ---------------------------------------------------------------- driver

fn report_line(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("PASS {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report_line("gradient correctness", gradient_correctness);
    ok &= report_line("entropy suite", entropy_suite);
    ok &= report_line("uncertainty decomposition", uncertainty_decomposition);
    ok &= report_line("dice oracle", dice_oracle);
    ok &= report_line("architecture count", architecture_count);
    ok &= report_line("mc degeneracy", mc_degeneracy);
    ok &= report_line("report fidelity", report_fidelity);
    eprintln!("training the desk model twice with the default recipe");
    let first = catch_unwind(|| desk_run("run 1"));
    let second = catch_unwind(|| desk_run("run 2"));
    match &first {
        Ok(run) => {
            ok &= report_line("end-to-end training", || end_to_end(run));
            ok &= report_line("uncertainty ring", || ring_property(run));
            // supplementary property; reported but does not gate the exit status
            report_line("large-T consistency (supplementary)", || {
                large_t_consistency(run)
            });
        }
        Err(_) => {
            println!("FAIL end-to-end training: desk run panicked");
            println!("FAIL uncertainty ring: no trained model");
            ok = false;
        }
    }
    match (&first, &second) {
        (Ok(a), Ok(b)) => ok &= report_line("determinism", || determinism(a, b)),
        _ => {
            println!("FAIL determinism: a desk run panicked");
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
