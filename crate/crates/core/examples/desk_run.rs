//! Trains the default model on the default synthetic dataset and prints
//! per-epoch timings and the final test Dice.

use std::time::Instant;

use mcdseg::data::{generate_synthetic, split, Split, SynthConfig};
use mcdseg::grid::Grid;
use mcdseg::layers::Mode;
use mcdseg::metrics::{binarize, dice, summarize, ModelMeta};
use mcdseg::training::{train, TrainConfig};
use mcdseg::unet::{build_unet, UNetConfig};

fn main() -> anyhow::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(100), |s| s.parse())?;
    let mut ds = generate_synthetic(&SynthConfig::default())?;
    split(&mut ds, [0.7, 0.15, 0.15], 42)?;
    let model = build_unet(&UNetConfig::default())?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(model, &ds, &cfg, |r| {
        println!(
            "epoch {:3} loss {:.4} val_loss {:.4} val_dice {:.4} [{:.1}s]",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_dice,
            start.elapsed().as_secs_f64()
        )
    })?;
    let test = ds.subset(Split::Test);
    let mut scores = Vec::new();
    for item in &test {
        let s = item.image.shape();
        let x = item.image.clone().reshape(&[1, s[0], s[1], s[2]])?;
        let p = Grid::from_tensor(
            &out.model
                .forward_seg(&x, Mode::Inference, &mut [])?
                .batch_item(0)?,
        )?;
        scores.push(dice(&binarize(&p, 0.5)?, &item.mask)?.value);
    }
    let s = summarize(&scores, ModelMeta::new("MCD UNet", out.model.param_count()))?;
    println!(
        "best epoch {} test median {:.3} min {:.3} max {:.3}",
        out.history.best_epoch, s.median, s.min, s.max
    );
    Ok(())
}
