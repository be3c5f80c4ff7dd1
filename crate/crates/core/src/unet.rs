//! UNet assembly with optional Monte-Carlo dropout before every convolution.
//!
//! A [`ModelGraph`] is a flat list of [`Layer`]s executed in order. Skip
//! connections are expressed as `SaveSkip(level)` / `ConcatSkip(level)` pairs:
//! the encoder output at each resolution is stashed before pooling and
//! concatenated (upsampled features first, then the skip) after the matching
//! up-sampling step.
//!
//! Layout for depth `d` and `k` convolutions per block:
//!
//! ```text
//! encoder level l < d : k × [dropout] conv3×3 → batchnorm → act_enc, save, maxpool
//! bottleneck          : k × [dropout] conv3×3 → batchnorm → act_enc
//! decoder level l < d : upsample, concat, k × [dropout] conv3×3 → batchnorm → act_dec
//! head                : [dropout] conv1×1 → sigmoid
//! ```
//!
//! Widths double per level starting at `base_width`. The convolution count is
//! `2·d·k + k + 1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    Activation, BatchNormLayer, BatchStats, ConvLayer, DropoutLayer, Mode, LEAKY_SLOPE,
};
use crate::rng::{seeded, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub input_channels: usize,
    /// Square input extent the model is built for; forward accepts any extent
    /// divisible by `2^depth`.
    pub input_extent: usize,
    pub base_width: usize,
    pub depth: usize,
    pub conv_per_block: usize,
    pub bottleneck_extent: usize,
    pub dropout_rate: f64,
    pub mcd_enabled: bool,
    pub encoder_activation: Activation,
    pub decoder_activation: Activation,
    pub init_seed: u64,
}

impl Default for UNetConfig {
    /// Depth 5 with width 4 on 64×64 inputs: 23 convolutions, 2×2 bottleneck,
    /// 493,553 parameters.
    fn default() -> Self {
        UNetConfig {
            input_channels: 3,
            input_extent: 64,
            base_width: 4,
            depth: 5,
            conv_per_block: 2,
            bottleneck_extent: 2,
            dropout_rate: 0.1,
            mcd_enabled: true,
            encoder_activation: Activation::LeakyRelu(LEAKY_SLOPE),
            decoder_activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.base_width == 0
            || self.depth == 0
            || self.conv_per_block == 0
        {
            return Err(Error::Config(
                "input_channels, base_width, depth and conv_per_block must be positive".into(),
            ));
        }
        if self.depth > 16 {
            return Err(Error::Config(format!("depth {} is too large", self.depth)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let factor = 1usize << self.depth;
        if self.input_extent == 0 || !self.input_extent.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input extent {} is not divisible by 2^{} = {factor}",
                self.input_extent, self.depth
            )));
        }
        if self.input_extent / factor != self.bottleneck_extent {
            return Err(Error::Config(format!(
                "bottleneck extent {} unreachable: {} / 2^{} = {}",
                self.bottleneck_extent,
                self.input_extent,
                self.depth,
                self.input_extent / factor
            )));
        }
        Ok(())
    }

    pub fn conv_layer_count(&self) -> usize {
        2 * self.depth * self.conv_per_block + self.conv_per_block + 1
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dropout(DropoutLayer),
    Conv(ConvLayer),
    BatchNorm(BatchNormLayer),
    Activation(Activation),
    MaxPool,
    Upsample,
    SaveSkip(usize),
    ConcatSkip(usize),
}

/// Encoder level `level` feeds the decoder block at the same resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipConnection {
    pub level: usize,
    pub save_at: usize,
    pub concat_at: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    config: UNetConfig,
    layers: Vec<Layer>,
    skips: Vec<SkipConnection>,
}

/// Result of recording one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub output: Var,
    /// Parameter leaves in registry order.
    pub params: Vec<Var>,
    /// Train-mode batch statistics, one entry per batch-norm layer.
    pub batch_stats: Vec<BatchStats>,
    /// Activation shape entering the bottleneck.
    pub bottleneck_shape: Vec<usize>,
}

pub fn build_unet(config: &UNetConfig) -> Result<ModelGraph> {
    config.validate()?;
    let mut rng = seeded(config.init_seed);
    let mut layers = Vec::new();

    let push_block = |layers: &mut Vec<Layer>,
                      rng: &mut Stream,
                      cin: usize,
                      cout: usize,
                      act: Activation|
     -> Result<()> {
        if config.mcd_enabled {
            layers.push(Layer::Dropout(DropoutLayer::new(config.dropout_rate)?));
        }
        layers.push(Layer::Conv(ConvLayer::new(cin, cout, 3, 1, 1, rng)?));
        layers.push(Layer::BatchNorm(BatchNormLayer::new(cout)?));
        layers.push(Layer::Activation(act));
        Ok(())
    };

    let mut ch = config.input_channels;
    for level in 0..config.depth {
        for _ in 0..config.conv_per_block {
            push_block(
                &mut layers,
                &mut rng,
                ch,
                config.width(level),
                config.encoder_activation,
            )?;
            ch = config.width(level);
        }
        layers.push(Layer::SaveSkip(level));
        layers.push(Layer::MaxPool);
    }
    for _ in 0..config.conv_per_block {
        push_block(
            &mut layers,
            &mut rng,
            ch,
            config.width(config.depth),
            config.encoder_activation,
        )?;
        ch = config.width(config.depth);
    }
    for level in (0..config.depth).rev() {
        layers.push(Layer::Upsample);
        layers.push(Layer::ConcatSkip(level));
        ch += config.width(level);
        for _ in 0..config.conv_per_block {
            push_block(
                &mut layers,
                &mut rng,
                ch,
                config.width(level),
                config.decoder_activation,
            )?;
            ch = config.width(level);
        }
    }
    if config.mcd_enabled {
        layers.push(Layer::Dropout(DropoutLayer::new(config.dropout_rate)?));
    }
    layers.push(Layer::Conv(ConvLayer::new(ch, 1, 1, 1, 0, &mut rng)?));
    layers.push(Layer::Activation(Activation::Sigmoid));

    let skips = (0..config.depth)
        .map(|level| SkipConnection {
            level,
            save_at: layers
                .iter()
                .position(|l| *l == Layer::SaveSkip(level))
                .expect("save site"),
            concat_at: layers
                .iter()
                .position(|l| *l == Layer::ConcatSkip(level))
                .expect("concat site"),
        })
        .collect();
    Ok(ModelGraph {
        config: config.clone(),
        layers,
        skips,
    })
}

/// Number of trainable scalars: conv weights and biases plus batch-norm scale
/// and shift. Running statistics are excluded.
pub fn param_count(model: &ModelGraph) -> usize {
    model.params().iter().map(|t| t.len()).sum()
}

impl ModelGraph {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn skips(&self) -> &[SkipConnection] {
        &self.skips
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv(_)))
            .count()
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    /// Parameter tensors in registry order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                Layer::BatchNorm(b) => out.extend([&b.gamma, &b.beta]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::BatchNorm(b) => out.extend([&mut b.gamma, &mut b.beta]),
                _ => {}
            }
        }
        out
    }

    pub fn batchnorms(&self) -> impl Iterator<Item = &BatchNormLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        })
    }

    pub fn batchnorms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        })
    }

    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let count = self.batchnorms().count();
        if stats.len() != count {
            return Err(Error::InvalidArgument(format!(
                "{} batch statistics for {count} batch-norm layers",
                stats.len()
            )));
        }
        for (bn, s) in self.batchnorms_mut().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match shape {
            [n, c, h, w] => [*n, *c, *h, *w],
            _ => {
                return Err(Error::Shape(format!(
                    "expected N×C×H×W input, got {shape:?}"
                )))
            }
        };
        let factor = 1usize << self.config.depth;
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "model expects {} channels, got {c}",
                self.config.input_channels
            )));
        }
        if h != w || h % factor != 0 {
            return Err(Error::Shape(format!(
                "input extent {h}×{w} must be square and divisible by {factor}"
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. `streams` supplies one dropout stream
    /// per batch item and is untouched when dropout is inactive.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
        streams: &mut [Stream],
        trainable: bool,
    ) -> Result<ForwardPass> {
        self.check_input(tape.shape(input))?;
        let mut x = input;
        let mut params = Vec::new();
        let mut batch_stats = Vec::new();
        let mut saved: Vec<Option<Var>> = vec![None; self.config.depth];
        let mut bottleneck_shape = Vec::new();
        for layer in &self.layers {
            x = match layer {
                Layer::Dropout(d) => d.forward(tape, x, mode, streams)?,
                Layer::Conv(c) => {
                    let (y, w, b) = c.forward(tape, x, trainable)?;
                    params.extend([w, b]);
                    y
                }
                Layer::BatchNorm(bn) => {
                    let (y, g, b, stats) = bn.forward(tape, x, mode, trainable)?;
                    params.extend([g, b]);
                    batch_stats.extend(stats);
                    y
                }
                Layer::Activation(a) => a.apply(tape, x)?,
                Layer::MaxPool => {
                    let y = tape.max_pool2(x)?;
                    bottleneck_shape = tape.shape(y).to_vec();
                    y
                }
                Layer::Upsample => tape.upsample2(x)?,
                Layer::SaveSkip(level) => {
                    saved[*level] = Some(x);
                    x
                }
                Layer::ConcatSkip(level) => {
                    let skip = saved[*level].ok_or_else(|| {
                        Error::Config(format!("skip {level} used before it was saved"))
                    })?;
                    tape.concat_channels(x, skip)?
                }
            };
        }
        Ok(ForwardPass {
            output: x,
            params,
            batch_stats,
            bottleneck_shape,
        })
    }

    /// Probabilities `N×1×H×W` for a batch `N×C×H×W`. Running statistics are
    /// not updated, even in train mode.
    pub fn forward_seg(
        &self,
        batch: &Tensor,
        mode: Mode,
        streams: &mut [Stream],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone());
        let pass = self.forward(&mut tape, x, mode, streams, false)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Replaces all parameters and running statistics, in registry order.
    pub(crate) fn load_state(&mut self, params: &[f64], running: &[f64]) -> Result<()> {
        let expected: usize = self.params().iter().map(|t| t.len()).sum();
        let expected_running: usize = self.batchnorms().map(|b| 2 * b.channels()).sum();
        if params.len() != expected || running.len() != expected_running {
            return Err(Error::Checkpoint(format!(
                "state holds {} parameters and {} running values, model needs {expected} and {expected_running}",
                params.len(),
                running.len()
            )));
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        let mut offset = 0;
        for bn in self.batchnorms_mut() {
            let c = bn.channels();
            bn.running_mean
                .copy_from_slice(&running[offset..offset + c]);
            bn.running_var
                .copy_from_slice(&running[offset + c..offset + 2 * c]);
            offset += 2 * c;
        }
        Ok(())
    }

    pub(crate) fn running_state(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for bn in self.batchnorms() {
            out.extend_from_slice(&bn.running_mean);
            out.extend_from_slice(&bn.running_var);
        }
        out
    }
}
