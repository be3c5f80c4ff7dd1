//! Layer primitives: convolution, max pooling, nearest up-sampling, batch
//! normalization and inverted dropout.
//!
//! Numeric kernels live in [`kernels`]; the layer structs own parameters and
//! record their work on a [`Tape`]. Activations are `N×C×H×W`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.1;

/// Execution mode for stochastic and statistics-dependent layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Dropout on, batch norm uses batch statistics.
    Train,
    /// Dropout off, batch norm uses running statistics.
    Inference,
    /// Dropout on, batch norm uses running statistics.
    McActive,
}

impl Mode {
    pub fn dropout_active(self) -> bool {
        !matches!(self, Mode::Inference)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slope")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `out_ch × in_ch × kH × kW`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// He-normal weights, zero bias.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::InvalidArgument(
                "kernel and stride must be positive".into(),
            ));
        }
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let count = out_ch * in_ch * kernel * kernel;
        let values: Vec<f64> = (0..count).map(|_| normal.sample(rng)).collect();
        Ok(ConvLayer {
            weight: Tensor::new(&[out_ch, in_ch, kernel, kernel], values)?,
            bias: Tensor::zeros(&[out_ch])?,
            stride,
            padding,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || bias.shape() != [s[0]] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv weight {s:?} with bias {:?}",
                bias.shape()
            )));
        }
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Records the convolution; parameters become tape leaves returned as
    /// `(output, weight, bias)`.
    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, Var, Var)> {
        let (w, b) = if trainable {
            (
                tape.param(self.weight.clone()),
                tape.param(self.bias.clone()),
            )
        } else {
            (tape.leaf(self.weight.clone()), tape.leaf(self.bias.clone()))
        };
        let y = tape.conv2d(x, w, b, self.stride, self.padding)?;
        Ok((y, w, b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormLayer {
            gamma: Tensor::new(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Records the normalization. In train mode the batch statistics are
    /// returned so the caller can fold them into the running estimates.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<(Var, Var, Var, Option<BatchStats>)> {
        let (g, b) = if trainable {
            (
                tape.param(self.gamma.clone()),
                tape.param(self.beta.clone()),
            )
        } else {
            (tape.leaf(self.gamma.clone()), tape.leaf(self.beta.clone()))
        };
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm_train(x, g, b, self.eps)?;
                Ok((y, g, b, Some(stats)))
            }
            Mode::Inference | Mode::McActive => {
                let y = tape.batchnorm_frozen(
                    x,
                    g,
                    b,
                    &self.running_mean,
                    &self.running_var,
                    self.eps,
                )?;
                Ok((y, g, b, None))
            }
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &v) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutLayer {
    pub rate: f64,
}

impl DropoutLayer {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(DropoutLayer { rate })
    }

    /// Inverted dropout with one stream per batch item.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        streams: &mut [Stream],
    ) -> Result<Var> {
        if !mode.dropout_active() || self.rate == 0.0 {
            return Ok(x);
        }
        tape.dropout(x, self.rate, streams)
    }
}

impl Tape {
    /// Cross-correlation of `N×C×H×W` input with `O×C×kH×kW` weights plus bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 4 {
            return Err(Error::Shape(format!("conv weight must be 4-D, got {ws:?}")));
        }
        let [co, ci, kh, kw] = [ws[0], ws[1], ws[2], ws[3]];
        if ci != c {
            return Err(Error::Shape(format!(
                "conv expects {ci} input channels, got {c}"
            )));
        }
        if self.shape(bias) != [co] {
            return Err(Error::Shape(format!("conv bias must be [{co}]")));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "degenerate conv output: input {h}×{w}, pad {padding}, kernel {kh}×{kw}"
            )));
        }
        let geom = kernels::ConvGeometry {
            n,
            c_in: c,
            h,
            w,
            c_out: co,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let t = Tensor::from_parts(vec![n, co, geom.ho, geom.wo], out);
        self.push(
            t,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            },
            &[x, weight, bias],
            "conv2d",
        )
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if dims[2] % 2 != 0 || dims[3] % 2 != 0 {
            return Err(Error::Shape(format!(
                "max_pool needs even extents, got {}×{}",
                dims[2], dims[3]
            )));
        }
        let (out, argmax) = kernels::max_pool_forward(dims, self.value(x).data());
        let t = Tensor::from_parts(vec![dims[0], dims[1], dims[2] / 2, dims[3] / 2], out);
        self.push(t, Op::MaxPool { x, argmax }, &[x], "max_pool")
    }

    /// Nearest-neighbour ×2 up-sampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let out = kernels::upsample_forward(dims, self.value(x).data());
        let t = Tensor::from_parts(vec![dims[0], dims[1], dims[2] * 2, dims[3] * 2], out);
        self.push(t, Op::Upsample { x }, &[x], "upsample")
    }

    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let dims = self.value(x).dims4()?;
        self.check_bn_params(dims[1], gamma, beta)?;
        if dims[0] * dims[2] * dims[3] < 2 {
            return Err(Error::Shape(format!(
                "batch norm in train mode needs at least 2 values per channel, got {dims:?}"
            )));
        }
        let (mean, var) = kernels::channel_moments(dims, self.value(x).data());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(
            dims,
            self.value(x).data(),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::from_parts(dims.to_vec(), y);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: true,
        };
        let v = self.push(t, op, &[x, gamma, beta], "batchnorm")?;
        Ok((v, BatchStats { mean, var }))
    }

    pub fn batchnorm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        self.check_bn_params(dims[1], gamma, beta)?;
        if running_mean.len() != dims[1] || running_var.len() != dims[1] {
            return Err(Error::Shape(
                "running statistics do not match channels".into(),
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(
            dims,
            self.value(x).data(),
            running_mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::from_parts(dims.to_vec(), y);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: false,
        };
        self.push(t, op, &[x, gamma, beta], "batchnorm")
    }

    fn check_bn_params(&self, channels: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::Shape(format!(
                "batch norm parameters must be [{channels}]"
            )));
        }
        Ok(())
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`. Item `i` of the
    /// batch draws its mask from `streams[i]`.
    pub fn dropout(&mut self, x: Var, rate: f64, streams: &mut [Stream]) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let t = self.value(x);
        let n = t.shape()[0];
        if streams.len() != n {
            return Err(Error::InvalidArgument(format!(
                "dropout needs one stream per batch item: {} streams for {n} items",
                streams.len()
            )));
        }
        let per_item = t.len() / n;
        let scale = 1.0 / (1.0 - rate);
        let mut mask = Vec::with_capacity(t.len());
        for rng in streams.iter_mut() {
            mask.extend((0..per_item).map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    scale
                }
            }));
        }
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Dropout { x, mask }, &[x], "dropout")
    }
}

pub(crate) mod kernels {
    //! Slice-level forward and backward kernels.

    use rayon::prelude::*;

    /// Output columns per im2col panel.
    const PANEL_COLS: usize = 256;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct ConvGeometry {
        pub n: usize,
        pub c_in: usize,
        pub h: usize,
        pub w: usize,
        pub c_out: usize,
        pub kh: usize,
        pub kw: usize,
        pub stride: usize,
        pub pad: usize,
        pub ho: usize,
        pub wo: usize,
    }

    impl ConvGeometry {
        fn patch(&self) -> usize {
            self.c_in * self.kh * self.kw
        }

        fn out_plane(&self) -> usize {
            self.ho * self.wo
        }

        fn in_image(&self) -> usize {
            self.c_in * self.h * self.w
        }

        /// Images sharing one panel. Small planes are batched so panels stay
        /// wide; large planes are split by rows instead.
        fn images_per_group(&self) -> usize {
            (PANEL_COLS / self.out_plane()).clamp(1, self.n.max(1))
        }

        /// Output rows per panel; depends only on the geometry.
        fn rows_per_panel(&self) -> usize {
            if self.images_per_group() > 1 {
                self.ho
            } else {
                (PANEL_COLS / self.wo).clamp(1, self.ho)
            }
        }

        fn panels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
            let step = self.rows_per_panel();
            (0..self.ho)
                .step_by(step)
                .map(move |r0| (r0, (r0 + step).min(self.ho)))
        }

        /// Output columns `[lo, hi)` whose input column `ox·stride + kx - pad`
        /// lies inside the image.
        fn valid_cols(&self, kx: usize) -> (usize, usize) {
            let lo = if self.pad > kx {
                (self.pad - kx).div_ceil(self.stride)
            } else {
                0
            };
            let hi = if self.w + self.pad > kx {
                (self.w + self.pad - kx).div_ceil(self.stride).min(self.wo)
            } else {
                0
            };
            (lo.min(hi), hi)
        }
    }

    /// Unfolds output rows `r0..r1` of each image in `xs` into a
    /// `patch × cols` panel. Panel rows are `(ci, ky, kx)` row-major; columns
    /// run over images, then output rows, then output columns.
    fn im2col(g: &ConvGeometry, xs: &[f64], r0: usize, r1: usize, panel: &mut [f64]) {
        let images = xs.len() / g.in_image();
        let seg_rows = r1 - r0;
        let cols = images * seg_rows * g.wo;
        let mut row = 0;
        for ci in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = g.valid_cols(kx);
                    let dst = &mut panel[row * cols..(row + 1) * cols];
                    for img in 0..images {
                        let plane = &xs[img * g.in_image() + ci * g.h * g.w..][..g.h * g.w];
                        for (ri, oy) in (r0..r1).enumerate() {
                            let seg = &mut dst[(img * seg_rows + ri) * g.wo..][..g.wo];
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                seg.fill(0.0);
                                continue;
                            }
                            let src = &plane[iy as usize * g.w..][..g.w];
                            seg[..lo].fill(0.0);
                            seg[hi..].fill(0.0);
                            let ix0 = lo * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                seg[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                            } else {
                                for (k, d) in seg[lo..hi].iter_mut().enumerate() {
                                    *d = src[ix0 + k * g.stride];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// The transpose of [`im2col`]: one row of `stride` values per output
    /// pixel, holding the patch in its first `patch` entries. The remaining
    /// entries are left zero.
    fn im2row(g: &ConvGeometry, xs: &[f64], r0: usize, r1: usize, stride: usize, rows: &mut [f64]) {
        let images = xs.len() / g.in_image();
        let mut j = 0;
        for img in 0..images {
            let x = &xs[img * g.in_image()..][..g.in_image()];
            for oy in r0..r1 {
                for ox in 0..g.wo {
                    let row = &mut rows[j * stride..][..g.patch()];
                    let ix0 = (ox * g.stride) as isize - g.pad as isize;
                    let interior_x = ix0 >= 0 && ix0 as usize + g.kw <= g.w;
                    for (ci, patch) in row.chunks_exact_mut(g.kh * g.kw).enumerate() {
                        let plane = &x[ci * g.h * g.w..][..g.h * g.w];
                        for (ky, dst) in patch.chunks_exact_mut(g.kw).enumerate() {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let src = &plane[iy as usize * g.w..][..g.w];
                            if interior_x {
                                dst.copy_from_slice(&src[ix0 as usize..ix0 as usize + g.kw]);
                            } else {
                                for (kx, d) in dst.iter_mut().enumerate() {
                                    let ix = ix0 + kx as isize;
                                    *d = if ix >= 0 && ix < g.w as isize {
                                        src[ix as usize]
                                    } else {
                                        0.0
                                    };
                                }
                            }
                        }
                    }
                    j += 1;
                }
            }
        }
    }

    /// Scatter-adds a panel gradient laid out as in [`im2col`] back onto the
    /// images in `dxs`.
    fn col2im(g: &ConvGeometry, panel: &[f64], r0: usize, r1: usize, dxs: &mut [f64]) {
        let images = dxs.len() / g.in_image();
        let seg_rows = r1 - r0;
        let cols = images * seg_rows * g.wo;
        let mut row = 0;
        for ci in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = g.valid_cols(kx);
                    let src = &panel[row * cols..(row + 1) * cols];
                    for img in 0..images {
                        let plane = &mut dxs[img * g.in_image() + ci * g.h * g.w..][..g.h * g.w];
                        for (ri, oy) in (r0..r1).enumerate() {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let seg = &src[(img * seg_rows + ri) * g.wo..][..g.wo];
                            let dst = &mut plane[iy as usize * g.w..][..g.w];
                            let ix0 = lo * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                dst[ix0..ix0 + hi - lo]
                                    .iter_mut()
                                    .zip(&seg[lo..hi])
                                    .for_each(|(d, &v)| *d += v);
                            } else {
                                for (k, &v) in seg[lo..hi].iter().enumerate() {
                                    dst[ix0 + k * g.stride] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Row-block height of the gemm micro-kernel.
    const MR: usize = 4;
    /// Column-tile width of the gemm micro-kernel.
    const NR: usize = 16;

    /// `c[i][j] = Σ_l a[i][l] · b[l][j]`, summed over `l` in order from zero.
    ///
    /// `a` is `m × k`, `b` is `k × cols`, `c` is `m × cols`, all row-major.
    /// Every element sees the same sequence of additions as a scalar triple
    /// loop, so results do not depend on tiling or on the SIMD width chosen at
    /// run time.
    pub(super) fn gemm(a: &[f64], m: usize, k: usize, b: &[f64], cols: usize, c: &mut [f64]) {
        assert!(a.len() == m * k && b.len() == k * cols && c.len() == m * cols);
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                // SAFETY: the required CPU feature was detected above.
                return unsafe { gemm_avx512(a, m, k, b, cols, c) };
            }
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: as above.
                return unsafe { gemm_avx2(a, m, k, b, cols, c) };
            }
        }
        gemm_generic(a, m, k, b, cols, c)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn gemm_avx512(a: &[f64], m: usize, k: usize, b: &[f64], cols: usize, c: &mut [f64]) {
        gemm_generic(a, m, k, b, cols, c)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn gemm_avx2(a: &[f64], m: usize, k: usize, b: &[f64], cols: usize, c: &mut [f64]) {
        gemm_generic(a, m, k, b, cols, c)
    }

    #[inline(always)]
    fn gemm_generic(a: &[f64], m: usize, k: usize, b: &[f64], cols: usize, c: &mut [f64]) {
        let full = cols - cols % NR;
        let mut i = 0;
        while i + MR <= m {
            let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
            let mut j = 0;
            while j < full {
                let mut acc = [[0.0f64; NR]; MR];
                for l in 0..k {
                    let bt: &[f64; NR] =
                        b[l * cols + j..l * cols + j + NR].try_into().expect("tile");
                    for r in 0..MR {
                        let av = rows[r][l];
                        for t in 0..NR {
                            acc[r][t] += av * bt[t];
                        }
                    }
                }
                for r in 0..MR {
                    c[(i + r) * cols + j..(i + r) * cols + j + NR].copy_from_slice(&acc[r]);
                }
                j += NR;
            }
            for j in full..cols {
                for r in 0..MR {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += rows[r][l] * b[l * cols + j];
                    }
                    c[(i + r) * cols + j] = acc;
                }
            }
            i += MR;
        }
        for i in i..m {
            let row = &a[i * k..(i + 1) * k];
            let mut j = 0;
            while j < full {
                let mut acc = [0.0f64; NR];
                for (l, &av) in row.iter().enumerate() {
                    let bt: &[f64; NR] =
                        b[l * cols + j..l * cols + j + NR].try_into().expect("tile");
                    for t in 0..NR {
                        acc[t] += av * bt[t];
                    }
                }
                c[i * cols + j..i * cols + j + NR].copy_from_slice(&acc);
                j += NR;
            }
            for j in full..cols {
                let mut acc = 0.0;
                for (l, &av) in row.iter().enumerate() {
                    acc += av * b[l * cols + j];
                }
                c[i * cols + j] = acc;
            }
        }
    }

    pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let plane = g.out_plane();
        let patch = g.patch();
        let group = g.images_per_group();
        let mut out = vec![0.0; g.n * g.c_out * plane];
        out.par_chunks_mut(group * g.c_out * plane)
            .zip(x.par_chunks(group * g.in_image()))
            .for_each(|(out_g, x_g)| {
                let images = x_g.len() / g.in_image();
                let mut panel = Vec::new();
                let mut acc = Vec::new();
                for (r0, r1) in g.panels() {
                    let seg = (r1 - r0) * g.wo;
                    let cols = images * seg;
                    panel.resize(patch * cols, 0.0);
                    acc.resize(g.c_out * cols, 0.0);
                    im2col(g, x_g, r0, r1, &mut panel);
                    gemm(weight, g.c_out, patch, &panel, cols, &mut acc);
                    for co in 0..g.c_out {
                        for img in 0..images {
                            let dst = &mut out_g[(img * g.c_out + co) * plane + r0 * g.wo..][..seg];
                            let src = &acc[co * cols + img * seg..][..seg];
                            for (d, &a) in dst.iter_mut().zip(src) {
                                *d = a + bias[co];
                            }
                        }
                    }
                }
            });
        out
    }

    /// Returns `(dx, dweight, dbias)`. Weight and bias gradients are reduced
    /// over image groups in order, so results do not depend on scheduling.
    pub fn conv2d_backward(
        g: &ConvGeometry,
        x: &[f64],
        weight: &[f64],
        dout: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let plane = g.out_plane();
        let patch = g.patch();
        let group = g.images_per_group();
        // weight transposed to patch × c_out
        let mut wt = vec![0.0; patch * g.c_out];
        for co in 0..g.c_out {
            for l in 0..patch {
                wt[l * g.c_out + co] = weight[co * patch + l];
            }
        }
        // dW rows padded to whole gemm tiles; padding columns stay zero
        let padded = patch.div_ceil(NR) * NR;
        let mut dx = vec![0.0; x.len()];
        let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
            .par_chunks_mut(group * g.in_image())
            .zip(x.par_chunks(group * g.in_image()))
            .zip(dout.par_chunks(group * g.c_out * plane))
            .map(|((dx_g, x_g), g_g)| {
                let images = x_g.len() / g.in_image();
                let mut dw = vec![0.0; g.c_out * patch];
                let mut db = vec![0.0; g.c_out];
                let (mut rows, mut gout, mut dpanel, mut dw_part) = (
                    Vec::new(),
                    Vec::new(),
                    Vec::new(),
                    vec![0.0; g.c_out * padded],
                );
                for (r0, r1) in g.panels() {
                    let seg = (r1 - r0) * g.wo;
                    let cols = images * seg;
                    rows.resize(cols * padded, 0.0);
                    im2row(g, x_g, r0, r1, padded, &mut rows);
                    gout.clear();
                    for co in 0..g.c_out {
                        for img in 0..images {
                            gout.extend_from_slice(
                                &g_g[(img * g.c_out + co) * plane + r0 * g.wo..][..seg],
                            );
                        }
                    }
                    for co in 0..g.c_out {
                        db[co] += gout[co * cols..(co + 1) * cols].iter().sum::<f64>();
                    }
                    gemm(&gout, g.c_out, cols, &rows, padded, &mut dw_part);
                    for (dst, src) in dw.chunks_mut(patch).zip(dw_part.chunks(padded)) {
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                    dpanel.resize(patch * cols, 0.0);
                    gemm(&wt, patch, g.c_out, &gout, cols, &mut dpanel);
                    col2im(g, &dpanel, r0, r1, dx_g);
                }
                (dw, db)
            })
            .collect();

        let mut dw = vec![0.0; g.c_out * patch];
        let mut db = vec![0.0; g.c_out];
        for (dw_g, db_g) in partials {
            dw.iter_mut().zip(&dw_g).for_each(|(a, b)| *a += b);
            db.iter_mut().zip(&db_g).for_each(|(a, b)| *a += b);
        }
        (dx, dw, db)
    }

    pub fn max_pool_forward(dims: [usize; 4], x: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let [n, c, h, w] = dims;
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let top = base + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    for idx in [top + 1, top + w, top + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        (out, argmax)
    }

    pub fn max_pool_backward(input_len: usize, argmax: &[usize], dout: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; input_len];
        for (&idx, &d) in argmax.iter().zip(dout) {
            dx[idx] += d;
        }
        dx
    }

    pub fn upsample_forward(dims: [usize; 4], x: &[f64]) -> Vec<f64> {
        let [n, c, h, w] = dims;
        let w2 = 2 * w;
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (xo, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
        out
    }

    pub fn upsample_backward(dims: [usize; 4], dout: &[f64]) -> Vec<f64> {
        let [n, c, h, w] = dims;
        let w2 = 2 * w;
        let mut dx = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            let src = &dout[p * 4 * h * w..(p + 1) * 4 * h * w];
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for y in 0..2 * h {
                for xo in 0..w2 {
                    dst[(y / 2) * w + xo / 2] += src[y * w2 + xo];
                }
            }
        }
        dx
    }

    /// Per-channel mean and biased variance over `N×H×W`.
    pub fn channel_moments(dims: [usize; 4], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = dims;
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let planes = (0..n).map(|i| &x[(i * c + ch) * plane..(i * c + ch + 1) * plane]);
            let mu = planes.clone().flatten().sum::<f64>() / m;
            let v = planes.flatten().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
            mean[ch] = mu;
            var[ch] = v;
        }
        (mean, var)
    }

    /// Returns `(y, xhat)` with `xhat = (x - mean) * inv_std`, `y = gamma * xhat + beta`.
    pub fn batchnorm_apply(
        dims: [usize; 4],
        x: &[f64],
        mean: &[f64],
        inv_std: &[f64],
        gamma: &[f64],
        beta: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let [_, c, h, w] = dims;
        let plane = h * w;
        let mut y = Vec::with_capacity(x.len());
        let mut xhat = Vec::with_capacity(x.len());
        for (p, chunk) in x.chunks(plane).enumerate() {
            let ch = p % c;
            for &v in chunk {
                let xh = (v - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                y.push(gamma[ch] * xh + beta[ch]);
            }
        }
        (y, xhat)
    }

    /// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the mean and variance
    /// are functions of the input and contribute to `dx`.
    pub fn batchnorm_backward(
        dims: [usize; 4],
        gamma: &[f64],
        xhat: &[f64],
        inv_std: &[f64],
        dout: &[f64],
        batch_stats: bool,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = dims;
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (p, (gchunk, xchunk)) in dout.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
            let ch = p % c;
            for (&d, &xh) in gchunk.iter().zip(xchunk) {
                dbeta[ch] += d;
                dgamma[ch] += d * xh;
            }
        }
        let mut dx = Vec::with_capacity(dout.len());
        for (p, (gchunk, xchunk)) in dout.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
            let ch = p % c;
            let k = gamma[ch] * inv_std[ch];
            if batch_stats {
                for (&d, &xh) in gchunk.iter().zip(xchunk) {
                    dx.push(k / m * (m * d - dbeta[ch] - xh * dgamma[ch]));
                }
            } else {
                dx.extend(gchunk.iter().map(|&d| k * d));
            }
        }
        (dx, dgamma, dbeta)
    }
}
