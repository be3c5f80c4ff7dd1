//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! append a node holding the output value plus whatever context its backward
//! rule needs; [`Tape::backward`] then walks the nodes in strict reverse order.
//! Nodes whose inputs do not require gradients are stored as constants and
//! never visited.
//!
//! Binary elementwise operations require identical shapes. The only
//! broadcasting supported is the scalar form in [`Tape::affine`].

use crate::error::{Error, Result};
use crate::layers::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Default lower probability bound applied before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved context for one recorded operation.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Relu(Var),
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid(Var),
    Ln(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    Concat {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.zero_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable input.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Appends a node, dropping its backward context if no input needs gradients.
    pub(crate) fn push(
        &mut self,
        mut value: Tensor,
        op: Op,
        inputs: &[Var],
        name: &str,
    ) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        value.ensure_finite(name)?;
        let tracked = self.any_grad(inputs);
        value.set_requires_grad(tracked);
        self.nodes.push(Node {
            value,
            op: if tracked { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// `scale * x + shift` with scalar coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.map(x, |v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, &[x], "affine")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x], "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { x, slope }, &[x], "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// Natural logarithm. Non-positive inputs are an error; clamp first.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ln of non-positive value {bad}; clamp the input first"
            )));
        }
        let out = self.map(x, f64::ln);
        self.push(out, Op::Ln(x), &[x], "ln")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.map(x, |v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x], "clamp")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x], "mean")
    }

    /// Concatenates two `N×C×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor::from_parts(vec![na, ca + cb, ha, wa], data);
        self.push(out, Op::Concat { a, b }, &[a, b], "concat")
    }

    /// Back-propagates from a scalar `loss`, filling leaf gradients.
    ///
    /// Saved contexts are released as nodes are visited, so a tape supports
    /// exactly one backward pass. Interior gradients are freed once consumed;
    /// leaves keep theirs until taken.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if matches!(op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            for (input, grad) in self.input_grads(i, op, &g)? {
                let node = &mut self.nodes[input.0];
                if node.value.requires_grad() {
                    if !grad.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite("backward".into()));
                    }
                    node.value.accumulate_grad(grad);
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, op: Op, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let out = self.nodes[i].value.data();
        let val = |v: Var| self.value(v).data();
        let grads = match op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b)).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(a)).map(|(x, y)| x * y).collect();
                vec![(a, ga), (b, gb)]
            }
            Op::Affine { x, scale } => vec![(x, g.iter().map(|v| v * scale).collect())],
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(val(x))
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                vec![(x, gx)]
            }
            Op::LeakyRelu { x, slope } => {
                let gx = g
                    .iter()
                    .zip(val(x))
                    .map(|(&d, &v)| if v > 0.0 { d } else { slope * d })
                    .collect();
                vec![(x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .iter()
                    .zip(out)
                    .map(|(&d, &s)| d * s * (1.0 - s))
                    .collect();
                vec![(x, gx)]
            }
            Op::Ln(x) => vec![(x, g.iter().zip(val(x)).map(|(&d, &v)| d / v).collect())],
            Op::Clamp { x, lo, hi } => {
                let gx = g
                    .iter()
                    .zip(val(x))
                    .map(|(&d, &v)| if v >= lo && v <= hi { d } else { 0.0 })
                    .collect();
                vec![(x, gx)]
            }
            Op::Sum(x) => vec![(x, vec![g[0]; self.value(x).len()])],
            Op::Mean(x) => {
                let n = self.value(x).len();
                vec![(x, vec![g[0] / n as f64; n])]
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(a).dims4()?;
                let cb = self.value(b).dims4()?[1];
                let plane = h * w;
                let (mut ga, mut gb) = (
                    Vec::with_capacity(n * ca * plane),
                    Vec::with_capacity(n * cb * plane),
                );
                for chunk in g.chunks((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                vec![(a, ga), (b, gb)]
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(&geom, val(x), val(weight), g);
                vec![(x, dx), (weight, dw), (bias, db)]
            }
            Op::MaxPool { x, argmax } => {
                vec![(
                    x,
                    kernels::max_pool_backward(self.value(x).len(), &argmax, g),
                )]
            }
            Op::Upsample { x } => {
                let [n, c, h, w] = self.value(x).dims4()?;
                vec![(x, kernels::upsample_backward([n, c, h, w], g))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let dims = self.value(x).dims4()?;
                let (dx, dgamma, dbeta) =
                    kernels::batchnorm_backward(dims, val(gamma), &xhat, &inv_std, g, batch_stats);
                vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
            }
            Op::Dropout { x, mask } => {
                vec![(x, g.iter().zip(&mask).map(|(d, m)| d * m).collect())]
            }
        };
        Ok(grads)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
