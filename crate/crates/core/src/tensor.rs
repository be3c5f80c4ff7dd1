//! Dense row-major `f64` tensors.

use crate::error::{Error, Result};

/// Initial contents for [`Tensor::new`].
#[derive(Debug, Clone)]
pub enum Fill {
    Scalar(f64),
    Values(Vec<f64>),
}

impl From<f64> for Fill {
    fn from(v: f64) -> Self {
        Fill::Scalar(v)
    }
}

impl From<Vec<f64>> for Fill {
    fn from(v: Vec<f64>) -> Self {
        Fill::Values(v)
    }
}

/// An n-dimensional double-precision array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], fill: impl Into<Fill>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        let data = match fill.into() {
            Fill::Scalar(v) => vec![v; len],
            Fill::Values(values) => {
                if values.len() != len {
                    return Err(Error::Shape(format!(
                        "shape {shape:?} holds {len} values, got {}",
                        values.len()
                    )));
                }
                values
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a tensor from parts whose consistency the caller already guarantees.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &x)| *b += x),
            None => self.grad = Some(g),
        }
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Extents of a 4-D `N×C×H×W` tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Shape(format!(
                "expected N×C×H×W, got {:?}",
                self.shape
            ))),
        }
    }

    /// Copies item `index` of a batched tensor, keeping a leading extent of 1.
    pub fn batch_item(&self, index: usize) -> Result<Tensor> {
        let n = self.shape[0];
        if index >= n {
            return Err(Error::InvalidArgument(format!(
                "batch index {index} out of {n}"
            )));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor::from_parts(
            shape,
            self.data[index * stride..(index + 1) * stride].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new or existing leading axis.
    ///
    /// Items of shape `[1, ...]` are concatenated on that axis, other shapes gain
    /// a leading batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        if items.iter().any(|t| t.shape != first.shape) {
            return Err(Error::Shape("stacked tensors must share a shape".into()));
        }
        let mut shape = first.shape.clone();
        if shape[0] == 1 && shape.len() == 4 {
            shape[0] = items.len();
        } else {
            shape.insert(0, items.len());
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts(shape, data))
    }
}
