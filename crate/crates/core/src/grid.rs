//! Single-channel `H×W` maps: real-valued grids and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major real-valued map (probabilities, entropies).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}×{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Takes the single channel of a `1×H×W` or `1×1×H×W` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("expected one channel, got {s:?}"))),
        };
        Self::new(h, w, t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major binary mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}×{width} cannot hold {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask value {v} is not binary"
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// `1×H×W` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Pixels within Chebyshev distance 1 of a pixel with the opposite label:
    /// a two-pixel band straddling every foreground boundary.
    pub fn boundary_band(&self) -> Mask {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut band = vec![0u8; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                let here = self.data[(r * w + c) as usize];
                let edge = (-1..=1).any(|dr| {
                    (-1..=1).any(|dc| {
                        let (rr, cc) = (r + dr, c + dc);
                        rr >= 0
                            && cc >= 0
                            && rr < h
                            && cc < w
                            && self.data[(rr * w + cc) as usize] != here
                    })
                });
                band[(r * w + c) as usize] = edge as u8;
            }
        }
        Mask {
            height: self.height,
            width: self.width,
            data: band,
        }
    }
}
