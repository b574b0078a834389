//! Square depth maps and facial masks.

use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::pgm::GrayImage;
use crate::tensor::{Shape, Tensor};

/// Side length of the full-scale depth target.
pub const DEPTH_SIZE: usize = 32;

/// Square grid of depth values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    size: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(invalid(format!(
                "depth map of side {size} needs {} values, got {}",
                size * size,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            if !data[index].is_finite() {
                return Err(Error::NonFinite {
                    context: "depth map",
                    index,
                });
            }
            return Err(invalid(format!("depth value {} at {index} outside [0, 1]", data[index])));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, value: f64) -> Result<Self> {
        Self::new(size, vec![value; size * size])
    }

    /// From a `(1, 1, s, s)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape().0;
        if n != 1 || c != 1 || h != w {
            return Err(invalid(format!("depth map tensor must be (1, 1, s, s), got {}", t.shape())));
        }
        Self::new(h, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(Shape::new(1, 1, self.size, self.size), self.data.clone())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn expect_same_size(&self, other: &DepthMap, op: &'static str) -> Result<()> {
        if self.size != other.size {
            let s = |m: &DepthMap| Shape::new(1, 1, m.size, m.size);
            return Err(Error::ShapeMismatch {
                op,
                left: s(self),
                right: s(other),
            });
        }
        Ok(())
    }

    /// 8-bit grayscale with `value = round(255 * d)`.
    pub fn to_image(&self) -> GrayImage {
        let pixels = self.data.iter().map(|d| (255.0 * d).round() as u8).collect();
        GrayImage::new(self.size, self.size, pixels).expect("square buffer")
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().write(path)
    }
}

/// Binary facial-area mask on the depth grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(size: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != size * size {
            return Err(invalid(format!("mask of side {size} needs {} cells", size * size)));
        }
        Ok(Self { size, cells })
    }

    pub fn full(size: usize) -> Self {
        Self {
            size,
            cells: vec![true; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    /// Number of facial pixels.
    pub fn area(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}
