//! Dense rank-<=4 tensors in double precision.
//!
//! `Tensor` is plain storage: a shape and a flat row-major value buffer.
//! Differentiation lives on the [`crate::tape::Tape`]; a tensor only becomes
//! differentiable once staged there as a node.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const MAX_RANK: usize = 4;

/// Shape of a dense tensor, up to rank 4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Extent of the leading dimension.
    pub fn rows(&self) -> usize {
        self.0[0]
    }

    /// Number of elements per leading-dimension slice.
    pub fn row_size(&self) -> usize {
        self.numel() / self.0[0]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if shape.numel() != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape} holds {} elements but {} values were given",
                shape.numel(),
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn from_vec(dims: &[usize], values: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, values)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            values: vec![0.0; n],
        })
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            values: vec![value; n],
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            values: vec![value],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(dims: &[usize], std: f64, rng: &mut SplitMix64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let values = (0..shape.numel()).map(|_| std * rng.next_normal()).collect();
        Ok(Tensor { shape, values })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Single stored value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::Shape(format!(
                "item() needs a scalar, shape is {}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_rank_5() {
        assert!(Shape::new(&[1, 2, 3, 4, 5]).is_err());
    }

    #[test]
    fn rejects_element_count_mismatch() {
        let err = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn numel_matches_product_of_dims() {
        let t = Tensor::zeros(&[2, 3, 4]).unwrap();
        assert_eq!(t.numel(), 24);
        assert_eq!(t.shape().row_size(), 12);
    }

    #[test]
    fn finite_detection() {
        let mut t = Tensor::zeros(&[3]).unwrap();
        assert!(t.is_finite());
        t.values_mut()[1] = f64::NAN;
        assert_eq!(t.first_non_finite(), Some(1));
    }
}
