//! Dense row-major `f64` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense n-dimensional array of finite `f64` values with an optional gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} must have positive dimensions")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: "tensor::new" });
        }
        Ok(Self { shape, values, grad: None, requires_grad: false })
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values, grad: None, requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts_unchecked(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts_unchecked(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::dim(format!(
                "gradient of length {} for tensor of shape {:?}",
                delta.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Replaces the values in place; the new values must be finite and of equal length.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::dim("assign: length mismatch"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: "tensor::assign" });
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.values.len());
        }
        Ok(self)
    }

    /// Rows `start..start + count` along the first axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Self> {
        self.gather_rows(&(start..start + count).collect::<Vec<_>>())
    }

    /// Gathers whole sub-tensors along the first axis.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        let stride = self.values.len() / n;
        let mut values = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::Index(format!("row {r} out of range for {n} rows")));
            }
            values.extend_from_slice(&self.values[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self::new(shape, values)
    }

    /// Value at a 2-D index.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.shape[1] + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(Error::Numeric { .. })));
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Dimension(_))));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn grads_accumulate() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad(), Some(&[2.0, 4.0][..]));
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn gather_rows_of_images() {
        let t = Tensor::new(vec![3, 1, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.shape(), &[2, 1, 2]);
        assert_eq!(g.values(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
