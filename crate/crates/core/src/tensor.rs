use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major f64 buffer with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Views a rank-2 tensor as a matrix.
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "matrix view of rank-{} tensor", self.shape.len());
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("shape checked at construction")
    }

    pub fn matrix_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "matrix view of rank-{} tensor", self.shape.len());
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data)
            .expect("shape checked at construction")
    }
}
