//! Dense row-major `f64` arrays plus a define-by-run reverse-mode tape.
//!
//! Every value is a 2-D matrix (`[rows, cols]`); a scalar is `[1, 1]`. There is
//! no implicit broadcasting: row-vector bias addition is the explicit
//! [`Var::add_row`] op and scalar arithmetic has dedicated ops.

mod tape;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub use tape::{Gradients, Tape, Var};

/// A dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![value],
        }
    }

    /// A `1 × n` row vector.
    pub fn row(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "row vector must be non-empty");
        Self {
            shape: [1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension {
                op: "from_rows",
                lhs: rows.iter().map(|r| r.len()).collect(),
                rhs: vec![cols],
            });
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests;
