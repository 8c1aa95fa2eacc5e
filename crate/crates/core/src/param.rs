//! Trainable parameters that live outside the tape.
//!
//! A [`Param`] owns its buffer behind an `Arc`; binding it to a [`Tape`]
//! registers the same allocation as a gradient-tracking leaf, so forward
//! passes never copy weights. The optimizer mutates buffers in place via
//! [`Param::values_mut`] between passes.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Param<T> {
    data: Arc<Vec<T>>,
    rows: usize,
    cols: usize,
}

impl<T: Scalar> Param<T> {
    pub fn new(data: Vec<T>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        Param {
            data: Arc::new(data),
            rows,
            cols,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(vec![T::zero(); rows * cols], rows, cols)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::new(vec![T::from_f64(value); rows * cols], rows, cols)
    }

    /// Uniform(-b, b) with b = sqrt(6 / (rows + cols)).
    pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Self::new(data, rows, cols)
    }

    /// Gaussian(mean, std) entries.
    pub fn gaussian<R: Rng>(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(mean, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Self::new(data, rows, cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    /// Mutable view for the optimizer; clones only if a tape still holds
    /// the buffer (tapes are dropped before stepping, so normally no copy).
    pub fn values_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Register this parameter on a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Var {
        tape.leaf_shared(Arc::clone(&self.data), self.rows, self.cols, true)
    }

    /// Same buffer, gradient tracking off (frozen rows are handled by the
    /// caller zeroing their gradient instead).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Var {
        tape.leaf_shared(Arc::clone(&self.data), self.rows, self.cols, false)
    }
}

/// Named tape handles for one forward pass, in a stable declaration order.
///
/// Layer structs register each field under a dotted path; the trainer walks
/// this list to pull gradients in the same order as the optimizer state.
pub struct ParamRegistry {
    entries: Vec<(String, Var)>,
}

impl Default for ParamRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamRegistry {
    pub fn new() -> Self {
        ParamRegistry {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
