//! Named parameter tensors and their gradient buffers.
//!
//! Parameters live in creation order in a flat arena; layers address
//! them by index, checkpoints and the optimizer by name. Storage is
//! `f32`; compute borrows the arena at whatever precision the caller
//! instantiated (`f32` for training, `f64` for the finite-difference
//! oracle) via [`Params::convert`].

use crate::error::{Error, Result};
use crate::linalg::Real;
use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    no_decay: Vec<bool>,
    data: Vec<Vec<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            shapes: Vec::new(),
            no_decay: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a tensor; panics on duplicate names or shape/data mismatch
    /// (both are construction bugs, not runtime conditions).
    pub fn push(&mut self, name: &str, shape: &[usize], no_decay: bool, data: Vec<F>) -> usize {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name}: shape {shape:?} vs {} values",
            data.len()
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.names.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.no_decay.push(no_decay);
        self.data.push(data);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn no_decay(&self, i: usize) -> bool {
        self.no_decay[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn data(&self, i: usize) -> &[F] {
        &self.data[i]
    }

    pub fn data_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i]
    }

    pub fn view1(&self, i: usize) -> ArrayView1<'_, F> {
        debug_assert_eq!(self.shapes[i].len(), 1, "{} is not rank 1", self.names[i]);
        ArrayView1::from(self.data[i].as_slice())
    }

    pub fn view2(&self, i: usize) -> ArrayView2<'_, F> {
        let s = &self.shapes[i];
        debug_assert_eq!(s.len(), 2, "{} is not rank 2", self.names[i]);
        ArrayView2::from_shape((s[0], s[1]), self.data[i].as_slice()).expect("shape checked")
    }

    /// Total scalar parameter count.
    pub fn total_len(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }

    /// Re-types every tensor (exact for f32 -> f64 widening).
    pub fn convert<G: Real>(&self) -> Params<G> {
        Params {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            no_decay: self.no_decay.clone(),
            data: self
                .data
                .iter()
                .map(|t| t.iter().map(|&v| G::from_f64(v.to_f64())).collect())
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values from `other` (same layout) into this arena.
    pub fn load_values(&mut self, name: &str, values: &[F]) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter \"{name}\"")))?;
        if values.len() != self.data[i].len() {
            return Err(Error::Data(format!(
                "parameter \"{name}\" expects {} values, got {}",
                self.data[i].len(),
                values.len()
            )));
        }
        self.data[i].copy_from_slice(values);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl<F: Real> Default for Params<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers aligned with a parameter arena.
#[derive(Debug, Clone)]
pub struct GradStore<F> {
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<F>>,
}

impl<F: Real> GradStore<F> {
    pub fn zeroed<G: Real>(params: &Params<G>) -> Self {
        GradStore {
            shapes: (0..params.len()).map(|i| params.shape(i).to_vec()).collect(),
            data: (0..params.len())
                .map(|i| vec![F::zero(); params.data(i).len()])
                .collect(),
        }
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.data {
            t.fill(F::zero());
        }
    }

    pub fn data(&self, i: usize) -> &[F] {
        &self.data[i]
    }

    pub fn data_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i]
    }

    pub fn view1_mut(&mut self, i: usize) -> ArrayViewMut1<'_, F> {
        debug_assert_eq!(self.shapes[i].len(), 1);
        ArrayViewMut1::from(self.data[i].as_mut_slice())
    }

    pub fn view2_mut(&mut self, i: usize) -> ArrayViewMut2<'_, F> {
        let (r, c) = (self.shapes[i][0], self.shapes[i][1]);
        ArrayViewMut2::from_shape((r, c), self.data[i].as_mut_slice()).expect("shape checked")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Largest absolute entry across all tensors.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|t| t.iter())
            .map(|&v| Real::to_f64(v).abs())
            .fold(0.0, f64::max)
    }
}
