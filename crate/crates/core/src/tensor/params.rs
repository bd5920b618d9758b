//! Named, shaped parameter collections shared by the optimizer, the model
//! builders, and checkpoint serialization.

use super::{Scalar, TensorError};

/// One trainable array: a stable name, a shape, and flat data.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Self {
        let tensor = Self {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(tensor.shape.iter().product::<usize>(), tensor.data.len());
        tensor
    }
}

/// An ordered set of parameter tensors. Order is structural: gradients and
/// optimizer state are matched to parameters by position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Append an entry and return its index.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> usize {
        self.entries.push(ParamTensor::new(name, shape, data));
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamTensor<T>] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &ParamTensor<T> {
        &self.entries[idx]
    }

    pub fn data(&self, idx: usize) -> &[T] {
        &self.entries[idx].data
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.entries[idx].data
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// A structurally identical set with all values zero, for accumulating
    /// gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: vec![T::zero(); e.data.len()],
                })
                .collect(),
        }
    }

    /// Convert every entry to another scalar type (used to run f32-trained
    /// structures through f64 gradient verification).
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// All values concatenated in entry order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|e| e.data.iter().copied())
            .collect()
    }

    /// Overwrite all values from a flat vector laid out as [`Self::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<(), TensorError> {
        if flat.len() != self.n_params() {
            return Err(TensorError::ShapeMismatch {
                context: format!(
                    "{} flat values for {} parameters",
                    flat.len(),
                    self.n_params()
                ),
            });
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let len = e.data.len();
            e.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Elementwise `self += other`, used to accumulate gradient pieces.
    pub fn add_assign(&mut self, other: &ParamSet<T>) -> Result<(), TensorError> {
        if self.entries.len() != other.entries.len() {
            return Err(TensorError::ShapeMismatch {
                context: format!(
                    "param sets with {} vs {} entries",
                    self.entries.len(),
                    other.entries.len()
                ),
            });
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.data.len() != b.data.len() {
                return Err(TensorError::ShapeMismatch {
                    context: format!("entry {}: {} vs {} values", a.name, a.data.len(), b.data.len()),
                });
            }
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        Ok(())
    }
}
