use super::{Result, Scalar, Tensor4, TensorError};

/// One trainable tensor together with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub weights: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub adam_m: Tensor4<T>,
    pub adam_v: Tensor4<T>,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn new(name: impl Into<String>, weights: Tensor4<T>) -> Self {
        let shape = weights.shape();
        Self {
            name: name.into(),
            weights,
            grad: Tensor4::zeros(shape),
            adam_m: Tensor4::zeros(shape),
            adam_v: Tensor4::zeros(shape),
        }
    }
}

/// Ordered, named collection of parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Appends a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, weights: Tensor4<T>) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(TensorError::State(format!("duplicate parameter `{name}`")));
        }
        self.entries.push(ParamEntry::new(name, weights));
        Ok(self.entries.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<T> {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry<T> {
        &mut self.entries[idx]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.entries.iter().map(|e| e.weights.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Copy of the weights only, with fresh gradients and moments.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry::new(e.name.clone(), e.weights.cast()))
                .collect(),
        }
    }
}
