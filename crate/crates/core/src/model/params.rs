use std::sync::Arc;

use crate::nn::BatchNormStats;
use crate::{Error, Result, Scalar, Tensor};

/// Role of a parameter, used to decide weight-decay eligibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// batch-norm or layer-norm affine term
    Norm,
    Position,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
}

/// Named trainable tensors in a fixed, documented order. A parameter's
/// index doubles as its key on the differentiation graph.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> usize {
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param {
            name,
            kind,
            value: Arc::new(value),
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.entries[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.entries[i].value.as_ref())
    }

    /// Mutable access to a parameter's values. Clones the buffer only if a
    /// graph still holds a reference to it.
    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[index].value)
    }

    /// Replaces a parameter by name, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let old = &self.entries[i].value;
        if old.shape() != value.shape() {
            return Err(Error::ConfigMismatch(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                old.shape()
            )));
        }
        self.entries[i].value = Arc::new(value);
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
        }
    }
}

/// Batch-norm running statistics, one entry per normalization layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferStore<T> {
    pub(crate) names: Vec<String>,
    pub(crate) stats: Vec<BatchNormStats<T>>,
}

impl<T: Scalar> BufferStore<T> {
    pub(crate) fn push(&mut self, name: String, channels: usize) -> usize {
        self.names.push(name);
        self.stats.push(BatchNormStats::new(channels));
        self.stats.len() - 1
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// `(name, stats)` pairs in layer order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &BatchNormStats<T>)> {
        self.names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut BatchNormStats<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.stats[i])
    }

    pub fn cast<U: Scalar>(&self) -> BufferStore<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.f64())).collect();
        BufferStore {
            names: self.names.clone(),
            stats: self
                .stats
                .iter()
                .map(|s| BatchNormStats {
                    running_mean: conv(&s.running_mean),
                    running_var: conv(&s.running_var),
                    momentum: s.momentum,
                    eps: s.eps,
                })
                .collect(),
        }
    }
}
