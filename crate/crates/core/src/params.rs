//! Named, shape-checked weight collections and the layer descriptions they
//! are initialized from.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("undefined parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {got:?}, layer expects {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("unexpected parameter `{0}`")]
    Unexpected(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
    PRelu { channels: usize },
    BatchNorm { channels: usize },
    Dense { in_features: usize, out_features: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self { name: name.into(), kind: LayerKind::Conv { in_ch, out_ch, kernel, stride } }
    }

    pub fn prelu(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), kind: LayerKind::PRelu { channels } }
    }

    pub fn batch_norm(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), kind: LayerKind::BatchNorm { channels } }
    }

    pub fn dense(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self { name: name.into(), kind: LayerKind::Dense { in_features, out_features } }
    }

    /// `(parameter name, shape)` for every array the layer owns.
    pub fn arrays(&self) -> Vec<(String, Vec<usize>)> {
        let n = &self.name;
        match self.kind {
            LayerKind::Conv { in_ch, out_ch, kernel, .. } => vec![
                (format!("{n}.weight"), vec![out_ch, in_ch, kernel, kernel]),
                (format!("{n}.bias"), vec![out_ch]),
            ],
            LayerKind::PRelu { channels } => vec![(format!("{n}.slope"), vec![channels])],
            LayerKind::BatchNorm { channels } => vec![
                (format!("{n}.gamma"), vec![channels]),
                (format!("{n}.beta"), vec![channels]),
            ],
            LayerKind::Dense { in_features, out_features } => vec![
                (format!("{n}.weight"), vec![out_features, in_features]),
                (format!("{n}.bias"), vec![out_features]),
            ],
        }
    }
}

/// Anything that can enumerate its layers.
pub trait Architecture {
    fn layer_specs(&self) -> Vec<LayerSpec>;

    /// Single-line `key=value` description stored in checkpoints.
    fn echo(&self) -> String;

    /// Verifies that `params` holds exactly this architecture's arrays.
    fn check<T: Real>(&self, params: &ParameterSet<T>) -> Result<(), ParamError> {
        let mut expected = 0;
        for spec in self.layer_specs() {
            for (name, shape) in spec.arrays() {
                let t = params.get(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(ParamError::Shape { name, expected: shape, got: t.shape().to_vec() });
                }
                expected += 1;
            }
        }
        if params.len() != expected {
            let specs = self.layer_specs();
            let known: Vec<String> = specs.iter().flat_map(|s| s.arrays()).map(|(n, _)| n).collect();
            if let Some(extra) = params.names().find(|n| !known.iter().any(|k| k == *n)) {
                return Err(ParamError::Unexpected(extra.to_string()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet<T> {
    arrays: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self { arrays: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ParamError> {
        self.arrays.get(name).ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ParamError> {
        self.arrays.get_mut(name).ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.arrays.insert(name.into(), t);
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self.arrays.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(Tensor::all_finite)
    }

    /// Sets every array to zero except PReLU slopes and batch-norm gains,
    /// which are left as they are.
    pub fn zero_weights(&mut self) {
        for (name, t) in self.arrays.iter_mut() {
            if name.ends_with(".weight") || name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Zeroes the weights and biases of every layer whose name starts with
    /// `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.arrays.iter_mut() {
            if name.starts_with(prefix) && (name.ends_with(".weight") || name.ends_with(".bias")) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// Xavier-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Xavier-uniform weights, zero biases, PReLU slopes of 0.25, unit
/// batch-norm gain. Layers are visited in declaration order so the result
/// depends only on the architecture and the RNG state.
pub fn init_parameters<T: Real, A: Architecture + ?Sized, R: Rng>(arch: &A, rng: &mut R) -> ParameterSet<T> {
    let mut ps = ParameterSet::new();
    for spec in arch.layer_specs() {
        let n = &spec.name;
        match spec.kind {
            LayerKind::Conv { in_ch, out_ch, kernel, .. } => {
                let k2 = kernel * kernel;
                let bound = xavier_bound(in_ch * k2, out_ch * k2);
                let w = Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| T::lit(rng.random_range(-bound..=bound)));
                ps.insert(format!("{n}.weight"), w);
                ps.insert(format!("{n}.bias"), Tensor::zeros(&[out_ch]));
            }
            LayerKind::Dense { in_features, out_features } => {
                let bound = xavier_bound(in_features, out_features);
                let w = Tensor::from_fn(&[out_features, in_features], |_| T::lit(rng.random_range(-bound..=bound)));
                ps.insert(format!("{n}.weight"), w);
                ps.insert(format!("{n}.bias"), Tensor::zeros(&[out_features]));
            }
            LayerKind::PRelu { channels } => {
                ps.insert(format!("{n}.slope"), Tensor::full(&[channels], T::lit(0.25)));
            }
            LayerKind::BatchNorm { channels } => {
                ps.insert(format!("{n}.gamma"), Tensor::full(&[channels], T::one()));
                ps.insert(format!("{n}.beta"), Tensor::zeros(&[channels]));
            }
        }
    }
    ps
}
