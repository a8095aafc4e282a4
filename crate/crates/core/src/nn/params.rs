use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Registration order is the serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push((name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].1
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total count of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.params {
            t.zero_grad();
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub(crate) fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.buffers.iter_mut().map(|(_, t)| t)
    }

    /// Flattened copy of all parameter values in registration order.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params.iter().chain(&self.buffers).map(|(_, t)| t.data().to_vec()).collect()
    }

    /// Restores values captured by [`ParamStore::snapshot`].
    pub fn restore(&mut self, snapshot: &[Vec<T>]) -> Result<()> {
        if snapshot.len() != self.params.len() + self.buffers.len() {
            return Err(Error::Shape("snapshot does not match parameter registry".into()));
        }
        for ((_, t), values) in self.params.iter_mut().chain(self.buffers.iter_mut()).zip(snapshot) {
            if t.len() != values.len() {
                return Err(Error::Shape("snapshot tensor length mismatch".into()));
            }
            t.data_mut().copy_from_slice(values);
        }
        Ok(())
    }
}

/// Uniform `±sqrt(6 / fan_in)` initialization.
pub(crate) fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// 1D convolution followed by batch normalization; the activation is applied
/// by the caller. Kernel layout is `out_ch × in_ch × kernel_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub bn: BatchNormIds,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNormIds {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.bn.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add_param(format!("{name}.bn.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.bn.running_var"), Tensor::full(&[channels], T::one())),
        }
    }
}

impl Conv1dBlock {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("kernel size {kernel_size} must be odd")));
        }
        let fan_in = in_channels * kernel_size;
        let kernel = store.add_param(
            format!("{name}.conv.weight"),
            fan_in_uniform(&[out_channels, in_channels, kernel_size], fan_in, rng),
        );
        let bias = store.add_param(format!("{name}.conv.bias"), Tensor::zeros(&[out_channels]));
        let bn = BatchNormIds::register(store, name, out_channels);
        Ok(Self { kernel, bias, bn, in_channels, out_channels, kernel_size })
    }
}

/// Weight `out × in` and bias `out` of a fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearParams {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight =
            store.add_param(format!("{name}.weight"), fan_in_uniform(&[out_features, in_features], in_features, rng));
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self { weight, bias, in_features, out_features }
    }
}

/// Registry entry written into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Byte offset into the payload that follows the header.
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
}
