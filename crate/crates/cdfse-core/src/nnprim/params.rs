use super::tensor::Tensor;
use std::collections::HashMap;

/// Index of a trainable parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Index of a non-trainable buffer (batchnorm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(pub(crate) usize);

/// A named trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Flat registry of all parameters and buffers of a model.
///
/// Insertion order is the canonical order used by the optimizer and the
/// checkpoint writer, so identical construction code always produces
/// byte-identical checkpoints. Names are unique dot-separated paths like
/// `refenc.prenet.conv0.weight`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    names: HashMap<String, usize>,
    buffer_names: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.names.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        ParamId(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufId {
        let name = name.into();
        assert!(
            !self.buffer_names.contains_key(&name),
            "duplicate buffer name {name}"
        );
        let id = self.buffers.len();
        self.buffer_names.insert(name.clone(), id);
        self.buffers.push(Buffer { name, value });
        BufId(id)
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Total scalar count across all trainable parameters.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied().map(ParamId)
    }

    pub fn lookup_buffer(&self, name: &str) -> Option<BufId> {
        self.buffer_names.get(name).copied().map(BufId)
    }

    /// Reset every gradient accumulator to zero.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Add a backward pass's gradients into the accumulators.
    pub fn accumulate(&mut self, grads: Gradients) {
        for (id, g) in grads.entries {
            let p = &mut self.params[id.0];
            debug_assert_eq!(p.value.shape(), g.shape());
            for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += v;
            }
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
pub struct Gradients {
    pub(crate) entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}
