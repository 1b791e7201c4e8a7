use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter. Clones share the id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

/// A named trainable tensor.
///
/// Every mutation bumps `version`; gradients recorded against an older
/// version are refused when looked up.
#[derive(Debug, Clone)]
pub struct Param {
    id: ParamId,
    name: String,
    value: Tensor,
    version: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            version: 0,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Mutate the values in place.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(self.value.data_mut());
        self.version += 1;
    }

    /// Replace the values; the shape must not change.
    pub fn set_data(&mut self, data: &[f64]) {
        assert_eq!(data.len(), self.value.len(), "parameter size changed");
        self.update(|d| d.copy_from_slice(data));
    }
}

/// Anything that owns trainable parameters.
pub trait Module {
    /// Parameters in a fixed, architecture-defined order.
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
