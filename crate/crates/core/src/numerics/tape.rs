use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Param, ParamId, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(super) tape: u64,
    pub(super) idx: usize,
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient for each input given the output gradient. `None` means the
    /// input receives no gradient from this node.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

pub(super) enum Op {
    Leaf {
        param: Option<(ParamId, u64, String)>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Upsample2 {
        x: usize,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: usize,
        /// normalized input
        xhat: Vec<f64>,
        /// per row (layer norm) or per channel (batch norm)
        inv_std: Vec<f64>,
        kind: NormKind,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        alpha: f64,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    LogSoftmax {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Pick {
        x: usize,
        flat: Vec<usize>,
    },
    MaxExcept {
        x: usize,
        flat: Vec<usize>,
    },
    ClampMax {
        x: usize,
        limit: f64,
    },
    RowNorm {
        x: usize,
    },
    RepeatClip {
        x: usize,
        period: usize,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Debug, Clone, Copy)]
pub(super) enum NormKind {
    /// statistics per channel over batch and length
    BatchTrain { channels: usize, len: usize },
    /// fixed running statistics per channel
    BatchEval { channels: usize, len: usize },
    /// statistics per row of `row_len`, affine per channel
    Layer {
        channels: usize,
        len: usize,
        per_channel: bool,
    },
}

pub(super) struct Node {
    pub(super) value: Tensor,
    pub(super) op: Op,
    pub(super) requires_grad: bool,
}

/// Record of executed operations, replayed in reverse for gradients.
pub struct Tape {
    pub(super) id: u64,
    pub(super) nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(super) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub(super) fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::StaleTape(format!(
                "variable from tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(v.idx)
    }

    pub(super) fn requires(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Differentiable snapshot of a parameter.
    pub fn param(&mut self, p: &Param) -> Var {
        self.push(
            p.value().clone(),
            Op::Leaf {
                param: Some((p.id(), p.version(), p.name().to_string())),
            },
            true,
        )
    }

    /// Parameter used as a constant; no gradient is computed for it.
    pub fn frozen(&mut self, p: &Param) -> Var {
        self.constant(p.value().clone())
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Register the result of an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let rg = idx.iter().any(|&i| self.requires(i));
        Ok(self.push(output, Op::Custom { inputs: idx, op }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();
        let mut params = Vec::new();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { param } = &node.op {
                match param {
                    Some((id, version, name)) => params.push(ParamGrad {
                        id: *id,
                        version: *version,
                        name: name.clone(),
                        grad: g,
                    }),
                    None => {
                        leaves.insert(i, g);
                    }
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
            params,
        })
    }

    pub(super) fn accumulate(&self, grads: &mut [Option<Vec<f64>>], idx: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let n = self.nodes[idx].value.len();
        let slot = grads[idx].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

struct ParamGrad {
    id: ParamId,
    version: u64,
    name: String,
    grad: Vec<f64>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    leaves: BTreeMap<usize, Vec<f64>>,
    params: Vec<ParamGrad>,
}

impl Gradients {
    /// Gradient with respect to a parameter. Parameters that did not take
    /// part in the computation get zeros; a parameter mutated after it was
    /// recorded is rejected.
    pub fn wrt(&self, p: &Param) -> Result<Vec<f64>> {
        let mut out = vec![0.0; p.len()];
        for pg in self.params.iter().filter(|pg| pg.id == p.id()) {
            if pg.version != p.version() {
                return Err(Error::StaleTape(format!(
                    "parameter `{}` changed after the forward pass (v{} -> v{})",
                    pg.name,
                    pg.version,
                    p.version()
                )));
            }
            for (o, g) in out.iter_mut().zip(&pg.grad) {
                *o += g;
            }
        }
        Ok(out)
    }

    /// Gradient with respect to a differentiable leaf created by
    /// [`Tape::leaf`].
    pub fn of(&self, v: Var, tape: &Tape) -> Result<Vec<f64>> {
        if v.tape != self.tape {
            return Err(Error::StaleTape("leaf from another tape".into()));
        }
        let i = tape.idx(v)?;
        Ok(self
            .leaves
            .get(&i)
            .cloned()
            .unwrap_or_else(|| vec![0.0; tape.nodes[i].value.len()]))
    }
}
