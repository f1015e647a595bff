use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Named parameters and buffers of one sub-network, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Records every entry on `tape`. With `train` set, trainable entries
    /// become differentiable leaves; otherwise everything is a constant.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if train && e.trainable {
                    tape.leaf(e.value.clone().with_grad())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound {
            vars,
            stat_updates: Vec::new(),
        }
    }

    /// Values of the trainable entries, in order.
    pub fn trainable_values(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.clone())
            .collect()
    }

    /// Like [`bind`](Self::bind) but takes the trainable entries from `vars`,
    /// one per trainable entry in order. Buffers are recorded as constants.
    pub fn bind_inputs(&self, tape: &mut Tape, vars: &[Var]) -> Result<Bound> {
        let wanted = self.entries.iter().filter(|e| e.trainable).count();
        if vars.len() != wanted {
            return Err(Error::contract(format!(
                "expected {wanted} parameter inputs, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter();
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    *it.next().unwrap()
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Ok(Bound {
            vars,
            stat_updates: Vec::new(),
        })
    }

    /// Folds batch statistics gathered during a training forward pass into
    /// the running buffers.
    pub fn apply_stat_updates(&mut self, bound: &mut Bound) {
        for up in bound.stat_updates.drain(..) {
            let m = up.momentum;
            for (r, b) in self.entries[up.mean.0]
                .value
                .data_mut()
                .iter_mut()
                .zip(&up.stats.mean)
            {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.entries[up.var.0]
                .value
                .data_mut()
                .iter_mut()
                .zip(&up.stats.var)
            {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Concatenated little-endian bytes of every entry; used to compare
    /// parameter sets bit-for-bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub(crate) fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub(crate) struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// Tape handles for one [`ParamStore`].
#[derive(Debug)]
pub struct Bound {
    vars: Vec<Var>,
    pub(crate) stat_updates: Vec<StatUpdate>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
