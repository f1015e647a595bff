//! Layers, losses and the optimizer used by the detector.

pub mod checkpoint;
mod layers;
mod optim;
mod params;

pub use layers::{BatchNormLayer, ConvLayer, Linear, MlpHead, Mode};
pub use optim::{SgdMomentum, StepSchedule};
pub use params::{Bound, ParamEntry, ParamId, ParamStore};

use crate::autograd::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(autograd::sigmoid)
}

/// Softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    if let Some(&k) = logits.shape().last() {
        if k > 0 {
            for row in out.data_mut().chunks_mut(k) {
                autograd::softmax_in_place(row);
            }
        }
    }
    out.requires_grad = false;
    out.grad = None;
    out
}

/// `−ln(max(probs[y], 1e-12))` for a single probability pair.
pub fn cross_entropy(probs: &[f64], y: usize) -> Result<f64> {
    if y > 1 || probs.len() != 2 {
        return Err(Error::contract(format!(
            "cross entropy needs a probability pair and label in {{0,1}}, got {} entries and label {y}",
            probs.len()
        )));
    }
    Ok(-probs[y].max(LOG_FLOOR).ln())
}

/// Mean cross entropy of batched probabilities on a tape.
pub fn cross_entropy_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll(probs, labels, LOG_FLOOR)
}

/// Adaptive average pooling of a one-or-more-channel map, flattened row-major.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = tape.adaptive_avg_pool(v, out_h, out_w)?;
    let n = tape.value(p).len();
    tape.value(p).clone().reshape(&[n])
}
