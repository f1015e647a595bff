use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore, StatUpdate};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// 3×3 convolution, stride 1, padding 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: ParamId,
    /// `None` when a batch norm follows and would cancel the bias.
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl ConvLayer {
    /// He-normal kernel, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let mut conv = ConvLayer::new_unbiased(store, name, cin, cout, rng);
        conv.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        conv
    }

    /// He-normal kernel and no bias parameter.
    pub fn new_unbiased(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (9 * cin) as f64).sqrt();
        let kernel = Tensor::from_fn(&[3, 3, cin, cout], |_| {
            std * normal(rng)
        });
        ConvLayer {
            kernel: store.add(format!("{name}.kernel"), kernel, true),
            bias: None,
            cin,
            cout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let bias = match self.bias {
            Some(id) => p.var(id),
            None => tape.constant(Tensor::zeros(&[self.cout])),
        };
        tape.conv2d(x, p.var(self.kernel), bias)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
    pub channels: usize,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNormLayer {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                false,
            ),
            eps: 1e-5,
            momentum: 0.1,
            channels,
        }
    }

    /// In train mode the batch statistics are queued on `p`; apply them with
    /// [`ParamStore::apply_stat_updates`] after the step.
    pub fn forward(&self, tape: &mut Tape, p: &mut Bound, x: Var, mode: Mode) -> Result<Var> {
        let (g, b) = (p.var(self.gamma), p.var(self.beta));
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm_train(x, g, b, self.eps)?;
                p.stat_updates.push(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: self.momentum,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = tape.value(p.var(self.running_mean)).data().to_vec();
                let rv = tape.value(p.var(self.running_var)).data().to_vec();
                tape.batchnorm_eval(x, g, b, &rm, &rv, self.eps)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fin as f64).sqrt();
        let w = Tensor::from_fn(&[fin, fout], |_| std * normal(rng));
        Linear {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fout]), true),
            fin,
            fout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }

    /// Zeroes weights and bias so the layer emits a constant zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Fully-connected stack with relu between consecutive layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpHead {
    pub layers: Vec<Linear>,
}

impl MlpHead {
    /// `widths` lists every layer boundary, e.g. `[1024, 256, 64, 1]`.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{}", i + 1), w[0], w[1], rng))
            .collect();
        MlpHead { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x)?;
            }
            x = layer.forward(tape, p, x)?;
        }
        Ok(x)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fin
    }
}
