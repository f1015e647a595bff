//! Local and semantic attention modules.
//!
//! The local module gates a fragment with a learned one-channel heatmap. The
//! semantic module turns a gated fragment into a single weight in `(0, 1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, Bound, ConvLayer, MlpHead, Mode, ParamStore};
use crate::tensor::Tensor;

/// Side length of the semantic pooling grid.
pub const SAM_POOL: usize = 32;
/// Length of the pooled semantic vector.
pub const SAM_VEC: usize = SAM_POOL * SAM_POOL;
pub const DEFAULT_SAM_MLP: [usize; 4] = [SAM_VEC, 256, 64, 1];

const CHANNELS: usize = 3;

/// Residual attention stream shared by both modules: `x + conv2(relu(bn(x)))`
/// followed by a one-channel conv and a sigmoid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionStream {
    pub bn: BatchNormLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
}

impl AttentionStream {
    fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        AttentionStream {
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), CHANNELS),
            conv2: ConvLayer::new(store, &format!("{name}.conv2"), CHANNELS, CHANNELS, rng),
            conv3: ConvLayer::new(store, &format!("{name}.conv3"), CHANNELS, 1, rng),
        }
    }

    /// Returns the pre-sigmoid map `conv3(x_a)`.
    fn logits(&self, tape: &mut Tape, p: &mut Bound, x: Var, mode: Mode) -> Result<Var> {
        let r = self.bn.forward(tape, p, x, mode)?;
        let r = tape.relu(r)?;
        let r = self.conv2.forward(tape, p, r)?;
        let xa = tape.add(x, r)?;
        self.conv3.forward(tape, p, xa)
    }

    /// Pushes the conv3 bias to `b` and zeroes its kernel, fixing the map to
    /// `sigmoid(b)` everywhere.
    pub fn saturate(&self, store: &mut ParamStore, b: f64) {
        store.get_mut(self.conv3.kernel).data_mut().fill(0.0);
        if let Some(bias) = self.conv3.bias {
            store.get_mut(bias).data_mut().fill(b);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lam {
    pub conv1: ConvLayer,
    pub stream: AttentionStream,
}

#[derive(Debug, Clone, Copy)]
pub struct LamOutput {
    /// Gated fragment, same shape as the input.
    pub x_att: Var,
    /// Heatmap in `(0, 1)` with one channel.
    pub h_att: Var,
}

impl Lam {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        Lam {
            conv1: ConvLayer::new(store, &format!("{name}.conv1"), CHANNELS, CHANNELS, rng),
            stream: AttentionStream::new(store, name, rng),
        }
    }

    /// `x` is `N×S×S×3` or `S×S×3`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Bound, x: Var, mode: Mode) -> Result<LamOutput> {
        let xf = self.conv1.forward(tape, p, x)?;
        let m = self.stream.logits(tape, p, x, mode)?;
        let h_att = tape.sigmoid(m)?;
        let x_att = tape.hadamard(xf, h_att)?;
        Ok(LamOutput { x_att, h_att })
    }

    /// Eval-mode pass on plain tensors; returns `(x_att, h_att)`.
    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &mut p, xv, Mode::Eval)?;
        Ok((tape.value(out.x_att).clone(), tape.value(out.h_att).clone()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sam {
    pub stream: AttentionStream,
    pub mlp: MlpHead,
}

impl Sam {
    /// `mlp_widths` must start at [`SAM_VEC`] and end at 1.
    pub fn new(store: &mut ParamStore, name: &str, mlp_widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if mlp_widths.len() < 2 || mlp_widths[0] != SAM_VEC || *mlp_widths.last().unwrap() != 1 {
            return Err(Error::contract(format!(
                "semantic MLP widths must run from {SAM_VEC} to 1, got {mlp_widths:?}"
            )));
        }
        Ok(Sam {
            stream: AttentionStream::new(store, name, rng),
            mlp: MlpHead::new(store, &format!("{name}.mlp"), mlp_widths, rng),
        })
    }

    /// Pooled, flattened attention map: `N×1024`.
    pub fn pooled(&self, tape: &mut Tape, p: &mut Bound, x_att: Var, mode: Mode) -> Result<Var> {
        let (n, ..) = tape.value(x_att).nhwc()?;
        let m = self.stream.logits(tape, p, x_att, mode)?;
        let w_att = tape.sigmoid(m)?;
        let pooled = tape.adaptive_avg_pool(w_att, SAM_POOL, SAM_POOL)?;
        tape.reshape(pooled, &[n, SAM_VEC])
    }

    /// Fragment weights, `N×1`, each in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Bound, x_att: Var, mode: Mode) -> Result<Var> {
        let v = self.pooled(tape, p, x_att, mode)?;
        let logit = self.mlp.forward(tape, p, v)?;
        tape.sigmoid(logit)
    }

    /// Eval-mode weight of a single `S×S×3` fragment.
    pub fn infer(&self, store: &ParamStore, x_att: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let mut p = store.bind(&mut tape, false);
        let xv = tape.constant(x_att.clone());
        let w = self.forward(&mut tape, &mut p, xv, Mode::Eval)?;
        Ok(tape.value(w).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_conv3_gives_half_heatmap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lam = Lam::new(&mut store, "lam", &mut rng);
        lam.stream.saturate(&mut store, 0.0);
        let x = Tensor::from_fn(&[8, 8, 3], |_| rng.random());
        let (xa, h) = lam.infer(&store, &x).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.5));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let xf = lam.conv1.forward(&mut tape, &p, xv).unwrap();
        for (a, b) in xa.data().iter().zip(tape.value(xf).data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn saturated_identity_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lam = Lam::new(&mut store, "lam", &mut rng);
        let k = store.get_mut(lam.conv1.kernel).data_mut();
        k.fill(0.0);
        for c in 0..3 {
            k[((1 * 3 + 1) * 3 + c) * 3 + c] = 1.0;
        }
        lam.stream.saturate(&mut store, 50.0);
        let x = Tensor::from_fn(&[6, 6, 3], |_| rng.random());
        let (xa, h) = lam.infer(&store, &x).unwrap();
        assert!(h.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        for (a, b) in xa.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_channel_count_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lam = Lam::new(&mut store, "lam", &mut rng);
        let err = lam.infer(&store, &Tensor::zeros(&[4, 4, 2])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn lam_preserves_shape_for_small_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let lam = Lam::new(&mut store, "lam", &mut rng);
        for s in [1, 2, 5] {
            let (xa, h) = lam.infer(&store, &Tensor::ones(&[s, s, 3])).unwrap();
            assert_eq!(xa.shape(), &[s, s, 3]);
            assert_eq!(h.shape(), &[s, s, 1]);
        }
    }

    #[test]
    fn lam_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let lam = Lam::new(&mut store, "lam", &mut rng);
        let mut inputs = vec![random(&[2, 5, 5, 3], &mut rng)];
        inputs.extend(store.trainable_values());
        let weights = random(&[2, 5, 5, 3], &mut rng);
        let err = gradient_check_many(
            |tape, vars| {
                let mut p = store.bind_inputs(tape, &vars[1..])?;
                let out = lam.forward(tape, &mut p, vars[0], Mode::Train)?;
                let w = tape.constant(weights.clone());
                let y = tape.mul(out.x_att, w)?;
                tape.sum(y)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sam_zero_head_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let sam = Sam::new(&mut store, "sam", &DEFAULT_SAM_MLP, &mut rng).unwrap();
        sam.mlp.last().zero(&mut store);
        for seed in 0..3 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[40, 40, 3], &mut r);
            assert_eq!(sam.infer(&store, &x).unwrap(), 0.5);
        }
    }

    #[test]
    fn sam_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let sam = Sam::new(&mut store, "sam", &DEFAULT_SAM_MLP, &mut rng).unwrap();
        let x = random(&[32, 32, 3], &mut rng);
        let a = sam.infer(&store, &x).unwrap();
        let b = sam.infer(&store, &x.clone()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn sam_rejects_small_fragments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let sam = Sam::new(&mut store, "sam", &DEFAULT_SAM_MLP, &mut rng).unwrap();
        let err = sam.infer(&store, &Tensor::zeros(&[31, 31, 3])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn sam_pooled_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let sam = Sam::new(&mut store, "sam", &DEFAULT_SAM_MLP, &mut rng).unwrap();
        for s in [32, 33, 48, 64, 77] {
            let mut tape = Tape::new();
            let mut p = store.bind(&mut tape, false);
            let x = tape.constant(Tensor::full(&[s, s, 3], 0.3));
            let v = sam.pooled(&mut tape, &mut p, x, Mode::Eval).unwrap();
            assert_eq!(tape.value(v).shape(), &[1, SAM_VEC]);
        }
    }

    #[test]
    fn bad_mlp_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        assert!(Sam::new(&mut store, "sam", &[1000, 1], &mut rng).is_err());
        assert!(Sam::new(&mut store, "sam", &[SAM_VEC, 4], &mut rng).is_err());
    }

    #[test]
    fn sam_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let sam = Sam::new(&mut store, "sam", &[SAM_VEC, 4, 3, 1], &mut rng).unwrap();
        let mut inputs = vec![random(&[1, 32, 32, 3], &mut rng)];
        inputs.extend(store.trainable_values());
        let err = gradient_check_many(
            |tape, vars| {
                let mut p = store.bind_inputs(tape, &vars[1..])?;
                let w = sam.forward(tape, &mut p, vars[0], Mode::Eval)?;
                tape.sum(w)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sam_pooling_of_constant_map_is_constant() {
        for s in [32, 45, 64] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::full(&[s, s, 1], 0.3));
            let v = tape.adaptive_avg_pool(x, SAM_POOL, SAM_POOL).unwrap();
            assert!(tape.value(v).data().iter().all(|&u| (u - 0.3).abs() < 1e-15));
        }
    }
}
