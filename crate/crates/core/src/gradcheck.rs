//! Central finite-difference checks for tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Lam, Sam, SAM_VEC};
use crate::autograd::{Tape, Var};
use crate::branches::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_loss, Mode, ParamStore, LOG_FLOOR};
use crate::tensor::Tensor;

/// Finite-difference step used by [`suite`].
pub const SUITE_EPS: f64 = 1e-5;
/// Largest relative error [`suite`] accepts.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Relative error floor used in the denominator.
const DENOM_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences. Returns the largest relative error over all coordinates.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Like [`gradient_check`] but differentiates with respect to several inputs
/// at once; the error is the maximum over every coordinate of every input.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let plus = eval(&f, &probe)?;
            probe[t].data_mut()[i] = orig - eps;
            let minus = eval(&f, &probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference of input {t} coordinate {i}"
                )));
            }
            let a = grad[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("function value at the base point".into()));
    }
    tape.backward(out)?;
    vars.iter()
        .enumerate()
        .map(|(t, &v)| {
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inputs[t].len()]);
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "analytic gradient of input {t} coordinate {i}"
                )));
            }
            Ok(g)
        })
        .collect()
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Check = (String, Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>);

fn op_check(name: &str, shapes: Vec<Vec<usize>>, out: Vec<usize>, f: fn(&mut Tape, &[Var]) -> Result<Var>) -> Check {
    (
        name.to_string(),
        Box::new(move |rng| {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(rng, s)).collect();
            let w = uniform(rng, &out);
            gradient_check_many(
                |t, v| {
                    let y = f(t, v)?;
                    weighted_sum(t, y, &w)
                },
                &inputs,
                SUITE_EPS,
            )
        }),
    )
}

fn checks() -> Vec<Check> {
    let x = vec![2, 5, 6, 3];
    let mut v: Vec<Check> = vec![
        op_check("conv2d", vec![x.clone(), vec![3, 3, 3, 4], vec![4]], vec![2, 5, 6, 4], |t, v| {
            t.conv2d(v[0], v[1], v[2])
        }),
        op_check("batchnorm_train", vec![x.clone(), vec![3], vec![3]], x.clone(), |t, v| {
            Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)
        }),
        op_check("batchnorm_eval", vec![x.clone(), vec![3], vec![3]], x.clone(), |t, v| {
            t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)
        }),
        op_check("relu", vec![x.clone()], x.clone(), |t, v| t.relu(v[0])),
        op_check("sigmoid", vec![x.clone()], x.clone(), |t, v| t.sigmoid(v[0])),
        op_check("max_pool2", vec![x.clone()], vec![2, 2, 3, 3], |t, v| t.max_pool2(v[0])),
        op_check("adaptive_avg_pool", vec![vec![1, 32, 32, 1]], vec![1, 7, 5, 1], |t, v| {
            t.adaptive_avg_pool(v[0], 7, 5)
        }),
        op_check("matmul", vec![vec![3, 4], vec![4, 2]], vec![3, 2], |t, v| t.matmul(v[0], v[1])),
        op_check("hadamard", vec![x.clone(), vec![2, 5, 6, 1]], x.clone(), |t, v| t.hadamard(v[0], v[1])),
        op_check("linear", vec![vec![4, 6], vec![6, 2], vec![2]], vec![4, 2], |t, v| {
            t.linear(v[0], v[1], v[2])
        }),
    ];
    v.push((
        "softmax_cross_entropy".into(),
        Box::new(|rng| {
            let z = uniform(rng, &[4, 2]);
            gradient_check(
                |t, v| {
                    let p = t.softmax_last(v)?;
                    cross_entropy_loss(t, p, &[0, 1, 1, 0])
                },
                &z,
                SUITE_EPS,
            )
        }),
    ));
    v.push((
        "fusion_loss".into(),
        Box::new(|rng| {
            let w = Tensor::from_fn(&[3, 6], |_| rng.random_range(0.1..1.0));
            let py = Tensor::from_fn(&[3, 6], |_| rng.random_range(0.1..1.0));
            gradient_check(
                |t, w| {
                    let c = t.constant(py.clone());
                    let wp = t.mul(w, c)?;
                    let num = t.sum_last(wp)?;
                    let den = t.sum_last(w)?;
                    let q = t.div(num, den)?;
                    let l = t.log_clamped(q, LOG_FLOOR)?;
                    let m = t.mean(l)?;
                    t.scale(m, -1.0)
                },
                &w,
                SUITE_EPS,
            )
        }),
    ));
    v.push((
        "backbone".into(),
        Box::new(|rng| {
            let mut store = ParamStore::new();
            let cfg = BackboneConfig {
                stages: vec![3, 4],
                hidden: 5,
            };
            let net = Backbone::new(&mut store, "bb", &cfg, 8, rng);
            let mut inputs = vec![uniform(rng, &[3, 8, 8, 3])];
            inputs.extend(store.trainable_values());
            gradient_check_many(
                |t, v| {
                    let mut p = store.bind_inputs(t, &v[1..])?;
                    let z = net.forward(t, &mut p, v[0], Mode::Train)?;
                    let probs = t.softmax_last(z)?;
                    cross_entropy_loss(t, probs, &[0, 1, 1])
                },
                &inputs,
                SUITE_EPS,
            )
        }),
    ));
    v.push((
        "lam".into(),
        Box::new(|rng| {
            let mut store = ParamStore::new();
            let lam = Lam::new(&mut store, "lam", rng);
            let mut inputs = vec![uniform(rng, &[2, 5, 5, 3])];
            inputs.extend(store.trainable_values());
            let w = uniform(rng, &[2, 5, 5, 3]);
            gradient_check_many(
                |t, v| {
                    let mut p = store.bind_inputs(t, &v[1..])?;
                    let out = lam.forward(t, &mut p, v[0], Mode::Train)?;
                    weighted_sum(t, out.x_att, &w)
                },
                &inputs,
                SUITE_EPS,
            )
        }),
    ));
    v.push((
        "sam".into(),
        Box::new(|rng| {
            let mut store = ParamStore::new();
            let sam = Sam::new(&mut store, "sam", &[SAM_VEC, 4, 3, 1], rng)?;
            let mut inputs = vec![uniform(rng, &[1, 32, 32, 3])];
            inputs.extend(store.trainable_values());
            gradient_check_many(
                |t, v| {
                    let mut p = store.bind_inputs(t, &v[1..])?;
                    let w = sam.forward(t, &mut p, v[0], Mode::Eval)?;
                    t.sum(w)
                },
                &inputs,
                SUITE_EPS,
            )
        }),
    ));
    v
}

/// Checks every layer, the backbone and both attention modules on random
/// inputs of spatial size at most 32. Each check draws from its own stream of
/// `seed`.
pub fn suite(seed: u64) -> Result<Vec<CheckResult>> {
    checks()
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, &[i as u64]));
            Ok(CheckResult {
                name,
                max_rel_error: f(&mut rng)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exactly_linear() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let err = gradient_check(|t, v| t.sum(v), &x, 1e-5).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::zeros(&[5]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().with_grad());
        let s = tape.sigmoid(v).unwrap();
        let total = tape.sum(s).unwrap();
        tape.backward(total).unwrap();
        for g in tape.grad(v).unwrap() {
            assert!((g - 0.25).abs() < 1e-15);
        }
        let err = gradient_check(
            |t, v| {
                let s = t.sigmoid(v)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nonfinite_output_is_diagnosed() {
        let x = Tensor::new(&[2], vec![1.0, 1e-300]).unwrap();
        let r = gradient_check(
            |t, v| {
                let inv = t.div(v, v)?;
                let sq = t.mul(v, v)?;
                let q = t.div(inv, sq)?;
                t.sum(q)
            },
            &x,
            1e-5,
        );
        assert!(r.is_err());
    }
}
