//! Dense row-major `f64` tensors.
//!
//! Image-like tensors use height × width × channels layout, optionally with a
//! leading batch axis (`N × H × W × C`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_fn(shape, |_| value)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Builds a 2-D tensor from rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(n, h, w, c)` view of a rank-3 or rank-4 image tensor.
    pub fn nhwc(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [h, w, c] => Ok((1, h, w, c)),
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(Error::contract(format!(
                "expected H×W×C or N×H×W×C tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim("add", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self, "matmul", other)?;
        let (k2, n) = as_matrix(other, "matmul", self)?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::new(&[m, n], out)
    }

    /// `a[.., c] * h[.., 0]`: gates every channel of `a` by a one-channel map.
    pub fn hadamard(&self, mask: &Tensor) -> Result<Tensor> {
        let (n, h, w, c) = self.nhwc()?;
        let (mn, mh, mw, mc) = mask.nhwc()?;
        if (n, h, w) != (mn, mh, mw) || mc != 1 {
            return Err(Error::dim("hadamard", &self.shape, &mask.shape));
        }
        let mut out = self.data.clone();
        for (px, m) in out.chunks_mut(c).zip(&mask.data) {
            for v in px {
                *v *= m;
            }
        }
        Tensor::new(&self.shape, out)
    }
}

fn as_matrix(t: &Tensor, op: &'static str, other: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, k] => Ok((m, k)),
        _ => Err(Error::dim(op, t.shape(), other.shape())),
    }
}

/// `out = beta * out + op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is `m × k` after `op`, `b` is `k × n` after `op`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    out: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and the strides describe
    // exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn identity_matmul() {
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]);
        let out = Tensor::eye(2).matmul(&b).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn unanimous_fake_vote() {
        let p = Tensor::from_rows(&[vec![1.0; 6], vec![0.0; 6]]);
        let w = Tensor::full(&[6, 1], 1.0 / 6.0);
        let out = p.matmul(&w).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn fusion_example_matches_dot_products() {
        let p0 = [0.8, 0.2, 0.6, 0.9, 0.7, 0.5];
        let w = [0.5, 0.1, 0.2, 0.9, 0.4, 0.3];
        let p = Tensor::from_rows(&[p0.to_vec(), p0.iter().map(|v| 1.0 - v).collect()]);
        let wt = Tensor::new(&[6, 1], w.to_vec()).unwrap();
        let out = p.matmul(&wt).unwrap();
        // scalar dot-product oracle
        let dot0: f64 = p0.iter().zip(&w).map(|(a, b)| a * b).sum();
        let dot1: f64 = p0.iter().zip(&w).map(|(a, b)| (1.0 - a) * b).sum();
        assert!((dot0 - 1.78).abs() < 1e-12 && (dot1 - 0.62).abs() < 1e-12);
        assert!((out.data()[0] - dot0).abs() < 1e-12);
        assert!((out.data()[1] - dot1).abs() < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn hadamard_cases() {
        let a = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        assert_eq!(a.hadamard(&Tensor::ones(&[2, 2, 1])).unwrap(), a);
        assert!(a
            .hadamard(&Tensor::zeros(&[2, 2, 1]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let h = Tensor::new(&[2, 2, 1], vec![0.5, 1.0, 0.0, 1.0]).unwrap();
        let out = Tensor::ones(&[2, 2, 3]).hadamard(&h).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..3 {
                    assert_eq!(out.data()[(i * 2 + j) * 3 + c], h.data()[i * 2 + j]);
                }
            }
        }
        assert!(a.hadamard(&Tensor::ones(&[3, 2, 1])).is_err());
    }

    #[test]
    fn basics() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.5);
        assert_eq!(x.add(&Tensor::zeros(&[3, 2])).unwrap(), x);
        assert_eq!(x.scale(1.0), x);
        assert_eq!(Tensor::ones(&[3, 3]).sum(), 9.0);
        assert!(x.add(&Tensor::zeros(&[2, 3])).is_err());
    }
}
