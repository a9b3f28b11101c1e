//! Minimal neural-network building blocks with hand-written backprop.
//!
//! Everything is generic over [`Real`] so the production pipeline can run in
//! `f32` (matching the float32 checkpoint format bit for bit) while gradient
//! checks instantiate the exact same code at `f64`.

mod attention;
mod conv;
mod layers;

pub use attention::{AttnCache, MultiHeadAttention};
pub use conv::{col2im, im2col, Conv2d, ConvBlock, ConvBlockCache, ConvCache};
pub use layers::{BatchNorm1d, BatchNormCache, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, TransformerBlock, BlockCache};

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis};
use num_traits::{FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type for all model math: `f32` in production, `f64` in gradient checks.
pub trait Real: ndarray::NdFloat + FromPrimitive + ToPrimitive + std::iter::Sum {}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` literal into the active scalar type.
#[inline]
pub fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("literal must be representable")
}

/// A set of parameter tensors that an optimizer can walk in a stable order,
/// paired with a gradient accumulator of the same shape.
pub trait ParamGroup<F: Real>: Sized {
    /// Visit `(name, param)` pairs in a stable order.
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>));

    /// Visit `(name, param, grad)` triples in a stable order.
    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    );

    /// A gradient accumulator with every tensor zeroed.
    fn zeros_like(&self) -> Self;

    /// Flatten all parameters into one vector (stable order).
    fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.extend(p.iter().copied()));
        out
    }
}

/// Plain stochastic gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub lr: F,
}

impl<F: Real> Sgd<F> {
    pub fn new(lr: F) -> Self {
        Sgd { lr }
    }

    pub fn step<M: ParamGroup<F>>(&self, model: &mut M, grads: &M) {
        let lr = self.lr;
        model.visit_mut(grads, &mut |_, mut p, g| {
            p.zip_mut_with(&g, |p, &g| *p = *p - lr * g);
        });
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: F) -> Self {
        Adam {
            lr,
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<M: ParamGroup<F>>(&mut self, model: &mut M, grads: &M) {
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let corr1 = F::one() - b1.powi(self.t);
        let corr2 = F::one() - b2.powi(self.t);
        let lazy_init = self.m.is_empty();
        let (m, v) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        model.visit_mut(grads, &mut |_, mut p, g| {
            if lazy_init {
                m.push(ArrayD::zeros(g.raw_dim()));
                v.push(ArrayD::zeros(g.raw_dim()));
            }
            let (mi, vi) = (&mut m[idx], &mut v[idx]);
            mi.zip_mut_with(&g, |m, &g| *m = b1 * *m + (F::one() - b1) * g);
            vi.zip_mut_with(&g, |v, &g| *v = b2 * *v + (F::one() - b2) * g * g);
            ndarray::Zip::from(&mut p).and(&*mi).and(&*vi).for_each(|p, &m, &v| {
                let mhat = m / corr1;
                let vhat = v / corr2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
            idx += 1;
        });
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
        row.mapv_inplace(|z| z - lse);
    }
    out
}

/// L2-normalize a vector; errors on (near-)zero norm instead of emitting NaN.
pub fn l2_normalize<F: Real>(v: &Array1<F>) -> Result<(Array1<F>, F)> {
    let norm = v.dot(v).sqrt();
    if !(norm > F::zero()) || !norm.is_finite() {
        return Err(Error::Numerical(format!(
            "cannot normalize vector with norm {norm:?}"
        )));
    }
    Ok((v / norm, norm))
}

/// Backward through `y = v / ||v||`: maps dL/dy to dL/dv.
pub fn l2_normalize_backward<F: Real>(y: &Array1<F>, norm: F, dy: &Array1<F>) -> Array1<F> {
    let radial = y.dot(dy);
    (dy - &(y * radial)) / norm
}

/// Cosine similarity of two vectors.
pub fn cosine<F: Real>(a: &Array1<F>, b: &Array1<F>) -> Result<F> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if !(na > F::zero()) || !(nb > F::zero()) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Numerical(format!(
            "cosine of vector with norm {:?} and {:?}",
            na.to_f64(),
            nb.to_f64()
        )));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Mean over rows of an `[n, d]` matrix, accumulated in f64 so the result is
/// independent of row order at the target precision.
pub fn mean_rows_f64<F: Real>(m: &Array2<F>) -> Array2<F> {
    let (n, d) = m.dim();
    let mut acc = vec![0f64; d];
    for row in m.rows() {
        for (a, &x) in acc.iter_mut().zip(row.iter()) {
            *a += x.to_f64().unwrap();
        }
    }
    let inv = 1.0 / n as f64;
    Array2::from_shape_fn((1, d), |(_, j)| real::<F>(acc[j] * inv))
}

/// Sum along axis 0 into an existing 1-D accumulator.
pub fn add_sum_axis0<F: Real>(acc: &mut Array1<F>, m: &Array2<F>) {
    *acc += &m.sum_axis(Axis(0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax_rows(&logits);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero() {
        let v = Array1::<f64>::zeros(4);
        assert!(l2_normalize(&v).is_err());
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let v = array![0.3f64, -1.2, 0.7, 2.0];
        let dy = array![0.11f64, -0.4, 0.25, 0.9];
        let (y, norm) = l2_normalize(&v).unwrap();
        let dv = l2_normalize_backward(&y, norm, &dy);
        let eps = 1e-6;
        for i in 0..v.len() {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[i] += eps;
            vm[i] -= eps;
            let fp = l2_normalize(&vp).unwrap().0.dot(&dy);
            let fm = l2_normalize(&vm).unwrap().0.dot(&dy);
            let fd = (fp - fm) / (2.0 * eps);
            assert!((dv[i] - fd).abs() < 1e-8, "entry {i}: {} vs {}", dv[i], fd);
        }
    }
}
