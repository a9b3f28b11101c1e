//! Multi-head self-attention over a single sequence, with pad-key masking.

use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::layers::Linear;
use super::{real, ParamGroup, Real};

/// Multi-head attention. Padding positions are excluded as keys: their scores
/// never enter the softmax, so the output at every valid position is identical
/// whether or not trailing pads are present.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub n_heads: usize,
}

pub struct AttnCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Per-head attention weights `[h][query, key]`; masked keys hold zero.
    weights: Vec<Array2<F>>,
    ctx: Array2<F>,
    valid: Vec<bool>,
}

impl<F: Real> MultiHeadAttention<F> {
    pub fn new(dim: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % n_heads == 0, "dim must be divisible by n_heads");
        MultiHeadAttention {
            wq: Linear::xavier(dim, dim, true, rng),
            wk: Linear::xavier(dim, dim, true, rng),
            wv: Linear::xavier(dim, dim, true, rng),
            wo: Linear::xavier(dim, dim, true, rng),
            n_heads,
        }
    }

    pub fn forward(&self, x: &Array2<F>, valid: &[bool]) -> (Array2<F>, AttnCache<F>) {
        let (len, dim) = x.dim();
        assert_eq!(valid.len(), len);
        let dh = dim / self.n_heads;
        let scale = F::one() / real::<F>((dh as f64).sqrt());

        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);

        let mut ctx = Array2::zeros((len, dim));
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);

            let mut a = Array2::zeros((len, len));
            for i in 0..len {
                // Softmax over valid keys only.
                let mut max = F::neg_infinity();
                for j in 0..len {
                    if valid[j] {
                        let score = qh.row(i).dot(&kh.row(j)) * scale;
                        a[(i, j)] = score;
                        if score > max {
                            max = score;
                        }
                    }
                }
                let mut sum = F::zero();
                for j in 0..len {
                    if valid[j] {
                        let e = (a[(i, j)] - max).exp();
                        a[(i, j)] = e;
                        sum += e;
                    }
                }
                for j in 0..len {
                    if valid[j] {
                        a[(i, j)] = a[(i, j)] / sum;
                    }
                }
            }
            let ctx_h = a.dot(&vh);
            ctx.slice_mut(cols).assign(&ctx_h);
            weights.push(a);
        }

        let y = self.wo.forward(&ctx);
        (
            y,
            AttnCache {
                x: x.clone(),
                q,
                k,
                v,
                weights,
                ctx,
                valid: valid.to_vec(),
            },
        )
    }

    pub fn backward(&self, cache: &AttnCache<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        let (len, dim) = cache.x.dim();
        let dh = dim / self.n_heads;
        let scale = F::one() / real::<F>((dh as f64).sqrt());

        let dctx = self.wo.backward(&cache.ctx, dy, &mut grad.wo);

        let mut dq = Array2::zeros((len, dim));
        let mut dk = Array2::zeros((len, dim));
        let mut dv = Array2::zeros((len, dim));
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &cache.weights[h];
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let vh = cache.v.slice(cols);
            let dctx_h = dctx.slice(cols);

            // dA = dctx_h · vhᵀ ; dvh = Aᵀ · dctx_h
            let da = dctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));

            // Softmax backward per query row, restricted to valid keys.
            let mut ds = Array2::zeros((len, len));
            for i in 0..len {
                let mut dot = F::zero();
                for j in 0..len {
                    if cache.valid[j] {
                        dot += da[(i, j)] * a[(i, j)];
                    }
                }
                for j in 0..len {
                    if cache.valid[j] {
                        ds[(i, j)] = a[(i, j)] * (da[(i, j)] - dot);
                    }
                }
            }

            dq.slice_mut(cols).assign(&(ds.dot(&kh) * scale));
            dk.slice_mut(cols).assign(&(ds.t().dot(&qh) * scale));
        }

        let mut dx = self.wq.backward(&cache.x, &dq, &mut grad.wq);
        dx += &self.wk.backward(&cache.x, &dk, &mut grad.wk);
        dx += &self.wv.backward(&cache.x, &dv, &mut grad.wv);
        dx
    }
}

impl<F: Real> ParamGroup<F> for MultiHeadAttention<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.wq.visit(&mut |n, p| f(&format!("wq.{n}"), p));
        self.wk.visit(&mut |n, p| f(&format!("wk.{n}"), p));
        self.wv.visit(&mut |n, p| f(&format!("wv.{n}"), p));
        self.wo.visit(&mut |n, p| f(&format!("wo.{n}"), p));
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        self.wq.visit_mut(&grads.wq, &mut |n, p, g| f(&format!("wq.{n}"), p, g));
        self.wk.visit_mut(&grads.wk, &mut |n, p, g| f(&format!("wk.{n}"), p, g));
        self.wv.visit_mut(&grads.wv, &mut |n, p, g| f(&format!("wv.{n}"), p, g));
        self.wo.visit_mut(&grads.wo, &mut |n, p, g| f(&format!("wo.{n}"), p, g));
    }

    fn zeros_like(&self) -> Self {
        MultiHeadAttention {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            n_heads: self.n_heads,
        }
    }
}
