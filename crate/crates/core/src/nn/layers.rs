//! Dense layers: linear, layer norm, the transformer MLP, and the pre-LN block.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::attention::{AttnCache, MultiHeadAttention};
use super::{real, ParamGroup, Real};

/// Fully-connected layer, weights stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub w: Array2<F>,
    pub b: Option<Array1<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).unwrap();
        let w = Array2::from_shape_fn((in_dim, out_dim), |_| real::<F>(dist.sample(rng)));
        let b = bias.then(|| Array1::zeros(out_dim));
        Linear { w, b }
    }

    /// Scale-preserving init (std 1/sqrt(in)); keeps residual streams diverse
    /// at initialization instead of collapsing onto shared embeddings.
    pub fn xavier(in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self::new(in_dim, out_dim, bias, 1.0 / (in_dim as f64).sqrt(), rng)
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            w: Array2::zeros((in_dim, out_dim)),
            b: bias.then(|| Array1::zeros(out_dim)),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w);
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }

    /// Backward pass; accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        grad.w += &x.t().dot(dy);
        if let Some(gb) = &mut grad.b {
            *gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w.t())
    }
}

impl<F: Real> ParamGroup<F> for Linear<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f("w", self.w.view().into_dyn());
        if let Some(b) = &self.b {
            f("b", b.view().into_dyn());
        }
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        f("w", self.w.view_mut().into_dyn(), grads.w.view().into_dyn());
        if let (Some(b), Some(gb)) = (&mut self.b, &grads.b) {
            f("b", b.view_mut().into_dyn(), gb.view().into_dyn());
        }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: self.b.as_ref().map(|b| Array1::zeros(b.raw_dim())),
        }
    }
}

/// Layer normalization over the last axis of an `[n, d]` input.
#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub eps: F,
}

pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: real(1e-5),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = real::<F>(x.ncols() as f64);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            let is = F::one() / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * is);
            *s = is;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        let d = real::<F>(dy.ncols() as f64);
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let xh = cache.xhat.row(i);
            let dxh = dxhat.row(i);
            let mean_dxh = dxh.sum() / d;
            let mean_dxh_xh = dxh.dot(&xh) / d;
            let is = cache.inv_std[i];
            for j in 0..dy.ncols() {
                dx[(i, j)] = is * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }
}

impl<F: Real> ParamGroup<F> for LayerNorm<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f("gamma", self.gamma.view().into_dyn());
        f("beta", self.beta.view().into_dyn());
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        f(
            "gamma",
            self.gamma.view_mut().into_dyn(),
            grads.gamma.view().into_dyn(),
        );
        f(
            "beta",
            self.beta.view_mut().into_dyn(),
            grads.beta.view().into_dyn(),
        );
    }

    fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            eps: self.eps,
        }
    }
}

/// Batch normalization over feature vectors `[batch, features]`. Training
/// uses batch statistics; evaluation uses frozen statistics calibrated from
/// the training set after the last step. The frozen stats ride along in
/// `visit`/`visit_mut` so they serialize with the parameters, but no gradient
/// is ever produced for them, so optimizers leave them untouched.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub frozen_mean: Array1<F>,
    pub frozen_var: Array1<F>,
    pub eps: F,
}

pub struct BatchNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> BatchNorm1d<F> {
    pub fn new(dim: usize) -> Self {
        BatchNorm1d {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            frozen_mean: Array1::zeros(dim),
            frozen_var: Array1::ones(dim),
            eps: real(1e-5),
        }
    }

    /// Per-feature mean and (biased) variance of a batch.
    pub fn batch_stats(x: &Array2<F>) -> (Array1<F>, Array1<F>) {
        let n = real::<F>(x.nrows() as f64);
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::zeros(x.ncols());
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        var.mapv_inplace(|v| v / n);
        (mean, var)
    }

    pub fn forward_train(&self, x: &Array2<F>) -> (Array2<F>, BatchNormCache<F>) {
        let (mean, var) = Self::batch_stats(x);
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for mut row in xhat.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let inv = F::one() / (self.frozen_var[j] + self.eps).sqrt();
                *v = (*v - self.frozen_mean[j]) * inv * self.gamma[j] + self.beta[j];
            }
        }
        y
    }

    /// Freeze statistics (training-set calibration).
    pub fn set_frozen_stats(&mut self, mean: Array1<F>, var: Array1<F>) {
        self.frozen_mean = mean;
        self.frozen_var = var;
    }

    pub fn backward(&self, cache: &BatchNormCache<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        let n = real::<F>(dy.nrows() as f64);
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            for j in 0..dy.ncols() {
                dx[(i, j)] = cache.inv_std[j] / n
                    * (n * dxhat[(i, j)] - sum_dxhat[j] - cache.xhat[(i, j)] * sum_dxhat_xhat[j]);
            }
        }
        dx
    }
}

impl<F: Real> ParamGroup<F> for BatchNorm1d<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f("gamma", self.gamma.view().into_dyn());
        f("beta", self.beta.view().into_dyn());
        f("frozen_mean", self.frozen_mean.view().into_dyn());
        f("frozen_var", self.frozen_var.view().into_dyn());
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        f(
            "gamma",
            self.gamma.view_mut().into_dyn(),
            grads.gamma.view().into_dyn(),
        );
        f(
            "beta",
            self.beta.view_mut().into_dyn(),
            grads.beta.view().into_dyn(),
        );
        f(
            "frozen_mean",
            self.frozen_mean.view_mut().into_dyn(),
            grads.frozen_mean.view().into_dyn(),
        );
        f(
            "frozen_var",
            self.frozen_var.view_mut().into_dyn(),
            grads.frozen_var.view().into_dyn(),
        );
    }

    fn zeros_like(&self) -> Self {
        BatchNorm1d {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            frozen_mean: Array1::zeros(self.frozen_mean.raw_dim()),
            frozen_var: Array1::zeros(self.frozen_var.raw_dim()),
            eps: self.eps,
        }
    }
}

const QUICK_GELU_SLOPE: f64 = 1.702;

fn quick_gelu<F: Real>(x: F) -> F {
    let a = real::<F>(QUICK_GELU_SLOPE);
    x / (F::one() + (-a * x).exp())
}

fn quick_gelu_grad<F: Real>(x: F) -> F {
    let a = real::<F>(QUICK_GELU_SLOPE);
    let s = F::one() / (F::one() + (-a * x).exp());
    s + x * a * s * (F::one() - s)
}

/// Transformer MLP: linear, QuickGELU, linear.
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct MlpCache<F> {
    x: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
}

impl<F: Real> Mlp<F> {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::xavier(dim, hidden, true, rng),
            fc2: Linear::xavier(hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let pre_act = self.fc1.forward(x);
        let act = pre_act.mapv(quick_gelu);
        let y = self.fc2.forward(&act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre_act,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let dpre = &dact * &cache.pre_act.mapv(quick_gelu_grad);
        self.fc1.backward(&cache.x, &dpre, &mut grad.fc1)
    }
}

impl<F: Real> ParamGroup<F> for Mlp<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.fc1.visit(&mut |n, p| f(&format!("fc1.{n}"), p));
        self.fc2.visit(&mut |n, p| f(&format!("fc2.{n}"), p));
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        self.fc1.visit_mut(&grads.fc1, &mut |n, p, g| f(&format!("fc1.{n}"), p, g));
        self.fc2.visit_mut(&grads.fc2, &mut |n, p, g| f(&format!("fc2.{n}"), p, g));
    }

    fn zeros_like(&self) -> Self {
        Mlp {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }
}

/// Pre-LN transformer block: `x + attn(ln1(x))`, then `y + mlp(ln2(y))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<F> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttnCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl<F: Real> TransformerBlock<F> {
    pub fn new(dim: usize, n_heads: usize, mlp_hidden: usize, rng: &mut impl Rng) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, n_heads, rng),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, mlp_hidden, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>, valid: &[bool]) -> (Array2<F>, BlockCache<F>) {
        let (n1, c_ln1) = self.ln1.forward(x);
        let (a, c_attn) = self.attn.forward(&n1, valid);
        let y1 = x + &a;
        let (n2, c_ln2) = self.ln2.forward(&y1);
        let (m, c_mlp) = self.mlp.forward(&n2);
        let y2 = &y1 + &m;
        (
            y2,
            BlockCache {
                ln1: c_ln1,
                attn: c_attn,
                ln2: c_ln2,
                mlp: c_mlp,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        let dn2 = self.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
        let dy1 = dy + &self.ln2.backward(&cache.ln2, &dn2, &mut grad.ln2);
        let dn1 = self.attn.backward(&cache.attn, &dy1, &mut grad.attn);
        &dy1 + &self.ln1.backward(&cache.ln1, &dn1, &mut grad.ln1)
    }
}

impl<F: Real> ParamGroup<F> for TransformerBlock<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.ln1.visit(&mut |n, p| f(&format!("ln1.{n}"), p));
        self.attn.visit(&mut |n, p| f(&format!("attn.{n}"), p));
        self.ln2.visit(&mut |n, p| f(&format!("ln2.{n}"), p));
        self.mlp.visit(&mut |n, p| f(&format!("mlp.{n}"), p));
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        self.ln1.visit_mut(&grads.ln1, &mut |n, p, g| f(&format!("ln1.{n}"), p, g));
        self.attn.visit_mut(&grads.attn, &mut |n, p, g| f(&format!("attn.{n}"), p, g));
        self.ln2.visit_mut(&grads.ln2, &mut |n, p, g| f(&format!("ln2.{n}"), p, g));
        self.mlp.visit_mut(&grads.mlp, &mut |n, p, g| f(&format!("mlp.{n}"), p, g));
    }

    fn zeros_like(&self) -> Self {
        TransformerBlock {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }
}
