//! Batched 2-D convolution via im2col, plus the pieces conv backbones need.

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{LayerNorm, LayerNormCache};
use super::{real, ParamGroup, Real};

/// Unfold an NCHW batch into a `[in_c*kh*kw, batch*oh*ow]` column matrix.
pub fn im2col<F: Real>(
    x: &Array4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::zeros((c * kh * kw, b * oh * ow));
    for n in 0..b {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oy in 0..oh {
                        let iy = oy * stride + ki;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        for ox in 0..ow {
                            let ix = ox * stride + kj;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            let col = n * oh * ow + oy * ow + ox;
                            cols[(row, col)] = x[(n, ci, iy, ix - pad)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold column gradients back onto the input (scatter-add inverse of [`im2col`]).
pub fn col2im<F: Real>(
    dcols: &Array2<F>,
    input_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, c, h, w) = input_dim;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut dx = Array4::zeros(input_dim);
    for n in 0..b {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oy in 0..oh {
                        let iy = oy * stride + ki;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        for ox in 0..ow {
                            let ix = ox * stride + kj;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            let col = n * oh * ow + oy * ow + ox;
                            dx[(n, ci, iy, ix - pad)] += dcols[(row, col)];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Convolution layer; weights `[out_c, in_c, kh, kw]`, He-initialized.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<F> {
    cols: Array2<F>,
    input_dim: (usize, usize, usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        Conv2d {
            w: Array4::from_shape_fn((out_c, in_c, k, k), |_| real::<F>(dist.sample(rng))),
            b: Array1::zeros(out_c),
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.w.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (b, _, h, w) = x.dim();
        let (oc, _, kh, kw) = self.w.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, kh, kw, self.stride, self.pad);
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((oc, cols.nrows()))
            .expect("contiguous kernel");
        let mut y_mat = w_mat.dot(&cols);
        for (mut row, &bias) in y_mat.rows_mut().into_iter().zip(self.b.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        // [oc, b*oh*ow] -> [b, oc, oh, ow]
        let y = y_mat
            .into_shape_with_order((oc, b, oh, ow))
            .expect("reshape")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        (
            y,
            ConvCache {
                cols,
                input_dim: x.dim(),
            },
        )
    }

    pub fn backward(&self, cache: &ConvCache<F>, dy: &Array4<F>, grad: &mut Self) -> Array4<F> {
        let (b, oc, oh, ow) = dy.dim();
        let (_, _, kh, kw) = self.w.dim();
        let dy_mat = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape_with_order((oc, b * oh * ow))
            .expect("reshape")
            .to_owned();
        let k_total = cache.cols.nrows();
        let gw = dy_mat.dot(&cache.cols.t());
        grad.w += &gw
            .into_shape_with_order(self.w.raw_dim())
            .expect("kernel shape");
        grad.b += &dy_mat.sum_axis(Axis(1));
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((oc, k_total))
            .expect("contiguous kernel");
        let dcols = w_mat.t().dot(&dy_mat);
        col2im(&dcols, cache.input_dim, kh, kw, self.stride, self.pad)
    }
}

/// Conv -> per-position channel LayerNorm -> ReLU. The normalization keeps
/// feature channels decorrelated from initialization on, which is what lets
/// the contrastive pretraining escape the near-constant-embedding region.
#[derive(Debug, Clone)]
pub struct ConvBlock<F> {
    pub conv: Conv2d<F>,
    pub norm: LayerNorm<F>,
}

pub struct ConvBlockCache<F> {
    conv: ConvCache<F>,
    norm: LayerNormCache<F>,
    /// Block output; when ReLU was applied it doubles as the mask.
    act: Array4<F>,
    relu: bool,
}

/// `[B, C, H, W]` -> `[(B*H*W), C]` rows for channel-wise normalization.
fn to_channel_rows<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_shape_with_order((b * h * w, c))
        .expect("contiguous reshape")
        .to_owned()
}

fn from_channel_rows<F: Real>(rows: Array2<F>, dim: (usize, usize, usize, usize)) -> Array4<F> {
    let (b, c, h, w) = dim;
    rows.into_shape_with_order((b, h, w, c))
        .expect("reshape")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
}

impl<F: Real> ConvBlock<F> {
    pub fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(in_c, out_c, 3, stride, 1, rng),
            norm: LayerNorm::new(out_c),
        }
    }

    /// Forward; the last block of a backbone is usually taken pre-ReLU
    /// (`apply_relu = false`) so pooled features keep zero channel mean.
    pub fn forward(&self, x: &Array4<F>, apply_relu: bool) -> (Array4<F>, ConvBlockCache<F>) {
        let (y, conv_cache) = self.conv.forward(x);
        let dim = y.dim();
        let rows = to_channel_rows(&y);
        let (normed, norm_cache) = self.norm.forward(&rows);
        let mut act = from_channel_rows(normed, dim);
        if apply_relu {
            act.mapv_inplace(|v| v.max(F::zero()));
        }
        (
            act.clone(),
            ConvBlockCache {
                conv: conv_cache,
                norm: norm_cache,
                act,
                relu: apply_relu,
            },
        )
    }

    pub fn backward(&self, cache: &ConvBlockCache<F>, dy: &Array4<F>, grad: &mut Self) -> Array4<F> {
        let mut d_act = dy.clone();
        if cache.relu {
            ndarray::Zip::from(&mut d_act)
                .and(&cache.act)
                .for_each(|d, &a| {
                    if a <= F::zero() {
                        *d = F::zero();
                    }
                });
        }
        let dim = d_act.dim();
        let d_rows = to_channel_rows(&d_act);
        let d_norm_in = self.norm.backward(&cache.norm, &d_rows, &mut grad.norm);
        let d_conv_out = from_channel_rows(d_norm_in, dim);
        self.conv.backward(&cache.conv, &d_conv_out, &mut grad.conv)
    }
}

impl<F: Real> ParamGroup<F> for ConvBlock<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.conv.visit(&mut |n, p| f(&format!("conv.{n}"), p));
        self.norm.visit(&mut |n, p| f(&format!("norm.{n}"), p));
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        self.conv
            .visit_mut(&grads.conv, &mut |n, p, g| f(&format!("conv.{n}"), p, g));
        self.norm
            .visit_mut(&grads.norm, &mut |n, p, g| f(&format!("norm.{n}"), p, g));
    }

    fn zeros_like(&self) -> Self {
        ConvBlock {
            conv: self.conv.zeros_like(),
            norm: self.norm.zeros_like(),
        }
    }
}

impl<F: Real> ParamGroup<F> for Conv2d<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f("w", self.w.view().into_dyn());
        f("b", self.b.view().into_dyn());
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        f("w", self.w.view_mut().into_dyn(), grads.w.view().into_dyn());
        f("b", self.b.view_mut().into_dyn(), grads.b.view().into_dyn());
    }

    fn zeros_like(&self) -> Self {
        Conv2d {
            w: Array4::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            stride: self.stride,
            pad: self.pad,
        }
    }
}
