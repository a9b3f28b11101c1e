//! Convolutional image encoder: stride-2 conv blocks (conv, channel norm,
//! ReLU), global average pooling, and a linear projection into the shared
//! embedding space.

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize, l2_normalize_backward, real, BatchNorm1d, BatchNormCache, ConvBlock,
    ConvBlockCache, Linear, ParamGroup, Real,
};

#[derive(Debug, Clone)]
pub struct ImageEncoder<F> {
    pub blocks: Vec<ConvBlock<F>>,
    /// Feature standardization between pooling and projection; keeps batch
    /// embeddings spread out so contrastive pretraining never sits in a
    /// collapsed plateau. Frozen statistics are calibrated after pretraining.
    pub feat_bn: BatchNorm1d<F>,
    pub proj: Linear<F>,
    pub input_size: usize,
}

pub struct VisionCache<F> {
    block_caches: Vec<ConvBlockCache<F>>,
    feat: Array2<F>,
    bn: Option<BatchNormCache<F>>,
    bn_out: Array2<F>,
    spatial: (usize, usize),
    outs: Array2<F>,
    norms: Array1<F>,
}

impl<F: Real> VisionCache<F> {
    pub fn embeddings(&self) -> &Array2<F> {
        &self.outs
    }

    /// Pre-normalization pooled features (used for calibration).
    pub fn feats(&self) -> &Array2<F> {
        &self.feat
    }
}

impl<F: Real> ImageEncoder<F> {
    /// `channels` lists the output width of each stride-2 block.
    pub fn new(
        input_size: usize,
        channels: &[usize],
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut in_c = 3;
        for &out_c in channels {
            blocks.push(ConvBlock::new(in_c, out_c, 2, rng));
            in_c = out_c;
        }
        let proj = Linear::xavier(in_c, embed_dim, true, rng);
        ImageEncoder {
            blocks,
            feat_bn: BatchNorm1d::new(in_c),
            proj,
            input_size,
        }
    }

    pub fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(Error::Shape(format!(
                "expected rgb {s}x{s} input, got {c}x{h}x{w}",
                s = self.input_size
            )));
        }
        Ok(())
    }

    /// Encode a batch; every output row is unit-norm. Training mode uses
    /// batch statistics in the feature normalizer.
    pub fn forward(&self, x: &Array4<F>, training: bool) -> Result<VisionCache<F>> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block.forward(&h, i != last);
            block_caches.push(cache);
            h = y;
        }
        let (b, c, oh, ow) = h.dim();
        let area = real::<F>((oh * ow) as f64);
        let mut feat = Array2::zeros((b, c));
        for n in 0..b {
            for ch in 0..c {
                let mut sum = F::zero();
                for y in 0..oh {
                    for x in 0..ow {
                        sum += h[(n, ch, y, x)];
                    }
                }
                feat[(n, ch)] = sum / area;
            }
        }
        let (bn_out, bn) = if training {
            let (y, cache) = self.feat_bn.forward_train(&feat);
            (y, Some(cache))
        } else {
            (self.feat_bn.forward_eval(&feat), None)
        };
        let projected = self.proj.forward(&bn_out);
        let mut outs = Array2::zeros(projected.raw_dim());
        let mut norms = Array1::zeros(b);
        for (i, row) in projected.rows().into_iter().enumerate() {
            let (unit, norm) = l2_normalize(&row.to_owned())?;
            outs.row_mut(i).assign(&unit);
            norms[i] = norm;
        }
        Ok(VisionCache {
            block_caches,
            feat,
            bn,
            bn_out,
            spatial: (oh, ow),
            outs,
            norms,
        })
    }

    /// Backward from dL/d(embeddings); accumulates parameter gradients.
    pub fn backward(&self, cache: &VisionCache<F>, d_out: &Array2<F>, grad: &mut Self) {
        let (b, c) = cache.feat.dim();
        let (oh, ow) = cache.spatial;
        let area = real::<F>((oh * ow) as f64);

        let mut d_proj_out = Array2::zeros(d_out.raw_dim());
        for i in 0..b {
            let dv = l2_normalize_backward(
                &cache.outs.row(i).to_owned(),
                cache.norms[i],
                &d_out.row(i).to_owned(),
            );
            d_proj_out.row_mut(i).assign(&dv);
        }
        let d_bn_out = self.proj.backward(&cache.bn_out, &d_proj_out, &mut grad.proj);
        let bn_cache = cache.bn.as_ref().expect("backward requires training-mode forward");
        let d_feat = self.feat_bn.backward(bn_cache, &d_bn_out, &mut grad.feat_bn);

        let mut dh = Array4::zeros((b, c, oh, ow));
        for n in 0..b {
            for ch in 0..c {
                let g = d_feat[(n, ch)] / area;
                for y in 0..oh {
                    for x in 0..ow {
                        dh[(n, ch, y, x)] = g;
                    }
                }
            }
        }

        for (i, block) in self.blocks.iter().enumerate().rev() {
            dh = block.backward(&cache.block_caches[i], &dh, &mut grad.blocks[i]);
        }
    }
}

impl<F: Real> ParamGroup<F> for ImageEncoder<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit(&mut |n, p| f(&format!("blocks.{i}.{n}"), p));
        }
        self.feat_bn.visit(&mut |n, p| f(&format!("feat_bn.{n}"), p));
        self.proj.visit(&mut |n, p| f(&format!("proj.{n}"), p));
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_mut(&grads.blocks[i], &mut |n, p, g| {
                f(&format!("blocks.{i}.{n}"), p, g)
            });
        }
        self.feat_bn.visit_mut(&grads.feat_bn, &mut |n, p, g| {
            f(&format!("feat_bn.{n}"), p, g)
        });
        self.proj
            .visit_mut(&grads.proj, &mut |n, p, g| f(&format!("proj.{n}"), p, g));
    }

    fn zeros_like(&self) -> Self {
        ImageEncoder {
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            feat_bn: self.feat_bn.zeros_like(),
            proj: self.proj.zeros_like(),
            input_size: self.input_size,
        }
    }
}
