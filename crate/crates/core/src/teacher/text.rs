//! Transformer text encoder accepting token ids or continuous token rows.
//!
//! Both input kinds run through the identical path: embed (or take rows as
//! given, wrapped in the table's bos/eos rows), add positional embeddings,
//! pre-LN transformer blocks with pad-key masking, final layer norm, then a
//! linear projection of the eos-position representation, L2-normalized.
//! Because pads are excluded as attention keys and every other op is
//! position-wise, the eos representation is identical with or without
//! trailing pads, which is what makes the discrete and continuous paths agree.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tokenizer::{TokenSequence, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize, l2_normalize_backward, real, BlockCache, LayerNorm, LayerNormCache, Linear,
    ParamGroup, Real, TransformerBlock,
};

#[derive(Debug, Clone)]
pub struct TextEncoder<F> {
    pub token_embed: Array2<F>,
    pub pos_embed: Array2<F>,
    pub blocks: Vec<TransformerBlock<F>>,
    pub ln_final: LayerNorm<F>,
    pub proj: Linear<F>,
}

pub struct TextCache<F> {
    /// Ids the rows were looked up from; `None` for continuous input, except
    /// that the wrapping bos/eos rows are recorded for embedding-table grads.
    ids: Option<Vec<usize>>,
    wrap: Option<(usize, usize)>,
    eos_pos: usize,
    rows: Array2<F>,
    block_caches: Vec<BlockCache<F>>,
    ln_cache: LayerNormCache<F>,
    pooled: Array2<F>,
    out: Array1<F>,
    norm: F,
}

impl<F: Real> TextCache<F> {
    pub fn embedding(&self) -> &Array1<F> {
        &self.out
    }
}

impl<F: Real> TextEncoder<F> {
    pub fn new(
        vocab_size: usize,
        max_length: usize,
        token_dim: usize,
        embed_dim: usize,
        n_blocks: usize,
        n_heads: usize,
        embed_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let dist = Normal::new(0.0, embed_std).unwrap();
        let mut sample = |shape: (usize, usize)| {
            Array2::from_shape_fn(shape, |_| real::<F>(dist.sample(rng)))
        };
        let token_embed = sample((vocab_size, token_dim));
        let pos_embed = sample((max_length, token_dim));
        let blocks = (0..n_blocks)
            .map(|_| TransformerBlock::new(token_dim, n_heads, 4 * token_dim, rng))
            .collect();
        TextEncoder {
            token_embed,
            pos_embed,
            blocks,
            ln_final: LayerNorm::new(token_dim),
            proj: Linear::xavier(token_dim, embed_dim, false, rng),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.token_embed.ncols()
    }

    pub fn max_length(&self) -> usize {
        self.pos_embed.nrows()
    }

    /// Encode a token-id sequence.
    pub fn encode_ids(&self, seq: &TokenSequence) -> Result<TextCache<F>> {
        if seq.ids.len() > self.max_length() {
            return Err(Error::Length(format!(
                "sequence of {} ids exceeds max length {}",
                seq.ids.len(),
                self.max_length()
            )));
        }
        let rows = Array2::from_shape_fn((seq.ids.len(), self.token_dim()), |(i, j)| {
            self.token_embed[(seq.ids[i], j)]
        });
        self.forward(rows, seq.valid_mask(), seq.eos_pos(), Some(seq.ids.clone()), None)
    }

    /// Encode continuous token rows; the encoder wraps them in the embedding
    /// table's bos/eos rows before the forward pass.
    pub fn encode_continuous(&self, content: &Array2<F>) -> Result<TextCache<F>> {
        if content.ncols() != self.token_dim() {
            return Err(Error::Shape(format!(
                "continuous rows have dimension {}, encoder expects {}",
                content.ncols(),
                self.token_dim()
            )));
        }
        let len = content.nrows() + 2;
        if len > self.max_length() {
            return Err(Error::Length(format!(
                "{} continuous rows wrap to length {len}, max is {}",
                content.nrows(),
                self.max_length()
            )));
        }
        let d = self.token_dim();
        let mut rows = Array2::zeros((len, d));
        rows.row_mut(0).assign(&self.token_embed.row(BOS));
        rows.slice_mut(ndarray::s![1..len - 1, ..]).assign(content);
        rows.row_mut(len - 1).assign(&self.token_embed.row(EOS));
        let valid = vec![true; len];
        self.forward(rows, valid, len - 1, None, Some((BOS, EOS)))
    }

    fn forward(
        &self,
        rows: Array2<F>,
        valid: Vec<bool>,
        eos_pos: usize,
        ids: Option<Vec<usize>>,
        wrap: Option<(usize, usize)>,
    ) -> Result<TextCache<F>> {
        let len = rows.nrows();
        let mut h = &rows + &self.pos_embed.slice(ndarray::s![..len, ..]);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, &valid);
            block_caches.push(cache);
            h = next;
        }
        let (hf, ln_cache) = self.ln_final.forward(&h);
        let pooled = hf.row(eos_pos).insert_axis(Axis(0)).to_owned();
        let projected = self.proj.forward(&pooled);
        let (out, norm) = l2_normalize(&projected.row(0).to_owned())?;
        Ok(TextCache {
            ids,
            wrap,
            eos_pos,
            rows,
            block_caches,
            ln_cache,
            pooled,
            out,
            norm,
        })
    }

    /// Backward from dL/d(embedding). Returns dL/d(input rows); when `grad`
    /// is given, accumulates parameter gradients (scattering row gradients
    /// into the embedding table for looked-up positions).
    pub fn backward(
        &self,
        cache: &TextCache<F>,
        d_out: &Array1<F>,
        mut grad: Option<&mut Self>,
    ) -> Array2<F> {
        let len = cache.rows.nrows();
        let d_proj_in = l2_normalize_backward(&cache.out, cache.norm, d_out);

        let mut proj_scratch = self.proj.zeros_like();
        let proj_grad = grad.as_deref_mut().map(|g| &mut g.proj);
        let dpooled = self.proj.backward(
            &cache.pooled,
            &d_proj_in.insert_axis(Axis(0)).to_owned(),
            proj_grad.unwrap_or(&mut proj_scratch),
        );

        let mut dhf = Array2::zeros((len, self.token_dim()));
        dhf.row_mut(cache.eos_pos).assign(&dpooled.row(0));

        let mut ln_scratch = self.ln_final.zeros_like();
        let ln_grad = grad
            .as_deref_mut()
            .map(|g| &mut g.ln_final);
        let mut dh = self
            .ln_final
            .backward(&cache.ln_cache, &dhf, ln_grad.unwrap_or(&mut ln_scratch));

        for (i, block) in self.blocks.iter().enumerate().rev() {
            let mut scratch = block.zeros_like();
            let g = match grad.as_deref_mut() {
                Some(g) => &mut g.blocks[i],
                None => &mut scratch,
            };
            dh = block.backward(&cache.block_caches[i], &dh, g);
        }

        if let Some(g) = grad.as_deref_mut() {
            g.pos_embed
                .slice_mut(ndarray::s![..len, ..])
                .zip_mut_with(&dh, |p, &d| *p = *p + d);
            if let Some(ids) = &cache.ids {
                for (pos, &id) in ids.iter().enumerate() {
                    g.token_embed
                        .row_mut(id)
                        .zip_mut_with(&dh.row(pos), |p, &d| *p = *p + d);
                }
            } else if let Some((bos, eos)) = cache.wrap {
                g.token_embed
                    .row_mut(bos)
                    .zip_mut_with(&dh.row(0), |p, &d| *p = *p + d);
                g.token_embed
                    .row_mut(eos)
                    .zip_mut_with(&dh.row(len - 1), |p, &d| *p = *p + d);
            }
        }
        dh
    }
}

impl<F: Real> ParamGroup<F> for TextEncoder<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f("token_embed", self.token_embed.view().into_dyn());
        f("pos_embed", self.pos_embed.view().into_dyn());
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |n, p| f(&format!("blocks.{i}.{n}"), p));
        }
        self.ln_final
            .visit(&mut |n, p| f(&format!("ln_final.{n}"), p));
        self.proj.visit(&mut |n, p| f(&format!("proj.{n}"), p));
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        f(
            "token_embed",
            self.token_embed.view_mut().into_dyn(),
            grads.token_embed.view().into_dyn(),
        );
        f(
            "pos_embed",
            self.pos_embed.view_mut().into_dyn(),
            grads.pos_embed.view().into_dyn(),
        );
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&grads.blocks[i], &mut |n, p, g| {
                f(&format!("blocks.{i}.{n}"), p, g)
            });
        }
        self.ln_final.visit_mut(&grads.ln_final, &mut |n, p, g| {
            f(&format!("ln_final.{n}"), p, g)
        });
        self.proj
            .visit_mut(&grads.proj, &mut |n, p, g| f(&format!("proj.{n}"), p, g));
    }

    fn zeros_like(&self) -> Self {
        TextEncoder {
            token_embed: Array2::zeros(self.token_embed.raw_dim()),
            pos_embed: Array2::zeros(self.pos_embed.raw_dim()),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            ln_final: self.ln_final.zeros_like(),
            proj: self.proj.zeros_like(),
        }
    }
}
