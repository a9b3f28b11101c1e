//! Trainable student image models: a small conv net (the full-scale-CNN
//! analog) and a tiny vision transformer, both with a projection head into
//! the teacher's embedding space and an optional linear head for the
//! logit-distillation baseline.

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::Path;

use crate::checkpoint::{assign_tensors, collect_tensors, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize, l2_normalize_backward, real, BatchNorm1d, BatchNormCache, BlockCache, ConvBlock,
    ConvBlockCache, LayerNorm, LayerNormCache, Linear, ParamGroup, Real, TransformerBlock,
};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StudentArch {
    /// Stride-2 conv/ReLU blocks with global average pooling.
    Conv { channels: Vec<usize> },
    /// Patch embedding plus transformer blocks with mean pooling.
    Vit {
        patch: usize,
        dim: usize,
        blocks: usize,
        heads: usize,
    },
}

impl Default for StudentArch {
    fn default() -> Self {
        StudentArch::Conv {
            channels: vec![16, 32, 64],
        }
    }
}

impl StudentArch {
    pub fn tiny_vit() -> Self {
        StudentArch::Vit {
            patch: 8,
            dim: 48,
            blocks: 2,
            heads: 4,
        }
    }
}

#[derive(Debug, Clone)]
enum Backbone<F> {
    Conv(Vec<ConvBlock<F>>),
    Vit {
        patch: usize,
        patch_embed: Linear<F>,
        pos: Array2<F>,
        blocks: Vec<TransformerBlock<F>>,
        ln: LayerNorm<F>,
    },
}

enum BackboneCache<F> {
    Conv {
        block_caches: Vec<ConvBlockCache<F>>,
        spatial: (usize, usize),
    },
    Vit {
        rows: Vec<Array2<F>>,
        block_caches: Vec<Vec<BlockCache<F>>>,
        ln_caches: Vec<LayerNormCache<F>>,
        ln_out_rows: Vec<usize>,
    },
}

pub struct StudentCache<F> {
    backbone: BackboneCache<F>,
    feats: Array2<F>,
    bn: Option<BatchNormCache<F>>,
    bn_out: Array2<F>,
    projected_norms: Array1<F>,
    embeddings: Array2<F>,
    logits: Option<Array2<F>>,
}

impl<F: Real> StudentCache<F> {
    /// Unit-norm projected embeddings, one row per image.
    pub fn embeddings(&self) -> &Array2<F> {
        &self.embeddings
    }

    /// Pre-normalization backbone features.
    pub fn feats(&self) -> &Array2<F> {
        &self.feats
    }

    pub fn logits(&self) -> Option<&Array2<F>> {
        self.logits.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct StudentModel<F> {
    pub arch: StudentArch,
    backbone: Backbone<F>,
    /// Feature standardization between the backbone and the heads; keeps
    /// student representations from collapsing onto one direction.
    pub feat_bn: BatchNorm1d<F>,
    pub proj: Linear<F>,
    pub head: Option<Linear<F>>,
    pub input_size: usize,
    pub embed_dim: usize,
}

impl<F: Real> StudentModel<F> {
    pub fn new(
        arch: StudentArch,
        input_size: usize,
        embed_dim: usize,
        head_classes: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_from(seed, &["student-init".into()]);
        let (backbone, feat_dim) = match &arch {
            StudentArch::Conv { channels } => {
                if channels.is_empty() {
                    return Err(Error::validation("channels", "conv student needs blocks"));
                }
                let mut convs = Vec::new();
                let mut in_c = 3;
                for &c in channels {
                    convs.push(ConvBlock::new(in_c, c, 2, &mut rng));
                    in_c = c;
                }
                (Backbone::Conv(convs), in_c)
            }
            StudentArch::Vit {
                patch,
                dim,
                blocks,
                heads,
            } => {
                if input_size % patch != 0 {
                    return Err(Error::validation(
                        "patch",
                        format!("patch {patch} does not divide image size {input_size}"),
                    ));
                }
                let n_patches = (input_size / patch) * (input_size / patch);
                let patch_embed = Linear::xavier(patch * patch * 3, *dim, true, &mut rng);
                let pos = sample_pos(n_patches, *dim, &mut rng);
                let blocks = (0..*blocks)
                    .map(|_| TransformerBlock::new(*dim, *heads, 4 * dim, &mut rng))
                    .collect();
                (
                    Backbone::Vit {
                        patch: *patch,
                        patch_embed,
                        pos,
                        blocks,
                        ln: LayerNorm::new(*dim),
                    },
                    *dim,
                )
            }
        };
        let proj = Linear::xavier(feat_dim, embed_dim, true, &mut rng);
        let head = head_classes.map(|c| Linear::xavier(feat_dim, c, true, &mut rng));
        Ok(StudentModel {
            arch,
            backbone,
            feat_bn: BatchNorm1d::new(feat_dim),
            proj,
            head,
            input_size,
            embed_dim,
        })
    }

    /// Forward a batch: features, unit-norm projected embeddings, and (when
    /// the head exists) class logits. Training mode normalizes features with
    /// batch statistics; evaluation uses the calibrated frozen statistics.
    pub fn forward(&self, x: &Array4<F>, training: bool) -> Result<StudentCache<F>> {
        let (b, c, h, w) = x.dim();
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(Error::Shape(format!(
                "expected rgb {s}x{s} student input, got {c}x{h}x{w}",
                s = self.input_size
            )));
        }
        let x = &standardize_channels(x);
        let (feats, backbone) = match &self.backbone {
            Backbone::Conv(convs) => {
                let mut hb = x.clone();
                let mut block_caches = Vec::new();
                let last = convs.len() - 1;
                for (i, block) in convs.iter().enumerate() {
                    let (y, cache) = block.forward(&hb, i != last);
                    block_caches.push(cache);
                    hb = y;
                }
                let (_, cc, oh, ow) = hb.dim();
                let area = real::<F>((oh * ow) as f64);
                let mut feats = Array2::zeros((b, cc));
                for n in 0..b {
                    for ch in 0..cc {
                        let mut sum = F::zero();
                        for yy in 0..oh {
                            for xx in 0..ow {
                                sum += hb[(n, ch, yy, xx)];
                            }
                        }
                        feats[(n, ch)] = sum / area;
                    }
                }
                (
                    feats,
                    BackboneCache::Conv {
                        block_caches,
                        spatial: (oh, ow),
                    },
                )
            }
            Backbone::Vit {
                patch,
                patch_embed,
                pos,
                blocks,
                ln,
            } => {
                let dim = pos.ncols();
                let mut feats = Array2::zeros((b, dim));
                let mut all_rows = Vec::with_capacity(b);
                let mut all_block_caches = Vec::with_capacity(b);
                let mut all_ln = Vec::with_capacity(b);
                let mut ln_out_rows = Vec::with_capacity(b);
                for n in 0..b {
                    let rows = patchify(x, n, *patch);
                    let mut hseq = patch_embed.forward(&rows) + pos;
                    let valid = vec![true; hseq.nrows()];
                    let mut caches = Vec::with_capacity(blocks.len());
                    for block in blocks {
                        let (next, cache) = block.forward(&hseq, &valid);
                        caches.push(cache);
                        hseq = next;
                    }
                    let (out, ln_cache) = ln.forward(&hseq);
                    let l = out.nrows();
                    feats
                        .row_mut(n)
                        .assign(&(out.sum_axis(Axis(0)) / real::<F>(l as f64)));
                    all_rows.push(rows);
                    all_block_caches.push(caches);
                    all_ln.push(ln_cache);
                    ln_out_rows.push(l);
                }
                (
                    feats,
                    BackboneCache::Vit {
                        rows: all_rows,
                        block_caches: all_block_caches,
                        ln_caches: all_ln,
                        ln_out_rows,
                    },
                )
            }
        };

        let (bn_out, bn) = if training {
            let (y, cache) = self.feat_bn.forward_train(&feats);
            (y, Some(cache))
        } else {
            (self.feat_bn.forward_eval(&feats), None)
        };
        let projected = self.proj.forward(&bn_out);
        let mut embeddings = Array2::zeros(projected.raw_dim());
        let mut projected_norms = Array1::zeros(b);
        for (i, row) in projected.rows().into_iter().enumerate() {
            let (unit, norm) = l2_normalize(&row.to_owned())?;
            embeddings.row_mut(i).assign(&unit);
            projected_norms[i] = norm;
        }
        let logits = self.head.as_ref().map(|head| head.forward(&bn_out));
        Ok(StudentCache {
            backbone,
            feats,
            bn,
            bn_out,
            projected_norms,
            embeddings,
            logits,
        })
    }

    /// Backward from embedding and/or logit gradients into parameter grads.
    pub fn backward(
        &self,
        cache: &StudentCache<F>,
        d_embeddings: Option<&Array2<F>>,
        d_logits: Option<&Array2<F>>,
        grad: &mut Self,
    ) {
        let b = cache.feats.nrows();
        let mut d_bn_out = Array2::zeros(cache.bn_out.raw_dim());

        if let Some(de) = d_embeddings {
            let mut d_proj_out = Array2::zeros(de.raw_dim());
            for i in 0..b {
                let dv = l2_normalize_backward(
                    &cache.embeddings.row(i).to_owned(),
                    cache.projected_norms[i],
                    &de.row(i).to_owned(),
                );
                d_proj_out.row_mut(i).assign(&dv);
            }
            d_bn_out += &self.proj.backward(&cache.bn_out, &d_proj_out, &mut grad.proj);
        }
        if let Some(dl) = d_logits {
            let head = self.head.as_ref().expect("logit grads need a head");
            let ghead = grad.head.as_mut().expect("grad head");
            d_bn_out += &head.backward(&cache.bn_out, dl, ghead);
        }
        let bn_cache = cache.bn.as_ref().expect("backward requires training-mode forward");
        let d_feats = self.feat_bn.backward(bn_cache, &d_bn_out, &mut grad.feat_bn);

        match (&self.backbone, &cache.backbone, &mut grad.backbone) {
            (
                Backbone::Conv(convs),
                BackboneCache::Conv {
                    block_caches,
                    spatial,
                },
                Backbone::Conv(gconvs),
            ) => {
                let (oh, ow) = *spatial;
                let cc = d_feats.ncols();
                let area = real::<F>((oh * ow) as f64);
                let mut dh = Array4::zeros((b, cc, oh, ow));
                for n in 0..b {
                    for ch in 0..cc {
                        let g = d_feats[(n, ch)] / area;
                        for yy in 0..oh {
                            for xx in 0..ow {
                                dh[(n, ch, yy, xx)] = g;
                            }
                        }
                    }
                }
                for (i, block) in convs.iter().enumerate().rev() {
                    dh = block.backward(&block_caches[i], &dh, &mut gconvs[i]);
                }
            }
            (
                Backbone::Vit {
                    patch_embed,
                    blocks,
                    ln,
                    ..
                },
                BackboneCache::Vit {
                    rows,
                    block_caches,
                    ln_caches,
                    ln_out_rows,
                },
                Backbone::Vit {
                    patch_embed: g_embed,
                    pos: g_pos,
                    blocks: g_blocks,
                    ln: g_ln,
                    ..
                },
            ) => {
                for n in 0..b {
                    let l = ln_out_rows[n];
                    let spread = real::<F>(l as f64);
                    let mut d_out = Array2::zeros((l, d_feats.ncols()));
                    for r in 0..l {
                        for cdim in 0..d_feats.ncols() {
                            d_out[(r, cdim)] = d_feats[(n, cdim)] / spread;
                        }
                    }
                    let mut dh = ln.backward(&ln_caches[n], &d_out, g_ln);
                    for (i, block) in blocks.iter().enumerate().rev() {
                        dh = block.backward(&block_caches[n][i], &dh, &mut g_blocks[i]);
                    }
                    *g_pos += &dh;
                    patch_embed.backward(&rows[n], &dh, g_embed);
                }
            }
            _ => unreachable!("backbone and cache kinds always match"),
        }
    }
}

fn sample_pos<F: Real>(n: usize, dim: usize, rng: &mut impl Rng) -> Array2<F> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, 0.02).unwrap();
    Array2::from_shape_fn((n, dim), |_| real::<F>(dist.sample(rng)))
}

/// Per-image, per-channel standardization of the input. This is pure
/// preprocessing (the input carries no gradient): it strips each channel's
/// brightness and contrast, which is most of what distinguishes the synthetic
/// domains, so the backbone works on geometry rather than stain color.
fn standardize_channels<F: Real>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut out = x.clone();
    let area = real::<F>((h * w) as f64);
    let eps = real::<F>(1e-5);
    for n in 0..b {
        for ch in 0..c {
            let mut mean = F::zero();
            for y in 0..h {
                for xx in 0..w {
                    mean += x[(n, ch, y, xx)];
                }
            }
            mean = mean / area;
            let mut var = F::zero();
            for y in 0..h {
                for xx in 0..w {
                    let d = x[(n, ch, y, xx)] - mean;
                    var += d * d;
                }
            }
            var = var / area;
            let inv = F::one() / (var + eps).sqrt();
            for y in 0..h {
                for xx in 0..w {
                    out[(n, ch, y, xx)] = (x[(n, ch, y, xx)] - mean) * inv;
                }
            }
        }
    }
    out
}

fn patchify<F: Real>(x: &Array4<F>, n: usize, patch: usize) -> Array2<F> {
    let (_, c, h, w) = x.dim();
    let ph = h / patch;
    let pw = w / patch;
    Array2::from_shape_fn((ph * pw, patch * patch * c), |(p, f)| {
        let (py, px) = (p / pw, p % pw);
        let ci = f / (patch * patch);
        let rem = f % (patch * patch);
        let (dy, dx) = (rem / patch, rem % patch);
        x[(n, ci, py * patch + dy, px * patch + dx)]
    })
}

impl<F: Real> ParamGroup<F> for StudentModel<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        match &self.backbone {
            Backbone::Conv(convs) => {
                for (i, c) in convs.iter().enumerate() {
                    c.visit(&mut |n, p| f(&format!("convs.{i}.{n}"), p));
                }
            }
            Backbone::Vit {
                patch_embed,
                pos,
                blocks,
                ln,
                ..
            } => {
                patch_embed.visit(&mut |n, p| f(&format!("patch_embed.{n}"), p));
                f("pos", pos.view().into_dyn());
                for (i, b) in blocks.iter().enumerate() {
                    b.visit(&mut |n, p| f(&format!("blocks.{i}.{n}"), p));
                }
                ln.visit(&mut |n, p| f(&format!("ln.{n}"), p));
            }
        }
        self.feat_bn.visit(&mut |n, p| f(&format!("feat_bn.{n}"), p));
        self.proj.visit(&mut |n, p| f(&format!("proj.{n}"), p));
        if let Some(h) = &self.head {
            h.visit(&mut |n, p| f(&format!("head.{n}"), p));
        }
    }

    fn visit_mut(
        &mut self,
        grads: &Self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        match (&mut self.backbone, &grads.backbone) {
            (Backbone::Conv(convs), Backbone::Conv(gconvs)) => {
                for (i, c) in convs.iter_mut().enumerate() {
                    c.visit_mut(&gconvs[i], &mut |n, p, g| f(&format!("convs.{i}.{n}"), p, g));
                }
            }
            (
                Backbone::Vit {
                    patch_embed,
                    pos,
                    blocks,
                    ln,
                    ..
                },
                Backbone::Vit {
                    patch_embed: ge,
                    pos: gp,
                    blocks: gb,
                    ln: gl,
                    ..
                },
            ) => {
                patch_embed.visit_mut(ge, &mut |n, p, g| f(&format!("patch_embed.{n}"), p, g));
                f("pos", pos.view_mut().into_dyn(), gp.view().into_dyn());
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.visit_mut(&gb[i], &mut |n, p, g| f(&format!("blocks.{i}.{n}"), p, g));
                }
                ln.visit_mut(gl, &mut |n, p, g| f(&format!("ln.{n}"), p, g));
            }
            _ => unreachable!("grad backbone kind always matches"),
        }
        self.feat_bn.visit_mut(&grads.feat_bn, &mut |n, p, g| {
            f(&format!("feat_bn.{n}"), p, g)
        });
        self.proj
            .visit_mut(&grads.proj, &mut |n, p, g| f(&format!("proj.{n}"), p, g));
        if let (Some(h), Some(gh)) = (&mut self.head, &grads.head) {
            h.visit_mut(gh, &mut |n, p, g| f(&format!("head.{n}"), p, g));
        }
    }

    fn zeros_like(&self) -> Self {
        StudentModel {
            arch: self.arch.clone(),
            backbone: match &self.backbone {
                Backbone::Conv(convs) => Backbone::Conv(convs.iter().map(|c| c.zeros_like()).collect()),
                Backbone::Vit {
                    patch,
                    patch_embed,
                    pos,
                    blocks,
                    ln,
                } => Backbone::Vit {
                    patch: *patch,
                    patch_embed: patch_embed.zeros_like(),
                    pos: Array2::zeros(pos.raw_dim()),
                    blocks: blocks.iter().map(|b| b.zeros_like()).collect(),
                    ln: ln.zeros_like(),
                },
            },
            feat_bn: self.feat_bn.zeros_like(),
            proj: self.proj.zeros_like(),
            head: self.head.as_ref().map(|h| h.zeros_like()),
            input_size: self.input_size,
            embed_dim: self.embed_dim,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StudentArchHeader {
    arch: StudentArch,
    input_size: usize,
    embed_dim: usize,
    head_classes: Option<usize>,
}

/// Serialize a student in the shared checkpoint container.
pub fn save_student<F: Real>(
    student: &StudentModel<F>,
    path: &Path,
    meta: Map<String, Value>,
) -> Result<()> {
    let head_classes = student.head.as_ref().map(|h| h.w.ncols());
    let arch = serde_json::to_value(StudentArchHeader {
        arch: student.arch.clone(),
        input_size: student.input_size,
        embed_dim: student.embed_dim,
        head_classes,
    })
    .expect("student arch serializes");
    let ckpt = Checkpoint::new(
        "student",
        student.embed_dim,
        student.embed_dim,
        String::new(),
        arch,
        meta,
        collect_tensors(student),
    );
    ckpt.save(path)
}

pub fn load_student(path: &Path) -> Result<(StudentModel<f32>, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.header.kind != "student" {
        return Err(Error::Checkpoint {
            field: "kind".into(),
            reason: format!("expected \"student\", found \"{}\"", ckpt.header.kind),
        });
    }
    let header: StudentArchHeader =
        serde_json::from_value(ckpt.header.arch.clone()).map_err(|e| Error::Checkpoint {
            field: "arch".into(),
            reason: e.to_string(),
        })?;
    let mut student = StudentModel::<f32>::new(
        header.arch,
        header.input_size,
        header.embed_dim,
        header.head_classes,
        0,
    )?;
    assign_tensors(&mut student, &ckpt.tensors)?;
    Ok((student, ckpt))
}
