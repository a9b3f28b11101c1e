//! The frozen mini vision-language teacher.
//!
//! A stand-in for a pathology-tuned CLIP: a word tokenizer, a small
//! transformer text encoder that accepts token ids or continuous token
//! embeddings, a conv image encoder sharing the embedding space, and symmetric
//! contrastive pretraining over image-caption pairs so the teacher has genuine
//! zero-shot skill on the synthetic task. After pretraining the teacher is
//! frozen: every downstream stage treats its parameters as read-only.

mod tokenizer;
mod text;
mod vision;

pub use text::{TextCache, TextEncoder};
pub use tokenizer::{TokenSequence, Tokenizer, BOS, DEFAULT_MAX_LENGTH, EOS, PAD, UNK};
pub use vision::{ImageEncoder, VisionCache};

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DomainDataset, Image, ImageSource};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_rows, real, softmax_rows, Adam, ParamGroup, Real};
use crate::rng::rng_from;

/// Fixed contrastive temperature (1/0.07), not learnable.
pub const LOGIT_SCALE: f64 = 1.0 / 0.07;

/// Architecture hyperparameters, recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherArch {
    pub token_dim: usize,
    pub embed_dim: usize,
    pub max_length: usize,
    pub text_blocks: usize,
    pub text_heads: usize,
    pub image_channels: Vec<usize>,
    pub image_size: usize,
}

impl TeacherArch {
    /// Token and embedding dimensions are equal so the aggregated class
    /// embedding can sit directly in the prompt as a token.
    pub fn small(image_size: usize) -> Self {
        TeacherArch {
            token_dim: 64,
            embed_dim: 64,
            max_length: DEFAULT_MAX_LENGTH,
            text_blocks: 2,
            text_heads: 4,
            image_channels: vec![16, 32, 64, 64],
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim != self.embed_dim {
            return Err(Error::validation(
                "token_dim",
                "token and embedding dimensions must be equal",
            ));
        }
        if self.token_dim % self.text_heads != 0 {
            return Err(Error::validation(
                "text_heads",
                "must divide token_dim",
            ));
        }
        Ok(())
    }
}

/// Text input: discrete token ids or continuous token rows.
pub enum TextInput<'a, F> {
    Tokens(&'a TokenSequence),
    Continuous(&'a Array2<F>),
}

#[derive(Debug, Clone)]
pub struct TeacherModel<F> {
    pub tokenizer: Tokenizer,
    pub text: TextEncoder<F>,
    pub image: ImageEncoder<F>,
    pub arch: TeacherArch,
}

/// Convert an `[0,1]`-valued image into the active scalar type.
pub fn image_to_input<F: Real>(img: &Image) -> Array4<F> {
    let (c, h, w) = img.dim();
    Array4::from_shape_fn((1, c, h, w), |(_, ci, y, x)| real::<F>(img[(ci, y, x)] as f64))
}

/// Stack images into one NCHW batch.
pub fn images_to_batch<F: Real>(imgs: &[&Image]) -> Array4<F> {
    let (c, h, w) = imgs[0].dim();
    Array4::from_shape_fn((imgs.len(), c, h, w), |(n, ci, y, x)| {
        real::<F>(imgs[n][(ci, y, x)] as f64)
    })
}

impl<F: Real> TeacherModel<F> {
    pub fn new(tokenizer: Tokenizer, arch: TeacherArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        if tokenizer.max_length != arch.max_length {
            return Err(Error::validation(
                "max_length",
                "tokenizer and arch disagree",
            ));
        }
        let mut rng = rng_from(seed, &["teacher-init".into()]);
        let text = TextEncoder::new(
            tokenizer.vocab_size(),
            arch.max_length,
            arch.token_dim,
            arch.embed_dim,
            arch.text_blocks,
            arch.text_heads,
            0.1,
            &mut rng,
        );
        let image = ImageEncoder::new(arch.image_size, &arch.image_channels, arch.embed_dim, &mut rng);
        Ok(TeacherModel {
            tokenizer,
            text,
            image,
            arch,
        })
    }

    /// Encode text from either input kind into a unit-norm embedding.
    pub fn encode_text(&self, input: TextInput<'_, F>) -> Result<Array1<F>> {
        Ok(self.encode_text_cached(input)?.embedding().clone())
    }

    /// Same as [`Self::encode_text`] but keeps the cache for backprop.
    pub fn encode_text_cached(&self, input: TextInput<'_, F>) -> Result<TextCache<F>> {
        match input {
            TextInput::Tokens(seq) => self.text.encode_ids(seq),
            TextInput::Continuous(rows) => self.text.encode_continuous(rows),
        }
    }

    /// Encode one image into a unit-norm embedding.
    pub fn encode_image(&self, img: &Image) -> Result<Array1<F>> {
        let batch = image_to_input::<F>(img);
        let cache = self.image.forward(&batch, false)?;
        Ok(cache.embeddings().row(0).to_owned())
    }

    /// Encode a batch of images; one unit-norm row per image.
    pub fn encode_images(&self, imgs: &[&Image]) -> Result<Array2<F>> {
        let batch = images_to_batch::<F>(imgs);
        let cache = self.image.forward(&batch, false)?;
        Ok(cache.embeddings().clone())
    }

    /// SHA-256 over all parameters serialized as little-endian f32, in the
    /// checkpoint tensor order. This is the frozen-teacher fingerprint.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |_: &str, p: ndarray::ArrayViewD<'_, F>| {
            for v in p.iter() {
                hasher.update((v.to_f32().unwrap()).to_le_bytes());
            }
        };
        self.text.visit(&mut feed);
        self.image.visit(&mut feed);
        tokenizer_hex(&hasher.finalize())
    }
}

fn tokenizer_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Caption rendering for contrastive pretraining: class-bearing templates
/// cycled deterministically by sample index, interleaved with class-free
/// captions. The class-free half keeps the text-side class mapping imperfect
/// (zero-shot prompts stay fallible, as with real pathology VLMs) while the
/// image encoder still has to discriminate every pair. The pool spans the
/// phrasings used for zero-shot prompting so no prompt word is left with an
/// untrained embedding.
pub const CAPTION_TEMPLATES: [&str; 10] = [
    "an image of {}",
    "a photo of {}",
    "a patch of {}",
    "an image of {} tissue",
    "a histopathology image of {}",
    "a microscopy image of {}",
    "an h and e stained slide of {}",
    "a tissue patch showing {}",
    "a high magnification view of {}",
    "a pathology scan of {}",
];

pub const NEUTRAL_CAPTIONS: [&str; 4] = [
    "a histopathology tissue patch",
    "a stained tissue section",
    "a microscopy field of tissue",
    "a scanned pathology slide",
];

pub fn default_caption(class_name: &str, index: usize) -> String {
    if index % 2 == 1 {
        NEUTRAL_CAPTIONS[(index / 2) % NEUTRAL_CAPTIONS.len()].to_string()
    } else {
        CAPTION_TEMPLATES[(index / 2) % CAPTION_TEMPLATES.len()].replace("{}", class_name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Epoch cap. With `target_probe_accuracy` set, training can stop
    /// earlier; `epochs` = 0 skips training entirely.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop once the class-anchor probe holds at least this accuracy for two
    /// consecutive epochs. Keeps the teacher's zero-shot skill in a useful
    /// band: genuinely above chance, short of saturation. The probe is a
    /// fixed deterministic subset, so the schedule replays exactly.
    pub target_probe_accuracy: Option<f64>,
    /// Extra epochs after the target is reached; these continue the mixed
    /// discrete/soft-token batches so prompt routing gets trained even when
    /// the stop criterion fires early.
    pub polish_epochs: usize,
    /// Fraction of images whose caption persistently names a wrong class,
    /// emulating noisy web-scale pairs. This caps zero-shot skill at a
    /// stable ceiling no matter how long pretraining runs, while leaving the
    /// image features free to keep improving.
    pub label_noise: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 80,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            target_probe_accuracy: Some(0.92),
            polish_epochs: 2,
            label_noise: 0.15,
        }
    }
}

impl<F: Real> TeacherModel<F> {
    /// Symmetric InfoNCE pretraining over in-batch image-caption pairs.
    /// Spans all domains of `dataset` (including the validation domain),
    /// mirroring broad image-text pretraining. Returns the per-epoch loss.
    ///
    /// Batches alternate between discrete captions and a soft-token variant
    /// where the class phrase is replaced by the (detached) text embedding of
    /// the class name, appended as the final content token. The second form
    /// trains the encoder to route an inserted embedding-space class vector
    /// to the pooled position, which is the same shape of input the prompt
    /// tuning stage feeds it.
    pub fn pretrain(
        &mut self,
        dataset: &DomainDataset,
        source: &dyn ImageSource,
        caption_fn: &dyn Fn(&str, usize) -> String,
        config: &PretrainConfig,
    ) -> Result<Vec<f64>> {
        self.pretrain_with_probe(dataset, source, caption_fn, config, None)
    }

    /// [`Self::pretrain`] with explicit probe prompts (one template list per
    /// class). When given, the stop-at-target criterion scores a zero-shot
    /// classifier built from the mean encoded templates — the same classifier
    /// downstream zero-shot evaluation uses — instead of bare class names.
    pub fn pretrain_with_probe(
        &mut self,
        dataset: &DomainDataset,
        source: &dyn ImageSource,
        caption_fn: &dyn Fn(&str, usize) -> String,
        config: &PretrainConfig,
        probe_prompts: Option<&[Vec<String>]>,
    ) -> Result<Vec<f64>> {
        if dataset.records.is_empty() {
            return Err(Error::Empty("pretraining dataset has no records".into()));
        }
        let scale = real::<F>(LOGIT_SCALE);
        let mut adam_text = Adam::new(real::<F>(config.learning_rate));
        let mut adam_image = Adam::new(real::<F>(config.learning_rate));
        let mut rng = rng_from(config.seed, &["teacher-pretrain".into()]);
        let n = dataset.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut trace = Vec::with_capacity(config.epochs);

        // Soft-token batches start only after the contrastive loss escapes
        // its initial plateau (the class anchors are meaningless before
        // that); they then stay a quarter of the steps so the detached
        // anchors track live class structure instead of feeding an early
        // collapse back into training. The escape test is on deterministic
        // loss values, so the schedule is reproducible.
        let escape_threshold = 0.92 * (config.batch_size.max(2) as f64).ln();
        let mut escaped = false;
        // Fixed probe subset: gates the soft-token batches (an inverted or
        // confused classifier must never reinforce itself) and drives the
        // stop-at-target schedule. Probing runs a few times per epoch so the
        // stop lands inside the target band instead of overshooting it.
        let probe: Vec<usize> = (0..n).step_by((n / 128).max(1)).collect();
        // Persistent caption-label noise, fixed per image.
        let n_classes = dataset.class_names.len();
        let caption_class: Vec<usize> = (0..n)
            .map(|i| {
                let true_class = dataset.records[i].class_id;
                let mut noise_rng = rng_from(config.seed, &["caption-noise".into(), i.into()]);
                if rand::Rng::gen::<f64>(&mut noise_rng) < config.label_noise {
                    let shift = 1 + rand::Rng::gen_range(&mut noise_rng, 0..n_classes.max(2) - 1);
                    (true_class + shift) % n_classes
                } else {
                    true_class
                }
            })
            .collect();
        let batches_per_epoch = n.div_ceil(config.batch_size).max(1);
        let probe_stride = (batches_per_epoch / 4).max(1);
        let polish_batches = config.polish_epochs * batches_per_epoch;
        let mut hits = 0usize;
        let mut polish_left: Option<usize> = None;
        let mut stop = false;
        let mut class_vecs: Vec<Array1<F>> = Vec::new();
        // Class vectors for soft-token batches: the raw mean of encoded probe
        // templates when available (the same construction prompt tuning
        // inserts), otherwise the encoded class name.
        let mut soft_class_rows: Vec<Array1<F>> = Vec::new();
        let mut soft_enabled = false;

        for epoch in 0..config.epochs {
            if stop {
                break;
            }
            shuffle(&mut order, &mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
                if chunk.len() < 2 {
                    continue;
                }

                if batch_idx % probe_stride == 0 {
                    // Refresh the detached class anchors and the probe score.
                    class_vecs = dataset
                        .class_names
                        .iter()
                        .map(|name| {
                            self.encode_text(TextInput::Tokens(&self.tokenizer.tokenize(name)))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut raw_means: Vec<Array1<F>> = Vec::new();
                    let probe_rows: Vec<Array1<F>> = match probe_prompts {
                        Some(prompt_sets) => prompt_sets
                            .iter()
                            .map(|templates| {
                                let mut acc = Array1::<F>::zeros(self.arch.embed_dim);
                                for t in templates {
                                    let e = self.encode_text(TextInput::Tokens(
                                        &self.tokenizer.tokenize(t),
                                    ))?;
                                    acc += &e;
                                }
                                let inv = real::<F>(1.0 / templates.len().max(1) as f64);
                                let mean = acc * inv;
                                raw_means.push(mean.clone());
                                let norm = mean.dot(&mean).sqrt();
                                let mut unit = mean;
                                if norm > F::zero() {
                                    unit.mapv_inplace(|v| v / norm);
                                }
                                Ok(unit)
                            })
                            .collect::<Result<Vec<_>>>()?,
                        None => class_vecs.clone(),
                    };
                    soft_class_rows = if raw_means.is_empty() {
                        class_vecs.clone()
                    } else {
                        raw_means
                    };
                    let probe_accuracy = {
                        let records: Vec<_> = probe.iter().map(|&i| &dataset.records[i]).collect();
                        let images: Vec<_> = records
                            .iter()
                            .map(|r| source.load(&r.path))
                            .collect::<Result<Vec<_>>>()?;
                        let refs: Vec<&Image> = images.iter().map(|a| a.as_ref()).collect();
                        let batch = images_to_batch::<F>(&refs);
                        let cache = self.image.forward(&batch, true)?;
                        let embs = cache.embeddings();
                        let correct = records
                            .iter()
                            .enumerate()
                            .filter(|(i, r)| {
                                let mut best = 0usize;
                                let mut score = F::neg_infinity();
                                for (c, row) in probe_rows.iter().enumerate() {
                                    let sc = embs.row(*i).dot(row);
                                    if sc > score {
                                        score = sc;
                                        best = c;
                                    }
                                }
                                best == r.class_id
                            })
                            .count();
                        correct as f64 / records.len() as f64
                    };
                    soft_enabled = escaped && probe_accuracy >= 0.75;
                    if let Some(target) = config.target_probe_accuracy {
                        if probe_accuracy >= target {
                            hits += 1;
                            if hits >= 2 && polish_left.is_none() {
                                polish_left = Some(polish_batches);
                            }
                        } else {
                            hits = 0;
                        }
                    }
                }

                let soft_batch = soft_enabled && batch_idx % 4 == 3;
                // Re-render captions each epoch (co-prime stride) so an
                // image's caption style and neutral/class split both vary
                // over training; the class words are then the only stable
                // image-text association, which is what zero-shot transfer
                // needs. String-level memorization stops paying off. Until
                // the loss escapes its plateau every caption carries the
                // class (even index), giving the class words a clean start.
                let caption_salt = |i: usize| {
                    let salted = i.wrapping_add(epoch.wrapping_mul(7919));
                    if escaped {
                        salted
                    } else {
                        salted & !1usize
                    }
                };
                let records: Vec<_> = chunk.iter().map(|&i| &dataset.records[i]).collect();
                let images: Vec<_> = records
                    .iter()
                    .map(|r| source.load(&r.path))
                    .collect::<Result<Vec<_>>>()?;
                let image_refs: Vec<&Image> = images.iter().map(|a| a.as_ref()).collect();
                let batch = images_to_batch::<F>(&image_refs);
                let img_cache = self.image.forward(&batch, true)?;

                let text_caches = chunk
                    .iter()
                    .map(|&i| {
                        let cap_class = caption_class[i];
                        let cap_name = &dataset.class_names[cap_class];
                        let salted = caption_salt(i);
                        if soft_batch {
                            // Mirror the prompt-tuning input distribution:
                            // a few Gaussian context tokens, then the class's
                            // aggregated template embedding as the last row.
                            let k = 2 + salted % 3;
                            let d_t = self.arch.token_dim;
                            let mut prefix_rng = rng_from(
                                config.seed,
                                &["soft-prefix".into(), salted.into(), epoch.into()],
                            );
                            let dist = rand_distr::Normal::new(0.0, 0.1).unwrap();
                            let mut rows = Array2::zeros((k + 1, d_t));
                            for p in 0..k {
                                for q in 0..d_t {
                                    rows[(p, q)] = real::<F>(
                                        rand_distr::Distribution::sample(&dist, &mut prefix_rng),
                                    );
                                }
                            }
                            rows.row_mut(k).assign(&soft_class_rows[cap_class]);
                            self.text.encode_continuous(&rows)
                        } else {
                            let caption = caption_fn(cap_name, salted);
                            self.text.encode_ids(&self.tokenizer.tokenize(&caption))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;

                let b = chunk.len();
                let mut text_embs = Array2::zeros((b, self.arch.embed_dim));
                for (i, c) in text_caches.iter().enumerate() {
                    text_embs.row_mut(i).assign(c.embedding());
                }
                let img_embs = img_cache.embeddings().clone();

                let logits = img_embs.dot(&text_embs.t()) * scale;
                let p_rows = softmax_rows(&logits);
                let logits_t = logits.t().to_owned();
                let p_cols = softmax_rows(&logits_t);
                let lsm_rows = log_softmax_rows(&logits);
                let lsm_cols = log_softmax_rows(&logits_t);
                let mut loss = F::zero();
                for i in 0..b {
                    loss = loss - lsm_rows[(i, i)] - lsm_cols[(i, i)];
                }
                let bf = real::<F>(b as f64);
                loss = loss / (real::<F>(2.0) * bf);
                epoch_loss += loss.to_f64().unwrap();
                batches += 1;

                let half = real::<F>(0.5);
                let mut dlogits = Array2::zeros((b, b));
                for i in 0..b {
                    for j in 0..b {
                        let diag = if i == j { F::one() } else { F::zero() };
                        let row_term = (p_rows[(i, j)] - diag) / bf;
                        let col_term = (p_cols[(j, i)] - diag) / bf;
                        dlogits[(i, j)] = half * (row_term + col_term);
                    }
                }

                let d_img = dlogits.dot(&text_embs) * scale;
                let d_text = dlogits.t().dot(&img_embs) * scale;

                let mut img_grads = self.image.zeros_like();
                self.image.backward(&img_cache, &d_img, &mut img_grads);
                let mut text_grads = self.text.zeros_like();
                for (i, cache) in text_caches.iter().enumerate() {
                    self.text
                        .backward(cache, &d_text.row(i).to_owned(), Some(&mut text_grads));
                }

                adam_image.step(&mut self.image, &img_grads);
                adam_text.step(&mut self.text, &text_grads);

                if let Some(left) = polish_left {
                    if left == 0 {
                        stop = true;
                        break;
                    }
                    polish_left = Some(left - 1);
                }
            }
            let mean_loss = if batches > 0 {
                epoch_loss / batches as f64
            } else {
                0.0
            };
            if mean_loss < escape_threshold {
                escaped = true;
            }
            trace.push(mean_loss);
        }

        // Calibrate the image feature normalizer on the full dataset so
        // inference is batch-independent.
        if config.epochs > 0 {
            let mut all_feats: Option<Array2<F>> = None;
            let mut row = 0usize;
            for chunk in (0..n).collect::<Vec<_>>().chunks(64) {
                let records: Vec<_> = chunk.iter().map(|&i| &dataset.records[i]).collect();
                let images: Vec<_> = records
                    .iter()
                    .map(|r| source.load(&r.path))
                    .collect::<Result<Vec<_>>>()?;
                let image_refs: Vec<&Image> = images.iter().map(|a| a.as_ref()).collect();
                let batch = images_to_batch::<F>(&image_refs);
                let cache = self.image.forward(&batch, true)?;
                let feats = cache.feats();
                let all = all_feats
                    .get_or_insert_with(|| Array2::zeros((n, feats.ncols())));
                for r in feats.rows() {
                    all.row_mut(row).assign(&r);
                    row += 1;
                }
            }
            if let Some(all) = all_feats {
                let (mean, var) = crate::nn::BatchNorm1d::batch_stats(&all);
                self.image.feat_bn.set_frozen_stats(mean, var);
            }
        }
        Ok(trace)
    }
}

/// Fisher-Yates with the crate's seeded generator.
pub(crate) fn shuffle(items: &mut [usize], rng: &mut impl rand::Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Mean cosine between each image and its own caption, on a fixed probe set.
/// Pretraining should increase this.
pub fn probe_alignment<F: Real>(
    teacher: &TeacherModel<F>,
    dataset: &DomainDataset,
    source: &dyn ImageSource,
    limit: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, r) in dataset.records.iter().take(limit).enumerate() {
        let img = source.load(&r.path)?;
        let ie = teacher.encode_image(&img)?;
        let caption = default_caption(&r.class_name, i);
        let te = teacher.encode_text(TextInput::Tokens(&teacher.tokenizer.tokenize(&caption)))?;
        total += ie.dot(&te).to_f64().unwrap();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("probe set is empty".into()));
    }
    Ok(total / count as f64)
}
