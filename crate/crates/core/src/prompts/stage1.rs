//! Stage 1: per-domain learnable prompt tokens.
//!
//! For one domain, k continuous tokens are concatenated with the frozen
//! class-generic embedding and tuned against the frozen teacher. The loss is
//! the sum of a domain-specific cross-entropy over cosine logits (temperature
//! τ) and a generalization term keeping each tuned class embedding aligned
//! with its aggregated template embedding, implemented as a mean of
//! (1 - cosine).

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bank::AggregatedEmbeddings;
use crate::data::{DatasetRecord, Image, ImageSource};
use crate::error::{Error, Result};
use crate::nn::{cosine, real, softmax_rows, Real, Sgd};
use crate::rng::{derive_seed, rng_from};
use crate::teacher::{TeacherModel, TextCache, TextInput};

/// The k learnable token rows for one domain.
#[derive(Debug, Clone)]
pub struct DomainTokens<F> {
    pub domain_id: usize,
    /// `[k, d_t]`.
    pub tokens: Array2<F>,
}

impl<F: Real> DomainTokens<F> {
    pub fn k(&self) -> usize {
        self.tokens.nrows()
    }
}

/// Optimization settings for stage 1. The learning-rate presets 5e-6 and 5e-5
/// cover the reported grid; plain SGD keeps the finite-difference gradient
/// validation clean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub k: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            k: 3,
            learning_rate: 5e-5,
            temperature: 0.01,
            steps: 500,
            batch_size: 32,
            seed: 0,
            init_std: 0.1,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation(
                "k",
                "at least one learnable token is required; the prompt must not collapse to the class-generic token alone",
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::validation("temperature", "must be positive"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if self.init_std <= 0.0 {
            return Err(Error::validation("init_std", "must be positive"));
        }
        Ok(())
    }
}

/// Gaussian-initialized tokens, i.i.d. N(0, init_std²).
pub fn init_domain_tokens<F: Real>(
    domain_id: usize,
    k: usize,
    token_dim: usize,
    init_std: f64,
    seed: u64,
) -> Result<DomainTokens<F>> {
    if k == 0 {
        return Err(Error::validation("k", "must be at least 1"));
    }
    let mut rng = rng_from(seed, &["domain-tokens".into(), domain_id.into()]);
    let dist = Normal::new(0.0, init_std).unwrap();
    let tokens = Array2::from_shape_fn((k, token_dim), |_| real::<F>(dist.sample(&mut rng)));
    Ok(DomainTokens { domain_id, tokens })
}

/// The continuous prompt for one class: `[T_1 .. T_k, E_agg_i]`, length k+1.
/// The encoder adds bos/eos wrapping.
pub fn build_prompt<F: Real>(
    tokens: &DomainTokens<F>,
    class_id: usize,
    agg: &AggregatedEmbeddings<F>,
) -> Result<Array2<F>> {
    if class_id >= agg.n_classes() {
        return Err(Error::validation(
            "class_id",
            format!("{class_id} out of range for {} classes", agg.n_classes()),
        ));
    }
    if tokens.tokens.ncols() != agg.dim() {
        return Err(Error::Shape(format!(
            "token dimension {} does not match embedding dimension {}",
            tokens.tokens.ncols(),
            agg.dim()
        )));
    }
    let k = tokens.k();
    let mut rows = Array2::zeros((k + 1, agg.dim()));
    rows.slice_mut(ndarray::s![..k, ..]).assign(&tokens.tokens);
    rows.row_mut(k).assign(&agg.matrix.row(class_id));
    Ok(rows)
}

/// Per-domain class embeddings: row i = h_T([T_1..T_k, E_agg_i]), unit norm.
#[derive(Debug, Clone)]
pub struct DomainClassEmbeddings<F> {
    pub domain_id: usize,
    pub class_names: Vec<String>,
    /// `[N_c, d_e]`.
    pub matrix: Array2<F>,
    pub teacher_hash: String,
}

pub fn domain_class_embeddings<F: Real>(
    teacher: &TeacherModel<F>,
    tokens: &DomainTokens<F>,
    agg: &AggregatedEmbeddings<F>,
) -> Result<DomainClassEmbeddings<F>> {
    let caches = encode_all_classes(teacher, tokens, agg)?;
    let matrix = embeddings_from_caches(&caches, agg.dim());
    Ok(DomainClassEmbeddings {
        domain_id: tokens.domain_id,
        class_names: agg.class_names.clone(),
        matrix,
        teacher_hash: agg.teacher_hash.clone(),
    })
}

fn encode_all_classes<F: Real>(
    teacher: &TeacherModel<F>,
    tokens: &DomainTokens<F>,
    agg: &AggregatedEmbeddings<F>,
) -> Result<Vec<TextCache<F>>> {
    (0..agg.n_classes())
        .map(|i| {
            let prompt = build_prompt(tokens, i, agg)?;
            teacher.encode_text_cached(TextInput::Continuous(&prompt))
        })
        .collect()
}

fn embeddings_from_caches<F: Real>(caches: &[TextCache<F>], d_e: usize) -> Array2<F> {
    let mut m = Array2::zeros((caches.len(), d_e));
    for (i, c) in caches.iter().enumerate() {
        m.row_mut(i).assign(c.embedding());
    }
    m
}

/// Cross-entropy over cosine logits z_i = cos(image, E_i), divided by τ,
/// averaged over the batch. General form: inputs need not be unit-norm.
pub fn loss_ds_from_embeddings<F: Real>(
    image_embeddings: &Array2<F>,
    labels: &[usize],
    class_embeddings: &Array2<F>,
    temperature: f64,
) -> Result<F> {
    if image_embeddings.nrows() == 0 {
        return Err(Error::Empty("loss_ds batch is empty".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::validation("temperature", "must be positive"));
    }
    if image_embeddings.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} labels",
            image_embeddings.nrows(),
            labels.len()
        )));
    }
    let n_classes = class_embeddings.nrows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::validation(
            "labels",
            format!("label {bad} out of range for {n_classes} classes"),
        ));
    }
    let logits = cosine_logits(image_embeddings, class_embeddings)?;
    Ok(ce_from_cosines(&logits, labels, temperature))
}

fn cosine_logits<F: Real>(images: &Array2<F>, classes: &Array2<F>) -> Result<Array2<F>> {
    let mut logits = Array2::zeros((images.nrows(), classes.nrows()));
    for (b, img) in images.rows().into_iter().enumerate() {
        for (i, cls) in classes.rows().into_iter().enumerate() {
            logits[(b, i)] = cosine(&img.to_owned(), &cls.to_owned())?;
        }
    }
    Ok(logits)
}

fn ce_from_cosines<F: Real>(cosines: &Array2<F>, labels: &[usize], temperature: f64) -> F {
    let tau = real::<F>(temperature);
    let scaled = cosines.mapv(|z| z / tau);
    let mut loss = F::zero();
    for (b, &y) in labels.iter().enumerate() {
        let row = scaled.row(b);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
        loss = loss - (scaled[(b, y)] - lse);
    }
    loss / real::<F>(labels.len() as f64)
}

/// [`loss_ds_from_embeddings`] over raw images, encoding them with the teacher.
pub fn loss_ds<F: Real>(
    teacher: &TeacherModel<F>,
    images: &[&Image],
    labels: &[usize],
    class_embeddings: &DomainClassEmbeddings<F>,
    temperature: f64,
) -> Result<F> {
    if images.is_empty() {
        return Err(Error::Empty("loss_ds batch is empty".into()));
    }
    let embs = teacher.encode_images(images)?;
    loss_ds_from_embeddings(&embs, labels, &class_embeddings.matrix, temperature)
}

/// Generalization loss: mean over classes of (1 - cos(E_d_i, E_agg_i)).
pub fn loss_g<F: Real>(domain_rows: &Array2<F>, agg_rows: &Array2<F>) -> Result<F> {
    if domain_rows.dim() != agg_rows.dim() {
        return Err(Error::Shape(format!(
            "domain embeddings {:?} vs aggregated {:?}",
            domain_rows.dim(),
            agg_rows.dim()
        )));
    }
    let mut total = F::zero();
    for (d, a) in domain_rows.rows().into_iter().zip(agg_rows.rows()) {
        total += F::one() - cosine(&d.to_owned(), &a.to_owned())?;
    }
    Ok(total / real::<F>(domain_rows.nrows() as f64))
}

/// Total stage-1 loss for a given token matrix: L_DS + L_G.
/// `unit_image_embeddings` rows must be unit-norm teacher image embeddings.
pub fn stage1_loss<F: Real>(
    teacher: &TeacherModel<F>,
    tokens: &DomainTokens<F>,
    agg: &AggregatedEmbeddings<F>,
    unit_image_embeddings: &Array2<F>,
    labels: &[usize],
    temperature: f64,
) -> Result<F> {
    let caches = encode_all_classes(teacher, tokens, agg)?;
    let e = embeddings_from_caches(&caches, agg.dim());
    let logits = unit_image_embeddings.dot(&e.t());
    let lds = ce_from_cosines(&logits, labels, temperature);
    let lg = loss_g(&e, &agg.matrix)?;
    Ok(lds + lg)
}

/// Total stage-1 loss and its analytic gradient w.r.t. the k token rows.
pub fn stage1_loss_and_grad<F: Real>(
    teacher: &TeacherModel<F>,
    tokens: &DomainTokens<F>,
    agg: &AggregatedEmbeddings<F>,
    unit_image_embeddings: &Array2<F>,
    labels: &[usize],
    temperature: f64,
) -> Result<(F, Array2<F>)> {
    let k = tokens.k();
    let n_classes = agg.n_classes();
    let batch = labels.len();
    if batch == 0 {
        return Err(Error::Empty("stage-1 batch is empty".into()));
    }
    let caches = encode_all_classes(teacher, tokens, agg)?;
    let e = embeddings_from_caches(&caches, agg.dim());

    // L_DS: logits are plain dots because both sides are unit-norm.
    let logits = unit_image_embeddings.dot(&e.t());
    let lds = ce_from_cosines(&logits, labels, temperature);
    let tau = real::<F>(temperature);
    let bf = real::<F>(batch as f64);
    let mut dlogits = softmax_rows(&logits.mapv(|z| z / tau));
    for (b, &y) in labels.iter().enumerate() {
        dlogits[(b, y)] = dlogits[(b, y)] - F::one();
    }
    dlogits.mapv_inplace(|v| v / (tau * bf));
    // dL_DS/dE = dlogitsᵀ · images.
    let mut d_e_rows = dlogits.t().dot(unit_image_embeddings);

    // L_G and its per-row term: -(1/N_c) · normalized(agg_i).
    let lg = loss_g(&e, &agg.matrix)?;
    let ncf = real::<F>(n_classes as f64);
    for i in 0..n_classes {
        let a = agg.matrix.row(i).to_owned();
        let norm = a.dot(&a).sqrt();
        if !(norm > F::zero()) {
            return Err(Error::Numerical("aggregated row has zero norm".into()));
        }
        let scaled = a.mapv(|v| v / (norm * ncf));
        d_e_rows
            .row_mut(i)
            .zip_mut_with(&scaled, |d, &s| *d = *d - s);
    }

    // Backprop each class embedding to the shared token rows. The wrapped
    // sequence is [bos, T_1..T_k, E_agg_i, eos]; token grads sit at rows 1..=k.
    let mut d_tokens = Array2::zeros((k, tokens.tokens.ncols()));
    for (i, cache) in caches.iter().enumerate() {
        let d_rows = teacher.text.backward(cache, &d_e_rows.row(i).to_owned(), None);
        d_tokens += &d_rows.slice(ndarray::s![1..=k, ..]);
    }
    Ok((lds + lg, d_tokens))
}

/// Provides teacher image embeddings by path; implementations may cache.
pub trait ImageEmbedder<F>: Sync {
    fn embed(&self, path: &Path) -> Result<Array1<F>>;
}

/// Direct embedder: loads from a source and encodes with the teacher.
pub struct TeacherEmbedder<'a, F> {
    pub teacher: &'a TeacherModel<F>,
    pub source: &'a dyn ImageSource,
}

impl<F: Real> ImageEmbedder<F> for TeacherEmbedder<'_, F> {
    fn embed(&self, path: &Path) -> Result<Array1<F>> {
        let img = self.source.load(path)?;
        self.teacher.encode_image(&img)
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output<F> {
    pub tokens: DomainTokens<F>,
    pub embeddings: DomainClassEmbeddings<F>,
    /// Total loss at every step, in order.
    pub trace: Vec<f64>,
    /// Full-domain loss at the initial tokens.
    pub initial_full_loss: f64,
    /// Full-domain loss at the trained tokens.
    pub final_full_loss: f64,
}

/// Tune one domain's tokens. `domain_data` must contain exactly one domain;
/// the teacher and aggregated embeddings are read-only throughout.
pub fn train_domain_prompts<F: Real>(
    domain_data: &[&DatasetRecord],
    teacher: &TeacherModel<F>,
    agg: &AggregatedEmbeddings<F>,
    config: &Stage1Config,
    embedder: &dyn ImageEmbedder<F>,
) -> Result<Stage1Output<F>> {
    config.validate()?;
    if domain_data.is_empty() {
        return Err(Error::Empty("stage-1 domain data is empty".into()));
    }
    let domain_id = domain_data[0].domain_id;
    if domain_data.iter().any(|r| r.domain_id != domain_id) {
        return Err(Error::validation(
            "domain_data",
            "stage 1 is strictly per-domain; input mixes domains",
        ));
    }
    let n_classes = agg.n_classes();
    if let Some(bad) = domain_data.iter().find(|r| r.class_id >= n_classes) {
        return Err(Error::validation(
            "domain_data",
            format!("class_id {} out of range", bad.class_id),
        ));
    }

    let d_e = agg.dim();
    let mut image_embs = Array2::zeros((domain_data.len(), d_e));
    let mut labels = Vec::with_capacity(domain_data.len());
    for (i, r) in domain_data.iter().enumerate() {
        image_embs.row_mut(i).assign(&embedder.embed(&r.path)?);
        labels.push(r.class_id);
    }

    let token_seed = derive_seed(config.seed, &["stage1".into(), domain_id.into()]);
    let mut tokens = init_domain_tokens::<F>(
        domain_id,
        config.k,
        teacher.arch.token_dim,
        config.init_std,
        token_seed,
    )?;
    let initial_full_loss = stage1_loss(teacher, &tokens, agg, &image_embs, &labels, config.temperature)?
        .to_f64()
        .unwrap();

    let sgd = Sgd::new(real::<F>(config.learning_rate));
    let mut rng = rng_from(config.seed, &["stage1-batches".into(), domain_id.into()]);
    let n = domain_data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle
    let mut trace = Vec::with_capacity(config.steps);

    for _step in 0..config.steps {
        let take = config.batch_size.min(n);
        let mut batch_idx = Vec::with_capacity(take);
        while batch_idx.len() < take {
            if cursor >= n {
                crate::teacher::shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let batch_embs = image_embs.select(Axis(0), &batch_idx);
        let batch_labels: Vec<usize> = batch_idx.iter().map(|&i| labels[i]).collect();

        let (loss, grad) = stage1_loss_and_grad(
            teacher,
            &tokens,
            agg,
            &batch_embs,
            &batch_labels,
            config.temperature,
        )?;
        trace.push(loss.to_f64().unwrap());
        tokens.tokens.zip_mut_with(&grad, |t, &g| {
            *t = *t - sgd.lr * g;
        });
    }

    let final_full_loss = stage1_loss(teacher, &tokens, agg, &image_embs, &labels, config.temperature)?
        .to_f64()
        .unwrap();
    let embeddings = domain_class_embeddings(teacher, &tokens, agg)?;
    Ok(Stage1Output {
        tokens,
        embeddings,
        trace,
        initial_full_loss,
        final_full_loss,
    })
}
