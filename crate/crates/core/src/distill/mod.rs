//! Stage 2: distill the frozen teacher into a trainable student.
//!
//! Modes map onto the baseline roster: `vanilla_kd` is temperature-softened
//! logit distillation (plus label cross-entropy) against the teacher's
//! zero-shot cosine classifier; `image_only` aligns student and teacher image
//! embeddings; `text_aligned` pulls student embeddings toward the true
//! class's text embedding; `dual` combines both, with the class-embedding
//! source selecting between the single generic prompt, the aggregated
//! templates, and the domain-invariant tuned embeddings.

mod student;

pub use student::{load_student, save_student, StudentArch, StudentCache, StudentModel};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetRecord, Image, ImageSource};
use crate::error::{Error, Result};
use crate::nn::{cosine, log_softmax_rows, real, softmax_rows, Adam, ParamGroup, Real};
use crate::rng::rng_from;
use crate::store::EmbeddingStore;
use crate::teacher::{images_to_batch, TeacherModel};

/// Zero-shot cosine-classifier temperature used to form teacher logits.
pub const ZERO_SHOT_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    VanillaKd,
    ImageOnly,
    TextAligned,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    GenericPrompt,
    AggTemplate,
    DiptInvariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub mode: Mode,
    pub embedding_source: Option<EmbeddingSource>,
    pub lambda_i: f64,
    pub lambda_a: f64,
    pub kd_temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub arch: StudentArch,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mode: Mode::Dual,
            embedding_source: Some(EmbeddingSource::DiptInvariant),
            lambda_i: 1.0,
            lambda_a: 1.0,
            kd_temperature: 4.0,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            arch: StudentArch::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_i < 0.0 || self.lambda_a < 0.0 {
            return Err(Error::validation("lambda", "weights must be nonnegative"));
        }
        match self.mode {
            Mode::Dual => {
                if self.lambda_i + self.lambda_a <= 0.0 {
                    return Err(Error::validation(
                        "lambda",
                        "dual mode requires lambda_i + lambda_a > 0",
                    ));
                }
                if self.embedding_source.is_none() && self.lambda_a > 0.0 {
                    return Err(Error::validation(
                        "embedding_source",
                        "dual mode with lambda_a > 0 needs an embedding source",
                    ));
                }
            }
            Mode::TextAligned => {
                if self.embedding_source.is_none() {
                    return Err(Error::validation(
                        "embedding_source",
                        "text-aligned mode needs an embedding source",
                    ));
                }
                if self.lambda_a <= 0.0 {
                    return Err(Error::validation("lambda_a", "must be positive"));
                }
            }
            Mode::ImageOnly => {
                if self.lambda_i <= 0.0 {
                    return Err(Error::validation("lambda_i", "must be positive"));
                }
            }
            Mode::VanillaKd => {
                if self.kd_temperature <= 0.0 {
                    return Err(Error::validation("kd_temperature", "must be positive"));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Batch mean of (1 - cos(student row, teacher row)); range [0, 2].
pub fn loss_image_align<F: Real>(student: &Array2<F>, teacher: &Array2<F>) -> Result<F> {
    if student.dim() != teacher.dim() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    if student.nrows() == 0 {
        return Err(Error::Empty("image-align batch is empty".into()));
    }
    let mut total = F::zero();
    for (s, t) in student.rows().into_iter().zip(teacher.rows()) {
        total += F::one() - cosine(&s.to_owned(), &t.to_owned())?;
    }
    Ok(total / real::<F>(student.nrows() as f64))
}

/// Batch mean of (1 - cos(student row, E_label)); range [0, 2].
pub fn loss_text_align<F: Real>(
    student: &Array2<F>,
    labels: &[usize],
    class_rows: &Array2<F>,
) -> Result<F> {
    if student.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} student rows but {} labels",
            student.nrows(),
            labels.len()
        )));
    }
    if student.nrows() == 0 {
        return Err(Error::Empty("text-align batch is empty".into()));
    }
    let mut total = F::zero();
    for (s, &y) in student.rows().into_iter().zip(labels.iter()) {
        if y >= class_rows.nrows() {
            return Err(Error::validation(
                "labels",
                format!("label {y} has no embedding row"),
            ));
        }
        total += F::one() - cosine(&s.to_owned(), &class_rows.row(y).to_owned())?;
    }
    Ok(total / real::<F>(student.nrows() as f64))
}

/// Hinton-style softened-logit loss: T² · KL(softmax(teacher/T) ‖ softmax(student/T)),
/// averaged over the batch. Zero iff the softened distributions match.
pub fn loss_vanilla_kd<F: Real>(
    student_logits: &Array2<F>,
    teacher_logits: &Array2<F>,
    temperature: f64,
) -> Result<F> {
    if student_logits.dim() != teacher_logits.dim() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student_logits.dim(),
            teacher_logits.dim()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::validation("kd_temperature", "must be positive"));
    }
    if student_logits.nrows() == 0 {
        return Err(Error::Empty("kd batch is empty".into()));
    }
    let t = real::<F>(temperature);
    let p_log = log_softmax_rows(&teacher_logits.mapv(|z| z / t));
    let q_log = log_softmax_rows(&student_logits.mapv(|z| z / t));
    let mut total = F::zero();
    for i in 0..p_log.nrows() {
        for j in 0..p_log.ncols() {
            let p = p_log[(i, j)].exp();
            total += p * (p_log[(i, j)] - q_log[(i, j)]);
        }
    }
    Ok(t * t * total / real::<F>(p_log.nrows() as f64))
}

/// The teacher's zero-shot logits: cos(h_I(x), store row i) / τ.
pub fn teacher_zero_shot_logits<F: Real>(
    teacher_image_embs: &Array2<F>,
    store_rows: &Array2<F>,
) -> Result<Array2<F>> {
    let tau = real::<F>(ZERO_SHOT_TAU);
    let mut logits = Array2::zeros((teacher_image_embs.nrows(), store_rows.nrows()));
    for (b, img) in teacher_image_embs.rows().into_iter().enumerate() {
        for (i, row) in store_rows.rows().into_iter().enumerate() {
            logits[(b, i)] = cosine(&img.to_owned(), &row.to_owned())? / tau;
        }
    }
    Ok(logits)
}

/// Dual-distillation loss λ_I·L_I + λ_A·L_A for one batch (the gradient-check
/// surface): teacher rows and class rows are fixed targets.
pub fn dual_loss<F: Real>(
    student: &StudentModel<F>,
    x: &ndarray::Array4<F>,
    teacher_rows: &Array2<F>,
    class_rows: &Array2<F>,
    labels: &[usize],
    lambda_i: f64,
    lambda_a: f64,
) -> Result<F> {
    let cache = student.forward(x, true)?;
    let li = if lambda_i > 0.0 {
        loss_image_align(cache.embeddings(), teacher_rows)?
    } else {
        F::zero()
    };
    let la = if lambda_a > 0.0 {
        loss_text_align(cache.embeddings(), labels, class_rows)?
    } else {
        F::zero()
    };
    Ok(real::<F>(lambda_i) * li + real::<F>(lambda_a) * la)
}

/// [`dual_loss`] plus analytic parameter gradients.
pub fn dual_loss_and_grad<F: Real>(
    student: &StudentModel<F>,
    x: &ndarray::Array4<F>,
    teacher_rows: &Array2<F>,
    class_rows: &Array2<F>,
    labels: &[usize],
    lambda_i: f64,
    lambda_a: f64,
) -> Result<(F, StudentModel<F>)> {
    let cache = student.forward(x, true)?;
    let b = cache.embeddings().nrows();
    let bf = real::<F>(b as f64);
    let mut loss = F::zero();
    let mut d_embs = Array2::zeros(cache.embeddings().raw_dim());

    if lambda_i > 0.0 {
        loss += real::<F>(lambda_i) * loss_image_align(cache.embeddings(), teacher_rows)?;
        for (i, t) in teacher_rows.rows().into_iter().enumerate() {
            let t = t.to_owned();
            let norm = t.dot(&t).sqrt();
            if !(norm > F::zero()) {
                return Err(Error::Numerical("teacher row has zero norm".into()));
            }
            let coef = real::<F>(lambda_i) / (bf * norm);
            d_embs
                .row_mut(i)
                .zip_mut_with(&t, |d, &tv| *d = *d - coef * tv);
        }
    }
    if lambda_a > 0.0 {
        loss += real::<F>(lambda_a) * loss_text_align(cache.embeddings(), labels, class_rows)?;
        for (i, &y) in labels.iter().enumerate() {
            let e = class_rows.row(y).to_owned();
            let norm = e.dot(&e).sqrt();
            if !(norm > F::zero()) {
                return Err(Error::Numerical("class row has zero norm".into()));
            }
            let coef = real::<F>(lambda_a) / (bf * norm);
            d_embs
                .row_mut(i)
                .zip_mut_with(&e, |d, &ev| *d = *d - coef * ev);
        }
    }

    let mut grads = student.zeros_like();
    student.backward(&cache, Some(&d_embs), None, &mut grads);
    Ok((loss, grads))
}

/// A trained student plus its per-epoch mean loss.
pub type TrainedStudent = (StudentModel<f32>, Vec<f64>);

/// Train a student on `records` (the rotation's train domains only). The
/// store's provenance must name the teacher being distilled from.
/// `teacher_embs`, when given, must hold the teacher image embedding of
/// `records[i]` in row i; otherwise they are computed here.
pub fn train_student(
    records: &[&DatasetRecord],
    teacher: &TeacherModel<f32>,
    store: Option<&EmbeddingStore>,
    config: &DistillConfig,
    source: &dyn ImageSource,
    teacher_embs: Option<&Array2<f32>>,
) -> Result<TrainedStudent> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("stage-2 training data is empty".into()));
    }
    if let Some(store) = store {
        let teacher_hash = teacher.param_hash();
        if store.provenance.teacher_hash != teacher_hash {
            return Err(Error::Provenance(format!(
                "store \"{}\" was built from teacher {} but training teacher is {teacher_hash}",
                store.name.as_string(),
                store.provenance.teacher_hash
            )));
        }
    }
    let needs_store = matches!(config.mode, Mode::VanillaKd | Mode::TextAligned)
        || (matches!(config.mode, Mode::Dual) && config.lambda_a > 0.0);
    if needs_store && store.is_none() {
        return Err(Error::validation(
            "store",
            "this mode requires a class-embedding store",
        ));
    }

    let n_classes = store.map(|s| s.class_names.len()).unwrap_or_else(|| {
        records.iter().map(|r| r.class_id + 1).max().unwrap_or(0)
    });
    let head_classes = matches!(config.mode, Mode::VanillaKd).then_some(n_classes);
    let mut student = StudentModel::<f32>::new(
        config.arch.clone(),
        teacher.arch.image_size,
        teacher.arch.embed_dim,
        head_classes,
        config.seed,
    )?;
    let mut trace = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok((student, trace));
    }

    // Teacher-side targets, computed once (frozen teacher).
    let needs_teacher_embs = matches!(config.mode, Mode::VanillaKd | Mode::ImageOnly)
        || (matches!(config.mode, Mode::Dual) && config.lambda_i > 0.0);
    let images: Vec<_> = records
        .iter()
        .map(|r| source.load(&r.path))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    let teacher_embs: Option<Array2<f32>> = if needs_teacher_embs {
        match teacher_embs {
            Some(rows) => {
                if rows.nrows() != records.len() {
                    return Err(Error::Shape(format!(
                        "{} precomputed teacher embeddings for {} records",
                        rows.nrows(),
                        records.len()
                    )));
                }
                Some(rows.clone())
            }
            None => {
                let mut rows = Array2::zeros((records.len(), teacher.arch.embed_dim));
                for (i, img) in images.iter().enumerate() {
                    rows.row_mut(i).assign(&teacher.encode_image(img)?);
                }
                Some(rows)
            }
        }
    } else {
        None
    };
    let teacher_logits: Option<Array2<f32>> = if matches!(config.mode, Mode::VanillaKd) {
        let store = store.expect("vanilla kd requires the aggregated store");
        Some(teacher_zero_shot_logits(
            teacher_embs.as_ref().unwrap(),
            &store.matrix,
        )?)
    } else {
        None
    };
    let class_rows: Option<Array2<f32>> = store.map(|s| s.matrix.clone());

    let mut adam = Adam::new(config.learning_rate as f32);
    let mut rng = rng_from(config.seed, &["stage2-batches".into()]);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let kd_t = config.kd_temperature as f32;

    for _epoch in 0..config.epochs {
        crate::teacher::shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let image_refs: Vec<&Image> = chunk.iter().map(|&i| images[i].as_ref()).collect();
            let x = images_to_batch::<f32>(&image_refs);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let cache = student.forward(&x, true)?;
            let b = chunk.len();
            let bf = b as f32;

            let mut loss = 0.0f32;
            let mut d_embs: Option<Array2<f32>> = None;
            let mut d_logits: Option<Array2<f32>> = None;

            match config.mode {
                Mode::VanillaKd => {
                    let z_s = cache.logits().expect("vanilla student has a head").clone();
                    let z_t_full = teacher_logits.as_ref().unwrap();
                    let mut z_t = Array2::zeros((b, n_classes));
                    for (row, &i) in chunk.iter().enumerate() {
                        z_t.row_mut(row).assign(&z_t_full.row(i));
                    }
                    let kd = loss_vanilla_kd(&z_s, &z_t, config.kd_temperature)?;
                    let p = softmax_rows(&z_s);
                    let mut ce = 0.0f32;
                    let lsm = log_softmax_rows(&z_s);
                    for (row, &y) in batch_labels.iter().enumerate() {
                        ce -= lsm[(row, y)];
                    }
                    ce /= bf;
                    loss = kd + ce;

                    let q = softmax_rows(&z_s.mapv(|z| z / kd_t));
                    let pt = softmax_rows(&z_t.mapv(|z| z / kd_t));
                    let mut dz = Array2::zeros((b, n_classes));
                    for row in 0..b {
                        for j in 0..n_classes {
                            // KD term: T (q - p) / B; CE term: (softmax - onehot) / B.
                            let onehot = if batch_labels[row] == j { 1.0 } else { 0.0 };
                            dz[(row, j)] = kd_t * (q[(row, j)] - pt[(row, j)]) / bf
                                + (p[(row, j)] - onehot) / bf;
                        }
                    }
                    d_logits = Some(dz);
                }
                _ => {
                    let lambda_i = if matches!(config.mode, Mode::TextAligned) {
                        0.0
                    } else {
                        config.lambda_i
                    };
                    let lambda_a = if matches!(config.mode, Mode::ImageOnly) {
                        0.0
                    } else {
                        config.lambda_a
                    };
                    let mut de = Array2::zeros((b, teacher.arch.embed_dim));
                    if lambda_i > 0.0 {
                        let t_full = teacher_embs.as_ref().unwrap();
                        let mut t_rows = Array2::zeros((b, teacher.arch.embed_dim));
                        for (row, &i) in chunk.iter().enumerate() {
                            t_rows.row_mut(row).assign(&t_full.row(i));
                        }
                        loss += lambda_i as f32 * loss_image_align(cache.embeddings(), &t_rows)?;
                        for row in 0..b {
                            let t = t_rows.row(row);
                            let coef = lambda_i as f32 / bf;
                            de.row_mut(row)
                                .zip_mut_with(&t, |d, &tv| *d -= coef * tv);
                        }
                    }
                    if lambda_a > 0.0 {
                        let rows = class_rows.as_ref().unwrap();
                        loss += lambda_a as f32
                            * loss_text_align(cache.embeddings(), &batch_labels, rows)?;
                        for (row, &y) in batch_labels.iter().enumerate() {
                            let e = rows.row(y).to_owned();
                            let norm = e.dot(&e).sqrt();
                            if norm <= 0.0 {
                                return Err(Error::Numerical(
                                    "class embedding row has zero norm".into(),
                                ));
                            }
                            let coef = lambda_a as f32 / (bf * norm);
                            de.row_mut(row).zip_mut_with(&e, |d, &ev| *d -= coef * ev);
                        }
                    }
                    d_embs = Some(de);
                }
            }

            let mut grads = student.zeros_like();
            student.backward(&cache, d_embs.as_ref(), d_logits.as_ref(), &mut grads);
            adam.step(&mut student, &grads);
            epoch_loss += loss as f64;
            batches += 1;
        }
        trace.push(epoch_loss / batches as f64);
    }

    // Calibrate the feature normalizer on the full training set so inference
    // is batch-independent and deterministic.
    let mut all_feats = Array2::zeros((records.len(), student.feat_bn.gamma.len()));
    let mut row = 0usize;
    for chunk in (0..records.len()).collect::<Vec<_>>().chunks(64) {
        let image_refs: Vec<&Image> = chunk.iter().map(|&i| images[i].as_ref()).collect();
        let x = images_to_batch::<f32>(&image_refs);
        let cache = student.forward(&x, true)?;
        for r in cache.feats().rows() {
            all_feats.row_mut(row).assign(&r);
            row += 1;
        }
    }
    let (mean, var) = crate::nn::BatchNorm1d::batch_stats(&all_feats);
    student.feat_bn.set_frozen_stats(mean, var);
    Ok((student, trace))
}

/// Cosine-classifier inference: argmax over cos(f(x), E_i), ties broken by
/// the lowest class id.
pub fn predict(
    student: &StudentModel<f32>,
    store: &EmbeddingStore,
    images: &[&Image],
) -> Result<Vec<usize>> {
    if store.dim != student.embed_dim {
        return Err(Error::Shape(format!(
            "store dim {} vs student projection dim {}",
            store.dim, student.embed_dim
        )));
    }
    let class_units = unit_rows(&store.matrix)?;
    let mut preds = Vec::with_capacity(images.len());
    for batch in images.chunks(64) {
        let x = images_to_batch::<f32>(batch);
        let cache = student.forward(&x, false)?;
        for emb in cache.embeddings().rows() {
            preds.push(argmax_cosine(&emb.to_owned(), &class_units));
        }
    }
    Ok(preds)
}

/// Linear-head inference for the logit-distillation baseline; ties broken by
/// the lowest class id.
pub fn predict_logits(student: &StudentModel<f32>, images: &[&Image]) -> Result<Vec<usize>> {
    if student.head.is_none() {
        return Err(Error::validation(
            "student",
            "logit prediction requires a linear head",
        ));
    }
    let mut preds = Vec::with_capacity(images.len());
    for batch in images.chunks(64) {
        let x = images_to_batch::<f32>(batch);
        let cache = student.forward(&x, false)?;
        for row in cache.logits().expect("head produces logits").rows() {
            let mut best = 0usize;
            let mut best_score = f32::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_score {
                    best_score = v;
                    best = i;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}

/// Zero-shot inference with the teacher image encoder over a store.
pub fn zero_shot_predict(
    teacher: &TeacherModel<f32>,
    store: &EmbeddingStore,
    images: &[&Image],
) -> Result<Vec<usize>> {
    if store.dim != teacher.arch.embed_dim {
        return Err(Error::Shape(format!(
            "store dim {} vs teacher embedding dim {}",
            store.dim, teacher.arch.embed_dim
        )));
    }
    let class_units = unit_rows(&store.matrix)?;
    let mut preds = Vec::with_capacity(images.len());
    for batch in images.chunks(64) {
        let embs = teacher.encode_images(batch)?;
        for emb in embs.rows() {
            preds.push(argmax_cosine(&emb.to_owned(), &class_units));
        }
    }
    Ok(preds)
}

fn unit_rows(matrix: &Array2<f32>) -> Result<Array2<f32>> {
    let mut out = matrix.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numerical("store row has zero norm".into()));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

fn argmax_cosine(emb: &Array1<f32>, class_units: &Array2<f32>) -> usize {
    let mut best = 0usize;
    let mut best_score = f32::NEG_INFINITY;
    for (i, row) in class_units.rows().into_iter().enumerate() {
        let score = emb.dot(&row);
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn image_align_closed_forms() {
        let s = array![[1.0f64, 0.0], [0.0, 1.0]];
        assert!(loss_image_align(&s, &s).unwrap().abs() < 1e-12);
        let orth = array![[0.0f64, 1.0], [1.0, 0.0]];
        assert!((loss_image_align(&s, &orth).unwrap() - 1.0).abs() < 1e-12);
        // Batch of two with cosines {1, 0.5} -> mean (0 + 0.5)/2 = 0.25.
        let half = array![[1.0f64, 0.0], [0.5, 3.0f64.sqrt() / 2.0]];
        let t = array![[1.0f64, 0.0], [1.0, 0.0]];
        assert!((loss_image_align(&half, &t).unwrap() - 0.25).abs() < 1e-12);
        // Zero-norm feature is a numerical error.
        let zero = array![[0.0f64, 0.0], [1.0, 0.0]];
        assert!(matches!(
            loss_image_align(&zero, &t),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn text_align_closed_forms() {
        let rows = array![[2.0f64, 0.0], [0.0, 1.0]];
        // Parallel to the true class row -> 0.
        let s = array![[0.5f64, 0.0], [0.0, 3.0]];
        assert!(loss_text_align(&s, &[0, 1], &rows).unwrap().abs() < 1e-12);
        // Anti-parallel -> 2.
        let anti = array![[-1.0f64, 0.0]];
        assert!((loss_text_align(&anti, &[0], &rows).unwrap() - 2.0).abs() < 1e-12);
        // Cosines {1, 0, -1} -> mean of {0, 1, 2} = 1.
        let mixed = array![[1.0f64, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        assert!(
            (loss_text_align(&mixed, &[0, 0, 0], &rows).unwrap() - 1.0).abs() < 1e-12
        );
        // Missing embedding row for a label.
        assert!(loss_text_align(&anti, &[7], &rows).is_err());
    }

    #[test]
    fn vanilla_kd_closed_forms() {
        let z = array![[0.3f64, -1.2, 4.0], [0.0, 0.0, 0.0]];
        for t in [0.5, 1.0, 4.0] {
            assert_eq!(loss_vanilla_kd(&z, &z, t).unwrap(), 0.0);
        }
        // Independent scalar hand computation for teacher (2,0), student (0,2), T=1:
        // p = softmax(2,0) = (0.8808, 0.1192); KL(p ‖ reversed p)
        //   = (p0 - p1) * ln(p0/p1) = 1.5231883119115295.
        let teacher = array![[2.0f64, 0.0]];
        let student = array![[0.0f64, 2.0]];
        let p0 = (2.0f64).exp() / (1.0 + (2.0f64).exp());
        let expected = (p0 - (1.0 - p0)) * (p0 / (1.0 - p0)).ln();
        let got = loss_vanilla_kd(&student, &teacher, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.5231883119115295).abs() < 1e-12);
        // T -> infinity: the softened distributions converge, so the raw KL
        // vanishes (the T^2 factor exactly compensates, approaching the
        // quadratic limit). Checked at T = 1e6.
        let t_big = 1e6;
        let scaled = loss_vanilla_kd(&student, &teacher, t_big).unwrap();
        let raw_kl = scaled / (t_big * t_big);
        assert!(raw_kl.abs() < 1e-6, "raw KL {raw_kl}");
        assert!((scaled - 2.0).abs() < 1e-3, "quadratic limit {scaled}");
        // Shape mismatch.
        let narrow = array![[1.0f64]];
        assert!(matches!(
            loss_vanilla_kd(&narrow, &teacher, 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dual_mode_requires_a_live_lambda() {
        let cfg = DistillConfig {
            mode: Mode::Dual,
            lambda_i: 0.0,
            lambda_a: 0.0,
            ..DistillConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Validation { .. })));
        let ok = DistillConfig {
            mode: Mode::Dual,
            lambda_i: 1.0,
            lambda_a: 0.0,
            ..DistillConfig::default()
        };
        assert!(ok.validate().is_ok());
        let text_needs_source = DistillConfig {
            mode: Mode::TextAligned,
            embedding_source: None,
            ..DistillConfig::default()
        };
        assert!(text_needs_source.validate().is_err());
    }

    #[test]
    fn prediction_is_scale_invariant_with_low_id_ties() {
        let emb = array![1.0f32, 0.0];
        let rows = array![[1.0f32, 0.0], [0.0, 1.0]];
        let scaled = rows.mapv(|v| v * 3.0);
        let u1 = unit_rows(&rows).unwrap();
        let u2 = unit_rows(&scaled).unwrap();
        assert_eq!(argmax_cosine(&emb, &u1), argmax_cosine(&emb, &u2));
        // Exact two-way tie: equal cosines pick the lower class id.
        let tie = array![[1.0f32, 0.0], [1.0, 0.0]];
        let ut = unit_rows(&tie).unwrap();
        assert_eq!(argmax_cosine(&emb, &ut), 0);
    }
}
