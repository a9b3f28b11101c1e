//! End-to-end orchestration of the leave-one-domain-out experiment.
//!
//! The flow per run: tune prompt tokens separately per training domain
//! (stage 1), aggregate the per-domain class embeddings over each rotation's
//! train domains only (never the test domain), distill one student per
//! method and rotation (stage 2), and evaluate every student on its held-out
//! test domain. Image access goes through an [`ImageSource`] handle and each
//! phase announces itself to a [`PipelineObserver`], so a recording test
//! double can audit that no test-domain bytes are read while anything is
//! being trained.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{compute_metrics, Metrics, RotationResult};
use crate::data::{
    generate_dataset, make_rotation_plan, AuditEvent, AuditLog, DatasetRecord, DatasetSpec,
    DomainDataset, FsImageSource, Image, ImageSource, RotationPlan,
};
use crate::distill::{
    predict, predict_logits, train_student, zero_shot_predict, DistillConfig, EmbeddingSource,
    Mode,
};
use crate::error::{Error, Result};
use crate::prompts::{
    compute_aggregated_embeddings, default_bank, loss_ds_from_embeddings, loss_g,
    train_domain_prompts, ImageEmbedder, PromptTemplateBank, Stage1Config, Stage1Output,
};
use crate::rng::derive_seed;
use crate::store::{aggregate_class_embeddings, EmbeddingStore};
use crate::teacher::{
    default_caption, PretrainConfig, TeacherArch, TeacherModel, Tokenizer, CAPTION_TEMPLATES,
    NEUTRAL_CAPTIONS,
};

/// Phase announcements for access auditing.
pub trait PipelineObserver: Sync {
    fn on_phase(&self, _phase: &str) {}
}

pub struct NoopObserver;
impl PipelineObserver for NoopObserver {}

impl PipelineObserver for AuditLog {
    fn on_phase(&self, phase: &str) {
        self.push(AuditEvent::Phase(phase.to_string()));
    }
}

/// A named entry in the method roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub kind: MethodKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodKind {
    /// Cosine argmax with the teacher over aggregated template embeddings.
    ZeroShot,
    /// A stage-2 student.
    Distill(DistillConfig),
}

/// The benchmark roster, one row per baseline: zero-shot, logit distillation,
/// embedding alignment from aggregated templates, the same plus
/// domain-invariant tuned embeddings, alignment from a single generic prompt,
/// and that plus the tuned embeddings.
pub fn default_method_roster(stage2: &DistillConfig) -> Vec<MethodSpec> {
    let with = |mode: Mode, source: Option<EmbeddingSource>| DistillConfig {
        mode,
        embedding_source: source,
        ..stage2.clone()
    };
    vec![
        MethodSpec {
            name: "zero_shot".into(),
            kind: MethodKind::ZeroShot,
        },
        MethodSpec {
            name: "kd".into(),
            kind: MethodKind::Distill(with(Mode::VanillaKd, Some(EmbeddingSource::AggTemplate))),
        },
        MethodSpec {
            name: "rise".into(),
            kind: MethodKind::Distill(with(Mode::Dual, Some(EmbeddingSource::AggTemplate))),
        },
        MethodSpec {
            name: "rise_dipt".into(),
            kind: MethodKind::Distill(with(Mode::Dual, Some(EmbeddingSource::DiptInvariant))),
        },
        MethodSpec {
            name: "vl2v".into(),
            kind: MethodKind::Distill(with(Mode::Dual, Some(EmbeddingSource::GenericPrompt))),
        },
        MethodSpec {
            name: "vl2v_dipt".into(),
            kind: MethodKind::Distill(with(Mode::Dual, Some(EmbeddingSource::DiptInvariant))),
        },
    ]
}

/// Lazily-filled teacher image-embedding cache shared across stages.
pub struct EmbedCache<'a> {
    teacher: &'a TeacherModel<f32>,
    source: &'a dyn ImageSource,
    map: Mutex<HashMap<PathBuf, Array1<f32>>>,
}

impl<'a> EmbedCache<'a> {
    pub fn new(teacher: &'a TeacherModel<f32>, source: &'a dyn ImageSource) -> Self {
        EmbedCache {
            teacher,
            source,
            map: Mutex::new(HashMap::new()),
        }
    }

    fn rows_for(&self, records: &[&DatasetRecord], d_e: usize) -> Result<Array2<f32>> {
        let mut rows = Array2::zeros((records.len(), d_e));
        for (i, r) in records.iter().enumerate() {
            rows.row_mut(i).assign(&self.embed(&r.path)?);
        }
        Ok(rows)
    }
}

impl ImageEmbedder<f32> for EmbedCache<'_> {
    fn embed(&self, path: &Path) -> Result<Array1<f32>> {
        if let Some(e) = self.map.lock().unwrap().get(path) {
            return Ok(e.clone());
        }
        let img = self.source.load(path)?;
        let emb = self.teacher.encode_image(&img)?;
        self.map
            .lock()
            .unwrap()
            .insert(path.to_path_buf(), emb.clone());
        Ok(emb)
    }
}

/// Everything a rotation run needs besides the roster.
pub struct RotationInputs<'a> {
    pub dataset: &'a DomainDataset,
    pub plan: &'a RotationPlan,
    pub teacher: &'a TeacherModel<f32>,
    pub bank: &'a PromptTemplateBank,
    pub stage1: &'a Stage1Config,
    pub source: &'a dyn ImageSource,
}

/// Results of a full rotation run.
#[derive(Debug)]
pub struct RotationRunOutput {
    pub results: Vec<RotationResult>,
    /// Per trained domain: the stage-1 loss trace.
    pub stage1_traces: Vec<(usize, Vec<f64>)>,
    /// Per trained domain: full-domain stage-1 loss at the initial and the
    /// trained tokens.
    pub stage1_losses: Vec<(usize, f64, f64)>,
}

fn config_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hasher
        .finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn load_images(source: &dyn ImageSource, records: &[&DatasetRecord]) -> Result<Vec<std::sync::Arc<Image>>> {
    records.iter().map(|r| source.load(&r.path)).collect()
}

/// Run the full leave-one-domain-out experiment over a method roster.
///
/// Stage-1 tokens are trained once per non-validation domain (each on that
/// domain's data alone); each rotation then aggregates only its train
/// domains' embeddings. With `parallel` set, the per-(rotation, method)
/// stage-2 work fans out across threads; results are merged by index so the
/// output is identical either way. Observers are only meaningful in
/// sequential mode, where phases do not interleave.
pub fn run_rotation(
    inputs: &RotationInputs<'_>,
    methods: &[MethodSpec],
    observer: &dyn PipelineObserver,
    parallel: bool,
) -> Result<RotationRunOutput> {
    let dataset = inputs.dataset;
    let plan = inputs.plan;
    let teacher = inputs.teacher;
    let n_classes = dataset.n_classes();
    if methods.is_empty() {
        return Err(Error::Empty("method roster is empty".into()));
    }

    // Text-only artifacts; no image access.
    let agg = compute_aggregated_embeddings::<f32>(teacher, inputs.bank)?;
    let agg_store = EmbeddingStore::from_aggregated(&agg, config_hash(&"agg_template"));
    let generic_bank = inputs.bank.first_template_only();
    let generic_agg = compute_aggregated_embeddings::<f32>(teacher, &generic_bank)?;
    let generic_store = EmbeddingStore::from_aggregated(&generic_agg, config_hash(&"generic_prompt"));

    let cache = EmbedCache::new(teacher, inputs.source);

    // Stage 1, strictly per domain.
    let mut train_domain_ids: Vec<usize> = dataset
        .domain_ids
        .iter()
        .copied()
        .filter(|&d| d != plan.validation_domain)
        .collect();
    train_domain_ids.sort_unstable();
    let mut stage1_by_domain: HashMap<usize, Stage1Output<f32>> = HashMap::new();
    let mut stage1_traces = Vec::new();
    let mut stage1_losses = Vec::new();
    for &d in &train_domain_ids {
        observer.on_phase(&format!("stage1:domain={d}"));
        let records = dataset.filter_domains(&[d]);
        let out = train_domain_prompts(&records, teacher, &agg, inputs.stage1, &cache)?;
        stage1_traces.push((d, out.trace.clone()));
        stage1_losses.push((d, out.initial_full_loss, out.final_full_loss));
        stage1_by_domain.insert(d, out);
    }

    // Per-rotation invariant stores over train domains only.
    let stage1_hash = config_hash(inputs.stage1);
    let mut invariant_stores = Vec::with_capacity(plan.rotations.len());
    for rotation in &plan.rotations {
        observer.on_phase(&format!("aggregate:test={}", rotation.test_domain));
        let embs: Vec<_> = rotation
            .train_domains
            .iter()
            .map(|d| stage1_by_domain[d].embeddings.clone())
            .collect();
        invariant_stores.push(aggregate_class_embeddings(&embs, stage1_hash.clone())?);
    }

    // Stage 2 + evaluation per (rotation, method).
    let tasks: Vec<(usize, usize)> = (0..plan.rotations.len())
        .flat_map(|ri| (0..methods.len()).map(move |mi| (ri, mi)))
        .collect();

    let run_task = |&(ri, mi): &(usize, usize)| -> Result<((usize, usize), (usize, Metrics))> {
        let rotation = &plan.rotations[ri];
        let method = &methods[mi];
        let test_records = dataset.filter_domains(&[rotation.test_domain]);
        let test_labels: Vec<usize> = test_records.iter().map(|r| r.class_id).collect();

        let preds = match &method.kind {
            MethodKind::ZeroShot => {
                observer.on_phase(&format!(
                    "evaluate:test={} method={}",
                    rotation.test_domain, method.name
                ));
                let images = load_images(inputs.source, &test_records)?;
                let refs: Vec<&Image> = images.iter().map(|a| a.as_ref()).collect();
                zero_shot_predict(teacher, &agg_store, &refs)?
            }
            MethodKind::Distill(cfg) => {
                observer.on_phase(&format!(
                    "distill:test={} method={}",
                    rotation.test_domain, method.name
                ));
                let train_records = dataset.filter_domains(&rotation.train_domains);
                let store = match (cfg.mode, cfg.embedding_source) {
                    (Mode::VanillaKd, _) => &agg_store,
                    (_, Some(EmbeddingSource::GenericPrompt)) => &generic_store,
                    (_, Some(EmbeddingSource::AggTemplate)) => &agg_store,
                    (_, Some(EmbeddingSource::DiptInvariant)) => &invariant_stores[ri],
                    (_, None) => &agg_store,
                };
                let teacher_rows = cache.rows_for(&train_records, teacher.arch.embed_dim)?;
                let mut cfg = cfg.clone();
                // The per-rotation seed is shared across methods: matched
                // baselines start from identical students and batch orders,
                // so method differences come from their distillation targets
                // rather than initialization luck.
                cfg.seed = derive_seed(
                    cfg.seed,
                    &["stage2".into(), rotation.test_domain.into()],
                );
                let (student, _trace) = train_student(
                    &train_records,
                    teacher,
                    Some(store),
                    &cfg,
                    inputs.source,
                    Some(&teacher_rows),
                )?;
                observer.on_phase(&format!(
                    "evaluate:test={} method={}",
                    rotation.test_domain, method.name
                ));
                let images = load_images(inputs.source, &test_records)?;
                let refs: Vec<&Image> = images.iter().map(|a| a.as_ref()).collect();
                if matches!(cfg.mode, Mode::VanillaKd) {
                    predict_logits(&student, &refs)?
                } else {
                    predict(&student, store, &refs)?
                }
            }
        };
        let metrics = compute_metrics(&preds, &test_labels, n_classes)?;
        Ok(((ri, mi), (rotation.test_domain, metrics)))
    };

    let outcomes: Vec<((usize, usize), (usize, Metrics))> = if parallel {
        tasks
            .par_iter()
            .map(run_task)
            .collect::<Result<Vec<_>>>()?
    } else {
        tasks.iter().map(run_task).collect::<Result<Vec<_>>>()?
    };

    let mut per_method: Vec<Vec<Option<(usize, Metrics)>>> =
        vec![vec![None; plan.rotations.len()]; methods.len()];
    for ((ri, mi), entry) in outcomes {
        per_method[mi][ri] = Some(entry);
    }
    let results = methods
        .iter()
        .zip(per_method)
        .map(|(m, slots)| {
            RotationResult::aggregate(
                m.name.clone(),
                slots.into_iter().map(|s| s.expect("all tasks ran")).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RotationRunOutput {
        results,
        stage1_traces,
        stage1_losses,
    })
}

/// One sweep evaluation: a (domain, k, learning-rate) cell scored on the
/// reserved validation domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub domain: usize,
    pub k: usize,
    pub learning_rate: f64,
    pub validation_loss: f64,
    pub validation_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSelection {
    pub domain: usize,
    pub k: usize,
    pub learning_rate: f64,
}

/// Grid-search k and learning rate per domain; the validation domain's data
/// scores each cell (it never contributes gradient updates). Ties break
/// toward smaller k, then smaller learning rate.
pub fn sweep_stage1(
    dataset: &DomainDataset,
    validation_domain: usize,
    teacher: &TeacherModel<f32>,
    bank: &PromptTemplateBank,
    base: &Stage1Config,
    ks: &[usize],
    learning_rates: &[f64],
    source: &dyn ImageSource,
) -> Result<(Vec<SweepRow>, Vec<SweepSelection>)> {
    if ks.is_empty() || learning_rates.is_empty() {
        return Err(Error::validation("sweep", "k and learning-rate lists must be nonempty"));
    }
    if !dataset.domain_ids.contains(&validation_domain) {
        return Err(Error::validation(
            "validation_domain",
            format!("domain {validation_domain} not present"),
        ));
    }
    let agg = compute_aggregated_embeddings::<f32>(teacher, bank)?;
    let cache = EmbedCache::new(teacher, source);

    let val_records = dataset.filter_domains(&[validation_domain]);
    let val_embs = cache.rows_for(&val_records, teacher.arch.embed_dim)?;
    let val_labels: Vec<usize> = val_records.iter().map(|r| r.class_id).collect();

    let mut rows = Vec::new();
    let mut selections = Vec::new();
    let mut domains: Vec<usize> = dataset
        .domain_ids
        .iter()
        .copied()
        .filter(|&d| d != validation_domain)
        .collect();
    domains.sort_unstable();

    for &d in &domains {
        let records = dataset.filter_domains(&[d]);
        let mut best: Option<(f64, usize, f64)> = None;
        for &k in ks {
            for &lr in learning_rates {
                let cfg = Stage1Config {
                    k,
                    learning_rate: lr,
                    ..base.clone()
                };
                let out = train_domain_prompts(&records, teacher, &agg, &cfg, &cache)?;
                let lds = loss_ds_from_embeddings(
                    &val_embs,
                    &val_labels,
                    &out.embeddings.matrix,
                    cfg.temperature,
                )?;
                let lg = loss_g(&out.embeddings.matrix, &agg.matrix)?;
                let val_loss = (lds + lg) as f64;
                let preds: Vec<usize> = val_embs
                    .rows()
                    .into_iter()
                    .map(|img| {
                        let mut best_c = 0;
                        let mut best_s = f32::NEG_INFINITY;
                        for (c, row) in out.embeddings.matrix.rows().into_iter().enumerate() {
                            let s = img.dot(&row);
                            if s > best_s {
                                best_s = s;
                                best_c = c;
                            }
                        }
                        best_c
                    })
                    .collect();
                let metrics = compute_metrics(&preds, &val_labels, dataset.n_classes())?;
                rows.push(SweepRow {
                    domain: d,
                    k,
                    learning_rate: lr,
                    validation_loss: val_loss,
                    validation_macro_f1: metrics.macro_f1,
                });
                let better = match &best {
                    None => true,
                    Some((bl, bk, blr)) => {
                        val_loss < *bl
                            || (val_loss == *bl && (k < *bk || (k == *bk && lr < *blr)))
                    }
                };
                if better {
                    best = Some((val_loss, k, lr));
                }
            }
        }
        let (_, k, lr) = best.expect("grid is nonempty");
        selections.push(SweepSelection {
            domain: d,
            k,
            learning_rate: lr,
        });
    }
    Ok((rows, selections))
}

/// Full experiment parameters. Per-stage seeds are derived from one global
/// seed by [`ExperimentParams::with_global_seed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentParams {
    pub spec: DatasetSpec,
    pub validation_domain: usize,
    pub pretrain: PretrainConfig,
    pub stage1: Stage1Config,
    pub methods: Vec<MethodSpec>,
    pub parallel: bool,
}

impl ExperimentParams {
    /// Derive every stage seed from `seed`: dataset, teacher pretraining,
    /// stage 1, and stage 2. All stage-2 methods share one base seed (the
    /// rotation runner further derives per rotation), so method comparisons
    /// are paired.
    pub fn with_global_seed(mut self, seed: u64) -> Self {
        self.spec.seed = derive_seed(seed, &["dataset".into()]);
        self.pretrain.seed = derive_seed(seed, &["teacher-pretrain".into()]);
        self.stage1.seed = derive_seed(seed, &["stage1".into()]);
        for m in &mut self.methods {
            if let MethodKind::Distill(cfg) = &mut m.kind {
                cfg.seed = derive_seed(seed, &["stage2".into()]);
            }
        }
        self
    }
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub dataset: DomainDataset,
    pub pretrain_trace: Vec<f64>,
    pub teacher_hash_after_pretrain: String,
    pub teacher_hash_after_run: String,
    pub results: Vec<RotationResult>,
    pub stage1_traces: Vec<(usize, Vec<f64>)>,
    pub stage1_losses: Vec<(usize, f64, f64)>,
}

/// Build the tokenizer corpus: bank templates, caption templates, class names.
pub fn build_tokenizer(class_names: &[String], max_length: usize) -> Tokenizer {
    let bank = default_bank(class_names).expect("class names are nonempty");
    let mut corpus: Vec<String> = Vec::new();
    for (i, _) in class_names.iter().enumerate() {
        corpus.extend(bank.templates_for(i).iter().cloned());
    }
    for name in class_names {
        for t in CAPTION_TEMPLATES {
            corpus.push(t.replace("{}", name));
        }
        corpus.push(name.clone());
    }
    corpus.extend(NEUTRAL_CAPTIONS.iter().map(|s| s.to_string()));
    Tokenizer::from_corpus(corpus.iter().map(|s| s.as_str()), max_length)
}

/// Generate data, pretrain the teacher, and run the rotation experiment.
/// `data_dir` receives the generated dataset.
pub fn run_experiment(
    params: &ExperimentParams,
    data_dir: &Path,
    observer: &dyn PipelineObserver,
) -> Result<ExperimentOutput> {
    let dataset = generate_dataset(&params.spec, data_dir)?;
    let plan = make_rotation_plan(&dataset, params.validation_domain)?;
    let source = FsImageSource::new();

    let tokenizer = build_tokenizer(&dataset.class_names, DEFAULT_TEACHER_MAX_LENGTH);
    let mut teacher = TeacherModel::<f32>::new(
        tokenizer,
        TeacherArch::small(params.spec.image_size),
        params.pretrain.seed,
    )?;
    let probe_bank = default_bank(&dataset.class_names)?;
    let probe_prompts: Vec<Vec<String>> = (0..dataset.class_names.len())
        .map(|i| probe_bank.templates_for(i).to_vec())
        .collect();
    let pretrain_trace = teacher.pretrain_with_probe(
        &dataset,
        &source,
        &default_caption,
        &params.pretrain,
        Some(&probe_prompts),
    )?;
    let teacher_hash_after_pretrain = teacher.param_hash();

    let bank = default_bank(&dataset.class_names)?;
    let inputs = RotationInputs {
        dataset: &dataset,
        plan: &plan,
        teacher: &teacher,
        bank: &bank,
        stage1: &params.stage1,
        source: &source,
    };
    let run = run_rotation(&inputs, &params.methods, observer, params.parallel)?;
    let teacher_hash_after_run = teacher.param_hash();

    Ok(ExperimentOutput {
        dataset,
        pretrain_trace,
        teacher_hash_after_pretrain,
        teacher_hash_after_run,
        results: run.results,
        stage1_traces: run.stage1_traces,
        stage1_losses: run.stage1_losses,
    })
}

pub const DEFAULT_TEACHER_MAX_LENGTH: usize = crate::teacher::DEFAULT_MAX_LENGTH;
