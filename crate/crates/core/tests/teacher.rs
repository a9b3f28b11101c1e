//! Teacher encoder contracts: unit norms, determinism, the
//! discrete/continuous input equivalence, checkpoint round-trips, and
//! pretraining behavior on a small dataset.

use std::sync::Arc;

use dipt_core::checkpoint::{load_teacher, save_teacher, Checkpoint};
use dipt_core::data::{generate_dataset, DatasetSpec, FsImageSource, ImageSource};
use dipt_core::eval::build_tokenizer;
use dipt_core::prompts::{compute_aggregated_embeddings, default_bank};
use dipt_core::teacher::{
    default_caption, probe_alignment, PretrainConfig, TeacherArch, TeacherModel, TextInput,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn class_names() -> Vec<String> {
    vec!["normal lymph node".into(), "tumor epithelium".into()]
}

fn fresh_teacher(seed: u64) -> TeacherModel<f32> {
    let tokenizer = build_tokenizer(&class_names(), 16);
    TeacherModel::<f32>::new(tokenizer, TeacherArch::small(32), seed).unwrap()
}

#[test]
fn text_embeddings_are_unit_norm_and_deterministic() {
    let teacher = fresh_teacher(3);
    for text in [
        "a patch of normal lymph node",
        "an image of tumor epithelium tissue",
        "",
        "zzz unknown words here",
    ] {
        let seq = teacher.tokenizer.tokenize(text);
        let a = teacher.encode_text(TextInput::Tokens(&seq)).unwrap();
        let b = teacher.encode_text(TextInput::Tokens(&seq)).unwrap();
        assert_eq!(a, b);
        let norm = a.dot(&a).sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm} for {text:?}");
    }
}

#[test]
fn image_embeddings_are_unit_norm_and_deterministic() {
    let teacher = fresh_teacher(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = ndarray::Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(0.0..1.0f32));
    let a = teacher.encode_image(&img).unwrap();
    let b = teacher.encode_image(&img).unwrap();
    assert_eq!(a, b);
    assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-6);
    // Wrong shape is a shape error.
    let small = ndarray::Array3::zeros((3, 16, 16));
    assert!(teacher.encode_image(&small).is_err());
}

#[test]
fn discrete_and_continuous_paths_agree() {
    let teacher = fresh_teacher(6);
    let words = teacher.tokenizer.words().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let len = rng.gen_range(1..=8);
        let text: Vec<&str> = (0..len)
            .map(|_| words[rng.gen_range(0..words.len())].as_str())
            .collect();
        let seq = teacher.tokenizer.tokenize(&text.join(" "));
        let discrete = teacher.encode_text(TextInput::Tokens(&seq)).unwrap();

        // Continuous oracle: look the content ids up in the embedding table;
        // the encoder re-adds the bos/eos wrapping.
        let ids = seq.content_ids();
        let rows = Array2::from_shape_fn((ids.len(), teacher.arch.token_dim), |(i, j)| {
            teacher.text.token_embed[(ids[i], j)]
        });
        let continuous = teacher.encode_text(TextInput::Continuous(&rows)).unwrap();

        for (d, c) in discrete.iter().zip(continuous.iter()) {
            worst = worst.max((d - c).abs());
        }
    }
    assert!(worst <= 1e-6, "max elementwise deviation {worst}");
}

#[test]
fn continuous_input_is_validated() {
    let teacher = fresh_teacher(8);
    let wrong_dim = Array2::<f32>::zeros((2, teacher.arch.token_dim + 1));
    assert!(teacher
        .encode_text(TextInput::Continuous(&wrong_dim))
        .is_err());
    let too_long = Array2::<f32>::zeros((teacher.arch.max_length, teacher.arch.token_dim));
    assert!(teacher.encode_text(TextInput::Continuous(&too_long)).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_encodings_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.ckpt");
    let teacher = fresh_teacher(9);
    save_teacher(&teacher, &path, serde_json::Map::new()).unwrap();
    let (loaded, ckpt) = load_teacher(&path).unwrap();

    assert_eq!(loaded.param_hash(), teacher.param_hash());
    assert_eq!(ckpt.param_hash(), teacher.param_hash());

    let seq = teacher.tokenizer.tokenize("a patch of tumor epithelium");
    let before = teacher.encode_text(TextInput::Tokens(&seq)).unwrap();
    let after = loaded.encode_text(TextInput::Tokens(&seq)).unwrap();
    for (b, a) in before.iter().zip(after.iter()) {
        assert!((b - a).abs() < 1e-7);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img = ndarray::Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(0.0..1.0f32));
    assert_eq!(
        teacher.encode_image(&img).unwrap(),
        loaded.encode_image(&img).unwrap()
    );
}

#[test]
fn tampered_vocab_hash_is_a_compatibility_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.ckpt");
    let teacher = fresh_teacher(11);
    save_teacher(&teacher, &path, serde_json::Map::new()).unwrap();
    let mut ckpt = Checkpoint::load(&path).unwrap();
    ckpt.header.vocab_hash = "0000".into();
    let tampered = dir.path().join("bad.ckpt");
    ckpt.save(&tampered).unwrap();
    assert!(matches!(
        load_teacher(&tampered),
        Err(dipt_core::Error::Compatibility(_))
    ));
}

fn small_dataset(dir: &std::path::Path) -> dipt_core::data::DomainDataset {
    let spec = DatasetSpec {
        num_domains: 2,
        num_classes: 2,
        samples_per_class_per_domain: 8,
        image_size: 32,
        shift_strength: 0.4,
        seed: 21,
    };
    generate_dataset(&spec, dir).unwrap()
}

#[test]
fn pretraining_is_seeded_and_zero_epochs_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = small_dataset(dir.path());
    let source = FsImageSource::new();

    let mut t0 = fresh_teacher(12);
    let init_hash = t0.param_hash();
    let cfg0 = PretrainConfig {
        epochs: 0,
        ..PretrainConfig::default()
    };
    t0.pretrain(&dataset, &source, &default_caption, &cfg0).unwrap();
    assert_eq!(t0.param_hash(), init_hash);

    let cfg = PretrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 5,
        target_probe_accuracy: None,
        polish_epochs: 0,
        label_noise: 0.15,
    };
    let mut t1 = fresh_teacher(12);
    let mut t2 = fresh_teacher(12);
    t1.pretrain(&dataset, &source, &default_caption, &cfg).unwrap();
    t2.pretrain(&dataset, &source, &default_caption, &cfg).unwrap();
    assert_eq!(t1.param_hash(), t2.param_hash());
    assert_ne!(t1.param_hash(), init_hash);
}

#[test]
fn pretraining_improves_image_caption_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = small_dataset(dir.path());
    let source = FsImageSource::new();
    let mut teacher = fresh_teacher(13);
    let before = probe_alignment(&teacher, &dataset, &source, 16).unwrap();
    let cfg = PretrainConfig {
        epochs: 6,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 6,
        target_probe_accuracy: None,
        polish_epochs: 0,
        label_noise: 0.15,
    };
    let trace = teacher
        .pretrain(&dataset, &source, &default_caption, &cfg)
        .unwrap();
    let after = probe_alignment(&teacher, &dataset, &source, 16).unwrap();
    assert!(
        after > before,
        "alignment did not improve: {before} -> {after}"
    );
    assert!(trace.last().unwrap() < trace.first().unwrap());
    assert!(teacher.pretrain(
        &dipt_core::data::DomainDataset {
            records: vec![],
            class_names: class_names(),
            domain_ids: vec![],
        },
        &source,
        &default_caption,
        &cfg
    ).is_err());
}

#[test]
fn pretrained_teacher_separates_classes_in_image_space() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = small_dataset(dir.path());
    let source = FsImageSource::new();
    let mut teacher = fresh_teacher(14);
    let cfg = PretrainConfig {
        epochs: 10,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 7,
        target_probe_accuracy: None,
        polish_epochs: 0,
        label_noise: 0.0,
    };
    teacher
        .pretrain(&dataset, &source, &default_caption, &cfg)
        .unwrap();

    // Mean cosine over same-class pairs should exceed different-class pairs
    // (50 pairs each, fixed enumeration).
    let images: Vec<Arc<_>> = dataset
        .records
        .iter()
        .map(|r| source.load(&r.path).unwrap())
        .collect();
    let refs: Vec<&_> = images.iter().map(|a| a.as_ref()).collect();
    let embs = teacher.encode_images(&refs).unwrap();
    let mut same = Vec::new();
    let mut diff = Vec::new();
    'outer: for i in 0..dataset.records.len() {
        for j in (i + 1)..dataset.records.len() {
            let cos = embs.row(i).dot(&embs.row(j));
            if dataset.records[i].class_id == dataset.records[j].class_id {
                if same.len() < 50 {
                    same.push(cos);
                }
            } else if diff.len() < 50 {
                diff.push(cos);
            }
            if same.len() >= 50 && diff.len() >= 50 {
                break 'outer;
            }
        }
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    assert!(
        mean(&same) > mean(&diff),
        "same-class {} vs different-class {}",
        mean(&same),
        mean(&diff)
    );

    // And the zero-shot cosine classifier over aggregated templates beats chance.
    let bank = default_bank(&dataset.class_names).unwrap();
    let agg = compute_aggregated_embeddings::<f32>(&teacher, &bank).unwrap();
    let store = dipt_core::store::EmbeddingStore::from_aggregated(&agg, "test");
    let preds = dipt_core::distill::zero_shot_predict(&teacher, &store, &refs).unwrap();
    let labels: Vec<usize> = dataset.records.iter().map(|r| r.class_id).collect();
    let acc = preds
        .iter()
        .zip(&labels)
        .filter(|(p, y)| p == y)
        .count() as f64
        / labels.len() as f64;
    assert!(acc > 0.5, "zero-shot accuracy {acc} not above chance");
}
