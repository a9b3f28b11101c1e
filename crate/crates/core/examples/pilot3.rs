// Temporary stage-2 debugging harness (deleted before release).

use dipt_core::data::{generate_dataset, DatasetSpec, FsImageSource, ImageSource};
use dipt_core::distill::{predict, train_student, DistillConfig, EmbeddingSource, Mode};
use dipt_core::eval::build_tokenizer;
use dipt_core::prompts::{compute_aggregated_embeddings, default_bank};
use dipt_core::store::EmbeddingStore;
use dipt_core::teacher::{default_caption, PretrainConfig, TeacherArch, TeacherModel};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let spec = DatasetSpec {
        num_domains: 5,
        num_classes: 2,
        samples_per_class_per_domain: 50,
        image_size: 64,
        shift_strength: 0.6,
        seed: 0,
    };
    let dir = std::env::temp_dir().join("dipt-pilot3");
    let _ = std::fs::remove_dir_all(&dir);
    let dataset = generate_dataset(&spec, &dir).unwrap();
    let source = FsImageSource::new();
    let tokenizer = build_tokenizer(&dataset.class_names, 16);
    let mut teacher = TeacherModel::<f32>::new(tokenizer, TeacherArch::small(64), 0).unwrap();
    teacher
        .pretrain(
            &dataset,
            &source,
            &default_caption,
            &PretrainConfig {
                epochs: std::env::var("PILOT_PRE").ok().and_then(|v| v.parse().ok()).unwrap_or(60),
                ..PretrainConfig::default()
            },
        )
        .unwrap();

    let bank = default_bank(&dataset.class_names).unwrap();
    let agg = compute_aggregated_embeddings::<f32>(&teacher, &bank).unwrap();
    let store = EmbeddingStore::from_aggregated(&agg, "probe");

    let train_records = dataset.filter_domains(&[0, 1, 3]);
    let test_records = dataset.filter_domains(&[4]);

    let cfg = DistillConfig {
        mode: Mode::Dual,
        embedding_source: Some(EmbeddingSource::AggTemplate),
        epochs,
        learning_rate: lr,
        seed: 7,
        ..DistillConfig::default()
    };
    let (student, trace) =
        train_student(&train_records, &teacher, Some(&store), &cfg, &source, None).unwrap();
    println!("student loss trace: {:?}", trace.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    for (name, records) in [("train", &train_records), ("test", &test_records)] {
        let images: Vec<_> = records.iter().map(|r| source.load(&r.path).unwrap()).collect();
        let refs: Vec<&_> = images.iter().map(|a| a.as_ref()).collect();
        let preds = predict(&student, &store, &refs).unwrap();
        let acc = preds
            .iter()
            .zip(records.iter())
            .filter(|(p, r)| **p == r.class_id)
            .count() as f64
            / records.len() as f64;
        let ones = preds.iter().filter(|&&p| p == 1).count();
        println!("{name}: acc {acc:.3} (pred class-1 fraction {:.2})", ones as f64 / preds.len() as f64);
    }

    // Inspect geometry: student embeddings vs store rows.
    let images: Vec<_> = test_records
        .iter()
        .take(6)
        .map(|r| source.load(&r.path).unwrap())
        .collect();
    let refs: Vec<&_> = images.iter().map(|a| a.as_ref()).collect();
    let x = dipt_core::teacher::images_to_batch::<f32>(&refs);
    let cache = student.forward(&x, false).unwrap();
    let e = cache.embeddings();
    let m = &store.matrix;
    for i in 0..refs.len() {
        let c0 = e.row(i).dot(&m.row(0)) / m.row(0).dot(&m.row(0)).sqrt();
        let c1 = e.row(i).dot(&m.row(1)) / m.row(1).dot(&m.row(1)).sqrt();
        println!(
            "img {i} (class {}): cos to E0 {c0:.4}, E1 {c1:.4}",
            test_records[i].class_id
        );
    }
    let e0e1 = {
        let a = m.row(0).to_owned();
        let b = m.row(1).to_owned();
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    };
    println!("store row cosine E0-E1: {e0e1:.4}");

    // Stage-1 geometry per learning rate.
    use dipt_core::prompts::{train_domain_prompts, Stage1Config, TeacherEmbedder};
    use dipt_core::store::aggregate_class_embeddings;
    let embedder = TeacherEmbedder { teacher: &teacher, source: &source };
    for lr in [5e-6, 5e-5, 2e-4, 5e-4] {
        let cfg = Stage1Config { learning_rate: lr, ..Stage1Config::default() };
        let mut embs = Vec::new();
        let mut losses = Vec::new();
        for d in [0usize, 1, 3] {
            let records = dataset.filter_domains(&[d]);
            let out = train_domain_prompts(&records, &teacher, &agg, &cfg, &embedder).unwrap();
            losses.push((out.initial_full_loss, out.final_full_loss));
            embs.push(out.embeddings);
        }
        let inv = aggregate_class_embeddings(&embs, "probe").unwrap();
        let a = inv.matrix.row(0).to_owned();
        let b = inv.matrix.row(1).to_owned();
        let cos01 = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
        // Teacher-image-space alignment of the invariant rows: zero-shot acc with them.
        let mut correct = 0usize;
        let mut total = 0usize;
        for d in [0usize, 1, 3, 4] {
            let records = dataset.filter_domains(&[d]);
            let images: Vec<_> = records.iter().map(|r| source.load(&r.path).unwrap()).collect();
            let refs: Vec<&_> = images.iter().map(|a| a.as_ref()).collect();
            let store_inv = dipt_core::store::EmbeddingStore { matrix: inv.matrix.clone(), ..store_clone(&store) };
            let preds = dipt_core::distill::zero_shot_predict(&teacher, &store_inv, &refs).unwrap();
            correct += preds.iter().zip(records.iter()).filter(|(p, r)| **p == r.class_id).count();
            total += records.len();
        }
        println!(
            "stage1 lr {lr:.0e}: inv row cos {cos01:.4}, teacher-zs-with-inv acc {:.3}, losses {:?}",
            correct as f64 / total as f64,
            losses.iter().map(|(a, b)| format!("{a:.3}->{b:.3}")).collect::<Vec<_>>()
        );
    }
}

fn store_clone(s: &EmbeddingStore) -> EmbeddingStore {
    EmbeddingStore {
        name: s.name.clone(),
        dim: s.dim,
        class_names: s.class_names.clone(),
        matrix: s.matrix.clone(),
        provenance: s.provenance.clone(),
    }
}
