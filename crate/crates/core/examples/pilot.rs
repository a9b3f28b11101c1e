// Temporary tuning harness (deleted before release).

use dipt_core::data::{generate_dataset, DatasetSpec, FsImageSource, ImageSource};
use dipt_core::distill::zero_shot_predict;
use dipt_core::eval::build_tokenizer;
use dipt_core::prompts::{compute_aggregated_embeddings, default_bank};
use dipt_core::store::EmbeddingStore;
use dipt_core::teacher::{default_caption, PretrainConfig, TeacherArch, TeacherModel};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);

    let spec = DatasetSpec {
        num_domains: 5,
        num_classes: 2,
        samples_per_class_per_domain: n,
        image_size: 64,
        shift_strength: 0.6,
        seed,
    };
    let dir = std::env::temp_dir().join(format!("dipt-pilot-{seed}-{n}"));
    let t0 = Instant::now();
    let dataset = generate_dataset(&spec, &dir).unwrap();
    println!("gen: {:?} ({} records)", t0.elapsed(), dataset.records.len());

    let source = FsImageSource::new();
    let tokenizer = build_tokenizer(&dataset.class_names, 16);
    let mut teacher = TeacherModel::<f32>::new(tokenizer, TeacherArch::small(64), seed).unwrap();

    let batch: usize = std::env::var("PILOT_BATCH").ok().and_then(|s| s.parse().ok()).unwrap_or(32);
    let mut cfg = PretrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        seed,
        ..PretrainConfig::default()
    };
    if std::env::var("PILOT_NO_STOP").is_ok() {
        cfg.target_probe_accuracy = None;
    }
    let t0 = Instant::now();
    let probe_bank = default_bank(&dataset.class_names).unwrap();
    let probe_prompts: Vec<Vec<String>> = (0..dataset.class_names.len())
        .map(|i| probe_bank.templates_for(i).to_vec())
        .collect();
    let trace = teacher
        .pretrain_with_probe(&dataset, &source, &default_caption, &cfg, Some(&probe_prompts))
        .unwrap();
    println!(
        "pretrain {} epochs: {:?}; loss {:.4} -> {:.4} (mid {:?})",
        epochs,
        t0.elapsed(),
        trace.first().unwrap_or(&0.0),
        trace.last().unwrap_or(&0.0),
        trace.iter().step_by((trace.len()/8).max(1)).map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>()
    );

    // Diagnostics: embedding spread after pretraining.
    let probe: Vec<_> = dataset.records.iter().step_by(37).take(8).collect();
    let images: Vec<_> = probe.iter().map(|r| source.load(&r.path).unwrap()).collect();
    let refs: Vec<&_> = images.iter().map(|a| a.as_ref()).collect();
    let img_embs = teacher.encode_images(&refs).unwrap();
    let mut img_cos = Vec::new();
    for i in 0..8 {
        for j in (i + 1)..8 {
            img_cos.push(img_embs.row(i).dot(&img_embs.row(j)));
        }
    }
    println!(
        "image pairwise cos: min {:.4} max {:.4}",
        img_cos.iter().cloned().fold(f32::INFINITY, f32::min),
        img_cos.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    );
    let texts = [
        "an image of normal lymph node",
        "a photo of normal lymph node",
        "an image of tumor epithelium",
        "a photo of tumor epithelium",
    ];
    let mut tembs = Vec::new();
    for t in texts {
        let seq = teacher.tokenizer.tokenize(t);
        tembs.push(
            teacher
                .encode_text(dipt_core::teacher::TextInput::Tokens(&seq))
                .unwrap(),
        );
    }
    for i in 0..4 {
        for j in (i + 1)..4 {
            println!("text cos {i}-{j}: {:.4}", tembs[i].dot(&tembs[j]));
        }
    }

    let bank = default_bank(&dataset.class_names).unwrap();
    let agg = compute_aggregated_embeddings::<f32>(&teacher, &bank).unwrap();
    let store = EmbeddingStore::from_aggregated(&agg, "pilot");

    // Zero-shot accuracy per domain.
    let t0 = Instant::now();
    let mut total_correct = 0usize;
    for &d in &dataset.domain_ids {
        let records = dataset.filter_domains(&[d]);
        let images: Vec<_> = records.iter().map(|r| source.load(&r.path).unwrap()).collect();
        let refs: Vec<&_> = images.iter().map(|a| a.as_ref()).collect();
        let preds = zero_shot_predict(&teacher, &store, &refs).unwrap();
        let correct = preds
            .iter()
            .zip(records.iter())
            .filter(|(p, r)| **p == r.class_id)
            .count();
        total_correct += correct;
        println!("domain {d}: zero-shot acc {:.3}", correct as f64 / records.len() as f64);
    }
    println!(
        "overall zero-shot acc {:.3} (eval {:?})",
        total_correct as f64 / dataset.records.len() as f64,
        t0.elapsed()
    );
}
