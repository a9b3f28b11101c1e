// Temporary tuning harness for the full benchmark (deleted before release).

use dipt_core::data::DatasetSpec;
use dipt_core::distill::DistillConfig;
use dipt_core::eval::{default_method_roster, run_experiment, ExperimentParams, NoopObserver};
use dipt_core::prompts::Stage1Config;
use dipt_core::teacher::PretrainConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let pre_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(14);
    let s1_lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5e-5);
    let s1_steps: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(500);
    let s2_epochs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(8);
    let s1_tau: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let s2_lr: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(3e-3);

    let stage2 = DistillConfig {
        epochs: s2_epochs,
        learning_rate: s2_lr,
        ..DistillConfig::default()
    };
    let params = ExperimentParams {
        spec: DatasetSpec {
            num_domains: 5,
            num_classes: 2,
            samples_per_class_per_domain: 50,
            image_size: 64,
            shift_strength: 0.6,
            seed: 0,
        },
        validation_domain: 2,
        pretrain: PretrainConfig {
            epochs: pre_epochs,
            ..PretrainConfig::default()
        },
        stage1: Stage1Config {
            learning_rate: s1_lr,
            steps: s1_steps,
            temperature: s1_tau,
            ..Stage1Config::default()
        },
        methods: default_method_roster(&stage2),
        parallel: true,
    }
    .with_global_seed(seed);

    let dir = std::env::temp_dir().join(format!("dipt-pilot2-{seed}-{pre_epochs}"));
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    let out = run_experiment(&params, &dir, &NoopObserver).unwrap();
    println!("total time {:?}", t0.elapsed());
    println!(
        "teacher hash stable: {}",
        out.teacher_hash_after_pretrain == out.teacher_hash_after_run
    );
    for (d, initial, fin) in &out.stage1_losses {
        println!("stage1 domain {d}: full loss {initial:.4} -> {fin:.4}");
    }
    println!("\nmethod                mean_acc mean_f1  worst_acc worst_f1");
    for r in &out.results {
        println!(
            "{:<20} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.method,
            r.mean.accuracy * 100.0,
            r.mean.macro_f1 * 100.0,
            r.worst.accuracy * 100.0,
            r.worst.macro_f1 * 100.0
        );
    }
    for r in &out.results {
        let per: Vec<String> = r
            .per_rotation
            .iter()
            .map(|(d, m)| format!("d{d}:{:.3}", m.macro_f1))
            .collect();
        println!("{:<20} {}", r.method, per.join(" "));
    }
}
