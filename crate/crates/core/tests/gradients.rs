//! Finite-difference validation of every hand-written backward pass, at f64.

use dipt_core::nn::{
    real, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamGroup, Real, TransformerBlock,
};
use dipt_core::prompts::{
    init_domain_tokens, stage1_loss, stage1_loss_and_grad, AggregatedEmbeddings,
};
use dipt_core::teacher::{TeacherArch, TeacherModel, TextInput, Tokenizer};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    // Central differences resolve gradients only down to truncation noise;
    // when both sides are this small the comparison is noise against noise.
    if (a - b).abs() < 1e-7 {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn rand_array2(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn perturb<M: ParamGroup<f64>>(m: &mut M, flat_idx: usize, delta: f64) {
    let zeros = m.zeros_like();
    let mut seen = 0usize;
    m.visit_mut(&zeros, &mut |_, mut p, _| {
        let n = p.len();
        if flat_idx >= seen && flat_idx < seen + n {
            *p.iter_mut().nth(flat_idx - seen).unwrap() += delta;
        }
        seen += n;
    });
}

/// Check analytic parameter grads of `loss(model)` against central differences.
fn check_param_grads<M: ParamGroup<f64> + Clone>(
    model: &M,
    grads: &M,
    loss: impl Fn(&M) -> f64,
    eps: f64,
    tol: f64,
    label: &str,
) {
    let flat = grads.flatten();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let mut plus = model.clone();
        perturb(&mut plus, i, eps);
        let mut minus = model.clone();
        perturb(&mut minus, i, -eps);
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let e = rel_err(flat[i], fd);
        if e > worst {
            worst = e;
        }
        assert!(
            e <= tol,
            "{label}: param {i} analytic {} vs fd {fd} (rel {e})",
            flat[i]
        );
    }
    eprintln!("{label}: {} params, worst rel err {worst:.3e}", flat.len());
}

#[test]
fn linear_backward_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = Linear::<f64>::new(5, 4, true, 0.3, &mut rng);
    let x = rand_array2(&mut rng, 3, 5);
    let w_loss = rand_array2(&mut rng, 3, 4);
    let loss = |l: &Linear<f64>| (l.forward(&x) * &w_loss).sum();

    let mut grads = layer.zeros_like();
    let dx = layer.backward(&x, &w_loss, &mut grads);
    check_param_grads(&layer, &grads, loss, 1e-5, 1e-7, "linear");

    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut xp = x.clone();
            xp[(i, j)] += 1e-5;
            let mut xm = x.clone();
            xm[(i, j)] -= 1e-5;
            let fd = ((layer.forward(&xp) * &w_loss).sum() - (layer.forward(&xm) * &w_loss).sum())
                / 2e-5;
            assert!(rel_err(dx[(i, j)], fd) < 1e-7);
        }
    }
}

#[test]
fn layer_norm_backward_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut layer = LayerNorm::<f64>::new(6);
    // Non-trivial gamma/beta.
    layer.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
    layer.beta.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    let x = rand_array2(&mut rng, 4, 6);
    let w_loss = rand_array2(&mut rng, 4, 6);
    let loss = |l: &LayerNorm<f64>| (l.forward(&x).0 * &w_loss).sum();

    let (_, cache) = layer.forward(&x);
    let mut grads = layer.zeros_like();
    let dx = layer.backward(&cache, &w_loss, &mut grads);
    check_param_grads(&layer, &grads, loss, 1e-5, 1e-6, "layer_norm");

    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut xp = x.clone();
            xp[(i, j)] += 1e-5;
            let mut xm = x.clone();
            xm[(i, j)] -= 1e-5;
            let fd =
                ((layer.forward(&xp).0 * &w_loss).sum() - (layer.forward(&xm).0 * &w_loss).sum())
                    / 2e-5;
            assert!(
                rel_err(dx[(i, j)], fd) < 1e-6,
                "ln dx[{i},{j}] {} vs {fd}",
                dx[(i, j)]
            );
        }
    }
}

#[test]
fn attention_backward_matches_fd_with_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = MultiHeadAttention::<f64>::new(8, 2, &mut rng);
    let x = rand_array2(&mut rng, 5, 8);
    // Last two positions are pads (masked as keys).
    let valid = vec![true, true, true, false, false];
    let w_loss = rand_array2(&mut rng, 5, 8);
    let loss = |l: &MultiHeadAttention<f64>| (l.forward(&x, &valid).0 * &w_loss).sum();

    let (_, cache) = layer.forward(&x, &valid);
    let mut grads = layer.zeros_like();
    let dx = layer.backward(&cache, &w_loss, &mut grads);
    check_param_grads(&layer, &grads, loss, 1e-5, 1e-5, "attention");

    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut xp = x.clone();
            xp[(i, j)] += 1e-5;
            let mut xm = x.clone();
            xm[(i, j)] -= 1e-5;
            let fd = ((layer.forward(&xp, &valid).0 * &w_loss).sum()
                - (layer.forward(&xm, &valid).0 * &w_loss).sum())
                / 2e-5;
            assert!(
                rel_err(dx[(i, j)], fd) < 1e-5,
                "attn dx[{i},{j}] {} vs {fd}",
                dx[(i, j)]
            );
        }
    }
}

#[test]
fn transformer_block_backward_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = TransformerBlock::<f64>::new(8, 2, 16, &mut rng);
    let x = rand_array2(&mut rng, 4, 8);
    let valid = vec![true, true, true, false];
    let w_loss = rand_array2(&mut rng, 4, 8);
    let loss = |l: &TransformerBlock<f64>| (l.forward(&x, &valid).0 * &w_loss).sum();

    let (_, cache) = layer.forward(&x, &valid);
    let mut grads = layer.zeros_like();
    let dx = layer.backward(&cache, &w_loss, &mut grads);
    check_param_grads(&layer, &grads, loss, 1e-5, 1e-5, "block");

    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut xp = x.clone();
            xp[(i, j)] += 1e-5;
            let mut xm = x.clone();
            xm[(i, j)] -= 1e-5;
            let fd = ((layer.forward(&xp, &valid).0 * &w_loss).sum()
                - (layer.forward(&xm, &valid).0 * &w_loss).sum())
                / 2e-5;
            assert!(rel_err(dx[(i, j)], fd) < 1e-5);
        }
    }
}

#[test]
fn mlp_backward_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = Mlp::<f64>::new(6, 12, &mut rng);
    let x = rand_array2(&mut rng, 3, 6);
    let w_loss = rand_array2(&mut rng, 3, 6);
    let loss = |l: &Mlp<f64>| (l.forward(&x).0 * &w_loss).sum();
    let (_, cache) = layer.forward(&x);
    let mut grads = layer.zeros_like();
    layer.backward(&cache, &w_loss, &mut grads);
    check_param_grads(&layer, &grads, loss, 1e-5, 1e-6, "mlp");
}

#[test]
fn conv_backward_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layer = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng);
    let x = Array4::from_shape_fn((2, 2, 6, 6), |_| rng.gen_range(-1.0..1.0));
    let (y, cache) = layer.forward(&x);
    let w_loss = Array4::from_shape_fn(y.raw_dim(), |_| rng.gen_range(-1.0..1.0));
    let loss = |l: &Conv2d<f64>| (l.forward(&x).0 * &w_loss).sum();

    let mut grads = layer.zeros_like();
    let dx = layer.backward(&cache, &w_loss, &mut grads);
    check_param_grads(&layer, &grads, loss, 1e-5, 1e-6, "conv");

    // Input gradient at a few entries.
    for &(n, c, i, j) in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 3, 2), (0, 1, 5, 5)] {
        let mut xp = x.clone();
        xp[(n, c, i, j)] += 1e-5;
        let mut xm = x.clone();
        xm[(n, c, i, j)] -= 1e-5;
        let fd = ((layer.forward(&xp).0 * &w_loss).sum() - (layer.forward(&xm).0 * &w_loss).sum())
            / 2e-5;
        assert!(rel_err(dx[(n, c, i, j)], fd) < 1e-6);
    }
}

fn tiny_teacher(seed: u64) -> TeacherModel<f64> {
    let tokenizer = Tokenizer::from_corpus(
        ["a patch of normal tissue", "an image of tumor tissue"],
        12,
    );
    let arch = TeacherArch {
        token_dim: 16,
        embed_dim: 16,
        max_length: 12,
        text_blocks: 2,
        text_heads: 2,
        image_channels: vec![4, 8],
        image_size: 16,
    };
    TeacherModel::<f64>::new(tokenizer, arch, seed).unwrap()
}

#[test]
fn text_encoder_input_gradient_matches_fd() {
    let teacher = tiny_teacher(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let content = rand_array2(&mut rng, 3, 16) * 0.3;
    let w_loss = Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0f64));

    let cache = teacher
        .encode_text_cached(TextInput::Continuous(&content))
        .unwrap();
    let d_rows = teacher.text.backward(&cache, &w_loss, None);

    // Content rows sit at wrapped positions 1..=3.
    for i in 0..3 {
        for j in 0..16 {
            let mut cp = content.clone();
            cp[(i, j)] += 1e-5;
            let mut cm = content.clone();
            cm[(i, j)] -= 1e-5;
            let lp = teacher
                .encode_text(TextInput::Continuous(&cp))
                .unwrap()
                .dot(&w_loss);
            let lm = teacher
                .encode_text(TextInput::Continuous(&cm))
                .unwrap()
                .dot(&w_loss);
            let fd = (lp - lm) / 2e-5;
            assert!(
                rel_err(d_rows[(i + 1, j)], fd) < 1e-5,
                "text input grad [{i},{j}]: {} vs {fd}",
                d_rows[(i + 1, j)]
            );
        }
    }
}

#[test]
fn text_encoder_param_gradients_match_fd() {
    let teacher = tiny_teacher(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let seq = teacher.tokenizer.tokenize("a patch of tumor tissue");
    let w_loss = Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0f64));

    let cache = teacher.text.encode_ids(&seq).unwrap();
    let mut grads = teacher.text.zeros_like();
    teacher.text.backward(&cache, &w_loss, Some(&mut grads));

    let loss = |t: &dipt_core::teacher::TextEncoder<f64>| {
        t.encode_ids(&seq).unwrap().embedding().dot(&w_loss)
    };
    // Spot-check a subset of parameters per tensor to keep runtime sane.
    let flat = grads.flatten();
    let mut model = teacher.text.clone();
    let stride = (flat.len() / 400).max(1);
    let mut checked = 0;
    for i in (0..flat.len()).step_by(stride) {
        let mut plus = model.clone();
        perturb(&mut plus, i, 1e-5);
        let mut minus = model.clone();
        perturb(&mut minus, i, -1e-5);
        let fd = (loss(&plus) - loss(&minus)) / 2e-5;
        if flat[i].abs().max(fd.abs()) < 1e-12 {
            continue; // untouched embedding rows
        }
        assert!(
            rel_err(flat[i], fd) < 1e-4,
            "text param {i}: {} vs {fd}",
            flat[i]
        );
        checked += 1;
    }
    assert!(checked > 100);
    let _ = &mut model;
}

#[test]
fn image_encoder_param_gradients_match_fd() {
    let teacher = tiny_teacher(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Array4::from_shape_fn((2, 3, 16, 16), |_| rng.gen_range(0.0..1.0f64));
    let w_loss = rand_array2(&mut rng, 2, 16);

    let cache = teacher.image.forward(&x, true).unwrap();
    let mut grads = teacher.image.zeros_like();
    teacher.image.backward(&cache, &w_loss, &mut grads);

    let loss = |enc: &dipt_core::teacher::ImageEncoder<f64>| {
        (enc.forward(&x, true).unwrap().embeddings() * &w_loss).sum()
    };
    let flat = grads.flatten();
    let stride = (flat.len() / 300).max(1);
    let mut checked = 0;
    for i in (0..flat.len()).step_by(stride) {
        let mut plus = teacher.image.clone();
        perturb(&mut plus, i, 1e-5);
        let mut minus = teacher.image.clone();
        perturb(&mut minus, i, -1e-5);
        let fd = (loss(&plus) - loss(&minus)) / 2e-5;
        if flat[i].abs().max(fd.abs()) < 1e-12 {
            continue;
        }
        assert!(
            rel_err(flat[i], fd) < 1e-4,
            "image param {i}: {} vs {fd}",
            flat[i]
        );
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn stage1_token_gradients_match_fd() {
    let teacher = tiny_teacher(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let class_names = vec!["normal".to_string(), "tumor".to_string()];
    let agg = AggregatedEmbeddings {
        class_names,
        matrix: rand_array2(&mut rng, 2, 16) * 0.5,
        teacher_hash: "tiny".into(),
    };
    let tokens = init_domain_tokens::<f64>(0, 2, 16, 0.02, 99).unwrap();
    // Unit-norm random "image embeddings".
    let mut imgs = rand_array2(&mut rng, 4, 16);
    for mut row in imgs.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    let labels = vec![0usize, 1, 0, 1];
    let tau = 0.05;

    let (loss0, grad) =
        stage1_loss_and_grad(&teacher, &tokens, &agg, &imgs, &labels, tau).unwrap();
    assert!(loss0.is_finite());

    let mut worst = 0.0f64;
    for i in 0..2 {
        for j in 0..16 {
            let mut tp = tokens.clone();
            tp.tokens[(i, j)] += 1e-5;
            let mut tm = tokens.clone();
            tm.tokens[(i, j)] -= 1e-5;
            let lp = stage1_loss(&teacher, &tp, &agg, &imgs, &labels, tau).unwrap();
            let lm = stage1_loss(&teacher, &tm, &agg, &imgs, &labels, tau).unwrap();
            let fd = (lp - lm) / 2e-5;
            let e = rel_err(grad[(i, j)], fd);
            worst = worst.max(e);
            assert!(
                e < 1e-5,
                "token grad [{i},{j}]: analytic {} vs fd {fd}",
                grad[(i, j)]
            );
        }
    }
    eprintln!("stage1 token grads worst rel err {worst:.3e}");
}

#[test]
fn student_dual_loss_gradients_match_fd() {
    use dipt_core::distill::{dual_loss, dual_loss_and_grad, StudentArch, StudentModel};
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let student = StudentModel::<f64>::new(
        StudentArch::Conv { channels: vec![4] },
        16,
        16,
        None,
        21,
    )
    .unwrap();
    let x = Array4::from_shape_fn((3, 3, 16, 16), |_| rng.gen_range(0.0..1.0f64));
    let mut teacher_rows = rand_array2(&mut rng, 3, 16);
    for mut row in teacher_rows.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    let class_rows = rand_array2(&mut rng, 2, 16);
    let labels = vec![0usize, 1, 1];

    let (loss0, grads) =
        dual_loss_and_grad(&student, &x, &teacher_rows, &class_rows, &labels, 1.0, 1.0).unwrap();
    assert!(loss0 > 0.0);

    let flat = grads.flatten();
    let mut checked = 0;
    for i in (0..flat.len()).step_by((flat.len() / 200).max(1)) {
        let mut plus = student.clone();
        perturb(&mut plus, i, 1e-5);
        let mut minus = student.clone();
        perturb(&mut minus, i, -1e-5);
        let lp = dual_loss(&plus, &x, &teacher_rows, &class_rows, &labels, 1.0, 1.0).unwrap();
        let lm = dual_loss(&minus, &x, &teacher_rows, &class_rows, &labels, 1.0, 1.0).unwrap();
        let fd = (lp - lm) / 2e-5;
        if flat[i].abs().max(fd.abs()) < 1e-12 {
            continue;
        }
        assert!(
            rel_err(flat[i], fd) < 1e-4,
            "student param {i}: {} vs {fd}",
            flat[i]
        );
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn two_filter_student_projection_grads_match_fd() {
    // The degenerate two-filter backbone saturates its channel norm, so only
    // the smooth projection-head path is resolvable by finite differences.
    use dipt_core::distill::{dual_loss, dual_loss_and_grad, StudentArch, StudentModel};
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let student = StudentModel::<f64>::new(
        StudentArch::Conv { channels: vec![2] },
        16,
        16,
        None,
        23,
    )
    .unwrap();
    let x = Array4::from_shape_fn((4, 3, 16, 16), |_| rng.gen_range(0.0..1.0f64));
    let mut teacher_rows = rand_array2(&mut rng, 4, 16);
    for mut row in teacher_rows.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    let class_rows = rand_array2(&mut rng, 2, 16);
    let labels = vec![0usize, 1, 1, 0];

    let (_, grads) =
        dual_loss_and_grad(&student, &x, &teacher_rows, &class_rows, &labels, 1.0, 1.0).unwrap();

    // Locate the projection tensors in the flat order.
    let mut offset = 0usize;
    let mut proj_ranges = Vec::new();
    grads.visit(&mut |name, p| {
        if name.starts_with("proj.") {
            proj_ranges.push((offset, offset + p.len()));
        }
        offset += p.len();
    });
    let flat = grads.flatten();
    let mut checked = 0;
    for (start, end) in proj_ranges {
        for i in start..end {
            let mut plus = student.clone();
            perturb(&mut plus, i, 1e-5);
            let mut minus = student.clone();
            perturb(&mut minus, i, -1e-5);
            let lp = dual_loss(&plus, &x, &teacher_rows, &class_rows, &labels, 1.0, 1.0).unwrap();
            let lm = dual_loss(&minus, &x, &teacher_rows, &class_rows, &labels, 1.0, 1.0).unwrap();
            let fd = (lp - lm) / 2e-5;
            assert!(
                rel_err(flat[i], fd) < 1e-4,
                "proj param {i}: {} vs {fd}",
                flat[i]
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 2 * 16 + 16);
}

#[test]
fn vit_student_gradients_match_fd() {
    use dipt_core::distill::{dual_loss, dual_loss_and_grad, StudentArch, StudentModel};
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let student = StudentModel::<f64>::new(
        StudentArch::Vit {
            patch: 8,
            dim: 8,
            blocks: 1,
            heads: 2,
        },
        16,
        16,
        None,
        22,
    )
    .unwrap();
    let x = Array4::from_shape_fn((2, 3, 16, 16), |_| rng.gen_range(0.0..1.0f64));
    let mut teacher_rows = rand_array2(&mut rng, 2, 16);
    for mut row in teacher_rows.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    let class_rows = rand_array2(&mut rng, 2, 16);
    let labels = vec![0usize, 1];

    let (_, grads) =
        dual_loss_and_grad(&student, &x, &teacher_rows, &class_rows, &labels, 1.0, 0.7).unwrap();
    let flat = grads.flatten();
    let mut checked = 0;
    for i in (0..flat.len()).step_by((flat.len() / 150).max(1)) {
        let mut plus = student.clone();
        perturb(&mut plus, i, 1e-5);
        let mut minus = student.clone();
        perturb(&mut minus, i, -1e-5);
        let lp = dual_loss(&plus, &x, &teacher_rows, &class_rows, &labels, 1.0, 0.7).unwrap();
        let lm = dual_loss(&minus, &x, &teacher_rows, &class_rows, &labels, 1.0, 0.7).unwrap();
        let fd = (lp - lm) / 2e-5;
        if flat[i].abs().max(fd.abs()) < 1e-12 {
            continue;
        }
        assert!(
            rel_err(flat[i], fd) < 1e-4,
            "vit param {i}: {} vs {fd}",
            flat[i]
        );
        checked += 1;
    }
    assert!(checked > 40);
}
