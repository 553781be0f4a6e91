use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{build_backbone, BackboneSpec};
use crate::data::{synthesize_category, CategorySpec, Label, Mask};

fn spec(hw: usize) -> BackboneSpec {
    let mut s = BackboneSpec::tiny_irnet8();
    s.input_hw = (hw, hw);
    s
}

fn image(hw: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![3, hw, hw], (0..3 * hw * hw).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn sample(hw: usize, seed: u64) -> Sample {
    Sample {
        name: format!("{seed}"),
        image: image(hw, seed),
        label: Label::Good,
        defect: None,
        mask: Mask::empty(hw, hw),
    }
}

fn group(indices: &[usize], p: usize) -> LayerGroup {
    let mode = if p > 0 { GroupMode::Paste } else { GroupMode::Equiv };
    LayerGroup::new(mode, indices.to_vec(), p).unwrap()
}

fn perfect(m: &TeacherStudentModel) -> TeacherStudentModel {
    let start = m.student.first_layer();
    let layers = m.teacher.layers()[start..].to_vec();
    let mut out = m.clone();
    out.student = Backbone::from_parts(m.teacher.spec().clone(), start, layers, 0).unwrap();
    out.trained = true;
    out
}

#[test]
fn parameter_storage() {
    let teacher = build_backbone(&spec(32), 1).unwrap();
    let s = init_model(&teacher, &group(&[2, 3, 6], 0), 2).unwrap();
    let trimmed = teacher.trim(6).unwrap();
    assert_eq!(s.param_bytes(), 2 * trimmed.param_bytes());
    let p = init_model(&teacher, &group(&[3, 4, 6], 2), 2).unwrap();
    let prefix: usize = trimmed.layers()[..=2].iter().flatten().map(|c| 4 * c.num_scalars()).sum();
    assert_eq!(p.param_bytes(), s.param_bytes() - prefix);
    assert_eq!(p.student.first_layer(), 3);
    assert!(init_model(&teacher.trim(5).unwrap(), &group(&[2, 3, 6], 0), 2).is_err());
}

#[test]
fn perfect_student_scores_zero() {
    let teacher = build_backbone(&spec(32), 1).unwrap();
    for p in [0, 2] {
        let idx = if p == 0 { [2, 3, 6] } else { [3, 4, 6] };
        let m = perfect(&init_model(&teacher, &group(&idx, p), 5).unwrap());
        let x = image(32, 9);
        assert!(m.loss(&x).unwrap().abs() <= 1e-6);
        let map = m.anomaly_map(&x).unwrap();
        assert!(map.pixel_scores.data.iter().all(|v| v.abs() <= 1e-6));
        assert!(map.image_score.abs() <= 1e-6);
        assert!(map.warnings.is_empty());
    }
}

#[test]
fn loss_is_bounded_and_maps_nonnegative() {
    let teacher = build_backbone(&spec(32), 1).unwrap();
    let m = init_model(&teacher, &group(&[2, 3, 6], 0), 5).unwrap();
    for seed in 0..4 {
        let x = image(32, seed);
        let l = m.loss(&x).unwrap();
        assert!((0.0..=2.0 * 3.0).contains(&l), "{l}");
        let map = m.anomaly_map(&x).unwrap();
        assert_eq!((map.pixel_scores.height, map.pixel_scores.width), (32, 32));
        assert!(map.pixel_scores.data.iter().all(|&v| v >= 0.0));
        assert_eq!(map.image_score, map.pixel_scores.max());
        assert!(!map.warnings.is_empty());
        assert_eq!(map.per_layer.as_ref().unwrap().len(), 3);
    }
}

#[test]
fn sum_combination_adds_layer_maps() {
    let teacher = build_backbone(&spec(32), 1).unwrap();
    let mut m = init_model(&teacher, &group(&[2, 3, 6], 0), 5).unwrap();
    m.combine = Combine::Sum;
    let map = m.anomaly_map(&image(32, 1)).unwrap();
    let layers = map.per_layer.unwrap();
    for (i, &v) in map.pixel_scores.data.iter().enumerate() {
        let s: f32 = layers.iter().map(|l| l.data[i]).sum();
        assert!((v - s).abs() <= 1e-6 * s.max(1.0));
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let teacher = build_backbone(&spec(16), 1).unwrap();
    let mut calib = init_model(&teacher, &group(&[3, 4, 6], 2), 3).unwrap();
    let train: Vec<Sample> = (0..3).map(|s| sample(16, s)).collect();
    calib.fit(&train, &FitConfig { epochs: 1, lr: 0.01, ..FitConfig::default() }).unwrap();
    let m = calib;
    let x = image(16, 42);
    let pass = m.teacher_pass(&x).unwrap();
    let student: Backbone<f64> = m.student.cast();
    let input: Tensor<f64> = pass.student_input.cast();
    let targets: Vec<Tensor<f64>> = pass.targets.iter().map(|t| t.cast()).collect();
    let alphas = [1.0f64, 0.5, 2.0];
    let loss_of = |s: &Backbone<f64>| -> f64 {
        let mut tape = Tape::new();
        let vars = s.register(&mut tape, false);
        let l = distill_loss_on_tape(&mut tape, s, &vars, &input, &m.group.indices, &targets, &alphas).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars = student.register(&mut tape, true);
    let l = distill_loss_on_tape(&mut tape, &student, &vars, &input, &m.group.indices, &targets, &alphas).unwrap();
    let params = vars.trainable_params();
    let grads = tape.gradients(l, &params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-5;
    let mut checked = 0;
    for _ in 0..40 {
        let pi = rng.gen_range(0..params.len());
        let n = grads[pi].len();
        let k = rng.gen_range(0..n);
        let mut plus = student.clone();
        plus.trainable_params_mut()[pi].data_mut()[k] += h;
        let mut minus = student.clone();
        minus.trainable_params_mut()[pi].data_mut()[k] -= h;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        let g = grads[pi].data()[k];
        let scale = g.abs().max(fd.abs()).max(1e-6);
        assert!((g - fd).abs() / scale < 1e-4, "param {pi}[{k}]: analytic {g}, numeric {fd}");
        checked += 1;
    }
    assert_eq!(checked, 40);
}

#[test]
fn fit_with_zero_epochs_is_identity_and_anomalies_are_rejected() {
    let teacher = build_backbone(&spec(16), 1).unwrap();
    let mut m = init_model(&teacher, &group(&[2, 3, 6], 0), 3).unwrap();
    let before = m.clone();
    let train: Vec<Sample> = (0..4).map(|s| sample(16, s)).collect();
    let report = m.fit(&train, &FitConfig { epochs: 0, ..FitConfig::default() }).unwrap();
    assert!(report.epoch_losses.is_empty());
    assert_eq!(m, before);
    let mut bad = train.clone();
    bad[1].label = Label::Anomalous;
    assert!(matches!(m.fit(&bad, &FitConfig::default()), Err(Error::Config(_))));
    let mut opt = Sgd::new(0.1, 0.9).unwrap();
    assert!(matches!(m.train_step(&mut opt, &[&bad[1]]), Err(Error::Config(_))));
}

#[test]
fn fit_is_deterministic_and_leaves_the_teacher_alone() {
    let teacher = build_backbone(&spec(16), 1).unwrap();
    let train: Vec<Sample> = (0..6).map(|s| sample(16, s)).collect();
    let cfg = FitConfig {
        epochs: 3,
        lr: 0.05,
        seed: 4,
        ..FitConfig::default()
    };
    let run = || {
        let mut m = init_model(&teacher, &group(&[3, 4, 6], 2), 3).unwrap();
        let r = m.fit(&train, &cfg).unwrap();
        (m, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert_eq!(a.teacher, teacher.trim(6).unwrap().with_frozen_until(7));
    assert!(a.trained);
}

#[test]
fn train_step_reports_finite_loss() {
    let teacher = build_backbone(&spec(16), 1).unwrap();
    let mut m = init_model(&teacher, &group(&[2, 3, 6], 0), 3).unwrap();
    let train: Vec<Sample> = (0..2).map(|s| sample(16, s)).collect();
    let mut opt = Sgd::new(0.01, 0.9).unwrap();
    let l0 = m.train_step(&mut opt, &[&train[0], &train[1]]).unwrap();
    assert!(l0.is_finite() && l0 > 0.0);
    let l1 = m.train_step(&mut opt, &[&train[0], &train[1]]).unwrap();
    assert!(l1 < l0);
}

#[test]
fn divergence_restarts_then_fails() {
    let teacher = build_backbone(&spec(16), 1).unwrap();
    let mut m = init_model(&teacher, &group(&[2, 3, 6], 0), 3).unwrap();
    let train: Vec<Sample> = (0..2).map(|s| sample(16, s)).collect();
    let cfg = FitConfig {
        epochs: 2,
        lr: 1e30,
        ..FitConfig::default()
    };
    match m.fit(&train, &cfg) {
        Err(Error::Training(msg)) => assert!(msg.contains("diverged twice"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = build_backbone(&spec(16), 1).unwrap();
    let mut m = init_model(&teacher, &group(&[3, 4, 6], 2), 3).unwrap();
    m.combine = Combine::Sum;
    m.alphas = vec![1.0, 0.5, 0.25];
    save_model(&m, dir.path()).unwrap();
    let back = load_model(dir.path()).unwrap();
    assert_eq!(back, m);
    let x = image(16, 0);
    assert_eq!(back.anomaly_map(&x).unwrap(), m.anomaly_map(&x).unwrap());
}

#[test]
fn learns_a_synthetic_category() {
    let mut cat: CategorySpec = crate::data::default_suite(0).remove(3);
    cat.n_train = 16;
    cat.n_test_bad = 2;
    cat.n_test_good = 1;
    let data = synthesize_category(&cat).unwrap();
    let teacher = build_backbone(&spec(64), 1).unwrap();
    let mut m = init_model(&teacher, &group(&[2, 3, 6], 0), 3).unwrap();
    let r = m
        .fit(&data.train, &FitConfig { epochs: 8, lr: 0.05, ..FitConfig::default() })
        .unwrap();
    assert!(r.epoch_losses.last().unwrap() < &r.epoch_losses[0]);
}
