use pilamim::data::generate_synthetic_shapes;
use pilamim::eval::{
    ablation_report, fingerprint, linear_probe, rankme, rankme_with, FeatureKind, ProbeConfig, RankMeOptions,
};
use pilamim::model::{Mode, ModelConfig};
use pilamim::tensor::Matrix;
use pilamim::trainer::{TrainConfig, TrainState};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
}

#[test]
fn separable_two_class_embeddings_are_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = gaussian(&mut rng, 1000, 8);
    let y: Vec<usize> = (0..1000).map(|i| i % 2).collect();
    for (r, &label) in y.iter().enumerate() {
        x.row_mut(r)[3] = if label == 1 { 2.0 } else { -2.0 } + 0.1 * rng.gen::<f64>();
    }
    let res = linear_probe(&x, &y, "sep", &ProbeConfig::desk()).unwrap();
    assert_eq!(res.train_accuracy, 1.0);
    assert_eq!(res.accuracy, 1.0);
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian(&mut rng, 5000, 16);
    let mut y: Vec<usize> = (0..5000).map(|i| i % 4).collect();
    y.shuffle(&mut rng);
    let res = linear_probe(&x, &y, "shuffled", &ProbeConfig::desk()).unwrap();
    assert!((res.accuracy - 0.25).abs() <= 0.05, "{res:?}");
}

#[test]
fn rankme_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
    let rank1 = Matrix::from_fn(200, 10, |r, c| (r as f64 - 50.0) * v[c]);
    assert!(rankme(&rank1).unwrap() <= 1.0 + 1e-3);

    for d in [2, 4, 32] {
        let id = Matrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 });
        let s = rankme_with(&id, RankMeOptions { center: false, ..Default::default() }).unwrap();
        assert!((s - d as f64).abs() < 1e-4 * d as f64, "{d}: {s}");
    }

    let g = gaussian(&mut rng, 10_000, 64);
    assert!(rankme(&g).unwrap() >= 0.9 * 64.0);
}

#[test]
fn rankme_ignores_row_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = gaussian(&mut rng, 300, 20);
    let mut idx: Vec<usize> = (0..300).collect();
    idx.shuffle(&mut rng);
    let a = rankme(&g).unwrap();
    let b = rankme(&g.select_rows(&idx)).unwrap();
    assert!((a - b).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rankme_lies_in_its_range(n in 2usize..40, d in 1usize..12, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian(&mut rng, n, d);
        let s = rankme(&m).unwrap();
        let slack = 1e-3;
        prop_assert!(s >= 1.0 - slack && s <= n.min(d) as f64 + slack, "{}", s);
    }
}

fn tiny_state(mode: Mode, seed: u64) -> TrainState {
    let model = ModelConfig {
        enc_depth: 1,
        enc_dim: 16,
        enc_heads: 2,
        dec_depth: 1,
        dec_dim: 8,
        dec_heads: 2,
        patch_size: 8,
        image_size: 16,
        mode,
        ..ModelConfig::desk()
    };
    let train = TrainConfig {
        seed,
        epochs: 2,
        warmup_epochs: 1,
        ..TrainConfig::desk()
    };
    TrainState::new(model, train, 1).unwrap()
}

#[test]
fn report_covers_every_cell_and_leaves_encoders_untouched() {
    let states: Vec<TrainState> = Mode::ALL.iter().enumerate().map(|(i, &m)| tiny_state(m, i as u64)).collect();
    let before: Vec<u64> = states.iter().map(|s| fingerprint(&s.context)).collect();
    let ids: Vec<String> = Mode::ALL.iter().map(|m| m.to_string()).collect();
    let entries: Vec<(&str, &TrainState)> = ids.iter().map(String::as_str).zip(&states).collect();
    let samples = generate_synthetic_shapes(7, 120, 16).unwrap();
    let probe = ProbeConfig {
        epochs: 4,
        warmup_epochs: 1,
        ..ProbeConfig::desk()
    };
    let rep = ablation_report(&entries, &samples, &["count", "class", "dist"], FeatureKind::Cls, &probe).unwrap();
    let after: Vec<u64> = states.iter().map(|s| fingerprint(&s.context)).collect();
    assert_eq!(before, after);

    assert_eq!(rep.tasks, ["class", "count", "dist"]);
    assert_eq!(rep.rows.iter().filter(|r| r.metric == "probe_accuracy").count(), 12);
    assert_eq!(rep.rows.iter().filter(|r| r.metric == "rankme").count(), 4);
    let text = rep.to_text();
    assert!(text.contains("without [CLS] loss"));
    assert!(text.contains("with [CLS] loss"));
}

#[test]
fn identical_checkpoints_give_identical_rows() {
    let s = tiny_state(Mode::Pilamim, 3);
    let samples = generate_synthetic_shapes(8, 80, 16).unwrap();
    let probe = ProbeConfig {
        epochs: 3,
        warmup_epochs: 1,
        ..ProbeConfig::desk()
    };
    let rep = ablation_report(&[("a", &s), ("b", &s)], &samples, &["class"], FeatureKind::MeanPool, &probe).unwrap();
    let strip = |id: &str| -> Vec<(String, String, f64)> {
        rep.rows
            .iter()
            .filter(|r| r.checkpoint == id)
            .map(|r| (r.task.clone(), r.metric.clone(), r.value))
            .collect()
    };
    assert_eq!(strip("a"), strip("b"));
}
