use std::fs;
use std::path::Path;

use gaitlab::checkpoint::{checkpoint_name, write_latest, Checkpoint};
use gaitlab::dataset::DatasetIndex;
use gaitlab::geometry::SensorIntrinsics;
use gaitlab::hmrnet::HmrConfig;
use gaitlab::loss::*;
use gaitlab::synthetic::generate_dataset;
use gaitlab::training::*;
use gaitlab::GaitError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct enumeration of every (anchor, positive, negative) triple per strip.
fn triplet_oracle(emb: &[f64], b: usize, p: usize, d: usize, labels: &[u32], margin: f64) -> f64 {
    let dist = |i: usize, j: usize, s: usize| -> f64 {
        (0..d)
            .map(|k| (emb[(i * p + s) * d + k] - emb[(j * p + s) * d + k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for s in 0..p {
        let mut terms = Vec::new();
        for a in 0..b {
            for q in 0..b {
                for n in 0..b {
                    if a != q && labels[a] == labels[q] && labels[n] != labels[a] {
                        let t = margin + dist(a, q, s) - dist(a, n, s);
                        if t > 0.0 {
                            terms.push(t);
                        }
                    }
                }
            }
        }
        if !terms.is_empty() {
            total += terms.iter().sum::<f64>() / terms.len() as f64;
        }
    }
    total / p as f64
}

fn ce_oracle(logits: &[f64], b: usize, p: usize, n: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..b {
        for s in 0..p {
            let row = &logits[(i * p + s) * n..(i * p + s + 1) * n];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total -= (row[labels[i]].exp() / z).ln();
        }
    }
    total / (b * p) as f64
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn triplet_matches_enumeration_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (b, p, d) = (6, 3, 4);
    let labels = [0, 0, 1, 1, 2, 2];
    let emb = random(&mut rng, b * p * d);
    let out = triplet_loss_ba(&emb, b, p, d, &labels, 0.2).unwrap();
    assert!((out.loss.value - triplet_oracle(&emb, b, p, d, &labels, 0.2)).abs() < 1e-12);
    assert_eq!(out.triplets, 6 * 4);
    let h = 1e-6;
    for i in 0..emb.len() {
        let mut up = emb.clone();
        up[i] += h;
        let mut down = emb.clone();
        down[i] -= h;
        let fd = (triplet_oracle(&up, b, p, d, &labels, 0.2) - triplet_oracle(&down, b, p, d, &labels, 0.2)) / (2.0 * h);
        assert!((fd - out.loss.grad[i]).abs() < 1e-6, "coordinate {i}: {fd} vs {}", out.loss.grad[i]);
    }
}

#[test]
fn triplet_duplication_keeps_the_positive_mean() {
    // negatives sit at least the margin away, so self-duplicate pairs add no positive terms
    let emb = [0.0, 1.0, 0.5, 1.6];
    let labels = [0, 0, 1, 1];
    let once = triplet_loss_ba(&emb, 4, 1, 1, &labels, 0.2).unwrap();
    let emb2: Vec<f64> = emb.iter().chain(&emb).copied().collect();
    let labels2: Vec<u32> = labels.iter().chain(&labels).copied().collect();
    let twice = triplet_loss_ba(&emb2, 8, 1, 1, &labels2, 0.2).unwrap();
    assert!(once.loss.value > 0.0);
    assert!((once.loss.value - twice.loss.value).abs() < 1e-12);
}

#[test]
fn ce_matches_log_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&mut rng, 3 * 2 * 4);
    let labels = [2, 0, 3];
    let out = ce_loss(&logits, 3, 2, 4, &labels).unwrap();
    assert!((out.value - ce_oracle(&logits, 3, 2, 4, &labels)).abs() < 1e-8);
    assert!((out.value - std::f64::consts::LN_2).abs() > 1e-3);
    let uniform = ce_loss(&[0.0, 0.0], 1, 1, 2, &[0]).unwrap();
    assert!((uniform.value - std::f64::consts::LN_2).abs() < 1e-8);
}

#[test]
fn combined_loss_weighting() {
    let w = LossWeights::default();
    assert_eq!((w.alpha, w.beta), (1.0, 0.1));
    assert_eq!(combine(1.2, 0.693147, &w), 1.2 + 0.1 * 0.693147);
    let doubled = LossWeights { beta: 0.2, ..w };
    let ce_part = |w: &LossWeights| combine(0.0, 0.693147, w);
    assert_eq!(ce_part(&doubled), 2.0 * ce_part(&w));
    // gradients carry the same weights
    let emb = [0.0f64, 2.0, 1.0];
    let logits = [0.3f64, -0.1, 0.2, 0.0, 0.5, 0.4];
    let c = combined_loss(&emb, &logits, 3, 1, 1, 2, &[0, 0, 1], &doubled).unwrap();
    let ce = ce_loss(&logits, 3, 1, 2, &[0, 0, 1]).unwrap();
    assert!((c.total - (1.2 + 0.2 * ce.value)).abs() < 1e-15);
    for (g, r) in c.grad_logits.iter().zip(&ce.grad) {
        assert!((g - 0.2 * r).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn triplet_ignores_rotations(seed in 0u64..1000, theta in 0.0f64..6.28) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = random(&mut rng, 6 * 2);
        let labels = [0, 0, 1, 1, 2, 2];
        let (s, c) = theta.sin_cos();
        let rot: Vec<f64> = emb.chunks(2).flat_map(|v| [c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect();
        let a = triplet_loss_ba(&emb, 6, 1, 2, &labels, 0.2).unwrap().loss.value;
        let b = triplet_loss_ba(&rot, 6, 1, 2, &labels, 0.2).unwrap().loss.value;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ce_ignores_per_sample_shifts(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, 2 * 3);
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let a = ce_loss(&logits, 2, 1, 3, &[0, 2]).unwrap().value;
        let b = ce_loss(&shifted, 2, 1, 3, &[0, 2]).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn combined_is_non_negative(seed in 0u64..1000, alpha in 0.0f64..2.0, beta in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = random(&mut rng, 4 * 2 * 3);
        let logits = random(&mut rng, 4 * 2 * 3);
        let w = LossWeights { alpha, beta, margin: 0.2 };
        let c = combined_loss(&emb, &logits, 4, 2, 3, 3, &[0, 0, 1, 2], &w).unwrap();
        prop_assert!(c.total >= 0.0);
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    spec: ModelSpec,
    pool: TrainingPool<f32>,
}

fn fixture(subjects: u32) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(subjects, 3, 6, dir.path(), 9).unwrap();
    let index = DatasetIndex::load(dir.path()).unwrap();
    let ids: Vec<u32> = (0..subjects).collect();
    let spec = ModelSpec {
        net: HmrConfig::tiny(ids.len()),
        intrinsics: SensorIntrinsics::default(),
        class_subjects: ids.clone(),
    };
    let pool = TrainingPool::load(&index, &ids, None, &spec.preprocess()).unwrap();
    Fixture { _dir: dir, spec, pool }
}

fn small_config(total: usize) -> TrainConfig {
    TrainConfig {
        batch_subjects: 2,
        seqs_per_subject: 2,
        frames: 4,
        total_iterations: total,
        milestones: vec![20, 40],
        seed: 3,
        ..TrainConfig::default()
    }
}

fn params_of(path: &Path) -> Vec<Vec<f32>> {
    let ck = Checkpoint::<f32>::load(path).unwrap();
    ck.params.entries().iter().map(|e| e.value.data().to_vec()).collect()
}

#[test]
fn smoke_run_lowers_the_loss_and_writes_artifacts() {
    let fx = fixture(2);
    let out = tempfile::tempdir().unwrap();
    let cfg = small_config(50);
    let state = train(&cfg, fx.spec.clone(), &fx.pool, out.path()).unwrap();
    assert_eq!(state.iteration, 50);
    let h = &state.history;
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    assert!(mean(&h[40..]) < mean(&h[..10]), "{} vs {}", mean(&h[40..]), mean(&h[..10]));
    let log = fs::read_to_string(out.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.lines().next().unwrap().starts_with("iteration=10 lr=1.000e-3 triplet="));
    for it in [20, 40, 50] {
        assert!(out.path().join(checkpoint_name(it)).is_file());
    }
    assert_eq!(fs::read_to_string(out.path().join("latest")).unwrap().trim(), checkpoint_name(50));
    assert!((state.history[20].lr - 1e-4).abs() < 1e-15);
}

#[test]
fn same_seed_gives_identical_runs() {
    let fx = fixture(2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_config(15);
    let ra = train(&cfg, fx.spec.clone(), &fx.pool, a.path()).unwrap();
    let rb = train(&cfg, fx.spec.clone(), &fx.pool, b.path()).unwrap();
    assert_eq!(ra.history, rb.history);
    let last = checkpoint_name(15);
    assert_eq!(fs::read(a.path().join(&last)).unwrap(), fs::read(b.path().join(&last)).unwrap());
}

#[test]
fn resuming_from_a_milestone_matches_an_uninterrupted_run() {
    let fx = fixture(3);
    let full = tempfile::tempdir().unwrap();
    let cfg = small_config(30);
    let whole = train(&cfg, fx.spec.clone(), &fx.pool, full.path()).unwrap();
    let resumed_dir = tempfile::tempdir().unwrap();
    let name = checkpoint_name(20);
    fs::copy(full.path().join(&name), resumed_dir.path().join(&name)).unwrap();
    write_latest(resumed_dir.path(), &name).unwrap();
    let resumed = train(&cfg, fx.spec.clone(), &fx.pool, resumed_dir.path()).unwrap();
    assert_eq!(resumed.iteration, 30);
    assert_eq!(resumed.history.first().unwrap().iteration, 21);
    assert_eq!(resumed.history[..], whole.history[20..]);
    let last = checkpoint_name(30);
    assert_eq!(params_of(&full.path().join(&last)), params_of(&resumed_dir.path().join(&last)));
    let log = fs::read_to_string(resumed_dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().next().unwrap().split(' ').next(), Some("iteration=30"));
}

#[test]
fn mismatched_checkpoint_is_rejected_on_resume() {
    let fx = fixture(2);
    let out = tempfile::tempdir().unwrap();
    train(&small_config(5), fx.spec.clone(), &fx.pool, out.path()).unwrap();
    let mut other = fx.spec.clone();
    other.net.use_gsfe = false;
    let err = train(&small_config(10), other, &fx.pool, out.path()).unwrap_err();
    assert!(matches!(err, GaitError::Checkpoint(_)), "{err}");
}

#[test]
fn divergence_aborts_with_a_batch_dump() {
    let fx = fixture(2);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { lr: 1e30, weight_decay: 0.0, ..small_config(10) };
    let err = train(&cfg, fx.spec.clone(), &fx.pool, out.path()).unwrap_err();
    assert!(matches!(err, GaitError::NonFiniteLoss { .. }), "{err}");
    let dump = fs::read_to_string(out.path().join("nonfinite_batch.txt")).unwrap();
    assert!(dump.contains("batch: ") && dump.contains('/'));
}
