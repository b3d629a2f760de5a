mod support;

use gaitlab::dataset::DatasetIndex;
use gaitlab::evaluation::*;
use gaitlab::hmrnet::Embedding;
use gaitlab::synthetic::generate_dataset;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::rank_of_true_match;

fn dm(rows: &[&[f64]], probes: &[u32], gallery: &[u32]) -> DistanceMatrix {
    DistanceMatrix::new(rows.concat(), probes.to_vec(), gallery.to_vec()).unwrap()
}

#[test]
fn hand_ranked_toy_matrices() {
    let m = dm(&[&[0.1, 0.5, 0.9]], &[0], &[0, 1, 2]);
    assert_eq!(rank_k(&m, 1), 100.0);
    let m = dm(&[&[0.5, 0.1, 0.9]], &[0], &[0, 1, 2]);
    assert_eq!(rank_k(&m, 1), 0.0);
    assert_eq!(rank_k(&m, 2), 100.0);
    // true-match ranks 1, 1, 2, 4
    let m = dm(
        &[
            &[0.1, 0.2, 0.3, 0.4],
            &[0.9, 0.1, 0.3, 0.4],
            &[0.1, 0.6, 0.3, 0.4],
            &[0.1, 0.2, 0.3, 0.4],
        ],
        &[0, 1, 2, 3],
        &[0, 1, 2, 3],
    );
    assert_eq!(mean_average_precision(&m), 68.75);
    assert_eq!(rank_k(&m, 1), 50.0);
    assert_eq!(rank_k(&m, 2), 75.0);
    assert_eq!(rank_k(&m, 4), 100.0);
    let all_second = dm(&[&[0.2, 0.1], &[0.1, 0.2]], &[0, 1], &[0, 1]);
    assert_eq!(mean_average_precision(&all_second), 50.0);
}

#[test]
fn distance_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (p, d) = (16, 256);
    let a: Vec<f64> = (0..p * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..p * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut expect = 0.0;
    for s in 0..p {
        let mut acc = 0.0;
        for k in 0..d {
            acc += (a[s * d + k] - b[s * d + k]).powi(2);
        }
        expect += acc.sqrt();
    }
    expect /= p as f64;
    let ea = Embedding { strips: p, dim: d, data: a };
    let eb = Embedding { strips: p, dim: d, data: b };
    assert!((distance(&ea, &eb).unwrap() - expect).abs() < 1e-9);
}

fn matrix_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<u32>, usize)> {
    (2usize..8, 1usize..10).prop_flat_map(|(g, p)| {
        (
            prop::collection::vec(0.0f64..10.0, g * p),
            prop::collection::vec(0u32..g as u32, p),
            Just(g),
        )
    })
}

fn build((values, probes, g): (Vec<f64>, Vec<u32>, usize)) -> DistanceMatrix {
    DistanceMatrix::new(values, probes, (0..g as u32).collect()).unwrap()
}

proptest! {
    #[test]
    fn rank_k_is_monotone_and_saturates(m in matrix_strategy()) {
        let m = build(m);
        let mut prev = 0.0;
        for k in 1..=m.cols {
            let r = rank_k(&m, k);
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(rank_k(&m, m.cols), 100.0);
    }

    #[test]
    fn map_is_reciprocal_rank_and_bounded(m in matrix_strategy()) {
        let m = build(m);
        let expect = (0..m.rows)
            .map(|i| 1.0 / rank_of_true_match(m.row(i), &m.gallery_labels, m.probe_labels[i]) as f64)
            .sum::<f64>() * 100.0 / m.rows as f64;
        let map = mean_average_precision(&m);
        prop_assert!((map - expect).abs() < 1e-9);
        let r1 = rank_k(&m, 1);
        prop_assert!(map <= r1 + (100.0 - r1) * 0.5 + 1e-9);
    }

    #[test]
    fn metrics_ignore_increasing_transforms(m in matrix_strategy()) {
        let m = build(m);
        let t = DistanceMatrix::new(
            m.values.iter().map(|v| (v * 3.0).exp() + 0.5 * v).collect(),
            m.probe_labels.clone(),
            m.gallery_labels.clone(),
        ).unwrap();
        for k in 1..=m.cols {
            prop_assert_eq!(rank_k(&m, k), rank_k(&t, k));
        }
        prop_assert_eq!(mean_average_precision(&m), mean_average_precision(&t));
    }

    #[test]
    fn gallery_order_is_irrelevant_for_distinct_distances(m in matrix_strategy(), shift in 0usize..8) {
        let m = build(m);
        let mut sorted = m.values.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
        let perm: Vec<usize> = (0..m.cols).map(|j| (j + shift) % m.cols).collect();
        let values = (0..m.rows).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| m.row(i)[j]).collect();
        let labels = perm.iter().map(|&j| m.gallery_labels[j]).collect();
        let p = DistanceMatrix::new(values, m.probe_labels.clone(), labels).unwrap();
        for k in 1..=m.cols {
            prop_assert_eq!(rank_k(&m, k), rank_k(&p, k));
        }
        prop_assert!((mean_average_precision(&m) - mean_average_precision(&p)).abs() < 1e-9);
    }
}

fn dataset(subjects: u32, seqs: u32, frames: usize) -> (tempfile::TempDir, DatasetIndex) {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_dataset(subjects, seqs, frames, dir.path(), 21).unwrap();
    (dir, index)
}

fn all_subjects(index: &DatasetIndex) -> Vec<u32> {
    index.subjects.iter().map(|s| s.subject_id).collect()
}

fn opts(index: &DatasetIndex, seed: u64) -> EvalOptions {
    EvalOptions {
        subjects: all_subjects(index),
        ..EvalOptions::test_split(index, seed)
    }
}

#[test]
fn split_is_seeded_and_covers_every_sequence() {
    let (_dir, index) = dataset(5, 3, 2);
    let subjects = all_subjects(&index);
    let a = build_split(&index, &subjects, None, 4).unwrap();
    assert_eq!(a, build_split(&index, &subjects, None, 4).unwrap());
    assert_eq!(a.gallery.len(), 5);
    assert_eq!(a.probes.len(), 10);
    let picks = |s: &GalleryProbeSplit| s.gallery.iter().map(|r| r.sequence_id).collect::<Vec<_>>();
    assert!((0..20).any(|seed| picks(&build_split(&index, &subjects, None, seed).unwrap()) != picks(&a)));
    let single = build_split(&index, &subjects, Some(&[1]), 4).unwrap();
    assert_eq!(single.gallery.len(), 5);
    assert!(single.probes.is_empty());
}

#[test]
fn oracle_stub_is_perfect_and_report_is_complete() {
    let (dir, index) = dataset(4, 3, 6);
    let model = OracleStub(StubSpec { dim: 16 });
    let report = evaluate(&model, &index, &opts(&index, 0)).unwrap();
    assert_eq!((report.rank1, report.rank5, report.map), (100.0, 100.0, 100.0));
    assert_eq!(report.summary_line(), "rank1=100.00 rank5=100.00 map=100.00");
    let frames: Vec<usize> = report.frames_sweep.iter().map(|e| e.frames).collect();
    assert_eq!(frames, SWEEP_FRAMES);
    assert!(report.frames_sweep.iter().all(|e| e.rank1.is_finite()));
    let path = dir.path().join("report.json");
    report.write(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["rank1", "rank5", "map", "subsets", "frames_sweep", "split_seed", "checkpoint_id"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert!(json["subsets"].get("cross_view").is_some() && json["subsets"].get("night").is_some());
    let csv = std::fs::read_to_string(path.with_extension("csv")).unwrap();
    assert!(csv.starts_with("frames,rank1\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn constant_stub_sits_at_tie_break_baseline() {
    let (_dir, index) = dataset(5, 3, 2);
    let model = ConstantStub(StubSpec { dim: 4 });
    for seed in 0..20 {
        let o = EvalOptions { sweep: false, ..opts(&index, seed) };
        let r = evaluate(&model, &index, &o).unwrap();
        assert!(r.rank1 <= 100.0 / 5.0 * (1.0 + 1e-9), "seed {seed}: {}", r.rank1);
    }
}

#[test]
fn empty_subsets_are_absent() {
    let (_dir, mut index) = dataset(4, 3, 2);
    for s in &mut index.subjects {
        for q in &mut s.sequences {
            q.night = false;
        }
    }
    let model = OracleStub(StubSpec { dim: 16 });
    let o = EvalOptions { subset: SubsetFilter::Night, sweep: false, ..opts(&index, 0) };
    let r = evaluate(&model, &index, &o).unwrap();
    assert!(r.subsets.night.is_none());
    assert!(r.subsets.cross_view.is_none());
    let json = serde_json::to_value(&r).unwrap();
    assert!(json["subsets"]["night"].is_null());
}

#[test]
fn subsets_follow_metadata() {
    let (_dir, mut index) = dataset(4, 3, 2);
    for s in &mut index.subjects {
        for q in &mut s.sequences {
            q.night = q.sequence_id == 2;
        }
    }
    let model = OracleStub(StubSpec { dim: 16 });
    let o = EvalOptions { sweep: false, ..opts(&index, 0) };
    let r = evaluate(&model, &index, &o).unwrap();
    let split = build_split(&index, &all_subjects(&index), None, 0).unwrap();
    let night = split.probes.iter().filter(|p| p.sequence_id == 2).count();
    assert_eq!(r.subsets.night.as_ref().map(|m| m.count), (night > 0).then_some(night));
    let expect_cv = split
        .probes
        .iter()
        .filter(|p| {
            let view = |seq: u32| {
                index.subject(p.subject_id).unwrap().sequences.iter().find(|q| q.sequence_id == seq).unwrap().view_angle_deg
            };
            let g = split.gallery.iter().find(|g| g.subject_id == p.subject_id).unwrap();
            let d = (view(p.sequence_id) - view(g.sequence_id)).rem_euclid(360.0);
            (d.min(360.0 - d) - 90.0).abs() <= 15.0
        })
        .count();
    assert_eq!(r.subsets.cross_view.map_or(0, |m| m.count), expect_cv);
}

#[test]
fn stub_checkpoints_load_by_kind() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("oracle.bin");
    stub_checkpoint(ORACLE_KIND, 8).save(&path).unwrap();
    assert!(load_embedder(&path).is_ok());
    let mut bad = stub_checkpoint("mystery", 8);
    bad.kind = "mystery".into();
    bad.save(&path).unwrap();
    assert!(load_embedder(&path).is_err());
}
