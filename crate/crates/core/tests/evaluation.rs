mod common;

use aaface::datagen::{Pair, PairProtocol};
use aaface::evaluation::{
    ablation_records, ablation_table, attribute_accuracy, roc_curve, score_pairs, tar_at_far, verification_records,
    verification_table, AblationRow, OperatingPoint, TableRow, DEFAULT_FAR_TARGETS,
};
use aaface::{Error, Tensor};
use common::{random_scores, tar_oracle};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn separated_scores_reach_full_tar() {
    let p = tar_at_far(&[0.9, 0.8], &[0.1, 0.2], &[0.5]).unwrap();
    assert_eq!(p[0].tar, 1.0);
    assert_eq!(p[0].threshold, 0.2);
    assert_eq!(p[0].far, 0.5);
    assert!(!p[0].below_resolution);
}

#[test]
fn indistinguishable_scores_give_tar_equal_far() {
    let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
    let fars: Vec<f64> = (1..=100).map(|k| k as f64 / 100.0).collect();
    for p in tar_at_far(&scores, &scores, &fars).unwrap() {
        assert!((p.tar - p.far_target).abs() < 1e-12, "{p:?}");
    }
}

#[test]
fn below_resolution_targets_are_flagged() {
    let p = tar_at_far(&[0.9, 0.3], &[0.5, 0.95], &[1e-3, 0.5]).unwrap();
    assert!(p[0].below_resolution);
    assert_eq!(p[0].far, 0.0);
    assert_eq!(p[0].tar, 0.0);
    assert!(p[0].threshold > 0.95);
    assert!(!p[1].below_resolution);
    assert_eq!(p[1].tar, 0.5);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(matches!(tar_at_far(&[], &[0.1], &[0.1]), Err(Error::Contract(_))));
    assert!(matches!(tar_at_far(&[0.1], &[], &[0.1]), Err(Error::Contract(_))));
    assert!(tar_at_far(&[0.1], &[0.2], &[0.0]).is_err());
    assert!(tar_at_far(&[0.1], &[0.2], &[1.5]).is_err());
    assert!(tar_at_far(&[f64::NAN], &[0.2], &[0.1]).is_err());
}

#[test]
fn matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..40 {
        let (g, i) = random_scores(&mut rng, 2000);
        let fars = [1e-4, 1e-3, 0.01, 0.05, 0.1, 0.5, 1.0];
        for p in tar_at_far(&g, &i, &fars).unwrap() {
            let (t, tar) = tar_oracle(&g, &i, p.far_target);
            assert_eq!((p.threshold, p.tar), (t, tar));
        }
    }
}

#[test]
fn roc_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (g, i) = random_scores(&mut rng, 500);
    let roc = roc_curve(&g, &i).unwrap();
    for w in roc.windows(2) {
        assert!(w[0].threshold > w[1].threshold);
        assert!(w[0].far <= w[1].far && w[0].tar <= w[1].tar);
    }
    let last = roc.last().unwrap();
    assert_eq!((last.far, last.tar), (1.0, 1.0));
}

#[test]
fn one_hot_embeddings_give_ideal_scores() {
    let ids = [0usize, 0, 1, 1, 2];
    let mut data = vec![0.0f64; ids.len() * 3];
    for (r, &id) in ids.iter().enumerate() {
        data[r * 3 + id] = 1.0;
    }
    let emb = Tensor::new([5, 3], data).unwrap();
    let protocol = PairProtocol::new(vec![
        Pair { a: 0, b: 1, genuine: true },
        Pair { a: 2, b: 3, genuine: true },
        Pair { a: 0, b: 2, genuine: false },
        Pair { a: 1, b: 4, genuine: false },
    ])
    .unwrap();
    let (g, i) = score_pairs(&emb, &protocol).unwrap();
    assert_eq!(g, vec![1.0, 1.0]);
    assert_eq!(i, vec![0.0, 0.0]);
}

#[test]
fn identical_embeddings_score_one() {
    let emb = Tensor::new([2, 4], vec![0.3f32, -0.7, 1.1, 0.05, 0.3, -0.7, 1.1, 0.05]).unwrap();
    let protocol = PairProtocol::new(vec![Pair { a: 0, b: 1, genuine: true }, Pair { a: 1, b: 0, genuine: false }]).unwrap();
    let (g, _) = score_pairs(&emb, &protocol).unwrap();
    assert!((g[0] - 1.0).abs() < 1e-6);
}

#[test]
fn attribute_accuracy_cases() {
    let ones = Tensor::full([4, 2], 1.0f64);
    assert_eq!(attribute_accuracy(&ones, &[1; 8]).unwrap(), vec![1.0, 1.0]);
    let half = Tensor::full([4, 1], 0.5f64);
    assert_eq!(attribute_accuracy(&half, &[1, 0, 1, 0]).unwrap(), vec![0.5]);
    assert!(attribute_accuracy(&half, &[1, 0]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (n, k) = (57, 3);
    let p: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.0..1.0)).collect();
    let t: Vec<u8> = (0..n * k).map(|_| rng.gen_range(0..2)).collect();
    let acc = attribute_accuracy(&Tensor::new([n, k], p.clone()).unwrap(), &t).unwrap();
    for a in 0..k {
        let errors = (0..n).filter(|r| (p[r * k + a] >= 0.5) != (t[r * k + a] == 1)).count();
        assert_eq!(acc[a], 1.0 - errors as f64 / n as f64);
    }
}

fn point(far: f64, tar: f64) -> OperatingPoint {
    OperatingPoint {
        far_target: far,
        threshold: 0.5,
        tar,
        far,
        below_resolution: far < 1e-3,
    }
}

#[test]
fn report_formats() {
    let rows = vec![
        TableRow {
            label: "baseline".into(),
            points: DEFAULT_FAR_TARGETS.iter().map(|&f| point(f, 0.5)).collect(),
        },
        TableRow {
            label: "aai (r=8)".into(),
            points: DEFAULT_FAR_TARGETS.iter().map(|&f| point(f, 0.625)).collect(),
        },
    ];
    let table = verification_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("Methods"));
    assert!(lines[0].contains("1e-5") && lines[0].contains("1e-1"));
    assert!(lines[2].contains("62.50"));
    assert!(lines[1].contains("50.00*"));
    assert_eq!(lines[1].len(), lines[2].len());
    let records = verification_records(&rows);
    assert_eq!(records.lines().count(), 1 + 10);
    assert_eq!(records.lines().next().unwrap(), "label\tfar\tthreshold\ttar");

    let ablation = vec![AblationRow {
        label: "add".into(),
        per_seed: vec![vec![point(0.01, 0.5)], vec![point(0.01, 0.7)]],
    }];
    let s = ablation[0].summary();
    assert!((s[0].tar_mean - 0.6).abs() < 1e-12);
    assert!((s[0].tar_std - 0.1).abs() < 1e-12);
    assert_eq!(ablation[0].mean_tar_at(0.01), Some(s[0].tar_mean));
    assert!(ablation_table(&ablation).contains("60.00±10.00"));
    assert!(ablation_records(&ablation).lines().nth(1).unwrap().ends_with("\t2"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tar_is_monotone_and_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut g, mut i) = random_scores(&mut rng, 400);
        let fars: Vec<f64> = {
            let mut f: Vec<f64> = (0..8).map(|_| rng.gen_range(1e-4..1.0)).collect();
            f.sort_by(f64::total_cmp);
            f
        };
        let a = tar_at_far(&g, &i, &fars).unwrap();
        for w in a.windows(2) {
            prop_assert!(w[0].tar <= w[1].tar);
        }
        for p in &a {
            prop_assert!(p.far <= p.far_target);
        }
        g.shuffle(&mut rng);
        i.shuffle(&mut rng);
        let b = tar_at_far(&g, &i, &fars).unwrap();
        prop_assert_eq!(a, b);
    }
}
