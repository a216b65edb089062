mod common;

use std::collections::BTreeSet;

use fsaug::dataset::{augment_image, make_synthetic, sample_support, split_classes, AugmentationSpec, ImageShape};
use fsaug::harness::{aggregate, read_records, stage, ExperimentRecord, RecordFile, RunConfig};
use fsaug::metrics::{fit_gaussian, frechet_distance, knn_precision_recall};
use fsaug::objectives::mixup_batch;
use fsaug_autograd::Tensor;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn split_is_a_disjoint_deterministic_partition(
        n_classes in 3usize..20, per_class in 2usize..30, seed in any::<u64>(), frac in 0.05f64..0.95,
    ) {
        let ds = make_synthetic(n_classes, per_class, 4, 0).unwrap();
        let n_train = n_classes / 2;
        let n_target = n_classes - n_train;
        let p = split_classes(&ds, seed, n_train, n_target, frac).unwrap();
        prop_assert_eq!(&p, &split_classes(&ds, seed, n_train, n_target, frac).unwrap());
        let train: BTreeSet<_> = p.train_classes.iter().copied().collect();
        let target: BTreeSet<_> = p.target_classes.iter().copied().collect();
        prop_assert_eq!(train.len(), n_train);
        prop_assert_eq!(target.len(), n_target);
        prop_assert!(train.is_disjoint(&target));
        for &c in &p.target_classes {
            let v = &p.valid_indices[&c];
            let t = &p.test_indices[&c];
            prop_assert!(!v.is_empty() && !t.is_empty());
            let mut all: Vec<usize> = v.iter().chain(t).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all.as_slice(), ds.class_indices(c));
            let target_valid = (frac * per_class as f64).round().clamp(1.0, per_class as f64 - 1.0) as usize;
            prop_assert_eq!(v.len(), target_valid);
        }
        prop_assert!(p.train_examples(&ds).iter().all(|&i| train.contains(&ds.label(i))));
    }

    #[test]
    fn support_draws_k_valid_examples_per_class(k in 1usize..8, seed in any::<u64>(), split_seed in 0u64..50) {
        let ds = make_synthetic(6, 12, 4, 1).unwrap();
        let p = split_classes(&ds, split_seed, 3, 3, 0.8).unwrap();
        let s = sample_support(&p, &ds, k, seed).unwrap();
        prop_assert_eq!(&s, &sample_support(&p, &ds, k, seed).unwrap());
        prop_assert_eq!(s.classes(), p.target_classes.clone());
        for (c, idx) in &s.entries {
            prop_assert_eq!(idx.len(), k);
            let uniq: BTreeSet<_> = idx.iter().collect();
            prop_assert_eq!(uniq.len(), k);
            prop_assert!(idx.iter().all(|i| p.valid_indices[c].contains(i)));
        }
        prop_assert!(sample_support(&p, &ds, 11, seed).is_err());
    }

    #[test]
    fn augmentation_stays_in_range(seed in any::<u64>(), min_scale in 0.05f64..=1.0, rot in 0.0f64..45.0) {
        let mut r = common::rng(seed);
        let shape = ImageShape::gray(8);
        let img: Vec<f32> = (0..shape.numel()).map(|_| r.random_range(0.0..=1.0)).collect();
        let out = augment_image(&img, shape, &AugmentationSpec { min_scale, max_rotation_degrees: rot }, &mut r);
        prop_assert_eq!(out.len(), img.len());
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_augmentation_is_a_no_op(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let shape = ImageShape::gray(6);
        let img: Vec<f32> = (0..shape.numel()).map(|_| r.random_range(0.0..=1.0)).collect();
        let out = augment_image(&img, shape, &AugmentationSpec::crop_only(1.0), &mut r);
        for (a, b) in out.iter().zip(&img) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mixup_keeps_labels_on_the_simplex(seed in any::<u64>(), batch in 2usize..12, beta in 0.05f64..5.0) {
        let mut r = common::rng(seed);
        let classes = 3;
        let x = Tensor::from_fn(&[batch, 4], |_| r.random_range(0.0f32..1.0));
        let y = Tensor::from_fn(&[batch, classes], |i| if i % classes == (i / classes) % classes { 1.0 } else { 0.0 });
        let m = mixup_batch(&x, &y, beta, &mut r).unwrap();
        prop_assert!(m.lambdas.iter().all(|l| (0.0..=1.0).contains(l)));
        let mut perm = m.permutation.clone();
        perm.sort_unstable();
        prop_assert_eq!(perm, (0..batch).collect::<Vec<_>>());
        for i in 0..batch {
            let row: f32 = m.y.data()[i * classes..(i + 1) * classes].iter().sum();
            prop_assert!((row - 1.0).abs() < 1e-5);
        }
        prop_assert!(m.x.data().iter().all(|v| (-1e-6..=1.0 + 1e-6).contains(v)));
    }

    #[test]
    fn fid_is_a_nonnegative_symmetric_divergence(seed in any::<u64>(), d in 1usize..5, shift in -3.0f64..3.0) {
        let mut r = common::rng(seed);
        let a: Vec<Vec<f64>> = (0..40).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..30).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0) * 2.0 + shift).collect()).collect();
        let (ga, gb) = (fit_gaussian(&common::features(&a)).unwrap(), fit_gaussian(&common::features(&b)).unwrap());
        let ab = frechet_distance(&ga, &gb).unwrap();
        let ba = frechet_distance(&gb, &ga).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!(common::rel_err(ab, ba) < 1e-8 || (ab - ba).abs() < 1e-10);
        prop_assert!(frechet_distance(&ga, &ga).unwrap() < 1e-9);
    }

    #[test]
    fn precision_recall_are_fractions(seed in any::<u64>(), n in 5usize..25, m in 5usize..25, k in 1usize..4) {
        let mut r = common::rng(seed);
        let a: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..m).map(|_| (0..2).map(|_| r.random_range(-0.5..1.5)).collect()).collect();
        let pr = knn_precision_recall(&common::features(&a), &common::features(&b), k).unwrap();
        prop_assert!((0.0..=1.0).contains(&pr.precision) && (0.0..=1.0).contains(&pr.recall));
        let same = knn_precision_recall(&common::features(&a), &common::features(&a), k).unwrap();
        prop_assert_eq!((same.precision, same.recall), (1.0, 1.0));
    }

    #[test]
    fn records_roundtrip_through_csv(
        rows in prop::collection::vec((any::<u64>(), prop::option::of(1usize..100), prop::option::of(0.0f64..1.0), "[a-z,\" ]{0,12}"), 1..8),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let file = RecordFile::new(dir.path().join("r.csv"));
        let records: Vec<ExperimentRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (seed, k, acc, err))| ExperimentRecord {
                cell_id: format!("cell-{i}"),
                status: if err.is_empty() { "ok".into() } else { "failed".into() },
                stage: stage::FINETUNE_CLASSIFIER.into(),
                dataset_seed: seed,
                k,
                valid_accuracy: acc,
                error: (!err.is_empty()).then_some(err),
                ..Default::default()
            })
            .collect();
        for r in &records {
            file.append(r).unwrap();
        }
        prop_assert_eq!(&file.read().unwrap(), &records);
        prop_assert_eq!(read_records(&std::fs::read(file.path()).unwrap()).unwrap(), records);
    }

    #[test]
    fn aggregate_mean_lies_within_the_seed_range(accs in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let rows: Vec<ExperimentRecord> = accs
            .iter()
            .enumerate()
            .map(|(s, &a)| ExperimentRecord {
                cell_id: format!("seed-{s}/k-5/test/gan"),
                status: "ok".into(),
                stage: stage::TEST.into(),
                dataset_seed: s as u64,
                k: Some(5),
                regime: Some("gan".into()),
                test_accuracy: Some(a),
                ..Default::default()
            })
            .collect();
        let agg = aggregate(&rows).unwrap();
        prop_assert_eq!(agg.len(), 1);
        let lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(agg[0].mean >= lo - 1e-12 && agg[0].mean <= hi + 1e-12);
        prop_assert!(agg[0].std >= 0.0 && agg[0].std <= (hi - lo) / 2.0 + 1e-12);
        prop_assert_eq!(agg[0].seeds, accs.len());
    }

    #[test]
    fn overrides_set_nested_values(steps in 1usize..100_000, lr in 1e-6f64..1.0, k in prop::collection::vec(1usize..50, 1..4)) {
        let k_json = serde_json::to_string(&k).unwrap();
        let c = RunConfig::default()
            .with_overrides(&[format!("gan_pretrain.max_steps={steps}"), format!("gan_finetune.learning_rate={lr}"), format!("k={k_json}")])
            .unwrap();
        prop_assert_eq!(c.gan_pretrain.max_steps, steps);
        prop_assert_eq!(c.gan_finetune.learning_rate, lr);
        prop_assert_eq!(&c.k, &k);
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn unknown_override_key_is_rejected() {
    assert!(RunConfig::default().with_overrides(&["gan_pretrain.nonexistent=1"]).is_err());
    assert!(RunConfig::default().with_overrides(&["no_equals_sign"]).is_err());
}
