use super::*;
use crate::models::{build_toy, Variant};
use crate::shape;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

#[test]
fn diagonal_and_single_cases() {
    let m = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
    assert_eq!(m.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
    let met = prf1(&m);
    assert!(met
        .per_class
        .iter()
        .all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
    assert_eq!(met.accuracy, 1.0);

    let m = confusion(&[1], &[0], 2).unwrap();
    assert_eq!(m.counts, vec![vec![0, 1], vec![0, 0]]);
    let met = prf1(&m);
    assert!(met.per_class[0].precision_undefined && !met.per_class[0].recall_undefined);
    assert!(met.per_class[1].recall_undefined);
    assert_eq!(met.per_class[1].precision, 0.0);
}

#[test]
fn confusion_errors() {
    assert_eq!(
        confusion(&[0], &[0, 1], 2),
        Err(MetricError::Length { pred: 1, truth: 2 })
    );
    assert_eq!(
        confusion(&[2], &[0], 2),
        Err(MetricError::Label { label: 2, classes: 2 })
    );
}

#[test]
fn argmax_ties_go_low() {
    let s = Tensor::from_vec(shape![3, 3], vec![0.2, 0.4, 0.4, 0.5, 0.5, 0.0, 0.1, 0.2, 0.7]).unwrap();
    assert_eq!(argmax_rows(&s), [1, 0, 2]);
}

#[test]
fn equal_precision_and_recall_give_that_f1() {
    // class 0: tp 2, fp 1, fn 1
    let m = confusion(&[0, 0, 0, 1, 1], &[0, 0, 1, 0, 1], 2).unwrap();
    let c = &prf1(&m).per_class[0];
    assert_eq!(c.precision, c.recall);
    assert!((c.f1 - c.precision).abs() < 1e-15);
}

#[test]
fn metrics_match_brute_force_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for _ in 0..100 {
        let k = rng.random_range(2..6);
        let n = rng.random_range(1..200);
        let truth = random_labels(&mut rng, n, k);
        let pred = random_labels(&mut rng, n, k);
        let m = confusion(&pred, &truth, k).unwrap();
        let met = prf1(&m);
        let mut correct = 0;
        for c in 0..k {
            let tp = (0..n).filter(|&i| pred[i] == c && truth[i] == c).count();
            let fp = (0..n).filter(|&i| pred[i] == c && truth[i] != c).count();
            let fnn = (0..n).filter(|&i| pred[i] != c && truth[i] == c).count();
            for a in 0..k {
                assert_eq!(
                    m.counts[c][a] as usize,
                    (0..n).filter(|&i| truth[i] == c && pred[i] == a).count()
                );
            }
            let p = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let r = if tp + fnn == 0 {
                0.0
            } else {
                tp as f64 / (tp + fnn) as f64
            };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            let got = &met.per_class[c];
            assert_eq!((got.precision, got.recall, got.f1), (p, r, f));
            correct += tp;
        }
        assert_eq!(met.accuracy, correct as f64 / n as f64);
        assert_eq!(m.row_sum(0) as usize, truth.iter().filter(|&&t| t == 0).count());
        assert_eq!(m.total() as usize, n);
    }
}

fn mann_whitney(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_matches_pairwise_statistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for trial in 0..100 {
        let n = rng.random_range(2..120);
        // coarse scores in half the trials to exercise ties
        let levels = if trial % 2 == 0 { 5.0 } else { 1e9 };
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random::<f64>() * levels).floor() / levels)
            .collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        let c = roc_curve(&scores, &pos).unwrap();
        assert!((c.auc - mann_whitney(&scores, &pos)).abs() < 1e-9);
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
    }
}

#[test]
fn perfect_and_inverted_scores() {
    let truth = [0, 0, 1, 1, 2];
    let perfect = Tensor::from_vec(
        shape![5, 3],
        vec![
            0.9, 0.1, 0.0, 0.8, 0.1, 0.1, 0.1, 0.7, 0.2, 0.0, 0.9, 0.1, 0.2, 0.2, 0.6,
        ],
    )
    .unwrap();
    let roc = roc_auc(&perfect, &truth).unwrap();
    assert!(roc.per_class.iter().all(|c| c.as_ref().unwrap().auc == 1.0));
    assert_eq!(roc.macro_auc, Some(1.0));
    let inverted = perfect.map(|v| 1.0 - v);
    let roc = roc_auc(&inverted, &truth).unwrap();
    assert!(roc.per_class.iter().all(|c| c.as_ref().unwrap().auc == 0.0));
}

#[test]
fn class_without_positives_is_skipped() {
    let s = Tensor::from_vec(shape![3, 3], vec![0.5, 0.3, 0.2, 0.1, 0.8, 0.1, 0.6, 0.2, 0.2]).unwrap();
    let roc = roc_auc(&s, &[0, 1, 0]).unwrap();
    assert!(roc.per_class[2].is_none());
    assert_eq!(roc.macro_auc, Some(1.0));
    assert!(roc_auc(&s, &[0, 1]).is_err());
}

fn toy() -> (crate::models::BuiltModel, crate::params::ParamStore, Tensor) {
    let m = build_toy(Variant::M4, 3).unwrap();
    let p = crate::params::ParamStore::init(&m.graph, 5);
    let d = crate::data::synthesize(1, 5);
    let refs: Vec<&Tensor> = d.images.iter().collect();
    (m, p, Tensor::stack(&refs).unwrap())
}

#[test]
fn grad_cam_shape_and_range() {
    let (m, p, batch) = toy();
    let name = m.graph.node(m.cam_node).name.clone();
    let maps = grad_cam_batch(&m.graph, &p, &batch, &[0, 1, 2], &name).unwrap();
    let dims = m.graph.shape(m.cam_node).dims();
    assert_eq!(maps.len(), 3);
    for map in &maps {
        assert_eq!(map.dims(), &dims[..2]);
        assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // batched and single-sample maps agree
    let single = grad_cam(&m.graph, &p, &batch.sample(1).unwrap(), 1, &name).unwrap();
    for (a, b) in single.data().iter().zip(maps[1].data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn zero_score_gradient_gives_zero_map() {
    let (m, mut p, batch) = toy();
    let k = p.get_mut("dense_3/kernel").unwrap();
    k.data_mut().fill(0.0);
    let name = m.graph.node(m.cam_node).name.clone();
    let maps = grad_cam_batch(&m.graph, &p, &batch, &[0, 1, 2], &name).unwrap();
    assert!(maps.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn grad_cam_errors() {
    let (m, p, batch) = toy();
    assert!(matches!(
        grad_cam_batch(&m.graph, &p, &batch, &[0, 1, 2], "nope"),
        Err(CamError::MissingNode(_))
    ));
    assert!(matches!(
        grad_cam_batch(&m.graph, &p, &batch, &[0, 1, 2], "dense_2"),
        Err(CamError::NotSpatial(_))
    ));
    let name = m.graph.node(m.cam_node).name.clone();
    assert!(matches!(
        grad_cam_batch(&m.graph, &p, &batch, &[0, 1, 3], &name),
        Err(CamError::Class { .. })
    ));
    assert!(matches!(
        grad_cam_batch(&m.graph, &p, &batch, &[0], &name),
        Err(CamError::Length { .. })
    ));
}

fn sample_report(history: bool) -> EvalReport {
    let truth = [0, 1, 2, 2, 1, 0];
    let scores = Tensor::from_vec(
        shape![6, 3],
        vec![
            0.7,
            0.2,
            0.1,
            0.1,
            0.5,
            0.4,
            0.2,
            0.2,
            0.6,
            0.3,
            0.4,
            0.3,
            0.3,
            0.3,
            0.4,
            0.1 / 3.0,
            0.9,
            0.2 / 3.0,
        ],
    )
    .unwrap();
    let pred = argmax_rows(&scores);
    let m = confusion(&pred, &truth, 3).unwrap();
    let mut r = EvalReport::new(
        vec!["a".into(), "b".into(), "c".into()],
        m.clone(),
        prf1(&m),
        roc_auc(&scores, &truth).unwrap(),
    );
    if history {
        r.history = (1..=3)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / e as f64,
                train_accuracy: 0.3 * e as f64,
                val_loss: 1.1 / e as f64,
                val_accuracy: 0.25 * e as f64,
            })
            .collect();
    }
    r
}

#[test]
fn report_round_trips_bit_exactly() {
    let r = sample_report(true);
    let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(r.to_json().unwrap().contains("\"schema\": 1"));
}

#[test]
fn emitted_files() {
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&sample_report(false), dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    assert!(!dir.path().join("curves.svg").exists());
    let roc = std::fs::read_to_string(dir.path().join("roc.svg")).unwrap();
    assert_eq!(roc.matches("<polyline").count(), 3);
    assert!(roc.starts_with("<?xml") && roc.contains("version=\"1.1\""));
    let csv = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv
        .lines()
        .all(|l| l.split(',').count() == 3 && l.split(',').all(|v| v.parse::<u64>().is_ok())));

    let dir = tempfile::tempdir().unwrap();
    emit_report(&sample_report(true), dir.path()).unwrap();
    let curves = std::fs::read_to_string(dir.path().join("curves.svg")).unwrap();
    assert_eq!(curves.matches("<polyline").count(), 4);
}

proptest! {
    #[test]
    fn accuracy_is_trace_over_total_and_micro_recall(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = confusion(&pred, &truth, 4).unwrap();
        let met = prf1(&m);
        prop_assert_eq!(met.accuracy, m.trace() as f64 / m.total() as f64);
        let tp: u64 = m.trace();
        let tp_fn: u64 = (0..4).map(|k| m.row_sum(k)).sum();
        prop_assert_eq!(tp as f64 / tp_fn as f64, met.accuracy);
        for c in &met.per_class {
            for v in [c.precision, c.recall, c.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms(scores in prop::collection::vec(0.0f64..1.0, 4..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.5)).collect();
        pos[0] = true;
        pos[1] = false;
        let a = roc_curve(&scores, &pos).unwrap().auc;
        let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() * 2.0 + 1.0).collect();
        let b = roc_curve(&t, &pos).unwrap().auc;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
