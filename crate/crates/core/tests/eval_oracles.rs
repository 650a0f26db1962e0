mod common;

use lepidet::eval::{ap_blocks, ap_voc2010, evaluate, mean_ap, ApMethod, ApResult, EvalConfig};
use lepidet::rng::SplitMix64;

#[test]
fn voc_area_matches_envelope_oracle_and_dense_blocks() {
    let mut rng = SplitMix64::new(2024);
    let mut classes = 0;
    for _ in 0..500 {
        let (dets, gt) = common::random_eval_set(&mut rng);
        let report = evaluate(&dets, &gt, &EvalConfig::default()).unwrap();
        for c in &report.classes {
            let oracle = common::envelope_area_oracle(&c.curve);
            assert!((c.ap - oracle).abs() < 1e-12, "{} vs {oracle}", c.ap);
            assert!((ap_blocks(&c.curve, 10_000) - ap_voc2010(&c.curve)).abs() < 1e-3);
            classes += 1;
        }
        let mean = report.classes.iter().map(|c| c.ap).sum::<f64>() / report.classes.len() as f64;
        assert!((report.map.map - mean).abs() < 1e-15);
    }
    assert!(classes >= 500);
}

#[test]
fn method_choice_only_changes_the_area() {
    let mut rng = SplitMix64::new(8);
    for _ in 0..50 {
        let (dets, gt) = common::random_eval_set(&mut rng);
        let voc = evaluate(&dets, &gt, &EvalConfig::default()).unwrap();
        let blocks = evaluate(
            &dets,
            &gt,
            &EvalConfig {
                method: ApMethod::Blocks(11),
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in voc.classes.iter().zip(&blocks.classes) {
            assert_eq!(a.curve, b.curve);
            assert_eq!(a.operating, b.operating);
        }
    }
}

#[test]
fn absent_class_scores_zero() {
    let mut rng = SplitMix64::new(1);
    let (_, gt) = common::random_eval_set(&mut rng);
    let report = evaluate(&[], &gt, &EvalConfig::default()).unwrap();
    assert!(report.classes.iter().all(|c| c.ap == 0.0));
    assert_eq!(report.map.map, 0.0);
}

#[test]
fn strictly_increasing_score_maps_keep_every_ap() {
    let mut rng = SplitMix64::new(77);
    for _ in 0..200 {
        let (dets, gt) = common::random_eval_set(&mut rng);
        let squashed: Vec<_> = dets
            .iter()
            .cloned()
            .map(|mut d| {
                d.score = 0.05 + 0.9 * d.score.powi(3);
                d
            })
            .collect();
        let a = evaluate(&dets, &gt, &EvalConfig::default()).unwrap();
        let b = evaluate(&squashed, &gt, &EvalConfig::default()).unwrap();
        for (x, y) in a.classes.iter().zip(&b.classes) {
            assert_eq!(x.ap, y.ap);
            assert_eq!(x.curve, y.curve);
        }
    }
}

#[test]
fn mean_over_94_classes_ignores_order() {
    let results: Vec<ApResult> = (0..94)
        .map(|i| ApResult {
            class_id: common::eco_species(i),
            ap: ((i * 37) % 101) as f64 / 100.0,
            method: ApMethod::Voc2010,
        })
        .collect();
    let expected = (0..94).map(|i| ((i * 37) % 101) as f64).sum::<f64>() / 100.0 / 94.0;
    let forward = mean_ap(results.clone()).unwrap().map;
    let mut reversed = results;
    reversed.reverse();
    let backward = mean_ap(reversed).unwrap().map;
    assert!((forward - expected).abs() < 1e-12);
    assert!((forward - backward).abs() < 1e-12);
}
