//! Trains on generated blob scenes and reports test mAP.
//!
//! Usage: `cargo run --release --example smoke -- [iterations] [seed]`

use std::time::Instant;

use lepidet::detector::DetectorConfig;
use lepidet::eval::{evaluate, EvalConfig};
use lepidet::synth::{generate, SynthConfig};
use lepidet::trainer::{predict, train, PredictConfig, TrainConfig};

fn main() -> lepidet::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let iters: usize = args.next().map_or(2000, |a| a.parse().expect("iterations"));
    let seed: u64 = args.next().map_or(7, |a| a.parse().expect("seed"));
    let dir = tempfile::tempdir().expect("tempdir");
    let train_set = generate(
        &SynthConfig {
            images: 100,
            prefix: "train".into(),
            seed,
            ..Default::default()
        },
        dir.path(),
    )?;
    let test_set = generate(
        &SynthConfig {
            images: 50,
            prefix: "test".into(),
            seed,
            ..Default::default()
        },
        dir.path(),
    )?;
    let config = TrainConfig {
        total_iters: iters,
        seed,
        log_every: 100,
        ..Default::default()
    };
    let start = Instant::now();
    let outcome = train(&train_set, dir.path(), &config, &DetectorConfig::desk(3))?;
    println!("trained {iters} iterations in {:.1?}", start.elapsed());
    for r in &outcome.log {
        println!(
            "{:>6} {:.4} cls {:.4} reg {:.4} roi {:.4}",
            r.iteration, r.loss.total, r.loss.cls, r.loss.reg, r.loss.roi_cls
        );
    }
    let preds = predict(&outcome.checkpoint, &test_set, dir.path(), &PredictConfig::default(), 1)?;
    let report = evaluate(&preds.detections, &test_set, &EvalConfig::default())?;
    print!("{}", report.per_class_csv());
    println!("{}", report.summary());
    // Class-agnostic score separates localisation from classification errors.
    let mut agnostic_preds = preds.detections.clone();
    agnostic_preds.iter_mut().for_each(|d| d.species = "any".into());
    let mut agnostic_gt = test_set.clone();
    agnostic_gt
        .records
        .iter_mut()
        .flat_map(|r| r.boxes.iter_mut())
        .for_each(|a| a.species = "any".into());
    let agnostic = evaluate(&agnostic_preds, &agnostic_gt, &EvalConfig::default())?;
    println!("class-agnostic {}", agnostic.summary());
    proposal_recall(&outcome.checkpoint, &test_set, dir.path())?;
    println!("total {:.1?}", start.elapsed());
    Ok(())
}

/// For every ground truth: best overlap among all proposals and among the top 5.
fn proposal_recall(
    ck: &lepidet::detector::Checkpoint,
    set: &lepidet::dataset::DatasetManifest,
    root: &std::path::Path,
) -> lepidet::Result<()> {
    use lepidet::detector::{forward, prepare_image, propose};
    use lepidet::geometry::{iou, Rect};
    let det = &ck.detector;
    let anchors = det.anchors();
    let (mut any, mut top5, mut n) = (0, 0, 0);
    let mut ious = Vec::new();
    for r in &set.records {
        let img = lepidet::image::read_ppm(root.join(&r.path))?;
        let (input, sx, sy) = prepare_image(&img, det.input_size);
        let fwd = forward(&ck.params, det, &input)?;
        let props = propose(&fwd, &anchors, det, 0.7, 300);
        for a in &r.boxes {
            let g = Rect::from(a.bbox).scale(sx, sy);
            let best = props.iter().map(|p| iou(&p.rect, &g)).fold(0.0, f64::max);
            let best5 = props.iter().take(5).map(|p| iou(&p.rect, &g)).fold(0.0, f64::max);
            n += 1;
            any += (best > 0.5) as usize;
            top5 += (best5 > 0.5) as usize;
            ious.push(best5);
        }
    }
    ious.sort_by(f64::total_cmp);
    println!(
        "proposal recall: any {any}/{n}  top5 {top5}/{n}  median top5 iou {:.3}",
        ious[ious.len() / 2]
    );
    Ok(())
}
