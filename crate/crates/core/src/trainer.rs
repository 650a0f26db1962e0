//! SGD training loop and inference.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::detector::{
    self, loss_and_grad, pool_roi, prepare_image, propose, Checkpoint, DetectorConfig, DetectorParams, LossBreakdown,
    LossTargets, RoiTarget, RpnLossConfig, RpnTarget,
};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::{self, iou, nms, AnchorLabel, Rect, ScoredBox};
use crate::image::read_ppm;
use crate::rng::{derive_seed, mix64, SplitMix64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    /// Iteration at which the learning rate drops; `None` means 70% of
    /// `total_iters`.
    pub lr_step: Option<usize>,
    pub step_factor: f64,
    /// Anchors sampled per image.
    pub rpn_batch: usize,
    pub positive_fraction: f64,
    /// Anchor labelling thresholds.
    pub anchor_hi: f64,
    pub anchor_lo: f64,
    pub lambda: f64,
    /// Regions per image for the classifier loss.
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    /// Minimum overlap for a region to take a ground truth's class.
    pub roi_fg_iou: f64,
    /// Regions whose best overlap is below this are background; those
    /// between it and `roi_fg_iou` are not sampled.
    pub roi_bg_iou: f64,
    /// Weight of the mean ROI cross-entropy in the total loss.
    pub roi_weight: f64,
    pub proposal_nms: f64,
    pub train_top_n: usize,
    /// Loss log granularity in iterations.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            total_iters: 100_000,
            lr_step: None,
            step_factor: 0.1,
            rpn_batch: 256,
            positive_fraction: 0.5,
            anchor_hi: 0.7,
            anchor_lo: 0.3,
            lambda: 10.0,
            roi_batch: 32,
            roi_positive_fraction: 0.25,
            roi_fg_iou: 0.5,
            roi_bg_iou: 0.4,
            roi_weight: 8.0,
            proposal_nms: 0.7,
            train_top_n: 64,
            log_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_step(&self) -> usize {
        self.lr_step.unwrap_or(self.total_iters * 7 / 10)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        for (name, v) in [
            ("initial_lr", self.initial_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("step_factor", self.step_factor),
            ("roi_weight", self.roi_weight),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return bad(format!(
                "positive_fraction must be in (0, 1], got {}",
                self.positive_fraction
            ));
        }
        if !(self.roi_positive_fraction > 0.0 && self.roi_positive_fraction <= 1.0) {
            return bad("roi_positive_fraction must be in (0, 1]".into());
        }
        if self.anchor_hi <= self.anchor_lo {
            return bad("anchor_hi must exceed anchor_lo".into());
        }
        if !(self.roi_bg_iou > 0.0 && self.roi_bg_iou <= self.roi_fg_iou) {
            return bad("roi_bg_iou must be in (0, roi_fg_iou]".into());
        }
        if self.rpn_batch == 0 || self.roi_batch == 0 || self.log_every == 0 {
            return bad("batch sizes and log_every must be positive".into());
        }
        Ok(())
    }
}

/// Step schedule: `initial_lr` before `lr_step`, scaled by `step_factor`
/// from then on.
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    if iteration < config.lr_step() {
        config.initial_lr
    } else {
        config.initial_lr * config.step_factor
    }
}

/// Picks up to `batch` anchors: at most `floor(pos_fraction * batch)`
/// positives, the rest negatives, each drawn by seeded shuffle. Ignored
/// anchors are never chosen. Returns indices in ascending order.
pub fn sample_rpn_minibatch(labels: &[AnchorLabel], batch: usize, pos_fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut positives: Vec<usize> = Vec::new();
    let mut negatives: Vec<usize> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive(_) => positives.push(i),
            AnchorLabel::Negative => negatives.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    let pos_cap = (pos_fraction * batch as f64).floor() as usize;
    let mut chosen = draw(&mut rng, positives, pos_cap);
    let remaining = batch - chosen.len();
    chosen.extend(draw(&mut rng, negatives, remaining));
    chosen.sort_unstable();
    chosen
}

fn draw(rng: &mut SplitMix64, mut pool: Vec<usize>, n: usize) -> Vec<usize> {
    if pool.len() > n {
        rng.shuffle(&mut pool);
        pool.truncate(n);
    }
    pool
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &DetectorParams) -> Self {
        Self {
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// `v <- momentum * v - lr * (g + weight_decay * w)`, then `w <- w + v`.
/// Nothing is modified if any updated value would be non-finite.
pub fn sgd_step(
    params: &mut DetectorParams,
    grads: &DetectorParams,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.tensors().len() != grads.tensors().len() || state.velocity.len() != params.tensors().len() {
        return Err(Error::Shape("optimizer tensors disagree with parameters".into()));
    }
    let mut updates = Vec::with_capacity(params.tensors().len());
    for ((w, g), v) in params.tensors().iter().zip(grads.tensors()).zip(&state.velocity) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "parameter {:?}, gradient {:?}, velocity {:?}",
                w.shape(),
                g.shape(),
                v.shape()
            )));
        }
        let new_v: Vec<f64> = w
            .data()
            .iter()
            .zip(g.data())
            .zip(v.data())
            .map(|((&w, &g), &v)| momentum * v - lr * (g + weight_decay * w))
            .collect();
        if new_v.iter().zip(w.data()).any(|(v, w)| !(w + v).is_finite()) {
            return Err(Error::NonFinite("parameter update".into()));
        }
        updates.push(new_v);
    }
    for ((w, v), new_v) in params.tensors_mut().iter_mut().zip(&mut state.velocity).zip(updates) {
        for (wi, &vi) in w.data_mut().iter_mut().zip(&new_v) {
            *wi += vi;
        }
        v.data_mut().copy_from_slice(&new_v);
    }
    Ok(())
}

/// One loss-log row; values are means over the iterations since the
/// previous row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

pub fn write_loss_log(records: &[LossRecord], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "iteration,total,cls,reg,roi_cls")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.loss.total, r.loss.cls, r.loss.reg, r.loss.roi_cls
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

struct Sample {
    input: ndarray::Array3<f64>,
    gts: Vec<Rect>,
    classes: Vec<usize>,
}

fn load_sample(
    manifest: &DatasetManifest,
    index: usize,
    image_root: &Path,
    input_size: usize,
    class_of: &BTreeMap<&str, usize>,
) -> Result<Sample> {
    let record = &manifest.records[index];
    let image = read_ppm(image_root.join(&record.path)).map_err(|e| Error::ImageRead {
        image_id: record.image_id.clone(),
        reason: e.to_string(),
    })?;
    let (input, sx, sy) = prepare_image(&image, input_size);
    let s = input_size as f64;
    let gts = record
        .boxes
        .iter()
        .map(|a| Rect::from(a.bbox).scale(sx, sy).clip(s, s))
        .collect();
    let classes = record.boxes.iter().map(|a| class_of[a.species.as_str()] + 1).collect();
    Ok(Sample { input, gts, classes })
}

/// Chooses classifier regions among the ground truths and current proposals:
/// regions overlapping a ground truth by at least `roi_fg_iou` take its
/// class, those below `roi_bg_iou` are background and the rest are unused.
fn sample_rois(sample: &Sample, proposals: &[ScoredBox], config: &TrainConfig, rng: &mut SplitMix64) -> Vec<RoiTarget> {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for rect in sample.gts.iter().copied().chain(proposals.iter().map(|p| p.rect)) {
        let best = sample.gts.iter().enumerate().map(|(g, gt)| (g, iou(&rect, gt))).fold(
            None,
            |acc: Option<(usize, f64)>, (g, o)| match acc {
                Some((_, b)) if b >= o => acc,
                _ => Some((g, o)),
            },
        );
        match best {
            Some((g, o)) if o >= config.roi_fg_iou => fg.push(RoiTarget {
                rect,
                class: sample.classes[g],
            }),
            Some((_, o)) if o >= config.roi_bg_iou => {}
            _ => bg.push(RoiTarget { rect, class: 0 }),
        }
    }
    let fg_cap = ((config.roi_positive_fraction * config.roi_batch as f64).round() as usize).max(1);
    rng.shuffle(&mut fg);
    fg.truncate(fg_cap);
    rng.shuffle(&mut bg);
    bg.truncate(config.roi_batch.saturating_sub(fg.len()));
    fg.extend(bg);
    fg
}

/// Sorted species of the manifest; the classifier's class `k + 1` is entry `k`.
pub fn vocabulary(manifest: &DatasetManifest) -> Vec<String> {
    manifest.species_set().into_iter().collect()
}

/// Trains a detector from scratch, one image per iteration.
///
/// `arch` fixes the architecture; its class count is replaced by the
/// manifest's species count. The result depends only on the inputs and
/// `config.seed`.
pub fn train(
    manifest: &DatasetManifest,
    image_root: &Path,
    config: &TrainConfig,
    arch: &DetectorConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if manifest.is_empty() {
        return Err(Error::Empty("training manifest is empty".into()));
    }
    let vocab = vocabulary(manifest);
    let class_of: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let det = DetectorConfig {
        num_classes: vocab.len(),
        ..arch.clone()
    };
    det.validate()?;
    let anchors = det.anchors();
    let loss_cfg = RpnLossConfig::new(
        config.lambda,
        config.rpn_batch as f64,
        (det.feat_size() * det.feat_size()) as f64,
    )?
    .with_roi_weight(config.roi_weight)?;

    let mut params = DetectorParams::init(&det, derive_seed(config.seed, "init"));
    let mut state = OptimizerState::new(&params);
    let mut order_rng = SplitMix64::new(derive_seed(config.seed, "order"));
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut cursor = order.len();

    let mut log = Vec::new();
    let mut window = LossBreakdown::default();
    let mut window_len = 0usize;
    for it in 0..config.total_iters {
        if cursor == order.len() {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let index = order[cursor];
        cursor += 1;
        let sample = load_sample(manifest, index, image_root, det.input_size, &class_of)?;
        let diverged = |e: Error| Error::Diverged {
            iteration: it,
            detail: e.to_string(),
        };
        let fwd = detector::forward(&params, &det, &sample.input).map_err(diverged)?;

        let mut rng = SplitMix64::new(mix64(derive_seed(config.seed, "iter") ^ it as u64));
        let labels = geometry::assign_anchor_labels(&anchors, &sample.gts, config.anchor_hi, config.anchor_lo);
        let rpn = sample_rpn_minibatch(&labels, config.rpn_batch, config.positive_fraction, rng.next_u64())
            .into_iter()
            .map(|a| RpnTarget {
                anchor: a,
                target: match labels[a] {
                    AnchorLabel::Positive(g) => Some(geometry::encode_delta(&sample.gts[g], &anchors[a])),
                    _ => None,
                },
            })
            .collect();
        let proposals = propose(&fwd, &anchors, &det, config.proposal_nms, config.train_top_n);
        let rois = sample_rois(&sample, &proposals, config, &mut rng);
        let targets = LossTargets { rpn, rois };

        let (loss, grads) = loss_and_grad(&params, &det, &fwd, &targets, &loss_cfg).map_err(diverged)?;
        sgd_step(
            &mut params,
            &grads,
            &mut state,
            lr_at(it, config),
            config.momentum,
            config.weight_decay,
        )
        .map_err(diverged)?;

        window.total += loss.total;
        window.cls += loss.cls;
        window.reg += loss.reg;
        window.roi_cls += loss.roi_cls;
        window_len += 1;
        if window_len == config.log_every || it + 1 == config.total_iters {
            let n = window_len as f64;
            let mean = LossBreakdown {
                total: window.total / n,
                cls: window.cls / n,
                reg: window.reg / n,
                roi_cls: window.roi_cls / n,
            };
            info!(
                "iter {:>6}  loss {:.4}  cls {:.4}  reg {:.4}  roi {:.4}",
                it + 1,
                mean.total,
                mean.cls,
                mean.reg,
                mean.roi_cls
            );
            log.push(LossRecord {
                iteration: it + 1,
                loss: mean,
            });
            window = LossBreakdown::default();
            window_len = 0;
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            detector: det,
            params,
            iteration: config.total_iters,
            train: config.clone(),
            vocabulary: vocab,
        },
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    /// Detections scoring below this are dropped.
    pub score_threshold: f64,
    /// Per-class NMS overlap threshold.
    pub nms_threshold: f64,
    pub proposal_nms: f64,
    /// Proposals passed to the classifier.
    pub top_n: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_threshold: 0.3,
            proposal_nms: 0.7,
            top_n: 300,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub detections: Vec<Detection>,
    /// `(image_id, reason)` for images that could not be processed.
    pub skipped: Vec<(String, String)>,
}

/// Detects in one image; boxes are in the image's own pixel coordinates,
/// sorted by descending score.
pub fn detect(
    checkpoint: &Checkpoint,
    image: &crate::image::RasterImage,
    config: &PredictConfig,
) -> Result<Vec<(usize, ScoredBox)>> {
    let det = &checkpoint.detector;
    let (input, sx, sy) = prepare_image(image, det.input_size);
    let fwd = detector::forward(&checkpoint.params, det, &input)?;
    let proposals = propose(&fwd, &det.anchors(), det, config.proposal_nms, config.top_n);
    let probs: Vec<Vec<f64>> = proposals
        .iter()
        .map(|p| detector::classify_roi(pool_roi(&fwd, det, &p.rect).view(), &checkpoint.params))
        .collect();
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut out = Vec::new();
    for class in 1..=det.num_classes {
        let candidates: Vec<ScoredBox> = proposals
            .iter()
            .zip(&probs)
            .filter(|(_, p)| p[class] >= config.score_threshold)
            .map(|(prop, p)| ScoredBox::new(prop.rect, p[class], None))
            .collect();
        for kept in nms(&candidates, config.nms_threshold, usize::MAX) {
            let rect = kept.rect.scale(1.0 / sx, 1.0 / sy).clip(w, h);
            out.push((class - 1, ScoredBox { rect, ..kept }));
        }
    }
    out.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Runs detection on every record. Unreadable images are skipped with a
/// warning and listed in [`Predictions::skipped`].
pub fn predict(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    image_root: &Path,
    config: &PredictConfig,
    threads: usize,
) -> Result<Predictions> {
    if checkpoint.vocabulary.is_empty() {
        return Err(Error::Checkpoint("empty species vocabulary".into()));
    }
    let run = |record: &crate::dataset::AnnotatedImage| -> Result<std::result::Result<Vec<Detection>, String>> {
        let image = match read_ppm(image_root.join(&record.path)) {
            Ok(img) => img,
            Err(e) => return Ok(Err(e.to_string())),
        };
        let found = detect(checkpoint, &image, config)?;
        Ok(Ok(found
            .into_iter()
            .map(|(class, b)| Detection {
                image_id: record.image_id.clone(),
                species: checkpoint.vocabulary[class].clone(),
                score: b.score,
                x_min: b.rect.x_min,
                y_min: b.rect.y_min,
                x_max: b.rect.x_max,
                y_max: b.rect.y_max,
            })
            .collect()))
    };
    let per_image: Vec<_> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| manifest.records.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        manifest.records.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let mut out = Predictions::default();
    for (record, result) in manifest.records.iter().zip(per_image) {
        match result {
            Ok(dets) => out.detections.extend(dets),
            Err(reason) => {
                warn!("skipping {}: {reason}", record.image_id);
                out.skipped.push((record.image_id.clone(), reason));
            }
        }
    }
    Ok(out)
}
