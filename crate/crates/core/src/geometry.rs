//! Box geometry: overlap, anchors, regression deltas, anchor labelling and
//! greedy non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::BoundingBox;

/// Continuous axis-aligned box in pixel units (`x_max`/`y_max` exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x_min + 0.5 * self.width(), self.y_min + 0.5 * self.height())
    }

    /// Zero for inverted or empty boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn clip(&self, width: f64, height: f64) -> Rect {
        Rect::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Rect {
        Rect::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    fn lex_cmp(&self, other: &Rect) -> Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

impl From<BoundingBox> for Rect {
    fn from(b: BoundingBox) -> Self {
        Rect::new(b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64)
    }
}

impl From<&BoundingBox> for Rect {
    fn from(b: &BoundingBox) -> Self {
        (*b).into()
    }
}

/// Intersection over union; 0 when either box is empty or they are disjoint.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub height: f64,
}

impl Anchor {
    pub fn rect(&self) -> Rect {
        Rect::from_center(self.center_x, self.center_y, self.width, self.height)
    }
}

/// Anchors for every cell of a `feat_w x feat_h` map, cell-major: the anchors
/// of cell `(x, y)` occupy indices `((y * feat_w + x) * k)..` with
/// `k = scales.len() * ratios.len()`, scale-major within a cell.
///
/// A ratio is width / height; each anchor has area `scale^2`.
pub fn generate_anchors(feat_w: usize, feat_h: usize, stride: f64, scales: &[f64], ratios: &[f64]) -> Vec<Anchor> {
    let shapes: Vec<(f64, f64)> = scales
        .iter()
        .flat_map(|&s| {
            ratios.iter().map(move |&r| {
                let root = r.sqrt();
                (s * root, s / root)
            })
        })
        .collect();
    let mut anchors = Vec::with_capacity(feat_w * feat_h * shapes.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let center_x = (x as f64 + 0.5) * stride;
            let center_y = (y as f64 + 0.5) * stride;
            anchors.extend(shapes.iter().map(|&(width, height)| Anchor {
                center_x,
                center_y,
                width,
                height,
            }));
        }
    }
    anchors
}

/// Largest magnitude of a log-scale delta accepted by [`decode_delta`].
pub const MAX_LOG_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

pub fn encode_delta(gt: &Rect, anchor: &Anchor) -> BoxDelta {
    let (x, y) = gt.center();
    BoxDelta {
        tx: (x - anchor.center_x) / anchor.width,
        ty: (y - anchor.center_y) / anchor.height,
        tw: (gt.width() / anchor.width).ln(),
        th: (gt.height() / anchor.height).ln(),
    }
}

/// Inverse of [`encode_delta`], clipped to `[0, width] x [0, height]`.
/// Log-scale terms saturate at [`MAX_LOG_SCALE`].
pub fn decode_delta(delta: &BoxDelta, anchor: &Anchor, width: f64, height: f64) -> Rect {
    let tw = delta.tw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let th = delta.th.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let cx = delta.tx * anchor.width + anchor.center_x;
    let cy = delta.ty * anchor.height + anchor.center_y;
    Rect::from_center(cx, cy, anchor.width * tw.exp(), anchor.height * th.exp()).clip(width, height)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Object anchor matched to the ground truth at this index.
    Positive(usize),
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive(_))
    }
}

/// Labels anchors against ground truths.
///
/// An anchor is positive when its best overlap is at least `hi`, or when it
/// attains the best overlap of some ground truth (so every ground truth gets
/// at least one anchor). Remaining anchors are negative when their best
/// overlap is at most `lo`, otherwise ignored.
pub fn assign_anchor_labels(anchors: &[Anchor], gts: &[Rect], hi: f64, lo: f64) -> Vec<AnchorLabel> {
    debug_assert!(hi > lo);
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let rects: Vec<Rect> = anchors.iter().map(Anchor::rect).collect();
    // overlaps[a * n_gt + g]
    let n_gt = gts.len();
    let overlaps: Vec<f64> = rects.iter().flat_map(|r| gts.iter().map(move |g| iou(r, g))).collect();

    let mut labels: Vec<AnchorLabel> = (0..rects.len())
        .map(|a| {
            let row = &overlaps[a * n_gt..(a + 1) * n_gt];
            let (best_gt, best) = argmax(row);
            if best >= hi {
                AnchorLabel::Positive(best_gt)
            } else if best <= lo {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();

    // Each gt claims the anchor(s) attaining its best overlap. If another gt
    // already claimed all of those, it takes its best unclaimed anchor.
    let mut claimed: Vec<Option<usize>> = vec![None; rects.len()];
    for g in 0..n_gt {
        let column = |a: usize| overlaps[a * n_gt + g];
        let best = (0..rects.len()).map(column).fold(f64::NEG_INFINITY, f64::max);
        let mut took = false;
        for (a, slot) in claimed.iter_mut().enumerate() {
            if column(a) == best && slot.is_none() {
                *slot = Some(g);
                took = true;
            }
        }
        if !took {
            let fallback = (0..rects.len())
                .filter(|&a| claimed[a].is_none())
                .fold(None, |acc: Option<usize>, a| match acc {
                    Some(b) if column(b) >= column(a) => Some(b),
                    _ => Some(a),
                });
            if let Some(a) = fallback {
                claimed[a] = Some(g);
            }
        }
    }
    for (label, c) in labels.iter_mut().zip(claimed) {
        if let Some(g) = c {
            *label = AnchorLabel::Positive(g);
        }
    }
    labels
}

fn argmax(values: &[f64]) -> (usize, f64) {
    values.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, v)| if v > best.1 { (i, v) } else { best },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub rect: Rect,
    pub score: f64,
    /// `None` marks background or a class-agnostic proposal.
    pub class_id: Option<String>,
}

impl ScoredBox {
    pub fn new(rect: Rect, score: f64, class_id: Option<String>) -> Self {
        Self { rect, score, class_id }
    }
}

/// Descending score, ties by ascending lexicographic coordinates.
pub fn rank_order(rects: &[Rect], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rects.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| rects[a].lex_cmp(&rects[b]))
    });
    order
}

/// Greedy NMS over parallel slices; returns kept indices in rank order.
pub fn nms_indices(rects: &[Rect], scores: &[f64], threshold: f64, top_n: usize) -> Vec<usize> {
    let order = rank_order(rects, scores);
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        if kept.len() >= top_n {
            break;
        }
        if kept.iter().all(|&k| iou(&rects[k], &rects[idx]) <= threshold) {
            kept.push(idx);
        }
    }
    kept
}

/// Keeps the best box, drops everything overlapping it by more than
/// `threshold`, and repeats; at most `top_n` survive.
pub fn nms(candidates: &[ScoredBox], threshold: f64, top_n: usize) -> Vec<ScoredBox> {
    let rects: Vec<Rect> = candidates.iter().map(|c| c.rect).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    nms_indices(&rects, &scores, threshold, top_n)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}
