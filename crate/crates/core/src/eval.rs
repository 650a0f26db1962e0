//! Detection matching, precision/recall curves, average precision and mAP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::geometry::{iou, Rect};

/// One predicted box; also the prediction JSON-lines record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub species: String,
    pub score: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Detection {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

#[derive(Serialize, Deserialize)]
struct SkipLine {
    image_id: String,
    error: String,
}

/// Writes detections, then one `{"image_id", "error"}` line per skipped image.
pub fn write_predictions(
    detections: &[Detection],
    skipped: &[(String, String)],
    out: &mut impl Write,
) -> std::io::Result<()> {
    for d in detections {
        serde_json::to_writer(&mut *out, d)?;
        out.write_all(b"\n")?;
    }
    for (image_id, error) in skipped {
        serde_json::to_writer(
            &mut *out,
            &SkipLine {
                image_id: image_id.clone(),
                error: error.clone(),
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_predictions(detections: &[Detection], skipped: &[(String, String)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let wrap = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    write_predictions(detections, skipped, &mut out).map_err(wrap)?;
    out.flush().map_err(wrap)
}

/// Reads prediction JSON-lines, ignoring skipped-image lines.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if value.get("error").is_some() {
            continue;
        }
        let d: Detection = serde_json::from_value(value).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(d);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Ground-truth boxes of one class, keyed by image id.
pub type GroundTruth = BTreeMap<String, Vec<Rect>>;

fn ranked<'a>(preds: &[&'a Detection]) -> Vec<&'a Detection> {
    let mut v = preds.to_vec();
    v.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| a.x_min.total_cmp(&b.x_min))
            .then_with(|| a.y_min.total_cmp(&b.y_min))
            .then_with(|| a.x_max.total_cmp(&b.x_max))
            .then_with(|| a.y_max.total_cmp(&b.y_max))
    });
    v
}

/// Greedy matching of one class's detections in descending score order.
///
/// A detection is a true positive when some still-unmatched ground truth of
/// the same image overlaps it by strictly more than `iou_threshold`; the
/// best such ground truth is consumed. Everything else is a false positive,
/// including repeat detections of an already matched object.
pub fn match_detections(preds: &[&Detection], gts: &GroundTruth, iou_threshold: f64) -> (Vec<bool>, MatchCounts) {
    let mut used: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    let mut flags = Vec::with_capacity(preds.len());
    for d in ranked(preds) {
        let rect = d.rect();
        let hit = gts.get(&d.image_id).and_then(|boxes| {
            let taken = &used[d.image_id.as_str()];
            boxes
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .map(|(i, g)| (i, iou(&rect, g)))
                .filter(|&(_, o)| o > iou_threshold)
                .fold(None, |acc: Option<(usize, f64)>, (i, o)| match acc {
                    Some((_, b)) if b >= o => acc,
                    _ => Some((i, o)),
                })
        });
        match hit {
            Some((i, _)) => {
                used.get_mut(d.image_id.as_str()).expect("image present")[i] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    let total_gt: usize = gts.values().map(Vec::len).sum();
    let tp = flags.iter().filter(|&&f| f).count();
    let counts = MatchCounts {
        tp,
        fp: flags.len() - tp,
        fn_: total_gt - tp,
    };
    (flags, counts)
}

/// `(precision, recall)`; an empty denominator gives precision 1 or recall 0.
pub fn precision_recall(c: &MatchCounts) -> (f64, f64) {
    let precision = if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let recall = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    (precision, recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Cumulative precision/recall after each ranked detection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.recall, p.precision));
        }
        s
    }
}

pub fn pr_curve(flags: &[bool], total_gt: usize) -> Result<PrCurve> {
    if total_gt == 0 {
        return Err(Error::Empty("no ground truth for this class".into()));
    }
    let mut tp = 0usize;
    let points = flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            PrPoint {
                recall: tp as f64 / total_gt as f64,
                precision: tp as f64 / (i + 1) as f64,
            }
        })
        .collect();
    Ok(PrCurve { points })
}

/// Block rule: recall is cut into `n` equal blocks and each block
/// contributes the best precision reachable at a recall at or beyond its
/// start (0 when no such point exists).
pub fn ap_blocks(curve: &PrCurve, n: usize) -> f64 {
    assert!(n >= 1, "block count must be positive");
    let pts = &curve.points;
    // suffix[i] = max precision over pts[i..]
    let mut suffix = vec![0.0f64; pts.len() + 1];
    for i in (0..pts.len()).rev() {
        suffix[i] = suffix[i + 1].max(pts[i].precision);
    }
    let total: f64 = (0..n)
        .map(|i| {
            let start = i as f64 / n as f64;
            suffix[pts.partition_point(|p| p.recall < start)]
        })
        .sum();
    total / n as f64
}

/// Exact area under the monotone precision envelope.
pub fn ap_voc2010(curve: &PrCurve) -> f64 {
    if curve.points.is_empty() {
        return 0.0;
    }
    let mut rec = Vec::with_capacity(curve.points.len() + 2);
    let mut pre = Vec::with_capacity(curve.points.len() + 2);
    rec.push(0.0);
    pre.push(0.0);
    for p in &curve.points {
        rec.push(p.recall);
        pre.push(p.precision);
    }
    rec.push(1.0);
    pre.push(0.0);
    for i in (0..pre.len() - 1).rev() {
        pre[i] = pre[i].max(pre[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * pre[i])
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ApMethod {
    Blocks(usize),
    #[default]
    Voc2010,
}

impl ApMethod {
    pub fn compute(self, curve: &PrCurve) -> f64 {
        match self {
            ApMethod::Blocks(n) => ap_blocks(curve, n),
            ApMethod::Voc2010 => ap_voc2010(curve),
        }
    }
}

impl fmt::Display for ApMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ApMethod::Blocks(n) => write!(f, "blocks:{n}"),
            ApMethod::Voc2010 => f.write_str("voc2010"),
        }
    }
}

impl FromStr for ApMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "voc2010" {
            return Ok(ApMethod::Voc2010);
        }
        s.strip_prefix("blocks:")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .map(ApMethod::Blocks)
            .ok_or_else(|| Error::Config(format!("unknown AP method `{s}` (voc2010 | blocks:<n>)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub class_id: String,
    pub ap: f64,
    pub method: ApMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_class: Vec<ApResult>,
    pub map: f64,
}

/// Arithmetic mean of the per-class APs.
pub fn mean_ap(results: Vec<ApResult>) -> Result<MapReport> {
    if results.is_empty() {
        return Err(Error::Empty("no classes to average".into()));
    }
    let map = results.iter().map(|r| r.ap).sum::<f64>() / results.len() as f64;
    Ok(MapReport {
        per_class: results,
        map,
    })
}

/// Ground truth per species and image from a manifest.
pub fn ground_truth(manifest: &DatasetManifest) -> BTreeMap<String, GroundTruth> {
    let mut out: BTreeMap<String, GroundTruth> = BTreeMap::new();
    for record in &manifest.records {
        for a in &record.boxes {
            out.entry(a.species.clone())
                .or_default()
                .entry(record.image_id.clone())
                .or_default()
                .push(a.bbox.into());
        }
    }
    out
}

/// Score cut applied at the fixed operating point.
pub const OPERATING_SCORE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub species: String,
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
}

/// Per-class counts after keeping detections with score strictly above 0.5
/// and matching at overlap strictly above `iou_threshold`.
pub fn operating_point_report(
    preds: &[Detection],
    gts: &BTreeMap<String, GroundTruth>,
    iou_threshold: f64,
) -> Vec<OperatingPoint> {
    gts.iter()
        .map(|(species, gt)| {
            let kept: Vec<&Detection> = preds
                .iter()
                .filter(|d| &d.species == species && d.score > OPERATING_SCORE)
                .collect();
            let (_, counts) = match_detections(&kept, gt, iou_threshold);
            let (precision, recall) = precision_recall(&counts);
            OperatingPoint {
                species: species.clone(),
                counts,
                precision,
                recall,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            method: ApMethod::Voc2010,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEvaluation {
    pub species: String,
    pub ap: f64,
    pub curve: PrCurve,
    pub operating: OperatingPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub classes: Vec<ClassEvaluation>,
    pub map: MapReport,
    pub method: ApMethod,
}

impl EvaluationReport {
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("species,ap,precision,recall,tp,fp,fn\n");
        for c in &self.classes {
            let o = &c.operating;
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.species, c.ap, o.precision, o.recall, o.counts.tp, o.counts.fp, o.counts.fn_
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "mAP={} method={} classes={}",
            self.map.map,
            self.method,
            self.classes.len()
        )
    }
}

/// Evaluates predictions against a ground-truth manifest. Every species with
/// at least one ground-truth box counts towards the mean, with AP 0 when it
/// has no detections; detections of other species are ignored.
pub fn evaluate(preds: &[Detection], gt_manifest: &DatasetManifest, config: &EvalConfig) -> Result<EvaluationReport> {
    let gts = ground_truth(gt_manifest);
    if gts.is_empty() {
        return Err(Error::Empty("ground truth has no boxes".into()));
    }
    let known: BTreeSet<&str> = gt_manifest.records.iter().map(|r| r.image_id.as_str()).collect();
    let operating = operating_point_report(preds, &gts, config.iou_threshold);
    let mut classes = Vec::with_capacity(gts.len());
    for ((species, gt), op) in gts.iter().zip(operating) {
        let mine: Vec<&Detection> = preds
            .iter()
            .filter(|d| &d.species == species && known.contains(d.image_id.as_str()))
            .collect();
        let (flags, _) = match_detections(&mine, gt, config.iou_threshold);
        let total: usize = gt.values().map(Vec::len).sum();
        let curve = pr_curve(&flags, total)?;
        classes.push(ClassEvaluation {
            species: species.clone(),
            ap: config.method.compute(&curve),
            curve,
            operating: op,
        });
    }
    let map = mean_ap(
        classes
            .iter()
            .map(|c| ApResult {
                class_id: c.species.clone(),
                ap: c.ap,
                method: config.method,
            })
            .collect(),
    )?;
    Ok(EvaluationReport {
        classes,
        map,
        method: config.method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(image: &str, score: f64, r: Rect) -> Detection {
        Detection {
            image_id: image.into(),
            species: "s".into(),
            score,
            x_min: r.x_min,
            y_min: r.y_min,
            x_max: r.x_max,
            y_max: r.y_max,
        }
    }

    fn gt(image: &str, boxes: &[Rect]) -> GroundTruth {
        [(image.to_string(), boxes.to_vec())].into_iter().collect()
    }

    const BOX: Rect = Rect::new(0.0, 0.0, 10.0, 10.0);

    #[test]
    fn match_examples() {
        let g = gt("i", &[BOX]);
        let d = [det("i", 0.9, BOX)];
        let (_, c) = match_detections(&d.iter().collect::<Vec<_>>(), &g, 0.5);
        assert_eq!(c, MatchCounts { tp: 1, fp: 0, fn_: 0 });

        let d = [det("i", 0.9, BOX), det("i", 0.8, Rect::new(0.0, 0.0, 10.0, 9.0))];
        let (flags, c) = match_detections(&d.iter().collect::<Vec<_>>(), &g, 0.5);
        assert_eq!(flags, vec![true, false]);
        assert_eq!(c, MatchCounts { tp: 1, fp: 1, fn_: 0 });

        // Overlap of exactly 0.5 does not count.
        let half = Rect::new(0.0, 0.0, 10.0, 5.0);
        assert_eq!(iou(&half, &BOX), 0.5);
        let d = [det("i", 0.9, half)];
        let (_, c) = match_detections(&d.iter().collect::<Vec<_>>(), &g, 0.5);
        assert_eq!(c, MatchCounts { tp: 0, fp: 1, fn_: 1 });

        // Detections on other images never match.
        let d = [det("j", 0.9, BOX)];
        let (_, c) = match_detections(&d.iter().collect::<Vec<_>>(), &g, 0.5);
        assert_eq!(c, MatchCounts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn precision_recall_examples() {
        assert_eq!(precision_recall(&MatchCounts { tp: 3, fp: 1, fn_: 1 }), (0.75, 0.75));
        assert_eq!(precision_recall(&MatchCounts { tp: 0, fp: 0, fn_: 2 }).0, 1.0);
        assert_eq!(precision_recall(&MatchCounts { tp: 0, fp: 0, fn_: 0 }), (1.0, 0.0));
        assert_eq!(precision_recall(&MatchCounts { tp: 4, fp: 0, fn_: 0 }), (1.0, 1.0));
    }

    fn pts(curve: &PrCurve) -> Vec<(f64, f64)> {
        curve.points.iter().map(|p| (p.recall, p.precision)).collect()
    }

    #[test]
    fn curve_examples() {
        assert_eq!(pts(&pr_curve(&[true], 1).unwrap()), vec![(1.0, 1.0)]);
        assert_eq!(pts(&pr_curve(&[true, false], 2).unwrap()), vec![(0.5, 1.0), (0.5, 0.5)]);
        assert_eq!(pts(&pr_curve(&[false], 3).unwrap()), vec![(0.0, 0.0)]);
        assert!(pr_curve(&[true], 0).is_err());
    }

    #[test]
    fn ap_examples() {
        let perfect = pr_curve(&[true, true, true], 3).unwrap();
        assert_eq!(ap_voc2010(&perfect), 1.0);
        assert_eq!(ap_blocks(&perfect, 10), 1.0);
        let none = pr_curve(&[false, false], 3).unwrap();
        assert_eq!(ap_voc2010(&none), 0.0);
        assert_eq!(ap_blocks(&none, 10), 0.0);
        assert_eq!(ap_voc2010(&pr_curve(&[], 3).unwrap()), 0.0);
        assert_eq!(ap_voc2010(&pr_curve(&[true, false], 1).unwrap()), 1.0);
    }

    #[test]
    fn blocks_fixture_against_grid_oracle() {
        let flags = [true, false, true, true, false, true];
        let curve = pr_curve(&flags, 5).unwrap();
        // Oracle: interpolated precision p~(r) = max{p_k : r_k >= r} sampled
        // on a dense grid inside each block, block value = max over samples.
        let interp = |r: f64| {
            curve
                .points
                .iter()
                .filter(|p| p.recall >= r)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        };
        let n = 10;
        let mut total = 0.0;
        for i in 0..n {
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            total += (0..=200)
                .map(|k| interp(lo + (hi - lo) * k as f64 / 200.0))
                .fold(0.0, f64::max);
        }
        let oracle = total / n as f64;
        assert!((ap_blocks(&curve, n) - oracle).abs() < 1e-12);
        assert!((oracle - 22.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn mean_examples() {
        let r = |ap| ApResult {
            class_id: "x".into(),
            ap,
            method: ApMethod::Voc2010,
        };
        assert_eq!(mean_ap(vec![r(1.0), r(0.5), r(0.0)]).unwrap().map, 0.5);
        assert_eq!(mean_ap(vec![r(0.3)]).unwrap().map, 0.3);
        assert!(mean_ap(vec![]).is_err());
    }

    #[test]
    fn method_parse() {
        assert_eq!("voc2010".parse::<ApMethod>().unwrap(), ApMethod::Voc2010);
        assert_eq!("blocks:11".parse::<ApMethod>().unwrap(), ApMethod::Blocks(11));
        assert!("blocks:0".parse::<ApMethod>().is_err());
        assert_eq!(ApMethod::Blocks(7).to_string(), "blocks:7");
    }

    #[test]
    fn operating_point_is_strict() {
        let mut gts = BTreeMap::new();
        gts.insert("s".to_string(), gt("i", &[BOX]));
        let at_half = [det("i", 0.5, BOX)];
        let op = operating_point_report(&at_half, &gts, 0.5);
        assert_eq!(op[0].counts, MatchCounts { tp: 0, fp: 0, fn_: 1 });
        let sure = [det("i", 1.0, BOX)];
        let op = operating_point_report(&sure, &gts, 0.5);
        assert_eq!((op[0].precision, op[0].recall), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn voc_dominates_raw_step_area(flags in proptest::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
            let total = flags.iter().filter(|&&f| f).count() + extra;
            prop_assume!(total > 0);
            let curve = pr_curve(&flags, total).unwrap();
            let mut raw = 0.0;
            let mut prev = 0.0;
            for p in &curve.points {
                raw += (p.recall - prev) * p.precision;
                prev = p.recall;
            }
            let ap = ap_voc2010(&curve);
            prop_assert!(ap + 1e-12 >= raw);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn match_count_identities(
            boxes in proptest::collection::vec((0.0..50.0f64, 0.0..50.0f64, 5.0..30.0f64), 1..5),
            dets in proptest::collection::vec((0.0..50.0f64, 0.0..50.0f64, 5.0..30.0f64, 0.0..1.0f64), 0..12),
        ) {
            let g = gt("i", &boxes.iter().map(|&(x, y, s)| Rect::new(x, y, x + s, y + s)).collect::<Vec<_>>());
            let d: Vec<Detection> = dets.iter().map(|&(x, y, s, sc)| det("i", sc, Rect::new(x, y, x + s, y + s))).collect();
            let (flags, c) = match_detections(&d.iter().collect::<Vec<_>>(), &g, 0.5);
            prop_assert_eq!(c.tp + c.fn_, boxes.len());
            prop_assert!(c.tp <= boxes.len());
            prop_assert_eq!(c.tp + c.fp, d.len());
            prop_assert_eq!(flags.len(), d.len());
        }
    }
}
