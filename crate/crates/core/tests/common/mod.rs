//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lepidet::dataset::{AnnotatedImage, Annotation, BoundingBox, DatasetManifest};
use lepidet::detector::{self, DetectorConfig, DetectorParams, LossTargets, RoiTarget, RpnLossConfig, RpnTarget};
use lepidet::eval::{Detection, PrCurve};
use lepidet::geometry::{encode_delta, generate_anchors, Rect};
use lepidet::image::{write_ppm, RasterImage};
use lepidet::rng::SplitMix64;

pub const TINY: &str = "tiny.ppm";

/// Writes a 6x4 image that every fixture record points at.
pub fn tiny_image_root(dir: &Path) -> PathBuf {
    let img = RasterImage::from_fn(6, 4, |x, y| [(x * 40) as u8, (y * 60) as u8, 7]);
    write_ppm(&img, dir.join(TINY)).unwrap();
    dir.to_path_buf()
}

fn eco(id: String, species: String) -> AnnotatedImage {
    AnnotatedImage::ecological(
        id,
        TINY,
        6,
        4,
        vec![Annotation::new(species, BoundingBox::new(1, 1, 5, 3))],
    )
}

fn pattern(id: String, species: String) -> AnnotatedImage {
    AnnotatedImage::pattern(id, TINY, 6, 4, species)
}

/// Images per non-singleton ecological species: one species of 121, 33
/// species of 3, 54 of 20 and 6 of 18. That is 94 species, 1408 images and
/// 34 odd counts.
pub fn eco_species_counts() -> Vec<usize> {
    let mut v = vec![121];
    v.extend([3; 33]);
    v.extend([20; 54]);
    v.extend([18; 6]);
    v
}

pub fn eco_species(i: usize) -> String {
    format!("eco_{i:03}")
}

/// 1425 single-species ecological images over 111 species, 17 of which
/// occur exactly once. Records are interleaved across species.
pub fn eco_fixture() -> DatasetManifest {
    let mut per_species: Vec<(String, usize)> = eco_species_counts()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (eco_species(i), c))
        .collect();
    per_species.extend((0..17).map(|i| (format!("single_{i:02}"), 1)));
    let mut records = Vec::new();
    let mut round = 0;
    while records.len() < 1425 {
        for (s, c) in &per_species {
            if round < *c {
                records.push(eco(format!("e{:05}", records.len()), s.clone()));
            }
        }
        round += 1;
    }
    DatasetManifest::new("eco", records)
}

/// 4270 pattern photos over 1176 species: 585 photos of the 94 ecological
/// species (21 species with 7, 73 with 6) and 3685 of 1082 others (439 with
/// 4, 643 with 3).
pub fn pattern_fixture() -> DatasetManifest {
    let mut records = Vec::new();
    let mut push = |species: String, n: usize| {
        for _ in 0..n {
            let id = format!("p{:05}", records.len());
            records.push(pattern(id, species.clone()));
        }
    };
    for i in 0..94 {
        push(eco_species(i), if i < 21 { 7 } else { 6 });
    }
    for i in 0..1082 {
        push(format!("other_{i:04}"), if i < 439 { 4 } else { 3 });
    }
    DatasetManifest::new("patterns", records)
}

// ---------------------------------------------------------------- geometry

/// Integer boxes for exact overlap arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct IBox(pub i64, pub i64, pub i64, pub i64);

impl IBox {
    pub fn rect(self) -> Rect {
        Rect::new(self.0 as f64, self.1 as f64, self.2 as f64, self.3 as f64)
    }
}

pub fn random_ibox(rng: &mut SplitMix64, extent: u64) -> IBox {
    let x = rng.below(extent) as i64;
    let y = rng.below(extent) as i64;
    let w = 1 + rng.below(extent / 2) as i64;
    let h = 1 + rng.below(extent / 2) as i64;
    IBox(x, y, x + w, y + h)
}

/// Intersection and union by counting unit cells.
pub fn cell_overlap(a: IBox, b: IBox) -> (i64, i64) {
    let inside = |r: IBox, x: i64, y: i64| x >= r.0 && x < r.2 && y >= r.1 && y < r.3;
    let (x0, y0) = (a.0.min(b.0), a.1.min(b.1));
    let (x1, y1) = (a.2.max(b.2), a.3.max(b.3));
    let (mut inter, mut union) = (0, 0);
    for y in y0..y1 {
        for x in x0..x1 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as i64;
            union += (ia || ib) as i64;
        }
    }
    (inter, union)
}

/// Greedy suppression as a fixed point: a box survives iff no surviving box
/// of higher rank overlaps it by more than `num / den`.
pub fn nms_oracle(boxes: &[IBox], scores: &[u32], num: i64, den: i64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(scores[i]), boxes[i]));
    let mut keep = vec![false; boxes.len()];
    for (rank, &i) in order.iter().enumerate() {
        keep[i] = order[..rank].iter().all(|&j| {
            let (inter, union) = cell_overlap(boxes[i], boxes[j]);
            !keep[j] || inter * den <= num * union
        });
    }
    order.into_iter().filter(|&i| keep[i]).collect()
}

// -------------------------------------------------------------- evaluation

/// Area under `r -> max{p_k : r_k >= r}` on `[0, 1]`, integrated piecewise
/// between consecutive distinct recall values.
pub fn envelope_area_oracle(curve: &PrCurve) -> f64 {
    let mut recalls: Vec<f64> = curve.points.iter().map(|p| p.recall).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for &r in &recalls {
        let best = curve
            .points
            .iter()
            .filter(|p| p.recall >= r)
            .map(|p| p.precision)
            .fold(0.0, f64::max);
        area += (r - prev) * best;
        prev = r;
    }
    area
}

/// Random prediction and ground-truth sets: up to 20 detections, 5 ground
/// truths and 4 classes over three images.
pub fn random_eval_set(rng: &mut SplitMix64) -> (Vec<Detection>, DatasetManifest) {
    let classes = 1 + rng.below(4) as usize;
    let n_gt = 1 + rng.below(5) as usize;
    let images = ["a", "b", "c"];
    let mut records: Vec<AnnotatedImage> = images
        .iter()
        .map(|id| AnnotatedImage::ecological(*id, format!("{id}.ppm"), 64, 64, vec![]))
        .collect();
    let mut gts = Vec::new();
    for _ in 0..n_gt {
        let img = rng.below(3) as usize;
        let b = random_ibox(rng, 40);
        let species = format!("c{}", rng.below(classes as u64));
        records[img].boxes.push(Annotation::new(
            species.clone(),
            BoundingBox::new(b.0 as u32, b.1 as u32, b.2 as u32, b.3 as u32),
        ));
        gts.push((img, b, species));
    }
    let n_det = rng.below(21) as usize;
    let dets = (0..n_det)
        .map(|_| {
            // Half of the detections jitter a ground truth so matches happen.
            let (img, b, species) = if rng.next_f64() < 0.5 {
                let (img, b, s) = &gts[rng.below(gts.len() as u64) as usize];
                let j = |v: i64, rng: &mut SplitMix64| v + rng.below(5) as i64 - 2;
                let x0 = j(b.0, rng);
                let y0 = j(b.1, rng);
                (
                    *img,
                    IBox(x0, y0, j(b.2, rng).max(x0 + 1), j(b.3, rng).max(y0 + 1)),
                    s.clone(),
                )
            } else {
                (
                    rng.below(3) as usize,
                    random_ibox(rng, 40),
                    format!("c{}", rng.below(classes as u64)),
                )
            };
            let r = b.rect();
            Detection {
                image_id: images[img].into(),
                species,
                score: (rng.below(8) as f64) / 8.0,
                x_min: r.x_min,
                y_min: r.y_min,
                x_max: r.x_max,
                y_max: r.y_max,
            }
        })
        .collect();
    records.retain(|r| !r.boxes.is_empty());
    (dets, DatasetManifest::new("gt", records))
}

// ---------------------------------------------------------------- gradient

/// A small network for finite differences: about 1600 parameters.
pub fn gradcheck_config() -> DetectorConfig {
    DetectorConfig {
        input_size: 32,
        channels: [4, 6, 8],
        rpn_channels: 8,
        roi_size: 2,
        num_classes: 3,
        anchor_scales: vec![8.0, 16.0],
        anchor_ratios: vec![1.0],
    }
}

pub struct GradReport {
    pub params: usize,
    pub worst: f64,
    pub worst_at: (usize, usize),
}

/// Compares every analytic gradient with a central difference at `eps`,
/// scoring `|a - fd| / max(1, |a|)`.
pub fn gradient_check(seed: u64, eps: f64) -> GradReport {
    let cfg = gradcheck_config();
    let params = DetectorParams::init(&cfg, seed);
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let input = ndarray::Array3::from_shape_fn((3, 32, 32), |_| rng.uniform(-0.5, 0.5));
    let anchors = generate_anchors(
        cfg.feat_size(),
        cfg.feat_size(),
        DetectorConfig::STRIDE as f64,
        &cfg.anchor_scales,
        &cfg.anchor_ratios,
    );
    let gt = Rect::new(6.3, 4.1, 21.7, 19.2);
    let rpn = (0..anchors.len())
        .step_by(3)
        .enumerate()
        .map(|(k, a)| RpnTarget {
            anchor: a,
            target: (k % 2 == 0).then(|| encode_delta(&gt, &anchors[a])),
        })
        .collect();
    let rois = vec![
        RoiTarget { rect: gt, class: 2 },
        RoiTarget {
            rect: Rect::new(1.0, 2.0, 30.0, 25.0),
            class: 0,
        },
        RoiTarget {
            rect: Rect::new(14.2, 9.9, 31.0, 31.0),
            class: 3,
        },
    ];
    let targets = LossTargets { rpn, rois };
    let loss_cfg = RpnLossConfig::new(10.0, 12.0, (cfg.feat_size() * cfg.feat_size()) as f64)
        .unwrap()
        .with_roi_weight(8.0)
        .unwrap();

    let fwd = detector::forward(&params, &cfg, &input).unwrap();
    let (_, grads) = detector::loss_and_grad(&params, &cfg, &fwd, &targets, &loss_cfg).unwrap();
    let loss_at = |p: &DetectorParams| {
        let f = detector::forward(p, &cfg, &input).unwrap();
        detector::total_loss(p, &cfg, &f, &targets, &loss_cfg).total
    };
    let mut worst = 0.0f64;
    let mut worst_at = (0, 0);
    let mut probe = params.clone();
    for t in 0..params.tensors().len() {
        for i in 0..params.tensors()[t].len() {
            let orig = params.tensors()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = orig + eps;
            let up = loss_at(&probe);
            probe.tensors_mut()[t].data_mut()[i] = orig - eps;
            let down = loss_at(&probe);
            probe.tensors_mut()[t].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = grads.tensors()[t].data()[i];
            let err = (a - fd).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
                worst_at = (t, i);
            }
        }
    }
    GradReport {
        params: params.num_values(),
        worst,
        worst_at,
    }
}
