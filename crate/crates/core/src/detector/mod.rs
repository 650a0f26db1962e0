//! The detection network: a three-stage convolutional backbone, a
//! region-proposal head scoring and regressing a fixed set of anchors per
//! feature-map cell, ROI max pooling, and a linear species classifier.
//!
//! ```text
//! image (3, S, S) in [-0.5, 0.5]
//!   -> [conv3x3 + ReLU + maxpool2] x 3        feature (C3, S/8, S/8)
//!   -> conv3x3 + ReLU                         hidden  (R, S/8, S/8)
//!   -> 1x1 conv: 2 logits per anchor          [background, object]
//!   -> 1x1 conv: 4 deltas per anchor          (tx, ty, tw, th)
//! proposal -> roi_pool(feature) -> linear -> softmax over 1 + classes
//! ```
//!
//! Class index 0 of the classifier is background; index `k >= 1` is the
//! `k - 1`-th entry of the species vocabulary.

mod checkpoint;
pub mod layers;
pub mod loss;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use loss::{smooth_l1, LossBreakdown, RpnLossConfig, RpnSample};

use crate::error::{Error, Result};
use crate::geometry::{self, Anchor, BoxDelta, Rect, ScoredBox};
use crate::image::RasterImage;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use layers::{
    col2im3, im2col3, linear_map, linear_map_backward, maxpool2, maxpool2_backward, relu_backward, relu_inplace,
    roi_pool,
};
use loss::{binary_logit_ce, smooth_l1_grad, softmax_ce};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Square input side in pixels; must be divisible by 8.
    pub input_size: usize,
    pub channels: [usize; 3],
    pub rpn_channels: usize,
    pub roi_size: usize,
    /// Number of species (background excluded).
    pub num_classes: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
}

impl DetectorConfig {
    /// The 128x128 desk-scale network.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            input_size: 128,
            channels: [8, 16, 32],
            rpn_channels: 32,
            roi_size: 4,
            num_classes,
            anchor_scales: vec![32.0, 64.0, 128.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
        }
    }

    pub const STRIDE: usize = 8;

    pub fn feat_size(&self) -> usize {
        self.input_size / Self::STRIDE
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn num_anchors(&self) -> usize {
        self.feat_size() * self.feat_size() * self.anchors_per_cell()
    }

    pub fn pooled_len(&self) -> usize {
        self.channels[2] * self.roi_size * self.roi_size
    }

    pub fn anchors(&self) -> Vec<Anchor> {
        geometry::generate_anchors(
            self.feat_size(),
            self.feat_size(),
            Self::STRIDE as f64,
            &self.anchor_scales,
            &self.anchor_ratios,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector: {m}")));
        if self.input_size == 0 || !self.input_size.is_multiple_of(Self::STRIDE) {
            return bad("input_size must be a positive multiple of 8");
        }
        if self.channels.contains(&0) || self.rpn_channels == 0 || self.roi_size == 0 {
            return bad("layer widths must be positive");
        }
        if self.num_classes == 0 {
            return bad("at least one class is required");
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor scales and ratios must be non-empty");
        }
        if self
            .anchor_scales
            .iter()
            .chain(&self.anchor_ratios)
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return bad("anchor scales and ratios must be positive");
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 14] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "rpn.weight",
    "rpn.bias",
    "rpn_cls.weight",
    "rpn_cls.bias",
    "rpn_reg.weight",
    "rpn_reg.bias",
    "classifier.weight",
    "classifier.bias",
];

/// All trainable tensors. Convolution weights are stored as
/// `(c_out, c_in * kernel_area)` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    tensors: Vec<Tensor>,
}

impl DetectorParams {
    pub fn shapes(config: &DetectorConfig) -> Vec<Vec<usize>> {
        let [c1, c2, c3] = config.channels;
        let r = config.rpn_channels;
        let a = config.anchors_per_cell();
        let k = config.num_classes + 1;
        vec![
            vec![c1, 3 * 9],
            vec![c1],
            vec![c2, c1 * 9],
            vec![c2],
            vec![c3, c2 * 9],
            vec![c3],
            vec![r, c3 * 9],
            vec![r],
            vec![2 * a, r],
            vec![2 * a],
            vec![4 * a, r],
            vec![4 * a],
            vec![k, config.pooled_len()],
            vec![k],
        ]
    }

    pub fn zeros(config: &DetectorConfig) -> Self {
        Self {
            tensors: Self::shapes(config).iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Uniform in `[-s, s]`, `s = sqrt(1 / fan_in)`, where `fan_in` is the
    /// column count of the owning weight matrix. Biases share their weight's
    /// bound.
    pub fn init(config: &DetectorConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut params = Self::zeros(config);
        for pair in params.tensors.chunks_mut(2) {
            let fan_in = pair[0].shape()[1] as f64;
            let bound = (1.0 / fan_in).sqrt();
            for t in pair {
                for v in t.data_mut() {
                    *v = rng.uniform(-bound, bound);
                }
            }
        }
        params
    }

    pub fn from_tensors(config: &DetectorConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::shapes(config);
        if tensors.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {s:?}, got {:?}", t.shape())));
            }
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn matrix(&self, i: usize) -> ndarray::ArrayView2<'_, f64> {
        self.tensors[i].matrix()
    }

    fn vector(&self, i: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.tensors[i].data())
    }

    fn accumulate(&mut self, i: usize, values: impl IntoIterator<Item = f64>) {
        for (dst, v) in self.tensors[i].data_mut().iter_mut().zip(values) {
            *dst += v;
        }
    }
}

/// Resizes to the network input and maps samples to `[-0.5, 0.5]`.
/// Returns the tensor and the `(x, y)` factors from original to input pixels.
pub fn prepare_image(image: &RasterImage, input_size: usize) -> (Array3<f64>, f64, f64) {
    let sx = input_size as f64 / image.width() as f64;
    let sy = input_size as f64 / image.height() as f64;
    let resized = image.resize(input_size as u32, input_size as u32);
    (normalize(&resized), sx, sy)
}

/// `(3, h, w)` tensor with `p / 255 - 0.5`.
pub fn normalize(image: &RasterImage) -> Array3<f64> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let px = image.pixels();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| px[(y * w + x) * 3 + c] as f64 / 255.0 - 0.5)
}

struct ConvCache {
    cols: Array2<f64>,
    activation: Array3<f64>,
    pool_argmax: Vec<usize>,
}

/// Everything computed by [`forward`], kept for the backward pass.
pub struct ForwardPass {
    convs: Vec<ConvCache>,
    /// Backbone output, `(C3, S/8, S/8)`.
    pub feature: Array3<f64>,
    rpn_cols: Array2<f64>,
    rpn_hidden: Array3<f64>,
    /// `(num_anchors, 2)` logits `[background, object]`.
    pub rpn_logits: Array2<f64>,
    /// `(num_anchors, 4)` regression outputs.
    pub rpn_deltas: Array2<f64>,
}

impl ForwardPass {
    /// Softmax object probability per anchor.
    pub fn object_probs(&self) -> Vec<f64> {
        self.rpn_logits
            .outer_iter()
            .map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp()))
            .collect()
    }

    pub fn delta(&self, anchor: usize) -> BoxDelta {
        let d = self.rpn_deltas.row(anchor);
        BoxDelta::from_array([d[0], d[1], d[2], d[3]])
    }
}

/// Per-anchor head outputs are laid out channel-major over cells; this
/// regroups them to `(cell * k + a, j)`.
fn head_to_anchor_rows(out: &Array3<f64>, per_anchor: usize) -> Array2<f64> {
    let (ch, h, w) = out.dim();
    let k = ch / per_anchor;
    let cells = h * w;
    let flat = out.as_slice().expect("standard layout");
    Array2::from_shape_fn((cells * k, per_anchor), |(row, j)| {
        let (cell, a) = (row / k, row % k);
        flat[(a * per_anchor + j) * cells + cell]
    })
}

fn anchor_rows_to_head(rows: &Array2<f64>, per_anchor: usize, h: usize, w: usize) -> Array3<f64> {
    let cells = h * w;
    let k = rows.nrows() / cells;
    Array3::from_shape_fn((k * per_anchor, h, w), |(c, y, x)| {
        let (a, j) = (c / per_anchor, c % per_anchor);
        rows[[(y * w + x) * k + a, j]]
    })
}

fn ensure_finite<'a>(what: &str, mut values: impl Iterator<Item = &'a f64>) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Runs the backbone and proposal head on a prepared `(3, S, S)` input.
pub fn forward(params: &DetectorParams, config: &DetectorConfig, input: &Array3<f64>) -> Result<ForwardPass> {
    let s = config.input_size;
    if input.dim() != (3, s, s) {
        return Err(Error::Shape(format!(
            "input {:?} does not match ({}, {s}, {s})",
            input.dim(),
            3
        )));
    }
    let mut x = input.clone();
    let mut convs = Vec::with_capacity(3);
    for layer in 0..3 {
        let (_, h, w) = x.dim();
        let cols = im2col3(x.view());
        let mut act = linear_map(
            params.matrix(2 * layer),
            params.vector(2 * layer + 1),
            cols.view(),
            h,
            w,
        );
        relu_inplace(&mut act);
        let (pooled, pool_argmax) = maxpool2(act.view());
        convs.push(ConvCache {
            cols,
            activation: act,
            pool_argmax,
        });
        x = pooled;
    }
    let feature = x;
    let (_, fh, fw) = feature.dim();
    let rpn_cols = im2col3(feature.view());
    let mut rpn_hidden = linear_map(params.matrix(6), params.vector(7), rpn_cols.view(), fh, fw);
    relu_inplace(&mut rpn_hidden);
    let hidden_cols = rpn_hidden
        .view()
        .into_shape_with_order((config.rpn_channels, fh * fw))
        .expect("contiguous hidden");
    let cls_out = linear_map(params.matrix(8), params.vector(9), hidden_cols, fh, fw);
    let reg_out = linear_map(params.matrix(10), params.vector(11), hidden_cols, fh, fw);
    let rpn_logits = head_to_anchor_rows(&cls_out, 2);
    let rpn_deltas = head_to_anchor_rows(&reg_out, 4);
    ensure_finite("proposal head activations", rpn_logits.iter().chain(rpn_deltas.iter()))?;
    Ok(ForwardPass {
        convs,
        feature,
        rpn_cols,
        rpn_hidden,
        rpn_logits,
        rpn_deltas,
    })
}

/// Class probabilities (background first) for a pooled ROI feature.
pub fn classify_roi(pooled: ArrayView3<f64>, params: &DetectorParams) -> Vec<f64> {
    layers::softmax(&roi_logits(pooled, params).to_vec())
}

fn roi_logits(pooled: ArrayView3<f64>, params: &DetectorParams) -> Array1<f64> {
    let flat = pooled.to_shape(pooled.len()).expect("pooled features");
    params.matrix(12).dot(&flat) + params.vector(13)
}

pub fn pool_roi(fwd: &ForwardPass, config: &DetectorConfig, rect: &Rect) -> Array3<f64> {
    roi_pool(fwd.feature.view(), rect, DetectorConfig::STRIDE as f64, config.roi_size).0
}

/// Decodes every anchor, drops boxes thinner than one pixel, and applies
/// NMS over the object probabilities. Boxes are in input-pixel coordinates.
pub fn propose(
    fwd: &ForwardPass,
    anchors: &[Anchor],
    config: &DetectorConfig,
    nms_threshold: f64,
    top_n: usize,
) -> Vec<ScoredBox> {
    let s = config.input_size as f64;
    let probs = fwd.object_probs();
    let mut rects = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let rect = geometry::decode_delta(&fwd.delta(i), anchor, s, s);
        if rect.width() >= 1.0 && rect.height() >= 1.0 {
            rects.push(rect);
            scores.push(probs[i]);
        }
    }
    geometry::nms_indices(&rects, &scores, nms_threshold, top_n)
        .into_iter()
        .map(|i| ScoredBox::new(rects[i], scores[i], None))
        .collect()
}

/// One sampled anchor for the proposal loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnTarget {
    pub anchor: usize,
    /// Regression target of a positive anchor; `None` marks a negative.
    pub target: Option<BoxDelta>,
}

/// One region for the classification loss; class 0 is background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    pub rect: Rect,
    pub class: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTargets {
    pub rpn: Vec<RpnTarget>,
    pub rois: Vec<RoiTarget>,
}

/// Total loss: proposal loss plus `roi_weight` times the mean ROI
/// cross-entropy. Computed from
/// probabilities through [`loss::rpn_loss`] and [`classify_roi`].
pub fn total_loss(
    params: &DetectorParams,
    config: &DetectorConfig,
    fwd: &ForwardPass,
    targets: &LossTargets,
    loss_cfg: &RpnLossConfig,
) -> LossBreakdown {
    let probs = fwd.object_probs();
    let samples: Vec<RpnSample> = targets
        .rpn
        .iter()
        .map(|t| RpnSample {
            object_prob: probs[t.anchor],
            delta: fwd.delta(t.anchor),
            target: t.target,
        })
        .collect();
    let mut out = loss::rpn_loss(&samples, loss_cfg);
    if !targets.rois.is_empty() {
        let ce: f64 = targets
            .rois
            .iter()
            .map(|r| -classify_roi(pool_roi(fwd, config, &r.rect).view(), params)[r.class].ln())
            .sum();
        out.roi_cls = loss_cfg.roi_weight * ce / targets.rois.len() as f64;
    }
    out.total = out.cls + out.reg + out.roi_cls;
    out
}

/// Loss and exact gradient of [`total_loss`] with respect to every parameter.
pub fn loss_and_grad(
    params: &DetectorParams,
    config: &DetectorConfig,
    fwd: &ForwardPass,
    targets: &LossTargets,
    loss_cfg: &RpnLossConfig,
) -> Result<(LossBreakdown, DetectorParams)> {
    let mut grads = DetectorParams::zeros(config);
    let mut breakdown = LossBreakdown::default();
    let (_, fh, fw) = fwd.feature.dim();

    // Proposal head.
    let mut d_logits = Array2::<f64>::zeros(fwd.rpn_logits.dim());
    let mut d_deltas = Array2::<f64>::zeros(fwd.rpn_deltas.dim());
    let reg_scale = loss_cfg.lambda / loss_cfg.n_reg;
    for t in &targets.rpn {
        let l = fwd.rpn_logits.row(t.anchor);
        let (ce, g) = binary_logit_ce(l[0], l[1], t.target.is_some());
        breakdown.cls += ce / loss_cfg.n_cls;
        d_logits[[t.anchor, 0]] += g[0] / loss_cfg.n_cls;
        d_logits[[t.anchor, 1]] += g[1] / loss_cfg.n_cls;
        if let Some(target) = &t.target {
            let pred = fwd.delta(t.anchor).to_array();
            for (k, (p, q)) in pred.iter().zip(target.to_array()).enumerate() {
                breakdown.reg += reg_scale * smooth_l1(p - q);
                d_deltas[[t.anchor, k]] += reg_scale * smooth_l1_grad(p - q);
            }
        }
    }
    let d_cls_out = anchor_rows_to_head(&d_logits, 2, fh, fw);
    let d_reg_out = anchor_rows_to_head(&d_deltas, 4, fh, fw);
    let hidden_cols = fwd
        .rpn_hidden
        .view()
        .into_shape_with_order((config.rpn_channels, fh * fw))
        .expect("contiguous hidden");
    let (gw, gb, d_hidden_cls) = linear_map_backward(params.matrix(8), hidden_cols, d_cls_out.view(), true);
    grads.accumulate(8, gw);
    grads.accumulate(9, gb);
    let (gw, gb, d_hidden_reg) = linear_map_backward(params.matrix(10), hidden_cols, d_reg_out.view(), true);
    grads.accumulate(10, gw);
    grads.accumulate(11, gb);
    let mut d_hidden = (d_hidden_cls.expect("requested") + d_hidden_reg.expect("requested"))
        .into_shape_with_order((config.rpn_channels, fh, fw))
        .expect("hidden gradient shape");
    relu_backward(&mut d_hidden, &fwd.rpn_hidden);
    let (gw, gb, d_cols) = linear_map_backward(params.matrix(6), fwd.rpn_cols.view(), d_hidden.view(), true);
    grads.accumulate(6, gw);
    grads.accumulate(7, gb);
    let mut d_feature = col2im3(d_cols.expect("requested").view(), config.channels[2], fh, fw);

    // ROI classifier.
    if !targets.rois.is_empty() {
        let n = targets.rois.len() as f64 / loss_cfg.roi_weight;
        let weight = params.matrix(12);
        let d_flat = d_feature.as_slice_mut().expect("standard layout");
        let mut gw = Array2::<f64>::zeros(weight.dim());
        let mut gb = Array1::<f64>::zeros(weight.nrows());
        for r in &targets.rois {
            let (pooled, argmax) = roi_pool(
                fwd.feature.view(),
                &r.rect,
                DetectorConfig::STRIDE as f64,
                config.roi_size,
            );
            let logits = roi_logits(pooled.view(), params);
            let (ce, g) = softmax_ce(logits.as_slice().expect("contiguous"), r.class);
            breakdown.roi_cls += ce / n;
            let g = Array1::from(g) / n;
            let flat = pooled.to_shape(pooled.len()).expect("pooled features");
            gw += &g.view().insert_axis(Axis(1)).dot(&flat.view().insert_axis(Axis(0)));
            gb += &g;
            let d_pooled = weight.t().dot(&g);
            for (dp, &idx) in d_pooled.iter().zip(&argmax) {
                d_flat[idx] += dp;
            }
        }
        grads.accumulate(12, gw);
        grads.accumulate(13, gb);
    }

    // Backbone.
    let mut d_out = d_feature;
    for layer in (0..3).rev() {
        let cache = &fwd.convs[layer];
        let mut d_act = maxpool2_backward(d_out.view(), &cache.pool_argmax, cache.activation.dim());
        relu_backward(&mut d_act, &cache.activation);
        let (c_in, h, w) = {
            let (_, h, w) = cache.activation.dim();
            let c_in = if layer == 0 { 3 } else { config.channels[layer - 1] };
            (c_in, h, w)
        };
        let (gw, gb, d_cols) =
            linear_map_backward(params.matrix(2 * layer), cache.cols.view(), d_act.view(), layer > 0);
        grads.accumulate(2 * layer, gw);
        grads.accumulate(2 * layer + 1, gb);
        if let Some(d_cols) = d_cols {
            d_out = col2im3(d_cols.view(), c_in, h, w);
        }
    }

    breakdown.total = breakdown.cls + breakdown.reg + breakdown.roi_cls;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    for (t, name) in grads.tensors.iter().zip(PARAM_NAMES) {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(num_classes: usize) -> DetectorConfig {
        DetectorConfig {
            input_size: 32,
            channels: [2, 3, 4],
            rpn_channels: 4,
            roi_size: 2,
            num_classes,
            anchor_scales: vec![8.0, 16.0],
            anchor_ratios: vec![1.0],
        }
    }

    #[test]
    fn desk_shapes() {
        let cfg = DetectorConfig::desk(3);
        assert_eq!(cfg.feat_size(), 16);
        assert_eq!(cfg.num_anchors(), 2304);
        let params = DetectorParams::init(&cfg, 1);
        let fwd = forward(&params, &cfg, &Array3::zeros((3, 128, 128))).unwrap();
        assert_eq!(fwd.rpn_logits.dim(), (16 * 16 * 9, 2));
        assert_eq!(fwd.rpn_deltas.dim(), (16 * 16 * 9, 4));
        assert_eq!(fwd.feature.dim(), (32, 16, 16));
    }

    #[test]
    fn zero_everything_gives_half() {
        let cfg = DetectorConfig::desk(2);
        let params = DetectorParams::zeros(&cfg);
        let fwd = forward(&params, &cfg, &Array3::zeros((3, 128, 128))).unwrap();
        assert!(fwd.rpn_logits.iter().all(|&v| v == 0.0));
        assert!(fwd.object_probs().iter().all(|&p| p == 0.5));
        let pooled = pool_roi(&fwd, &cfg, &Rect::new(0.0, 0.0, 64.0, 64.0));
        assert_eq!(classify_roi(pooled.view(), &params), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(2);
        let params = DetectorParams::init(&cfg, 7);
        let img = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c + y * 3 + x * 5) % 11) as f64 / 11.0 - 0.5);
        let a = forward(&params, &cfg, &img).unwrap();
        let b = forward(&params, &cfg, &img).unwrap();
        assert_eq!(a.rpn_logits, b.rpn_logits);
        assert_eq!(a.rpn_deltas, b.rpn_deltas);
    }

    #[test]
    fn head_layout_roundtrip() {
        let out = Array3::from_shape_fn((8, 2, 3), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let rows = head_to_anchor_rows(&out, 4);
        assert_eq!(rows.dim(), (12, 4));
        // Cell (y=1, x=2) is cell 5; anchor 1 reads channels 4..8.
        assert_eq!(rows.row(5 * 2 + 1).to_vec(), vec![412.0, 512.0, 612.0, 712.0]);
        assert_eq!(anchor_rows_to_head(&rows, 4, 2, 3), out);
    }

    #[test]
    fn init_respects_bounds() {
        let cfg = DetectorConfig::desk(3);
        let params = DetectorParams::init(&cfg, 3);
        for pair in params.tensors().chunks(2) {
            let bound = (1.0 / pair[0].shape()[1] as f64).sqrt();
            for t in pair {
                assert!(t.data().iter().all(|v| v.abs() <= bound));
            }
        }
        assert_eq!(params, DetectorParams::init(&cfg, 3));
        assert_ne!(params, DetectorParams::init(&cfg, 4));
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::desk(3).validate().is_ok());
        let mut bad = DetectorConfig::desk(3);
        bad.input_size = 100;
        assert!(bad.validate().is_err());
        assert!(DetectorConfig::desk(0).validate().is_err());
    }

    #[test]
    fn zero_loss_point_has_zero_regression_gradient() {
        let cfg = tiny(1);
        let params = DetectorParams::init(&cfg, 5);
        let img = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c * 7 + y + x * 3) % 13) as f64 / 13.0 - 0.5);
        let fwd = forward(&params, &cfg, &img).unwrap();
        // Regression targets equal to the current predictions.
        let targets = LossTargets {
            rpn: (0..4)
                .map(|a| RpnTarget {
                    anchor: a,
                    target: Some(fwd.delta(a)),
                })
                .collect(),
            rois: vec![],
        };
        let with = loss_and_grad(&params, &cfg, &fwd, &targets, &RpnLossConfig::default()).unwrap();
        assert_eq!(with.0.reg, 0.0);
        let no_reg = LossTargets {
            rpn: targets
                .rpn
                .iter()
                .map(|t| RpnTarget {
                    anchor: t.anchor,
                    target: None,
                })
                .collect(),
            rois: vec![],
        };
        // Positives vs negatives only differ in cls; the reg head gradient is zero.
        assert!(with.1.tensors()[10].data().iter().all(|&g| g == 0.0));
        let without = loss_and_grad(&params, &cfg, &fwd, &no_reg, &RpnLossConfig::default()).unwrap();
        assert!(without.1.tensors()[10].data().iter().all(|&g| g == 0.0));
    }
}
