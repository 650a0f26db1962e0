//! Region-proposal multi-task loss and the ROI classification loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxDelta;

/// `0.5 x^2` inside the unit interval, `|x| - 0.5` outside.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Weighting and normalizers of the proposal loss, plus the weight of the
/// ROI classification term that the full detector loss adds on top.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpnLossConfig {
    /// Weight of the regression term.
    pub lambda: f64,
    /// Classification normalizer, usually the anchor minibatch size.
    pub n_cls: f64,
    /// Regression normalizer, usually the number of anchor positions.
    pub n_reg: f64,
    /// Multiplier of the mean ROI cross-entropy; ignored by [`rpn_loss`].
    pub roi_weight: f64,
}

impl RpnLossConfig {
    /// Proposal-loss weights with `roi_weight = 1`.
    pub fn new(lambda: f64, n_cls: f64, n_reg: f64) -> Result<Self> {
        let cfg = Self {
            lambda,
            n_cls,
            n_reg,
            roi_weight: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_roi_weight(self, roi_weight: f64) -> Result<Self> {
        let cfg = Self { roi_weight, ..self };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lambda, self.n_cls, self.n_reg, self.roi_weight]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be positive: {self:?}")))
        }
    }
}

impl Default for RpnLossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            n_cls: 256.0,
            n_reg: 256.0,
            roi_weight: 1.0,
        }
    }
}

/// One sampled anchor as seen by the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnSample {
    /// Predicted object probability.
    pub object_prob: f64,
    /// Predicted regression.
    pub delta: BoxDelta,
    /// Target regression for positive anchors, `None` for negatives.
    pub target: Option<BoxDelta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub roi_cls: f64,
}

/// Coordinate-wise sum of smooth L1 over `t - t*`.
pub fn regression_loss(pred: &BoxDelta, target: &BoxDelta) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| smooth_l1(p - t))
        .sum()
}

/// Binary cross-entropy over the sample, normalized by `n_cls`, plus the
/// regression loss of the positive anchors weighted by `lambda / n_reg`.
/// The returned breakdown has `roi_cls = 0`.
pub fn rpn_loss(samples: &[RpnSample], config: &RpnLossConfig) -> LossBreakdown {
    let mut cls = 0.0;
    let mut reg = 0.0;
    for s in samples {
        match &s.target {
            Some(target) => {
                cls -= s.object_prob.ln();
                reg += regression_loss(&s.delta, target);
            }
            None => cls -= (1.0 - s.object_prob).ln(),
        }
    }
    let cls = cls / config.n_cls;
    let reg = config.lambda * reg / config.n_reg;
    LossBreakdown {
        total: cls + reg,
        cls,
        reg,
        roi_cls: 0.0,
    }
}

/// Cross-entropy of a two-logit `[background, object]` pair against the
/// label, computed from logits. Returns the loss and its gradient with
/// respect to the two logits.
pub fn binary_logit_ce(bg: f64, fg: f64, positive: bool) -> (f64, [f64; 2]) {
    let m = bg.max(fg);
    let lse = m + ((bg - m).exp() + (fg - m).exp()).ln();
    let p_fg = (fg - lse).exp();
    let (loss, target) = if positive { (lse - fg, 1.0) } else { (lse - bg, 0.0) };
    let g = p_fg - target;
    (loss, [-g, g])
}

/// Softmax cross-entropy; returns the loss and gradient w.r.t. the logits.
pub fn softmax_ce(logits: &[f64], class: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (l - lse).exp() - if i == class { 1.0 } else { 0.0 })
        .collect();
    (lse - logits[class], grad)
}
