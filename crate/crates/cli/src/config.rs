use std::path::{Path, PathBuf};

use lepidet::detector::DetectorConfig;
use lepidet::trainer::{PredictConfig, TrainConfig};
use serde::Deserialize;

/// Shared run configuration. Every field is optional in the file; command
/// flags of the same name take precedence.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub patterns: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub train: TrainConfig,
    pub anchor_scales: Option<Vec<f64>>,
    pub anchor_ratios: Option<Vec<f64>>,
    pub predict: PredictConfig,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    /// `voc2010` or `blocks:<n>`.
    pub method: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            method: "voc2010".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// The desk architecture with any configured anchor overrides.
    pub fn detector(&self, num_classes: usize) -> DetectorConfig {
        let mut det = DetectorConfig::desk(num_classes);
        if let Some(s) = &self.anchor_scales {
            det.anchor_scales = s.clone();
        }
        if let Some(r) = &self.anchor_ratios {
            det.anchor_ratios = r.clone();
        }
        det
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 4, "train": {"total_iters": 10}}"#).unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.train.total_iters, 10);
        assert_eq!(cfg.train.initial_lr, 0.001);
        assert_eq!(cfg.predict, PredictConfig::default());
        assert_eq!(cfg.eval.method, "voc2010");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn anchor_overrides() {
        let cfg: RunConfig = serde_json::from_str(r#"{"anchor_scales": [16, 32]}"#).unwrap();
        let det = cfg.detector(2);
        assert_eq!(det.anchor_scales, vec![16.0, 32.0]);
        assert_eq!(det.anchor_ratios, DetectorConfig::desk(2).anchor_ratios);
    }
}
