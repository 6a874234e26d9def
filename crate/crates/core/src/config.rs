//! Run configuration: a TOML file fully determines a run (together with the
//! seed, at 64-bit precision). Unknown or ill-typed fields are rejected with
//! the offending field named.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::events::SynthConfig;
use crate::heat::{HcoConfig, KMode};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// 32 or 64.
    pub precision: u8,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: 32,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depths: [usize; 4],
    pub channels: [usize; 4],
    /// Experts enabled, in the fixed order DCT, DFT, Haar.
    pub experts: usize,
    /// "predicted" (from Frequency Embeddings), "learnable" (scalar), "fixed".
    pub k_mode: String,
    /// Diffusivity value when `k_mode = "fixed"`.
    pub k_fixed: f64,
    pub t: f64,
    /// Per-patch transform window size; 0 applies transforms globally.
    pub window: usize,
    /// Query token dimension for the detection head.
    pub head_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depths: [2, 2, 12, 2],
            channels: [96, 192, 384, 768],
            experts: 3,
            k_mode: "predicted".into(),
            k_fixed: 0.5,
            t: 1.0,
            window: 0,
            head_dim: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// "synthetic" or "files".
    pub source: String,
    /// Temporal bins per stacked frame (channels = 2 * bins).
    pub bins: usize,
    /// (width, height) the model consumes; events are rescaled onto it.
    pub resolution: [usize; 2],
    pub classes: usize,
    /// Per-(pixel, bin) event counts are clipped here, then scaled to [0,1];
    /// match it to the sensor's typical activity so inputs span the range.
    pub clip: u32,
    pub synthetic: SynthSection,
    pub files: FilesSection,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            bins: 5,
            resolution: [640, 640],
            classes: 3,
            clip: 255,
            synthetic: SynthSection::default(),
            files: FilesSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub width: u16,
    pub height: u16,
    pub objects_min: usize,
    pub objects_max: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub edge_rate: f64,
    pub noise_rate: f64,
    pub duration_ms: f64,
    pub frames: usize,
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            width: 64,
            height: 64,
            objects_min: 1,
            objects_max: 3,
            speed_min: 0.3,
            speed_max: 1.2,
            edge_rate: 2.0,
            noise_rate: 0.0005,
            duration_ms: 50.0,
            frames: 5,
            seed: 0,
            train_scenes: 100,
            eval_scenes: 20,
        }
    }
}

impl SynthSection {
    pub fn to_synth_config(&self, classes: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            width: self.width,
            height: self.height,
            objects: (self.objects_min, self.objects_max),
            classes,
            speed: (self.speed_min, self.speed_max),
            edge_rate: self.edge_rate,
            noise_rate: self.noise_rate,
            duration_ms: self.duration_ms,
            frames: self.frames,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilesSection {
    /// One event file per scene.
    pub events: Vec<String>,
    /// Annotation JSON keyed by event-file stem.
    pub annotations: String,
    /// "packed" or "csv".
    pub format: String,
    /// Sensor geometry, required for CSV inputs.
    pub geometry: Option<[u16; 2]>,
    /// Number of trailing scenes held out for evaluation.
    pub eval_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// "adamw" or "sgdw"; both apply decoupled weight decay.
    pub optimizer: String,
    pub momentum: f64,
    /// Gumbel-Softmax temperature anneals linearly start -> end.
    pub temp_start: f64,
    pub temp_end: f64,
    pub seed: u64,
    /// Steps between held-out evaluations (0 = final only).
    pub eval_every: usize,
    /// Steps between metric rows.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            optimizer: "adamw".into(),
            momentum: 0.9,
            temp_start: 5.0,
            temp_end: 0.5,
            seed: 0,
            eval_every: 500,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Queries selected per image.
    pub k: usize,
    /// Empty uses the standard 0.50:0.05:0.95 grid.
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 30, iou_thresholds: Vec::new() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.precision != 32 && self.precision != 64 {
            return bad("precision", format!("must be 32 or 64, got {}", self.precision));
        }
        if !(1..=3).contains(&self.model.experts) {
            return bad("model.experts", format!("must be 1..=3, got {}", self.model.experts));
        }
        if !matches!(self.model.k_mode.as_str(), "predicted" | "learnable" | "fixed") {
            return bad(
                "model.k_mode",
                format!("must be predicted|learnable|fixed, got {:?}", self.model.k_mode),
            );
        }
        if self.model.k_mode == "fixed" && !(self.model.k_fixed >= 0.0) {
            return bad("model.k_fixed", format!("must be >= 0, got {}", self.model.k_fixed));
        }
        if !(self.model.t > 0.0) {
            return bad("model.t", format!("must be > 0, got {}", self.model.t));
        }
        if self.model.head_dim == 0 {
            return bad("model.head_dim", "must be positive".into());
        }
        if !matches!(self.data.source.as_str(), "synthetic" | "files") {
            return bad("data.source", format!("must be synthetic|files, got {:?}", self.data.source));
        }
        if self.data.bins == 0 {
            return bad("data.bins", "must be positive".into());
        }
        let [w, h] = self.data.resolution;
        if w == 0 || h == 0 || w % 32 != 0 || h % 32 != 0 {
            return bad("data.resolution", format!("must be positive multiples of 32, got {w}x{h}"));
        }
        if self.data.classes == 0 {
            return bad("data.classes", "must be positive".into());
        }
        if self.data.clip == 0 {
            return bad("data.clip", "must be positive".into());
        }
        if self.data.source == "synthetic" {
            let s = &self.data.synthetic;
            if s.objects_min > s.objects_max || s.objects_max == 0 {
                return bad(
                    "data.synthetic.objects_min",
                    format!("need 0 < min <= max, got {}..{}", s.objects_min, s.objects_max),
                );
            }
            if !(s.speed_min > 0.0) || s.speed_min > s.speed_max {
                return bad(
                    "data.synthetic.speed_min",
                    format!("need 0 < min <= max, got {}..{}", s.speed_min, s.speed_max),
                );
            }
            if !(self.data.classes <= 3) {
                return bad("data.classes", "synthetic scenes support at most 3 classes".into());
            }
            if s.frames == 0 {
                return bad("data.synthetic.frames", "must be positive".into());
            }
            if s.train_scenes == 0 {
                return bad("data.synthetic.train_scenes", "must be positive".into());
            }
        } else {
            if self.data.files.events.is_empty() {
                return bad("data.files.events", "must list at least one event file".into());
            }
            if !matches!(self.data.files.format.as_str(), "packed" | "csv") {
                return bad(
                    "data.files.format",
                    format!("must be packed|csv, got {:?}", self.data.files.format),
                );
            }
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if !(self.train.lr > 0.0) {
            return bad("train.lr", format!("must be > 0, got {}", self.train.lr));
        }
        if self.train.weight_decay < 0.0 {
            return bad("train.weight_decay", "must be >= 0".into());
        }
        if !matches!(self.train.optimizer.as_str(), "adamw" | "sgdw") {
            return bad(
                "train.optimizer",
                format!("must be adamw|sgdw, got {:?}", self.train.optimizer),
            );
        }
        if !(self.train.temp_start > 0.0) || !(self.train.temp_end > 0.0) {
            return bad("train.temp_start", "temperatures must be > 0".into());
        }
        if self.train.log_every == 0 {
            return bad("train.log_every", "must be positive".into());
        }
        if self.eval.k == 0 {
            return bad("eval.k", "must be positive".into());
        }
        for t in &self.eval.iou_thresholds {
            if !(*t > 0.0 && *t < 1.0) {
                return bad("eval.iou_thresholds", format!("thresholds must lie in (0, 1), got {t}"));
            }
        }
        Ok(())
    }

    pub fn k_mode(&self) -> KMode {
        match self.model.k_mode.as_str() {
            "fixed" => KMode::Fixed(self.model.k_fixed),
            "learnable" => KMode::LearnableScalar,
            _ => KMode::PredictedFromFes,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 2 * self.data.bins,
            input_hw: (self.data.resolution[1], self.data.resolution[0]),
            depths: self.model.depths,
            channels: self.model.channels,
            num_experts: self.model.experts,
            hco: HcoConfig { t: self.model.t, k_mode: self.k_mode() },
            window: if self.model.window == 0 { None } else { Some(self.model.window) },
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        if self.eval.iou_thresholds.is_empty() {
            crate::detect::coco_thresholds()
        } else {
            self.eval.iou_thresholds.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.model.depths, cfg.model.depths);
        assert_eq!(back.train.steps, cfg.train.steps);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::from_toml("[train]\nstepz = 10\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("stepz"), "{msg}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_toml("precision = 16\n").unwrap_err();
        assert!(format!("{err}").contains("precision"));
        let err = RunConfig::from_toml("[model]\nexperts = 5\n").unwrap_err();
        assert!(format!("{err}").contains("model.experts"));
        let err = RunConfig::from_toml("[data]\nresolution = [60, 64]\n").unwrap_err();
        assert!(format!("{err}").contains("data.resolution"));
        let err = RunConfig::from_toml("[train]\nlr = 0.0\n").unwrap_err();
        assert!(format!("{err}").contains("train.lr"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml(
            "precision = 64\n[model]\ndepths = [1, 1, 2, 1]\nchannels = [16, 32, 64, 128]\n",
        )
        .unwrap();
        assert_eq!(cfg.precision, 64);
        assert_eq!(cfg.model.channels, [16, 32, 64, 128]);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.model.experts, 3);
    }
}
