//! Run configuration: a flat registry of dotted keys over the module
//! configs, parsed from JSON files and `--set key=value` overrides.
//!
//! Config files are JSON objects mapping dotted keys to values, e.g.
//! `{"discovery.k": 16, "train.total_steps": 500}`. Unknown keys are
//! rejected, and every offending key is reported in one pass.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::data::{SceneConfig, ShapeKind, VideoConfig};
use crate::discovery::{DiscoverySource, KMeansConfig};
use crate::error::{Error, Result};
use crate::evaluation::{MaskFilter, PropagationConfig};
use crate::model::ModelShape;
use crate::objective::NegativePolicy;
use crate::trainer::{DiscoverySchedule, DiscoverySettings, OptimizerKind, TrainConfig};

/// Video-generation knobs layered over the scene settings.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSettings {
    pub frames: usize,
    pub max_step_px: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size_frac: f64,
    pub max_size_frac: f64,
}

impl Default for VideoSettings {
    fn default() -> Self {
        VideoSettings {
            frames: 8,
            max_step_px: 2,
            min_objects: 2,
            max_objects: 3,
            min_size_frac: 0.18,
            max_size_frac: 0.30,
        }
    }
}

/// Evaluation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub filter_enabled: bool,
    pub filter: MaskFilter,
    pub propagation: PropagationConfig,
    pub boundary_tol: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: crate::discovery::default_pyramid_ks(),
            filter_enabled: true,
            filter: MaskFilter::default(),
            propagation: PropagationConfig::default(),
            boundary_tol: 1,
        }
    }
}

/// Discrete-schedule copy period when `discovery.schedule = "discrete"`.
pub const DEFAULT_COPY_PERIOD_EPOCHS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub video: VideoSettings,
    pub augment: AugmentConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub discovery: DiscoverySettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scene: SceneConfig::default(),
            video: VideoSettings::default(),
            augment: AugmentConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
            discovery: DiscoverySettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Every configuration key with a one-line description.
pub const KEY_SPECS: &[(&str, &str)] = &[
    ("seed", "root seed for every derived random stream"),
    ("data.height", "scene image height in pixels"),
    ("data.width", "scene image width in pixels"),
    ("data.min_objects", "minimum objects per scene"),
    ("data.max_objects", "maximum objects per scene"),
    ("data.shape_kinds", "allowed shapes: disk, rect, triangle"),
    ("data.texture_level", "background/object noise amplitude in [0, 1]"),
    ("data.min_size_frac", "minimum object size (fraction of short side)"),
    ("data.max_size_frac", "maximum object size (fraction of short side)"),
    ("data.video_frames", "frames per generated video"),
    ("data.video_max_step_px", "maximum per-frame object translation"),
    ("data.video_min_objects", "minimum objects per video"),
    ("data.video_max_objects", "maximum objects per video"),
    ("data.video_min_size_frac", "minimum object size in videos"),
    ("data.video_max_size_frac", "maximum object size in videos"),
    ("augment.view_size", "square side of each augmented view"),
    ("augment.discovery_ratio", "discovery view side as a multiple of view_size"),
    ("augment.min_area_frac", "lower bound of crop area fraction"),
    ("augment.brightness_max", "maximum brightness jitter offset"),
    ("augment.contrast_max", "maximum contrast jitter offset"),
    ("augment.saturation_max", "maximum saturation jitter offset"),
    ("augment.hue_max", "maximum hue jitter offset"),
    ("augment.blur_kernel", "square gaussian blur kernel side (odd)"),
    ("augment.blur_sigma_min", "minimum blur standard deviation"),
    ("augment.blur_sigma_max", "maximum blur standard deviation"),
    ("model.conv_channels", "output channels of each conv layer"),
    ("model.conv_strides", "stride of each conv layer"),
    ("model.conv_kernel", "square conv kernel side (odd)"),
    ("model.proj_hidden", "projector hidden width"),
    ("model.proj_dim", "projection dimensionality"),
    ("model.pred_hidden", "predictor hidden width"),
    ("train.batch_size", "images per optimization step"),
    ("train.total_steps", "total optimization steps"),
    ("train.warmup_steps", "linear learning-rate warmup steps"),
    ("train.base_lr", "peak learning rate"),
    ("train.optimizer", "optimizer: sgd_momentum or lars"),
    ("train.momentum", "optimizer momentum"),
    ("train.weight_decay", "weight decay coefficient"),
    ("train.lambda_xi", "target network mixing rate"),
    ("train.lambda_xi_cosine_ramp", "decay lambda_xi to zero along a half-cosine"),
    ("train.alpha", "contrastive similarity temperature"),
    ("train.negative_policy", "negatives: within_and_across, within, or across"),
    ("train.checkpoint_every", "periodic checkpoint interval in steps (0 = final only)"),
    ("discovery.k", "segments per image during training"),
    ("discovery.source", "clustered map: projection or hidden"),
    ("discovery.kmeans_max_iters", "Lloyd iteration cap"),
    ("discovery.kmeans_tol", "centroid shift tolerance"),
    ("discovery.kmeans_restarts", "k-means restarts (best inertia wins)"),
    ("discovery.schedule", "discovery update schedule: continuous or discrete"),
    ("discovery.lambda_tau", "discovery mixing rate (continuous schedule)"),
    ("discovery.copy_period_epochs", "epochs between discrete discovery copies"),
    ("eval.ks", "proposal pyramid K list"),
    ("eval.filter", "enable ground-truth mask filtering"),
    ("eval.filter_max_masks", "max ground-truth masks per image"),
    ("eval.filter_min_area_px", "min ground-truth mask area at 224x224 scale"),
    ("eval.propagation_radius", "propagation search radius in grid cells"),
    ("eval.propagation_top_n", "propagation voters per cell"),
    ("eval.boundary_tol", "boundary match tolerance in grid cells"),
];

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::config(format!("{key}: expected a non-negative integer, got {v}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64().ok_or_else(|| Error::config(format!("{key}: expected a non-negative integer, got {v}")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::config(format!("{key}: expected a number, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::config(format!("{key}: expected true/false, got {v}")))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str().ok_or_else(|| Error::config(format!("{key}: expected a string, got {v}")))
}

fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::config(format!("{key}: expected a list of integers, got {v}")))?;
    arr.iter().map(|e| as_usize(key, e)).collect()
}

impl RunConfig {
    /// The generator config for scene datasets.
    pub fn scene_config(&self) -> SceneConfig {
        self.scene.clone()
    }

    /// The generator config for video datasets.
    pub fn video_config(&self) -> VideoConfig {
        VideoConfig {
            scene: SceneConfig {
                min_objects: self.video.min_objects,
                max_objects: self.video.max_objects,
                min_size_frac: self.video.min_size_frac,
                max_size_frac: self.video.max_size_frac,
                ..self.scene.clone()
            },
            frames: self.video.frames,
            max_step_px: self.video.max_step_px,
        }
    }

    /// Set a single dotted key. Unknown keys and malformed values error.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => self.seed = as_u64(key, v)?,
            "data.height" => self.scene.height = as_usize(key, v)?,
            "data.width" => self.scene.width = as_usize(key, v)?,
            "data.min_objects" => self.scene.min_objects = as_usize(key, v)?,
            "data.max_objects" => self.scene.max_objects = as_usize(key, v)?,
            "data.shape_kinds" => {
                let arr = v.as_array().ok_or_else(|| {
                    Error::config(format!("{key}: expected a list of shape names"))
                })?;
                let mut kinds = Vec::new();
                for e in arr {
                    kinds.push(match as_str(key, e)? {
                        "disk" => ShapeKind::Disk,
                        "rect" => ShapeKind::Rect,
                        "triangle" => ShapeKind::Triangle,
                        other => {
                            return Err(Error::config(format!("{key}: unknown shape '{other}'")))
                        }
                    });
                }
                self.scene.shape_kinds = kinds;
            }
            "data.texture_level" => self.scene.texture_level = as_f64(key, v)?,
            "data.min_size_frac" => self.scene.min_size_frac = as_f64(key, v)?,
            "data.max_size_frac" => self.scene.max_size_frac = as_f64(key, v)?,
            "data.video_frames" => self.video.frames = as_usize(key, v)?,
            "data.video_max_step_px" => self.video.max_step_px = as_usize(key, v)?,
            "data.video_min_objects" => self.video.min_objects = as_usize(key, v)?,
            "data.video_max_objects" => self.video.max_objects = as_usize(key, v)?,
            "data.video_min_size_frac" => self.video.min_size_frac = as_f64(key, v)?,
            "data.video_max_size_frac" => self.video.max_size_frac = as_f64(key, v)?,
            "augment.view_size" => self.augment.view_size = as_usize(key, v)?,
            "augment.discovery_ratio" => self.augment.discovery_ratio = as_f64(key, v)?,
            "augment.min_area_frac" => self.augment.min_area_frac = as_f64(key, v)?,
            "augment.brightness_max" => self.augment.brightness_max = as_f64(key, v)?,
            "augment.contrast_max" => self.augment.contrast_max = as_f64(key, v)?,
            "augment.saturation_max" => self.augment.saturation_max = as_f64(key, v)?,
            "augment.hue_max" => self.augment.hue_max = as_f64(key, v)?,
            "augment.blur_kernel" => self.augment.blur_kernel = as_usize(key, v)?,
            "augment.blur_sigma_min" => self.augment.blur_sigma_min = as_f64(key, v)?,
            "augment.blur_sigma_max" => self.augment.blur_sigma_max = as_f64(key, v)?,
            "model.conv_channels" => self.model.conv_channels = as_usize_list(key, v)?,
            "model.conv_strides" => self.model.conv_strides = as_usize_list(key, v)?,
            "model.conv_kernel" => self.model.conv_kernel = as_usize(key, v)?,
            "model.proj_hidden" => self.model.proj_hidden = as_usize(key, v)?,
            "model.proj_dim" => self.model.proj_dim = as_usize(key, v)?,
            "model.pred_hidden" => self.model.pred_hidden = as_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "train.total_steps" => self.train.total_steps = as_usize(key, v)?,
            "train.warmup_steps" => self.train.warmup_steps = as_usize(key, v)?,
            "train.base_lr" => self.train.base_lr = as_f64(key, v)?,
            "train.optimizer" => {
                self.train.optimizer = match as_str(key, v)? {
                    "sgd_momentum" => OptimizerKind::SgdMomentum,
                    "lars" => OptimizerKind::Lars,
                    other => {
                        return Err(Error::config(format!("{key}: unknown optimizer '{other}'")))
                    }
                }
            }
            "train.momentum" => self.train.momentum = as_f64(key, v)?,
            "train.weight_decay" => self.train.weight_decay = as_f64(key, v)?,
            "train.lambda_xi" => self.train.lambda_xi = as_f64(key, v)?,
            "train.lambda_xi_cosine_ramp" => {
                self.train.lambda_xi_cosine_ramp = as_bool(key, v)?
            }
            "train.alpha" => self.train.alpha = as_f64(key, v)?,
            "train.negative_policy" => {
                self.train.negative_policy = match as_str(key, v)? {
                    "within_and_across" => NegativePolicy::WithinAndAcrossImages,
                    "within" => NegativePolicy::WithinImage,
                    "across" => NegativePolicy::AcrossImages,
                    other => {
                        return Err(Error::config(format!("{key}: unknown policy '{other}'")))
                    }
                }
            }
            "train.checkpoint_every" => self.train.checkpoint_every = as_usize(key, v)?,
            "discovery.k" => self.discovery.k = as_usize(key, v)?,
            "discovery.source" => {
                self.discovery.source = match as_str(key, v)? {
                    "projection" => DiscoverySource::Projection,
                    "hidden" => DiscoverySource::Hidden,
                    other => {
                        return Err(Error::config(format!("{key}: unknown source '{other}'")))
                    }
                }
            }
            "discovery.kmeans_max_iters" => self.discovery.kmeans.max_iters = as_usize(key, v)?,
            "discovery.kmeans_tol" => self.discovery.kmeans.tol = as_f64(key, v)?,
            "discovery.kmeans_restarts" => self.discovery.kmeans.restarts = as_usize(key, v)?,
            "discovery.schedule" => {
                self.discovery.schedule = match as_str(key, v)? {
                    "continuous" => match self.discovery.schedule {
                        DiscoverySchedule::Continuous { lambda_tau } => {
                            DiscoverySchedule::Continuous { lambda_tau }
                        }
                        _ => DiscoverySchedule::Continuous { lambda_tau: 1e-3 },
                    },
                    "discrete" => match self.discovery.schedule {
                        DiscoverySchedule::Discrete { period_epochs } => {
                            DiscoverySchedule::Discrete { period_epochs }
                        }
                        _ => DiscoverySchedule::Discrete {
                            period_epochs: DEFAULT_COPY_PERIOD_EPOCHS,
                        },
                    },
                    other => {
                        return Err(Error::config(format!("{key}: unknown schedule '{other}'")))
                    }
                }
            }
            "discovery.lambda_tau" => {
                let rate = as_f64(key, v)?;
                self.discovery.schedule = DiscoverySchedule::Continuous { lambda_tau: rate };
            }
            "discovery.copy_period_epochs" => {
                let period = as_usize(key, v)?;
                self.discovery.schedule = DiscoverySchedule::Discrete { period_epochs: period };
            }
            "eval.ks" => self.eval.ks = as_usize_list(key, v)?,
            "eval.filter" => self.eval.filter_enabled = as_bool(key, v)?,
            "eval.filter_max_masks" => self.eval.filter.max_masks = as_usize(key, v)?,
            "eval.filter_min_area_px" => self.eval.filter.min_area_px = as_f64(key, v)?,
            "eval.propagation_radius" => self.eval.propagation.radius = as_usize(key, v)?,
            "eval.propagation_top_n" => self.eval.propagation.top_n = as_usize(key, v)?,
            "eval.boundary_tol" => self.eval.boundary_tol = as_usize(key, v)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Current value of a dotted key; `None` for unknown keys.
    pub fn get(&self, key: &str) -> Option<Value> {
        use serde_json::json;
        let shape_name = |k: &ShapeKind| match k {
            ShapeKind::Disk => "disk",
            ShapeKind::Rect => "rect",
            ShapeKind::Triangle => "triangle",
        };
        Some(match key {
            "seed" => json!(self.seed),
            "data.height" => json!(self.scene.height),
            "data.width" => json!(self.scene.width),
            "data.min_objects" => json!(self.scene.min_objects),
            "data.max_objects" => json!(self.scene.max_objects),
            "data.shape_kinds" => {
                json!(self.scene.shape_kinds.iter().map(shape_name).collect::<Vec<_>>())
            }
            "data.texture_level" => json!(self.scene.texture_level),
            "data.min_size_frac" => json!(self.scene.min_size_frac),
            "data.max_size_frac" => json!(self.scene.max_size_frac),
            "data.video_frames" => json!(self.video.frames),
            "data.video_max_step_px" => json!(self.video.max_step_px),
            "data.video_min_objects" => json!(self.video.min_objects),
            "data.video_max_objects" => json!(self.video.max_objects),
            "data.video_min_size_frac" => json!(self.video.min_size_frac),
            "data.video_max_size_frac" => json!(self.video.max_size_frac),
            "augment.view_size" => json!(self.augment.view_size),
            "augment.discovery_ratio" => json!(self.augment.discovery_ratio),
            "augment.min_area_frac" => json!(self.augment.min_area_frac),
            "augment.brightness_max" => json!(self.augment.brightness_max),
            "augment.contrast_max" => json!(self.augment.contrast_max),
            "augment.saturation_max" => json!(self.augment.saturation_max),
            "augment.hue_max" => json!(self.augment.hue_max),
            "augment.blur_kernel" => json!(self.augment.blur_kernel),
            "augment.blur_sigma_min" => json!(self.augment.blur_sigma_min),
            "augment.blur_sigma_max" => json!(self.augment.blur_sigma_max),
            "model.conv_channels" => json!(self.model.conv_channels),
            "model.conv_strides" => json!(self.model.conv_strides),
            "model.conv_kernel" => json!(self.model.conv_kernel),
            "model.proj_hidden" => json!(self.model.proj_hidden),
            "model.proj_dim" => json!(self.model.proj_dim),
            "model.pred_hidden" => json!(self.model.pred_hidden),
            "train.batch_size" => json!(self.train.batch_size),
            "train.total_steps" => json!(self.train.total_steps),
            "train.warmup_steps" => json!(self.train.warmup_steps),
            "train.base_lr" => json!(self.train.base_lr),
            "train.optimizer" => json!(match self.train.optimizer {
                OptimizerKind::SgdMomentum => "sgd_momentum",
                OptimizerKind::Lars => "lars",
            }),
            "train.momentum" => json!(self.train.momentum),
            "train.weight_decay" => json!(self.train.weight_decay),
            "train.lambda_xi" => json!(self.train.lambda_xi),
            "train.lambda_xi_cosine_ramp" => json!(self.train.lambda_xi_cosine_ramp),
            "train.alpha" => json!(self.train.alpha),
            "train.negative_policy" => json!(match self.train.negative_policy {
                NegativePolicy::WithinAndAcrossImages => "within_and_across",
                NegativePolicy::WithinImage => "within",
                NegativePolicy::AcrossImages => "across",
            }),
            "train.checkpoint_every" => json!(self.train.checkpoint_every),
            "discovery.k" => json!(self.discovery.k),
            "discovery.source" => json!(match self.discovery.source {
                DiscoverySource::Projection => "projection",
                DiscoverySource::Hidden => "hidden",
            }),
            "discovery.kmeans_max_iters" => json!(self.discovery.kmeans.max_iters),
            "discovery.kmeans_tol" => json!(self.discovery.kmeans.tol),
            "discovery.kmeans_restarts" => json!(self.discovery.kmeans.restarts),
            "discovery.schedule" => json!(match self.discovery.schedule {
                DiscoverySchedule::Continuous { .. } => "continuous",
                DiscoverySchedule::Discrete { .. } => "discrete",
            }),
            "discovery.lambda_tau" => match self.discovery.schedule {
                DiscoverySchedule::Continuous { lambda_tau } => json!(lambda_tau),
                DiscoverySchedule::Discrete { .. } => Value::Null,
            },
            "discovery.copy_period_epochs" => match self.discovery.schedule {
                DiscoverySchedule::Discrete { period_epochs } => json!(period_epochs),
                DiscoverySchedule::Continuous { .. } => Value::Null,
            },
            "eval.ks" => json!(self.eval.ks),
            "eval.filter" => json!(self.eval.filter_enabled),
            "eval.filter_max_masks" => json!(self.eval.filter.max_masks),
            "eval.filter_min_area_px" => json!(self.eval.filter.min_area_px),
            "eval.propagation_radius" => json!(self.eval.propagation.radius),
            "eval.propagation_top_n" => json!(self.eval.propagation.top_n),
            "eval.boundary_tol" => json!(self.eval.boundary_tol),
            _ => return None,
        })
    }

    /// Apply a flat key map, collecting every error before failing.
    pub fn apply_map(&mut self, map: &BTreeMap<String, Value>) -> Result<()> {
        let mut problems = Vec::new();
        for (key, value) in map {
            if let Err(e) = self.set(key, value) {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Parse a JSON config file of flat dotted keys.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let map: BTreeMap<String, Value> = serde_json::from_slice(&bytes)
            .map_err(|e| Error::config(format!("{} is not a flat JSON object: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_map(&map)?;
        Ok(cfg)
    }

    /// Apply `key=value` override strings; values parse as JSON with a
    /// plain-string fallback.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        let mut problems = Vec::new();
        for pair in pairs {
            let Some((key, raw)) = pair.split_once('=') else {
                problems.push(format!("override '{pair}' is not key=value"));
                continue;
            };
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            if let Err(e) = self.set(key.trim(), &value) {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Every key with its current value, as a flat JSON object.
    pub fn to_flat_json(&self) -> Value {
        let mut map = serde_json::Map::new();
        for (key, _) in KEY_SPECS {
            if let Some(v) = self.get(key) {
                if !v.is_null() {
                    map.insert((*key).to_string(), v);
                }
            }
        }
        Value::Object(map)
    }

    /// Cross-section validation, collecting every failure.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for result in [
            self.scene.validate(),
            self.video_config().validate(),
            self.augment.validate(),
            self.model.validate(),
            self.train.validate(),
        ] {
            if let Err(e) = result {
                problems.push(e.to_string());
            }
        }
        if self.discovery.k == 0 {
            problems.push("discovery.k must be >= 1".into());
        }
        if self.eval.ks.is_empty() {
            problems.push("eval.ks must not be empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Key/default/help table for `--help`.
    pub fn help_table() -> String {
        let defaults = RunConfig::default();
        let mut out = String::from("Configuration keys (JSON config file or --set key=value):\n");
        for (key, help) in KEY_SPECS {
            let default = defaults
                .get(key)
                .map(|v| v.to_string())
                .unwrap_or_else(|| "null".to_string());
            out.push_str(&format!("  {key:<28} default {default:<16} {help}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_key_gets_and_sets() {
        let mut cfg = RunConfig::default();
        for (key, _) in KEY_SPECS {
            let value = cfg.get(key).unwrap_or_else(|| panic!("no getter for {key}"));
            if value.is_null() {
                continue; // schedule-dependent keys
            }
            cfg.set(key, &value).unwrap_or_else(|e| panic!("set {key}: {e}"));
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_and_all_errors_reported() {
        let mut cfg = RunConfig::default();
        let mut map = BTreeMap::new();
        map.insert("nope.key".to_string(), serde_json::json!(1));
        map.insert("train.batch_size".to_string(), serde_json::json!("eight"));
        map.insert("discovery.k".to_string(), serde_json::json!(8));
        let err = cfg.apply_map(&map).unwrap_err().to_string();
        assert!(err.contains("nope.key"), "{err}");
        assert!(err.contains("train.batch_size"), "{err}");
        assert_eq!(cfg.discovery.k, 8, "valid keys still apply");
    }

    #[test]
    fn overrides_parse_json_values() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "discovery.k=8".to_string(),
            "train.base_lr=0.25".to_string(),
            "train.optimizer=lars".to_string(),
            "eval.ks=[1,2,4]".to_string(),
            "discovery.lambda_tau=0.01".to_string(),
        ])
        .unwrap();
        assert_eq!(cfg.discovery.k, 8);
        assert_eq!(cfg.train.base_lr, 0.25);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Lars);
        assert_eq!(cfg.eval.ks, vec![1, 2, 4]);
        assert_eq!(
            cfg.discovery.schedule,
            DiscoverySchedule::Continuous { lambda_tau: 0.01 }
        );
    }

    #[test]
    fn schedule_keys_switch_modes() {
        let mut cfg = RunConfig::default();
        cfg.set("discovery.copy_period_epochs", &serde_json::json!(5)).unwrap();
        assert_eq!(cfg.discovery.schedule, DiscoverySchedule::Discrete { period_epochs: 5 });
        cfg.set("discovery.schedule", &serde_json::json!("continuous")).unwrap();
        assert_eq!(
            cfg.discovery.schedule,
            DiscoverySchedule::Continuous { lambda_tau: 1e-3 }
        );
    }

    #[test]
    fn file_round_trip_preserves_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["discovery.k=32".into(), "data.height=48".into()]).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&cfg.to_flat_json()).unwrap()).unwrap();
        let loaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn help_table_covers_every_key() {
        let help = RunConfig::help_table();
        for (key, _) in KEY_SPECS {
            assert!(help.contains(key), "help table missing {key}");
        }
    }

    #[test]
    fn validate_collects_multiple_failures() {
        let mut cfg = RunConfig::default();
        cfg.scene.height = 4; // too small
        cfg.train.alpha = -1.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("32"), "{err}");
        assert!(err.contains("alpha"), "{err}");
    }
}
