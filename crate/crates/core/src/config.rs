//! Run configuration. Every tunable constant of the pipeline lives here so that
//! a (config, seed) pair fully determines a run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variables with this prefix override config keys, e.g.
/// `SEGTRACK_TRACKER__T_SC=0.4` sets `tracker.t_sc`.
pub const ENV_PREFIX: &str = "SEGTRACK_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub crop: CropConfig,
    pub seg: SegConfig,
    pub inst: InstConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            crop: CropConfig::default(),
            seg: SegConfig::default(),
            inst: InstConfig::default(),
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of the four backbone stages (strides 4/8/16/32).
    pub backbone_channels: [usize; 4],
    /// Channels of the segmentation features (C_s).
    pub seg_channels: usize,
    /// Channels of the instance features (C_c).
    pub clf_channels: usize,
    /// Backbone stride feeding the segmentation feature head.
    pub seg_source_stride: usize,
    /// Backbone stride feeding the instance feature head.
    pub clf_source_stride: usize,
    /// Mask-encoding depth (E).
    pub encoding_dim: usize,
    pub seg_kernel: usize,
    pub clf_kernel: usize,
    pub label_hidden: usize,
    pub score_encoder_channels: usize,
    pub decoder_channels: [usize; 4],
    /// Initial value of the learnable segmentation regularizer.
    pub init_lambda_s: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [16, 32, 64, 64],
            seg_channels: 16,
            clf_channels: 32,
            seg_source_stride: 16,
            clf_source_stride: 32,
            encoding_dim: 16,
            seg_kernel: 3,
            clf_kernel: 4,
            label_hidden: 16,
            score_encoder_channels: 64,
            decoder_channels: [64, 32, 16, 8],
            init_lambda_s: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    /// Crop side relative to the larger target extent.
    pub area_factor: f64,
    /// (rows, cols) of the resampled search patch.
    pub out_resolution: [usize; 2],
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            area_factor: 6.0,
            out_resolution: [480, 832],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub capacity: usize,
    /// Weight given to a new sample; older samples decay by `1 - learning_rate`.
    pub learning_rate: f64,
    pub iter_init: usize,
    pub iter_update: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            capacity: 32,
            learning_rate: 0.1,
            iter_init: 20,
            iter_update: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstConfig {
    pub capacity: usize,
    pub learning_rate: f64,
    pub lambda_c: f64,
    /// Label value separating the squared (foreground) and hinge (background) regions.
    pub fg_threshold: f64,
    pub iter_init: usize,
    pub iter_update: usize,
    /// Label sigma in feature cells per unit of geometric-mean target size / stride.
    pub sigma_factor: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for InstConfig {
    fn default() -> Self {
        Self {
            capacity: 50,
            learning_rate: 0.01,
            lambda_c: 0.01,
            fg_threshold: 0.05,
            iter_init: 10,
            iter_update: 2,
            sigma_factor: 0.25,
            sigma_min: 0.5,
            sigma_max: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the classification loss.
    pub eta: f64,
    /// Frames per training sequence (J).
    pub seq_len: usize,
    /// Instance-learner iterations unrolled during training.
    pub n_iter: usize,
    pub seg_iter_init: usize,
    pub seg_iter_update: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Steps at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Maximum crop-center jitter as a fraction of target size.
    pub center_jitter: f64,
    /// Maximum relative crop-size jitter.
    pub scale_jitter: f64,
    /// Number of distinct synthetic scenes in the training pool.
    pub num_scenes: usize,
    /// Frame spacing inside a training sequence.
    pub frame_gap: usize,
    /// Training scenes share one appearance and differ only in motion.
    pub shared_appearance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 10.0,
            seq_len: 4,
            n_iter: 5,
            seg_iter_init: 10,
            seg_iter_update: 3,
            steps: 500,
            batch_size: 1,
            learning_rate: 1e-3,
            lr_decay: 0.2,
            lr_milestones: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            center_jitter: 1.5,
            scale_jitter: 0.2,
            num_scenes: 1,
            frame_gap: 5,
            shared_appearance: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 200 epochs with decay 0.2 at epochs 25, 115 and 160.
    pub fn full_scale_preset(steps_per_epoch: usize) -> Self {
        Self {
            steps: 200 * steps_per_epoch,
            lr_milestones: [25, 115, 160].iter().map(|e| e * steps_per_epoch).collect(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Instance-score threshold for a confident localization.
    pub t_sc: f64,
    /// Segmentation-probability threshold for a valid mask.
    pub t_ss: f64,
    /// Frames that must pass before a learner is re-solved.
    pub refit_interval: usize,
    /// Frames during which memories are updated every frame.
    pub init_phase: usize,
    /// Memory update period after the initial phase.
    pub update_interval: usize,
    pub scale_history: usize,
    /// Maximum relative per-side size change between frames.
    pub max_scale_change: f64,
    /// Search-area growth per consecutive lost frame (fraction of area).
    pub lost_area_growth: f64,
    /// Cap of the lost-state search side relative to the last confident size.
    pub lost_growth_cap: f64,
    /// Multiplier from probability standard deviation to target extent.
    pub size_std_factor: f64,
    pub min_size: f64,
    pub augmentations: usize,
    /// Maximum augmentation shift as a fraction of the crop size.
    pub aug_translate: f64,
    pub aug_blur_sigma: [f64; 2],
    /// Condition the decoder on the encoded instance scores.
    pub conditioning: bool,
    /// Use the score-map peak to relocate the target when the mask fails.
    pub fallback: bool,
    pub write_masks: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            t_sc: 0.3,
            t_ss: 0.5,
            refit_interval: 20,
            init_phase: 100,
            update_interval: 20,
            scale_history: 60,
            max_scale_change: 0.2,
            lost_area_growth: 0.02,
            lost_growth_cap: 3.0,
            size_std_factor: 4.0,
            min_size: 2.0,
            augmentations: 3,
            aug_translate: 0.1,
            aug_blur_sigma: [0.5, 2.0],
            conditioning: true,
            fallback: true,
            write_masks: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub shape: ShapeKind,
    pub frame_size: [usize; 2],
    pub length: usize,
    pub target_size: [f64; 2],
    pub speed: f64,
    pub noise: f64,
    pub distractor: bool,
    /// Distance between target and distractor centers, in pixels.
    pub distractor_radius: f64,
    /// Frames (inclusive start, exclusive end) where the target is hidden.
    pub occlusion: Option<[usize; 2]>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            shape: ShapeKind::Ellipse,
            frame_size: [160, 160],
            length: 60,
            target_size: [22.0, 22.0],
            speed: 1.5,
            noise: 0.02,
            distractor: false,
            distractor_radius: 42.0,
            occlusion: None,
        }
    }
}

fn range_err(key: &str, msg: &str) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Apply `PREFIX SECTION__KEY=value` overrides from an environment map.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut doc: toml::Table =
            toml::from_str(&self.to_toml_string()).map_err(|e| Error::Config(e.to_string()))?;
        let mut touched = false;
        let overrides: BTreeMap<String, String> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(|s| s.to_ascii_lowercase())
                .collect();
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(raw.clone()));
            let mut table = &mut doc;
            for part in &path[..path.len() - 1] {
                table = table
                    .get_mut(part)
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| Error::Config(format!("unknown config section in {key}")))?;
            }
            let leaf = path.last().unwrap();
            if !table.contains_key(leaf) && leaf != "occlusion" {
                return Err(Error::Config(format!("unknown config key in {key}")));
            }
            table.insert(leaf.clone(), value);
            touched = true;
        }
        if touched {
            *self = Self::from_toml_str(&toml::to_string(&doc).expect("table serializes"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(range_err(
                "schema_version",
                &format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        let m = &self.model;
        if ![8, 16, 32].contains(&m.seg_source_stride) {
            return Err(range_err("model.seg_source_stride", "must be one of 8, 16, 32"));
        }
        if ![8, 16, 32].contains(&m.clf_source_stride) {
            return Err(range_err("model.clf_source_stride", "must be one of 8, 16, 32"));
        }
        if m.seg_kernel == 0 || m.clf_kernel == 0 || m.encoding_dim == 0 {
            return Err(range_err("model", "kernels and encoding_dim must be positive"));
        }
        if m.init_lambda_s <= 0.0 {
            return Err(range_err("model.init_lambda_s", "must be > 0"));
        }
        let c = &self.crop;
        if c.area_factor <= 0.0 || !c.area_factor.is_finite() {
            return Err(range_err("crop.area_factor", "must be > 0"));
        }
        if c.out_resolution.iter().any(|&r| r == 0 || r % 32 != 0) {
            return Err(range_err(
                "crop.out_resolution",
                "components must be positive multiples of 32",
            ));
        }
        for (key, cap, lr) in [
            ("seg", self.seg.capacity, self.seg.learning_rate),
            ("inst", self.inst.capacity, self.inst.learning_rate),
        ] {
            if cap < 1 {
                return Err(range_err(key, "capacity must be >= 1"));
            }
            if !(0.0..=1.0).contains(&lr) {
                return Err(range_err(key, "learning_rate must be in [0, 1]"));
            }
        }
        let i = &self.inst;
        if i.lambda_c < 0.0 || !(0.0..=1.0).contains(&i.fg_threshold) {
            return Err(range_err("inst", "lambda_c >= 0 and fg_threshold in [0, 1]"));
        }
        if !(i.sigma_factor > 0.0 && i.sigma_min > 0.0 && i.sigma_min <= i.sigma_max) {
            return Err(range_err("inst", "sigma parameters must be positive and ordered"));
        }
        let t = &self.train;
        if t.eta < 0.0 {
            return Err(range_err("train.eta", "must be >= 0"));
        }
        if t.n_iter < 1 {
            return Err(range_err("train.n_iter", "must be >= 1"));
        }
        if t.seq_len < 2 {
            return Err(range_err("train.seq_len", "must be >= 2"));
        }
        if t.batch_size < 1 || t.num_scenes < 1 || t.frame_gap < 1 {
            return Err(range_err("train", "batch_size, num_scenes and frame_gap must be >= 1"));
        }
        if !(t.center_jitter >= 0.0 && t.scale_jitter >= 0.0 && t.scale_jitter < 1.0) {
            return Err(range_err("train", "center_jitter >= 0 and scale_jitter in [0, 1)"));
        }
        if t.learning_rate < 0.0 || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(range_err("train", "learning_rate >= 0, betas in [0, 1)"));
        }
        let k = &self.tracker;
        if !(0.0..=1.0).contains(&k.t_ss) || !k.t_sc.is_finite() {
            return Err(range_err("tracker", "t_ss in [0, 1] and finite t_sc"));
        }
        if k.refit_interval < 1 || k.update_interval < 1 || k.scale_history < 1 {
            return Err(range_err("tracker", "intervals and history must be >= 1"));
        }
        if !(0.0..1.0).contains(&k.max_scale_change) {
            return Err(range_err("tracker.max_scale_change", "must be in [0, 1)"));
        }
        if k.size_std_factor <= 0.0 || k.min_size <= 0.0 || k.lost_growth_cap < 1.0 {
            return Err(range_err("tracker", "size parameters must be positive"));
        }
        if k.aug_blur_sigma[0] <= 0.0 || k.aug_blur_sigma[0] > k.aug_blur_sigma[1] {
            return Err(range_err("tracker.aug_blur_sigma", "must be an ordered positive range"));
        }
        let s = &self.synthetic;
        if s.frame_size.iter().any(|&d| d < 32) || s.length < 2 {
            return Err(range_err("synthetic", "frames must be >= 32 px and length >= 2"));
        }
        if s.target_size.iter().any(|&d| d <= 0.0) {
            return Err(range_err("synthetic.target_size", "must be positive"));
        }
        if !(s.noise >= 0.0 && s.speed >= 0.0 && s.distractor_radius >= 0.0) {
            return Err(range_err("synthetic", "noise, speed and distractor_radius must be >= 0"));
        }
        Ok(())
    }
}
