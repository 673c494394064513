//! Run configuration. Every knob is a flat key; values come from a built-in
//! preset, then an optional TOML file, then command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use relpose_core::inter::InterConfig;
use relpose_core::intra::IntraConfig;
use relpose_core::model::{ModelConfig, ModelError};
use relpose_core::predict::Decoder;
use relpose_core::scenes::{CorrelationMode, SceneConfig, SkeletonTemplate};
use relpose_core::train::{AdamConfig, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration key `{key}`: {message}")]
    Key { key: String, message: String },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("configuration: {0}")]
    Parse(String),
}

impl ConfigError {
    pub fn key(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Key { key: key.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale numbers: 256×192 input, d = 96, 17 joints, N = 6, R = 4.
    Paper,
    /// Laptop scale: 64×48 input, d = 48, 5 joints, N = 3, R = 2.
    Desk,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset '{other}' (expected paper or desk)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateName {
    Desk,
    Coco17,
}

/// Keys without a preset value.
const OPTIONAL_KEYS: [&str; 4] = ["train_data", "val_data", "test_data", "checkpoint"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,

    // scenes
    pub template: TemplateName,
    /// Scenes written by `generate`, split 8/1/1 into train/val/test.
    pub scenes: usize,
    pub persons_per_scene: usize,
    pub correlation_mode: CorrelationMode,
    pub occlusion_rate: f64,
    pub scene_width: f64,
    pub scene_height: f64,
    pub min_person_height: f64,
    pub max_person_height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_data: Option<PathBuf>,

    // model
    pub input_height: usize,
    pub input_width: usize,
    pub channels_in: usize,
    pub d: usize,
    pub intra_blocks: usize,
    pub intra_heads: usize,
    pub intra_mlp_ratio: usize,
    pub k: usize,
    pub ratio: usize,
    pub persons: usize,
    pub inter_blocks: usize,
    pub inter_heads: usize,
    pub inter_mlp_ratio: f64,
    pub noise_scale: f64,
    pub intra_only: bool,

    // training
    pub steps: usize,
    pub batch: usize,
    pub alpha: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub freeze_intra: bool,
    pub target_sigma: f64,

    // evaluation and inference
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub decoder: Decoder,
    pub dump_attention: bool,
    pub joint_dump: bool,

    // gradient check
    pub gradcheck_eps: f64,
    pub gradcheck_tol: f64,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = RunConfig {
            preset,
            seed: 0,
            workers: 1,
            out: PathBuf::from("runs/desk"),
            template: TemplateName::Desk,
            scenes: 2500,
            persons_per_scene: 3,
            correlation_mode: CorrelationMode::SharedPoseGroup,
            occlusion_rate: 0.3,
            scene_width: 320.0,
            scene_height: 240.0,
            min_person_height: 64.0,
            max_person_height: 96.0,
            train_data: None,
            val_data: None,
            test_data: None,
            input_height: 64,
            input_width: 48,
            channels_in: 1,
            d: 48,
            intra_blocks: 4,
            intra_heads: 4,
            intra_mlp_ratio: 4,
            k: 5,
            ratio: 2,
            persons: 3,
            inter_blocks: 2,
            inter_heads: 4,
            inter_mlp_ratio: 0.25,
            noise_scale: 1.0,
            intra_only: false,
            steps: 3000,
            batch: 16,
            alpha: 1.0,
            lr_start: 1e-4,
            lr_end: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 500,
            checkpoint_every: 500,
            freeze_intra: false,
            target_sigma: 2.0,
            checkpoint: None,
            decoder: Decoder::Dark,
            dump_attention: false,
            joint_dump: false,
            gradcheck_eps: 1e-4,
            gradcheck_tol: 1e-4,
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => RunConfig {
                out: PathBuf::from("runs/paper"),
                template: TemplateName::Coco17,
                persons_per_scene: 6,
                scene_width: 640.0,
                scene_height: 480.0,
                min_person_height: 128.0,
                max_person_height: 192.0,
                input_height: 256,
                input_width: 192,
                d: 96,
                k: 17,
                ratio: 4,
                persons: 6,
                batch: 64,
                ..desk
            },
        }
    }

    /// Preset (flag, else the file's `preset` key, else paper), then the
    /// file's keys, then `overrides`. The result is validated.
    pub fn resolve(preset: Option<Preset>, file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self, ConfigError> {
        let file_table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File { path: path.into(), message: e.to_string() })?;
                text.parse::<toml::Table>().map_err(|e| ConfigError::File { path: path.into(), message: e.to_string() })?
            }
            None => toml::Table::new(),
        };
        let preset = match preset {
            Some(p) => p,
            None => match file_table.get("preset") {
                Some(v) => v.as_str().and_then(|s| s.parse().ok()).ok_or_else(|| ConfigError::key("preset", format!("{v} is not paper or desk")))?,
                None => Preset::Paper,
            },
        };
        let base = toml::Table::try_from(RunConfig::preset(preset)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut supplied: Vec<(String, toml::Value)> = file_table.into_iter().collect();
        supplied.extend(overrides.iter().cloned());
        supplied.retain(|(k, _)| k != "preset");
        let mut table = base.clone();
        for (k, v) in &supplied {
            if !base.contains_key(k) && !OPTIONAL_KEYS.contains(&k.as_str()) {
                return Err(ConfigError::key(k.as_str(), "unknown key"));
            }
            table.insert(k.clone(), v.clone());
        }
        let cfg: RunConfig = match table.try_into() {
            Ok(cfg) => cfg,
            Err(e) => {
                let e: toml::de::Error = e;
                // Name the first supplied key that fails on its own.
                for (k, v) in &supplied {
                    let mut single = base.clone();
                    single.insert(k.clone(), v.clone());
                    if let Err(one) = single.try_into::<RunConfig>() {
                        return Err(ConfigError::key(k.as_str(), one.message().to_string()));
                    }
                }
                return Err(ConfigError::Parse(e.message().to_string()));
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            intra: IntraConfig {
                input: (self.input_height, self.input_width),
                channels_in: self.channels_in,
                d: self.d,
                blocks: self.intra_blocks,
                heads: self.intra_heads,
                mlp_ratio: self.intra_mlp_ratio,
                k: self.k,
            },
            inter: InterConfig {
                ratio: self.ratio,
                persons: self.persons,
                blocks: self.inter_blocks,
                heads: self.inter_heads,
                mlp_ratio: self.inter_mlp_ratio,
                noise_scale: self.noise_scale,
                dump_attention: self.dump_attention,
            },
            intra_only: self.intra_only,
        }
    }

    pub fn skeleton(&self) -> SkeletonTemplate {
        match self.template {
            TemplateName::Desk => SkeletonTemplate::desk(),
            TemplateName::Coco17 => SkeletonTemplate::coco17(),
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            persons: self.persons_per_scene,
            mode: self.correlation_mode,
            occlusion_rate: self.occlusion_rate,
            width: self.scene_width,
            height: self.scene_height,
            min_person_height: self.min_person_height,
            max_person_height: self.max_person_height,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            alpha: self.alpha,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            adam: AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps },
            seed: self.seed,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            freeze_intra: self.freeze_intra,
            workers: self.workers,
            target_sigma: self.target_sigma,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model().validate().map_err(model_key)?;
        self.train_config().validate().map_err(train_key)?;
        let k = self.skeleton().k();
        if self.k != k {
            return Err(ConfigError::key("k", format!("{} does not match the {:?} template with {k} joints", self.k, self.template)));
        }
        if self.scenes == 0 {
            return Err(ConfigError::key("scenes", "must be positive"));
        }
        if self.persons_per_scene == 0 {
            return Err(ConfigError::key("persons_per_scene", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(ConfigError::key("occlusion_rate", format!("{} is outside [0, 1)", self.occlusion_rate)));
        }
        if !(self.scene_width > 0.0) {
            return Err(ConfigError::key("scene_width", "must be positive"));
        }
        if !(self.min_person_height > 0.0 && self.min_person_height <= self.max_person_height) {
            return Err(ConfigError::key("min_person_height", "must be positive and at most max_person_height"));
        }
        if self.max_person_height > self.scene_height {
            return Err(ConfigError::key("max_person_height", "exceeds scene_height"));
        }
        if !(self.gradcheck_eps > 0.0) {
            return Err(ConfigError::key("gradcheck_eps", "must be positive"));
        }
        if !(self.gradcheck_tol > 0.0) {
            return Err(ConfigError::key("gradcheck_tol", "must be positive"));
        }
        Ok(())
    }

    pub fn train_path(&self) -> PathBuf {
        self.train_data.clone().unwrap_or_else(|| self.out.join("train.jsonl"))
    }

    pub fn val_path(&self) -> PathBuf {
        self.val_data.clone().unwrap_or_else(|| self.out.join("val.jsonl"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.test_data.clone().unwrap_or_else(|| self.out.join("test.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    /// Keys that fix the parameter shapes of a checkpoint, with their values.
    pub fn architecture(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_height", self.input_height.to_string()),
            ("input_width", self.input_width.to_string()),
            ("channels_in", self.channels_in.to_string()),
            ("d", self.d.to_string()),
            ("k", self.k.to_string()),
            ("intra_blocks", self.intra_blocks.to_string()),
            ("intra_mlp_ratio", self.intra_mlp_ratio.to_string()),
            ("intra_only", self.intra_only.to_string()),
            ("inter_blocks", self.inter_blocks.to_string()),
            ("inter_mlp_ratio", self.inter_mlp_ratio.to_string()),
            ("ratio", self.ratio.to_string()),
        ]
    }
}

fn model_key(e: ModelError) -> ConfigError {
    match e {
        ModelError::Config { key, message } => ConfigError::key(key, message),
        other => ConfigError::Parse(other.to_string()),
    }
}

fn train_key(e: TrainError) -> ConfigError {
    match e {
        TrainError::Config { key, message } => ConfigError::key(key, message),
        other => ConfigError::Parse(other.to_string()),
    }
}

/// Parses `KEY=VALUE`; the value is read as a TOML literal, or as a bare
/// string when it is not one.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("'{s}' is not KEY=VALUE"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("'{s}' has an empty key"));
    }
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}
