//! Training configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! model.variant = mtan
//! model.widths = 8,16
//! model.tasks = segmentation,depth,normals
//! weighting.variant = dwa
//! weighting.t = 2.0
//! train.steps = 2000
//! ```
//!
//! Unset keys take the desk-scale defaults of [`TrainConfig::default`].
//! `model.k = N` is shorthand for the first `N` of segmentation, depth, normals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::data::SceneConfig;
use crate::model::{ModelConfig, Variant};
use crate::optim::AdamConfig;
use crate::tasks::TaskSpec;
use crate::weighting::WeightingScheme;

/// Environment variable naming the default root for run outputs.
pub const OUT_DIR_ENV: &str = "MTAN_OUT_DIR";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} set twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub widths: Vec<usize>,
    pub tasks: Vec<TaskKindName>,
    pub scene: SceneConfig,
    pub n_train: u64,
    pub n_val: u64,
    pub weighting: WeightingScheme,
    pub lr: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    /// First step (1-based) trained at half the learning rate; 0 halves from the start.
    pub lr_halve_at: u64,
    /// Steps per DWA epoch.
    pub dwa_epoch_len: u64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_every: u64,
    /// Log a training row every this many steps.
    pub log_every: u64,
    pub out_dir: PathBuf,
}

/// Task names accepted in `model.tasks`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKindName {
    Segmentation,
    Depth,
    Normals,
}

const TASK_ORDER: [TaskKindName; 3] = [TaskKindName::Segmentation, TaskKindName::Depth, TaskKindName::Normals];

impl TaskKindName {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKindName::Segmentation => "segmentation",
            TaskKindName::Depth => "depth",
            TaskKindName::Normals => "normals",
        }
    }
}

impl FromStr for TaskKindName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "segmentation" | "seg" => Ok(TaskKindName::Segmentation),
            "depth" => Ok(TaskKindName::Depth),
            "normals" | "normal" => Ok(TaskKindName::Normals),
            _ => Err(format!("unknown task {s:?} (expected segmentation, depth or normals)")),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Mtan,
            widths: vec![8, 16],
            tasks: TASK_ORDER.to_vec(),
            scene: SceneConfig::default(),
            n_train: 4000,
            n_val: 100,
            weighting: WeightingScheme::Equal,
            lr: 1e-3,
            adam: AdamConfig::default(),
            batch_size: 4,
            total_steps: 2000,
            lr_halve_at: 1000,
            dwa_epoch_len: 50,
            seed: 0,
            eval_every: 500,
            log_every: 1,
            out_dir: default_out_root().join("run"),
        }
    }
}

/// `$MTAN_OUT_DIR` if set, else `runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

impl TrainConfig {
    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|t| match t {
                TaskKindName::Segmentation => TaskSpec::segmentation(self.scene.num_classes),
                TaskKindName::Depth => TaskSpec::depth(),
                TaskKindName::Normals => TaskSpec::normals(),
            })
            .collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            widths: self.widths.clone(),
            input_channels: 3,
            tasks: self.task_specs(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Learning rate in effect at 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.lr_halve_at {
            self.lr / 2.0
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        let model = self.model_config();
        model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scene
            .validate_for(model.spatial_divisor())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.weighting.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.adam.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return invalid(format!("task {} listed twice", t.as_str()));
            }
        }
        if self.total_steps == 0 {
            return invalid("train.steps must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.lr_halve_at > self.total_steps {
            return invalid(format!(
                "train.lr_halve_at {} exceeds train.steps {}",
                self.lr_halve_at, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return invalid("train.batch_size must be at least 1".into());
        }
        let bottom = (self.scene.height / model.spatial_divisor()) * (self.scene.width / model.spatial_divisor());
        if self.batch_size * bottom < 2 {
            return invalid("batch norm needs at least 2 values per channel at the coarsest level".into());
        }
        if self.dwa_epoch_len == 0 || self.log_every == 0 {
            return invalid("train.dwa_epoch_len and train.log_every must be at least 1".into());
        }
        if self.n_train == 0 || self.n_val == 0 {
            return invalid("data.n_train and data.n_val must be at least 1".into());
        }
        Ok(())
    }

    /// Parse a config file body. Unset keys keep their defaults, except that
    /// `out_dir` falls back to `default_out_dir` and an unset
    /// `train.lr_halve_at` follows `train.steps` to the halfway point.
    pub fn parse(text: &str, default_out_dir: PathBuf) -> Result<Self> {
        let mut config = TrainConfig {
            out_dir: default_out_dir,
            ..TrainConfig::default()
        };
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut k: Option<(usize, usize)> = None;
        let mut tasks_line = None;
        let mut temperature: Option<f64> = None;
        let mut dwa = false;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_owned(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_owned(), line).is_some() {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_owned(),
                });
            }
            let bad = |msg: String| ConfigError::Value {
                line,
                key: key.to_owned(),
                msg,
            };
            fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
            }

            match key {
                "model.variant" => config.variant = value.parse().map_err(bad)?,
                "model.widths" => {
                    config.widths = value
                        .split(',')
                        .map(|w| num(w.trim()))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(bad)?
                }
                "model.tasks" => {
                    config.tasks = value
                        .split(',')
                        .map(|t| t.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(bad)?;
                    tasks_line = Some(line);
                }
                "model.k" => {
                    let n: usize = num(value).map_err(bad)?;
                    if !(1..=TASK_ORDER.len()).contains(&n) {
                        return Err(bad(format!("must be between 1 and {}", TASK_ORDER.len())));
                    }
                    k = Some((n, line));
                }
                "scene.height" => config.scene.height = num(value).map_err(bad)?,
                "scene.width" => config.scene.width = num(value).map_err(bad)?,
                "scene.classes" => config.scene.num_classes = num(value).map_err(bad)?,
                "scene.min_shapes" => config.scene.min_shapes = num(value).map_err(bad)?,
                "scene.max_shapes" => config.scene.max_shapes = num(value).map_err(bad)?,
                "scene.z_min" => config.scene.z_min = num(value).map_err(bad)?,
                "scene.z_max" => config.scene.z_max = num(value).map_err(bad)?,
                "scene.noise_std" => config.scene.noise_std = num(value).map_err(bad)?,
                "scene.seed" => config.scene.seed = num(value).map_err(bad)?,
                "data.n_train" => config.n_train = num(value).map_err(bad)?,
                "data.n_val" => config.n_val = num(value).map_err(bad)?,
                "weighting.variant" => match value {
                    "equal" => dwa = false,
                    "dwa" => dwa = true,
                    _ => return Err(bad(format!("{value:?} (expected equal or dwa)"))),
                },
                "weighting.t" => temperature = Some(num(value).map_err(bad)?),
                "train.lr" => config.lr = num(value).map_err(bad)?,
                "train.beta1" => config.adam.beta1 = num(value).map_err(bad)?,
                "train.beta2" => config.adam.beta2 = num(value).map_err(bad)?,
                "train.eps" => config.adam.eps = num(value).map_err(bad)?,
                "train.batch_size" => config.batch_size = num(value).map_err(bad)?,
                "train.steps" => config.total_steps = num(value).map_err(bad)?,
                "train.lr_halve_at" => config.lr_halve_at = num(value).map_err(bad)?,
                "train.dwa_epoch_len" => config.dwa_epoch_len = num(value).map_err(bad)?,
                "train.seed" => config.seed = num(value).map_err(bad)?,
                "train.eval_every" => config.eval_every = num(value).map_err(bad)?,
                "train.log_every" => config.log_every = num(value).map_err(bad)?,
                "train.out_dir" => config.out_dir = PathBuf::from(value),
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_owned(),
                    })
                }
            }
        }

        match (k, tasks_line) {
            (Some((n, line)), Some(_)) if n != config.tasks.len() => {
                return Err(ConfigError::Value {
                    line,
                    key: "model.k".into(),
                    msg: format!("{n} disagrees with {} tasks in model.tasks", config.tasks.len()),
                })
            }
            (Some((n, _)), None) => config.tasks = TASK_ORDER[..n].to_vec(),
            _ => {}
        }
        if seen.contains_key("train.steps") && !seen.contains_key("train.lr_halve_at") {
            config.lr_halve_at = config.total_steps / 2;
        }
        if config.variant == Variant::Stan && k.is_none() && tasks_line.is_none() {
            config.tasks.truncate(1);
        }
        config.weighting = if dwa {
            WeightingScheme::Dwa {
                temperature: temperature.unwrap_or(2.0),
            }
        } else {
            WeightingScheme::Equal
        };
        config.validate()?;
        Ok(config)
    }

    /// Canonical text form listing every key. Parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let list = |xs: Vec<String>| xs.join(",");
        put("model.variant", self.variant.to_string());
        put("model.widths", list(self.widths.iter().map(ToString::to_string).collect()));
        put("model.tasks", list(self.tasks.iter().map(|t| t.as_str().to_owned()).collect()));
        let sc = &self.scene;
        put("scene.height", sc.height.to_string());
        put("scene.width", sc.width.to_string());
        put("scene.classes", sc.num_classes.to_string());
        put("scene.min_shapes", sc.min_shapes.to_string());
        put("scene.max_shapes", sc.max_shapes.to_string());
        put("scene.z_min", sc.z_min.to_string());
        put("scene.z_max", sc.z_max.to_string());
        put("scene.noise_std", sc.noise_std.to_string());
        put("scene.seed", sc.seed.to_string());
        put("data.n_train", self.n_train.to_string());
        put("data.n_val", self.n_val.to_string());
        match self.weighting {
            WeightingScheme::Equal => put("weighting.variant", "equal".into()),
            WeightingScheme::Dwa { temperature } => {
                put("weighting.variant", "dwa".into());
                put("weighting.t", temperature.to_string());
            }
        }
        put("train.lr", self.lr.to_string());
        put("train.beta1", self.adam.beta1.to_string());
        put("train.beta2", self.adam.beta2.to_string());
        put("train.eps", self.adam.eps.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.steps", self.total_steps.to_string());
        put("train.lr_halve_at", self.lr_halve_at.to_string());
        put("train.dwa_epoch_len", self.dwa_epoch_len.to_string());
        put("train.seed", self.seed.to_string());
        put("train.eval_every", self.eval_every.to_string());
        put("train.log_every", self.log_every.to_string());
        put("train.out_dir", self.out_dir.display().to_string());
        s
    }

    /// Short label for comparison tables, e.g. `mtan` or `stan-depth`.
    pub fn architecture_label(&self) -> String {
        match self.variant {
            Variant::Stan => format!("stan-{}", self.tasks[0].as_str()),
            v => v.to_string(),
        }
    }
}
