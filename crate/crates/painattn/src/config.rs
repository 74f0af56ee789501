//! `key=value` text configuration.
//!
//! Blank lines and lines starting with `#` are ignored. A file may be split
//! into `[section]`s; run settings are read from the unnamed leading part
//! and from `[config]`, so a run manifest can be fed back as `--config`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use painattn_core::model::ModelConfig;
use painattn_core::synth::{ProtocolConfig, TempMode};
use painattn_core::train::{TaskSpec, TrainConfig};

use crate::error::{AppError, AppResult};

/// Flat `key=value` lines; duplicates and section headers are errors. Errors carry the 1-based line.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, (usize, String)> {
    let mut sections = parse_sections(text)?;
    if sections.keys().any(|s| !s.is_empty()) {
        let line = text
            .lines()
            .position(|l| l.trim_start().starts_with('['))
            .unwrap_or(0)
            + 1;
        return Err((line, "sections are not allowed here".into()));
    }
    Ok(sections.remove("").unwrap_or_default())
}

/// Lines grouped by `[section]`; keys before the first header go under `""`.
/// Only lines of sections named `""` or `config` must be `key=value`.
pub fn parse_sections(
    text: &str,
) -> Result<BTreeMap<String, BTreeMap<String, String>>, (usize, String)> {
    let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            out.entry(section.clone()).or_default();
            continue;
        }
        let strict = section.is_empty() || section == "config";
        let Some((k, v)) = line.split_once('=') else {
            if strict {
                return Err((i + 1, format!("expected key=value, got {line:?}")));
            }
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        let entries = out.entry(section.clone()).or_default();
        if strict && k.is_empty() {
            return Err((i + 1, "empty key".into()));
        }
        if entries.insert(k.to_string(), v.to_string()).is_some() && strict {
            return Err((i + 1, format!("duplicate key {k:?}")));
        }
    }
    Ok(out)
}

/// Which network size to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    Reference,
    Mini,
}

impl ModelPreset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Reference => "reference",
            Self::Mini => "mini",
        }
    }
}

/// Every setting of a run, resolved from defaults, then a config file, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub task: String,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub class_weighting: bool,
    pub model: ModelPreset,
    pub heads: usize,
    pub blocks: usize,
    pub jobs: usize,
    pub temp_mode: TempMode,
    pub noise: f64,
    pub gain: f64,
    pub subjects: usize,
    pub sample_rate: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            data: None,
            out: None,
            checkpoint: None,
            task: "t0t4".into(),
            seed: train.seed,
            epochs: train.epochs,
            lr: train.lr,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            class_weighting: train.class_weighting,
            model: ModelPreset::Reference,
            heads: 5,
            blocks: 1,
            jobs: 1,
            temp_mode: TempMode::Verbatim,
            noise: 0.05,
            gain: 1.0,
            subjects: 5,
            sample_rate: 512,
        }
    }
}

fn parse<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("expected {what}, got {value:?}"))
}

/// `lr` -> `--lr`, `batch_size` -> `--batch-size`.
pub fn flag_name(key: &str) -> String {
    format!("--{}", key.replace('_', "-"))
}

impl RunConfig {
    pub const KEYS: [&'static str; 19] = [
        "data",
        "out",
        "checkpoint",
        "task",
        "seed",
        "epochs",
        "lr",
        "weight_decay",
        "batch_size",
        "class_weighting",
        "model",
        "heads",
        "blocks",
        "jobs",
        "temp_mode",
        "noise",
        "gain",
        "subjects",
        "sample_rate",
    ];

    /// Sets one key from its text form. The error does not name the origin.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "task" => {
                TaskSpec::by_name(value).ok_or_else(|| {
                    format!(
                        "unknown task {value:?} (one of 5way, pain-any, t0t1, t0t2, t0t3, t0t4)"
                    )
                })?;
                self.task = value.to_string();
            }
            "seed" => self.seed = parse(value, "an unsigned integer")?,
            "epochs" => self.epochs = parse(value, "an unsigned integer")?,
            "lr" => self.lr = parse(value, "a number")?,
            "weight_decay" => self.weight_decay = parse(value, "a number")?,
            "batch_size" => self.batch_size = parse(value, "an unsigned integer")?,
            "class_weighting" => self.class_weighting = parse(value, "true or false")?,
            "model" => {
                self.model = match value {
                    "reference" => ModelPreset::Reference,
                    "mini" => ModelPreset::Mini,
                    _ => return Err(format!("expected reference or mini, got {value:?}")),
                }
            }
            "heads" => self.heads = parse(value, "an unsigned integer")?,
            "blocks" => self.blocks = parse(value, "an unsigned integer")?,
            "jobs" => self.jobs = parse(value, "an unsigned integer")?,
            "temp_mode" => {
                self.temp_mode = TempMode::parse(value)
                    .ok_or_else(|| format!("expected verbatim or endpoint, got {value:?}"))?
            }
            "noise" => self.noise = parse(value, "a number")?,
            "gain" => self.gain = parse(value, "a number")?,
            "subjects" => self.subjects = parse(value, "an unsigned integer")?,
            "sample_rate" => self.sample_rate = parse(value, "an unsigned integer")?,
            _ => return Err(format!("unknown setting {key:?}")),
        }
        Ok(())
    }

    /// Applies the `[config]` part of a file.
    pub fn apply_file(&mut self, path: &Path) -> AppResult<()> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let usage = |line: usize, msg: String| {
            AppError::Usage(format!("{} line {line}: {msg}", path.display()))
        };
        let mut sections = parse_sections(&text).map_err(|(l, m)| usage(l, m))?;
        let mut entries: Vec<(String, String)> = Vec::new();
        for name in ["", "config"] {
            entries.extend(sections.remove(name).unwrap_or_default());
        }
        for (k, v) in entries {
            let line = text
                .lines()
                .position(|l| l.split_once('=').is_some_and(|(lk, _)| lk.trim() == k))
                .map_or(0, |i| i + 1);
            self.set(&k, &v)
                .map_err(|m| usage(line, format!("{k}: {m}")))?;
        }
        Ok(())
    }

    pub fn apply_flag(&mut self, key: &str, value: &str) -> AppResult<()> {
        self.set(key, value)
            .map_err(|m| AppError::Usage(format!("{}: {m}", flag_name(key))))
    }

    /// Range checks that do not depend on the command.
    pub fn validate(&self) -> AppResult<()> {
        let bad = |key: &str, msg: &str| Err(AppError::Usage(format!("{} {msg}", flag_name(key))));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be a positive number");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be a non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.heads == 0 {
            return bad("heads", "must be at least 1");
        }
        if self.blocks == 0 {
            return bad("blocks", "must be at least 1");
        }
        if self.jobs == 0 {
            return bad("jobs", "must be at least 1");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise", "must be a non-negative number");
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return bad("gain", "must be a positive number");
        }
        if self.subjects == 0 || self.subjects > u16::MAX as usize {
            return bad("subjects", "must be between 1 and 65535");
        }
        if self.sample_rate == 0 {
            return bad("sample_rate", "must be at least 1");
        }
        Ok(())
    }

    /// Resolved settings in a fixed order; unset paths are left out.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let all = [
            ("data", path(&self.data)),
            ("out", path(&self.out)),
            ("checkpoint", path(&self.checkpoint)),
            ("task", Some(self.task.clone())),
            ("seed", Some(self.seed.to_string())),
            ("epochs", Some(self.epochs.to_string())),
            ("lr", Some(self.lr.to_string())),
            ("weight_decay", Some(self.weight_decay.to_string())),
            ("batch_size", Some(self.batch_size.to_string())),
            ("class_weighting", Some(self.class_weighting.to_string())),
            ("model", Some(self.model.name().to_string())),
            ("heads", Some(self.heads.to_string())),
            ("blocks", Some(self.blocks.to_string())),
            ("jobs", Some(self.jobs.to_string())),
            ("temp_mode", Some(self.temp_mode.name().to_string())),
            ("noise", Some(self.noise.to_string())),
            ("gain", Some(self.gain.to_string())),
            ("subjects", Some(self.subjects.to_string())),
            ("sample_rate", Some(self.sample_rate.to_string())),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .collect()
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::by_name(&self.task).expect("validated in set")
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let mut cfg = match self.model {
            ModelPreset::Reference => ModelConfig::reference(num_classes),
            ModelPreset::Mini => ModelConfig::mini(num_classes),
        };
        cfg.encoder.heads = self.heads;
        cfg.encoder.blocks = self.blocks;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            class_weighting: self.class_weighting,
            ..TrainConfig::default()
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            temp_mode: self.temp_mode,
            sample_rate: self.sample_rate,
            ..ProtocolConfig::default()
        }
    }
}
