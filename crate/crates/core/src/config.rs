//! Flat `key = value` configuration files with dotted section prefixes
//! (`loss.tau = 0.5`). Lines starting with `#` and blank lines are
//! ignored; keys must be unique; unknown keys are rejected up front so
//! typos fail loudly instead of silently falling back to defaults.
//!
//! Every typed builder starts from the corresponding `Default` and
//! overrides only the keys present, so defaults live in exactly one place.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::synth::SceneConfig;
use crate::trainer::TrainConfig;

/// Every key any command understands.
pub const ALL_KEYS: &[&str] = &[
    "data.dir",
    "scene.seed",
    "scene.count",
    "scene.classes",
    "scene.feature_dim",
    "scene.width",
    "scene.height",
    "scene.sweeps",
    "scene.points_per_sweep",
    "scene.window_seconds",
    "scene.prompts",
    "scene.prompt_noise",
    "scene.feature_noise",
    "scene.label_noise",
    "scene.ego_translation",
    "scene.ego_rotation",
    "scene.calib_rot_error",
    "scene.calib_trans_error",
    "train.epochs",
    "train.switch_epoch",
    "train.switch_prob",
    "train.w_s",
    "train.w_t",
    "train.seed",
    "train.lr0",
    "train.momentum",
    "train.hidden",
    "train.cell_size",
    "train.max_pairs",
    "train.scr_all_sweeps",
    "train.per_epoch_switch",
    "train.scenes_per_epoch",
    "augment.z_rotation_max",
    "augment.flip_x",
    "augment.flip_y",
    "loss.tau",
    "loss.lambda",
    "loss.include_positives",
    "loss.stop_gradient",
    "probe.fraction",
    "probe.epochs",
    "probe.lr0",
    "probe.momentum",
    "probe.seed",
    "probe.holdout",
    "eval.include_absent",
];

/// Parsed key-value pairs, keys sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlatConfig {
    values: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn empty() -> FlatConfig {
        FlatConfig::default()
    }

    /// Parses config text; `origin` names the source in error messages.
    pub fn parse_str(text: &str, origin: &str) -> Result<FlatConfig> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{origin}:{}: expected `key = value`, found {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(Error::config(format!(
                    "{origin}:{}: empty key or value",
                    lineno + 1
                )));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::config(format!(
                    "{origin}:{}: duplicate key {key}",
                    lineno + 1
                )));
            }
        }
        Ok(FlatConfig { values })
    }

    pub fn load(path: &Path) -> Result<FlatConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FlatConfig::parse_str(&text, &path.display().to_string())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Returns the parsed value, or `default` when the key is absent.
    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::config(format!("key {key}: cannot parse {raw:?}: {e}"))),
        }
    }

    /// Booleans accept `true`/`false`/`1`/`0`.
    pub fn get_bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::config(format!(
                "key {key}: expected true/false/1/0, found {other:?}"
            ))),
        }
    }

    /// Rejects any key outside `allowed`.
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        for key in self.keys() {
            if !allowed.contains(&key) {
                return Err(Error::config(format!("unknown config key {key}")));
            }
        }
        Ok(())
    }
}

/// Scene generation settings; `--seed` takes precedence over `scene.seed`.
pub fn scene_config_from(cfg: &FlatConfig, seed_override: Option<u64>) -> Result<SceneConfig> {
    let d = SceneConfig::default();
    let sc = SceneConfig {
        seed: seed_override
            .map(Ok)
            .unwrap_or_else(|| cfg.get_or("scene.seed", d.seed))?,
        num_classes: cfg.get_or("scene.classes", d.num_classes)?,
        feature_dim: cfg.get_or("scene.feature_dim", d.feature_dim)?,
        image_width: cfg.get_or("scene.width", d.image_width)?,
        image_height: cfg.get_or("scene.height", d.image_height)?,
        num_sweeps: cfg.get_or("scene.sweeps", d.num_sweeps)?,
        points_per_sweep: cfg.get_or("scene.points_per_sweep", d.points_per_sweep)?,
        window_seconds: cfg.get_or("scene.window_seconds", d.window_seconds)?,
        prompt_count: cfg.get_or("scene.prompts", d.prompt_count)?,
        prompt_noise_sigma: cfg.get_or("scene.prompt_noise", d.prompt_noise_sigma)?,
        feature_noise_sigma: cfg.get_or("scene.feature_noise", d.feature_noise_sigma)?,
        label_noise_rate: cfg.get_or("scene.label_noise", d.label_noise_rate)?,
        ego_translation: cfg.get_or("scene.ego_translation", d.ego_translation)?,
        ego_rotation: cfg.get_or("scene.ego_rotation", d.ego_rotation)?,
        calib_rot_error: cfg.get_or("scene.calib_rot_error", d.calib_rot_error)?,
        calib_trans_error: cfg.get_or("scene.calib_trans_error", d.calib_trans_error)?,
    };
    sc.validate()?;
    Ok(sc)
}

/// Number of scenes `gen` writes.
pub fn scene_count(cfg: &FlatConfig) -> Result<usize> {
    let count = cfg.get_or("scene.count", 4usize)?;
    if count == 0 {
        return Err(Error::config("scene.count must be >= 1"));
    }
    Ok(count)
}

/// Training settings; `--seed` takes precedence over `train.seed`.
pub fn train_config_from(cfg: &FlatConfig, seed_override: Option<u64>) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let tc = TrainConfig {
        epochs: cfg.get_or("train.epochs", d.epochs)?,
        switch_epoch: cfg.get_or("train.switch_epoch", d.switch_epoch)?,
        switch_prob: cfg.get_or("train.switch_prob", d.switch_prob)?,
        w_s: cfg.get_or("train.w_s", d.w_s)?,
        w_t: cfg.get_or("train.w_t", d.w_t)?,
        seed: seed_override
            .map(Ok)
            .unwrap_or_else(|| cfg.get_or("train.seed", d.seed))?,
        lr0: cfg.get_or("train.lr0", d.lr0)?,
        momentum: cfg.get_or("train.momentum", d.momentum)?,
        hidden_dim: cfg.get_or("train.hidden", d.hidden_dim)?,
        cell_size: cfg.get_or("train.cell_size", d.cell_size)?,
        max_pairs: cfg.get_or("train.max_pairs", d.max_pairs)?,
        scr_all_sweeps: cfg.get_bool_or("train.scr_all_sweeps", d.scr_all_sweeps)?,
        per_epoch_switch: cfg.get_bool_or("train.per_epoch_switch", d.per_epoch_switch)?,
        scenes_per_epoch: cfg.get_or("train.scenes_per_epoch", d.scenes_per_epoch)?,
        augment: crate::trainer::AugmentConfig {
            z_rotation_max: cfg.get_or("augment.z_rotation_max", d.augment.z_rotation_max)?,
            flip_x: cfg.get_bool_or("augment.flip_x", d.augment.flip_x)?,
            flip_y: cfg.get_bool_or("augment.flip_y", d.augment.flip_y)?,
        },
        loss: crate::losses::LossConfig {
            tau: cfg.get_or("loss.tau", d.loss.tau)?,
            lambda: cfg.get_or("loss.lambda", d.loss.lambda)?,
            include_positives_in_denominator: cfg
                .get_bool_or("loss.include_positives", d.loss.include_positives_in_denominator)?,
            stop_gradient_through_fusion: cfg
                .get_bool_or("loss.stop_gradient", d.loss.stop_gradient_through_fusion)?,
        },
    };
    tc.validate()?;
    Ok(tc)
}

/// Probe settings; `--fraction` and `--seed` take precedence.
pub fn probe_config_from(
    cfg: &FlatConfig,
    fraction_override: Option<f64>,
    seed_override: Option<u64>,
) -> Result<ProbeConfig> {
    let d = ProbeConfig::default();
    let pc = ProbeConfig {
        label_fraction: fraction_override
            .map(Ok)
            .unwrap_or_else(|| cfg.get_or("probe.fraction", d.label_fraction))?,
        epochs: cfg.get_or("probe.epochs", d.epochs)?,
        lr0: cfg.get_or("probe.lr0", d.lr0)?,
        momentum: cfg.get_or("probe.momentum", d.momentum)?,
        seed: seed_override
            .map(Ok)
            .unwrap_or_else(|| cfg.get_or("probe.seed", d.seed))?,
    };
    pc.validate()?;
    Ok(pc)
}

/// Directory of scene bundles consumed by training and evaluation.
pub fn data_dir(cfg: &FlatConfig) -> Option<PathBuf> {
    cfg.get_str("data.dir").map(PathBuf::from)
}

/// Number of trailing scenes the probe holds out for evaluation
/// (default: half, rounded up).
pub fn probe_holdout(cfg: &FlatConfig) -> Result<Option<usize>> {
    match cfg.get_str("probe.holdout") {
        None => Ok(None),
        Some(_) => cfg.get_or("probe.holdout", 0usize).map(Some),
    }
}

/// Whether mIoU should also count predicted-but-absent classes as zero.
pub fn eval_include_absent(cfg: &FlatConfig) -> Result<bool> {
    cfg.get_bool_or("eval.include_absent", false)
}
