//! Layered `key = value` settings: built-in defaults, then a config file,
//! then explicit overrides. Unknown keys are rejected at every layer.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::augment::{AugmentationSpec, Range};
use crate::error::{Error, Result};
use crate::model::UNetConfig;
use crate::train::{AdamParams, LossParams, Phase, Seeds, TrainConfig};

/// Every recognised key with its default and a short description.
pub const DEFAULTS: &[(&str, &str, &str)] = &[
    ("manifest", "", "list of <image>TAB<mask> paths"),
    ("split_file", "", "existing split to reuse; empty draws a new one"),
    ("split.train", "19", "images in the training split"),
    ("split.val", "2", "images in the validation split"),
    ("split.test", "2", "images in the test split"),
    (
        "output_dir",
        "runs/latest",
        "directory for checkpoints, history and run manifest",
    ),
    ("seed.split", "auto", "dataset split seed"),
    ("seed.init", "auto", "weight initialisation seed"),
    ("seed.sampling", "auto", "window and augmentation sampling seed"),
    ("epochs", "600", "total training epochs"),
    ("phases", "300:1e-3,300:1e-4", "epochs:learning_rate pairs"),
    ("batch_size", "20", "windows per optimiser step"),
    ("windows_per_image", "20", "random windows drawn per image per epoch"),
    ("window_width", "320", "training window width"),
    ("window_height", "240", "training window height"),
    ("checkpoint_every", "50", "epochs between checkpoints"),
    ("model.depth", "4", "U-Net pooling levels"),
    ("model.base_channels", "16", "channels at the first level"),
    ("model.upsample", "transposed", "transposed | nearest"),
    ("loss.lambda_dice", "1", "Dice term weight"),
    ("loss.lambda_focal", "1", "focal term weight"),
    ("loss.gamma", "2", "focal exponent"),
    ("loss.epsilon", "1", "Dice smoothing"),
    ("loss.prob_clip", "1e-7", "probability clamp inside the focal log"),
    ("adam.beta1", "0.9", ""),
    ("adam.beta2", "0.999", ""),
    ("adam.epsilon", "1e-8", ""),
    ("augment.enabled", "true", "random augmentation of training windows"),
    ("augment.p_affine", "0.5", ""),
    ("augment.p_histeq", "0.5", ""),
    ("augment.p_clahe", "0.5", ""),
    ("augment.p_rescale", "0.5", ""),
    ("augment.p_log", "0.5", ""),
    ("augment.p_blur", "0.5", ""),
    ("augment.scale", "0.9,1.1", ""),
    ("augment.rotation_deg", "-15,15", ""),
    ("augment.shear_deg", "-10,10", ""),
    ("augment.clahe_clip", "1,4", ""),
    ("augment.clahe_tiles", "8", ""),
    ("augment.rescale_low", "0,0.2", ""),
    ("augment.rescale_high", "0.8,1", ""),
    ("augment.log_gain", "0.5,2", ""),
    ("augment.blur_sigma", "0.5,2", ""),
    ("threshold", "0.45", "binarisation threshold for segment"),
    ("select_on", "val", "split used to pick the eval threshold: val | test"),
    ("tile_width", "512", ""),
    ("tile_height", "512", ""),
    ("tile_overlap", "64", ""),
    (
        "memory_limit_mb",
        "0",
        "full-image inference budget; 0 disables the check",
    ),
    ("fractal.offsets", "1", "grid offsets averaged in box counting"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
    Generated,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
            Source::Generated => "generated",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, (String, Source)>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: DEFAULTS
                .iter()
                .map(|(k, v, _)| (k.to_string(), (v.to_string(), Source::Default)))
                .collect(),
        }
    }
}

fn split_line(line: &str) -> Option<(&str, &str)> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) => (k.trim(), v.trim()),
        None => (line, ""),
    })
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = (value.to_string(), source);
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: Source) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let Some((key, value)) = split_line(raw) else { continue };
            if !raw.contains('=') {
                return Err(Error::Config(format!("line {}: expected 'key = value'", n + 1)));
            }
            self.set(key, value, source)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, Source::File)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for pair in pairs {
            let (k, v) = pair
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", pair.as_ref())))?;
            self.set(k.trim(), v.trim(), Source::Flag)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("undeclared key '{key}'"))
            .0
    }

    pub fn source(&self, key: &str) -> Source {
        self.values[key].1
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
    }

    fn range(&self, key: &str) -> Result<Range> {
        let v = self.get(key);
        let bad = || Error::Config(format!("'{key}' must be 'low,high', got '{v}'"));
        let (a, b) = v.split_once(',').ok_or_else(bad)?;
        Ok(Range::new(
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        ))
    }

    /// Replaces every `auto` seed with a freshly generated one.
    pub fn resolve_seeds(&mut self) {
        for key in ["seed.split", "seed.init", "seed.sampling"] {
            if self.get(key) == "auto" {
                let seed: u64 = rand::random();
                self.values
                    .insert(key.to_string(), (seed.to_string(), Source::Generated));
            }
        }
    }

    pub fn seeds(&self) -> Result<Seeds> {
        Ok(Seeds {
            split: self.parse("seed.split")?,
            init: self.parse("seed.init")?,
            sampling: self.parse("seed.sampling")?,
        })
    }

    pub fn phases(&self) -> Result<Vec<Phase>> {
        let v = self.get("phases");
        v.split(',')
            .map(|p| {
                let bad = || Error::Config(format!("phase '{p}' must be 'epochs:learning_rate'"));
                let (e, lr) = p.trim().split_once(':').ok_or_else(bad)?;
                Ok(Phase {
                    epochs: e.trim().parse().map_err(|_| bad())?,
                    learning_rate: lr.trim().parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }

    pub fn model_config(&self) -> Result<UNetConfig> {
        let seeds = self.seeds();
        Ok(UNetConfig {
            depth: self.parse("model.depth")?,
            base_channels: self.parse("model.base_channels")?,
            init_seed: seeds.map(|s| s.init).unwrap_or(0),
            upsample: self.get("model.upsample").parse()?,
        })
    }

    pub fn augmentation(&self) -> Result<AugmentationSpec> {
        let mut a = AugmentationSpec {
            enabled: self.parse("augment.enabled")?,
            ..AugmentationSpec::default()
        };
        a.affine.probability = self.parse("augment.p_affine")?;
        a.histeq_probability = self.parse("augment.p_histeq")?;
        a.clahe.probability = self.parse("augment.p_clahe")?;
        a.rescale.probability = self.parse("augment.p_rescale")?;
        a.log.probability = self.parse("augment.p_log")?;
        a.blur.probability = self.parse("augment.p_blur")?;
        a.affine.scale = self.range("augment.scale")?;
        a.affine.rotation_deg = self.range("augment.rotation_deg")?;
        a.affine.shear_deg = self.range("augment.shear_deg")?;
        a.clahe.clip_limit = self.range("augment.clahe_clip")?;
        a.clahe.tiles = self.parse("augment.clahe_tiles")?;
        a.rescale.low = self.range("augment.rescale_low")?;
        a.rescale.high = self.range("augment.rescale_high")?;
        a.log.gain = self.range("augment.log_gain")?;
        a.blur.sigma = self.range("augment.blur_sigma")?;
        Ok(a)
    }

    /// Training configuration; seeds must already be resolved.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            total_epochs: self.parse("epochs")?,
            phases: self.phases()?,
            batch_size: self.parse("batch_size")?,
            windows_per_image: self.parse("windows_per_image")?,
            window_width: self.parse("window_width")?,
            window_height: self.parse("window_height")?,
            loss: LossParams {
                lambda_dice: self.parse("loss.lambda_dice")?,
                lambda_focal: self.parse("loss.lambda_focal")?,
                gamma: self.parse("loss.gamma")?,
                epsilon: self.parse("loss.epsilon")?,
                prob_clip: self.parse("loss.prob_clip")?,
            },
            adam: AdamParams {
                beta1: self.parse("adam.beta1")?,
                beta2: self.parse("adam.beta2")?,
                epsilon: self.parse("adam.epsilon")?,
            },
            augmentation: self.augmentation()?,
            model: self.model_config()?,
            seeds: self.seeds()?,
            checkpoint_dir: None,
            checkpoint_every: self.parse("checkpoint_every")?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Every resolved key, with its origin as a trailing comment.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, (v, s))| format!("{k} = {v}  # {s}\n"))
            .collect()
    }
}
