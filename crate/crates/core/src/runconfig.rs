//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. `profile` selects a
//! preset and is applied first wherever it appears; every other key overrides
//! one field. Unknown or repeated keys are errors.

use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

pub const KEYS: [&str; 29] = [
    "profile",
    "height",
    "width",
    "channels",
    "patch_h",
    "patch_w",
    "coarse_scale",
    "fine_scale",
    "dim",
    "depth",
    "heads",
    "keypoints",
    "alpha",
    "beta_ema",
    "q_thres",
    "pixel_mean",
    "pixel_std",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay",
    "train_samples",
    "val_samples",
    "data_seed",
    "dataset",
    "coco_annotations",
    "coco_images",
    "out_dir",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Coco,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub train: TrainConfig,
    pub dataset: DataSource,
    pub coco_annotations: Option<PathBuf>,
    /// Directory of PNM images named after the annotation's `file_name` stem.
    pub coco_images: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile("toy").expect("toy profile exists")
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "cannot parse `{value}` for key `{key}`"
        ))),
    }
}

impl RunConfig {
    pub fn for_profile(name: &str) -> Result<Self> {
        Ok(Self {
            profile: name.to_string(),
            model: ModelConfig::profile(name)?,
            seed: 0,
            train: TrainConfig::default(),
            dataset: DataSource::Synthetic,
            coco_annotations: None,
            coco_images: None,
            out_dir: PathBuf::from("runs"),
        })
    }

    /// Replaces every model field with the named preset's values.
    pub fn apply_profile(&mut self, name: &str) -> Result<()> {
        self.model = ModelConfig::profile(name)?;
        self.profile = name.to_string();
        Ok(())
    }

    /// Sets one key. `profile` resets the model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "profile" => self.apply_profile(value)?,
            "height" => m.height = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "patch_h" => m.patch_h = parse(key, value)?,
            "patch_w" => m.patch_w = parse(key, value)?,
            "coarse_scale" => m.coarse_scale = parse(key, value)?,
            "fine_scale" => m.fine_scale = parse(key, value)?,
            "dim" => m.dim = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "keypoints" => m.keypoints = parse(key, value)?,
            "alpha" => m.alpha = parse(key, value)?,
            "beta_ema" => m.beta_ema = parse(key, value)?,
            "q_thres" => m.q_thres = parse(key, value)?,
            "pixel_mean" => m.pixel_mean = parse(key, value)?,
            "pixel_std" => m.pixel_std = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "lr_decay" => self.train.lr_decay = parse_bool(key, value)?,
            "train_samples" => self.train.train_samples = parse(key, value)?,
            "val_samples" => self.train.val_samples = parse(key, value)?,
            "data_seed" => self.train.data_seed = parse(key, value)?,
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DataSource::Synthetic,
                    "coco" => DataSource::Coco,
                    _ => return Err(Error::Config(format!("unknown dataset `{value}`"))),
                }
            }
            "coco_annotations" => self.coco_annotations = Some(PathBuf::from(value)),
            "coco_images" => self.coco_images = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "config",
                detail: format!("line {}: expected key=value, got `{line}`", n + 1),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::UnknownKey(k.to_string()));
            }
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::Config(format!("key `{k}` given twice")));
            }
            pairs.push((k, v));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| *k == "profile") {
            Some((_, name)) => Self::for_profile(name)?,
            None => Self::default(),
        };
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "profile") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Both the model and the training settings must be consistent.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.dataset == DataSource::Coco && self.coco_annotations.is_none() {
            return Err(Error::Config(
                "dataset=coco requires coco_annotations".into(),
            ));
        }
        Ok(())
    }

    /// Every key, one per line. Parsing the result gives back an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("profile", self.profile.clone());
        kv("height", m.height.to_string());
        kv("width", m.width.to_string());
        kv("channels", m.channels.to_string());
        kv("patch_h", m.patch_h.to_string());
        kv("patch_w", m.patch_w.to_string());
        kv("coarse_scale", m.coarse_scale.to_string());
        kv("fine_scale", m.fine_scale.to_string());
        kv("dim", m.dim.to_string());
        kv("depth", m.depth.to_string());
        kv("heads", m.heads.to_string());
        kv("keypoints", m.keypoints.to_string());
        kv("alpha", m.alpha.to_string());
        kv("beta_ema", m.beta_ema.to_string());
        kv("q_thres", m.q_thres.to_string());
        kv("pixel_mean", m.pixel_mean.to_string());
        kv("pixel_std", m.pixel_std.to_string());
        kv("seed", self.seed.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("lr_decay", t.lr_decay.to_string());
        kv("train_samples", t.train_samples.to_string());
        kv("val_samples", t.val_samples.to_string());
        kv("data_seed", t.data_seed.to_string());
        kv(
            "dataset",
            match self.dataset {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Coco => "coco".into(),
            },
        );
        if let Some(p) = &self.coco_annotations {
            kv("coco_annotations", p.display().to_string());
        }
        if let Some(p) = &self.coco_images {
            kv("coco_images", p.display().to_string());
        }
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_then_overrides() {
        let c = RunConfig::parse_text("alpha=0.3\n# note\n\nprofile=base-256\nepochs=3\n").unwrap();
        assert_eq!(c.model.dim, 768);
        assert_eq!(c.model.alpha, 0.3);
        assert_eq!(c.train.epochs, 3);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = RunConfig::parse_text("profile=toy\nalpa=0.4\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "alpa"));
        assert!(err.to_string().contains("alpa"));
    }

    #[test]
    fn duplicates_and_garbage_rejected() {
        assert!(RunConfig::parse_text("seed=1\nseed=2\n").is_err());
        assert!(RunConfig::parse_text("seed\n").is_err());
        assert!(RunConfig::parse_text("seed=x\n").is_err());
        assert!(RunConfig::parse_text("profile=huge\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        for p in ModelConfig::PROFILES {
            let mut c = RunConfig::for_profile(p).unwrap();
            c.train.lr = 0.1 + 0.2;
            c.coco_images = Some(PathBuf::from("imgs"));
            assert_eq!(RunConfig::parse_text(&c.to_text()).unwrap(), c);
        }
    }
}
