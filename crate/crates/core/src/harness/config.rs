//! Flat key-value experiment configuration.
//!
//! ```text
//! # comment
//! section.key = value
//! ```
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored; whitespace around keys and values is trimmed. Lists are
//! comma-separated. `dataset.means` holds one comma-separated vector per
//! class, separated by `;`. Booleans are `true`/`false`. Unknown keys are
//! errors. Keys set later in a file, or by CLI flags, override earlier ones.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{DroError, Result};
use crate::harness::dataset::DatasetSpec;
use crate::phi_divergence::RobustnessParam;
use crate::tinynet::LossKind;
use crate::trainer::{LrSchedule, Objective, StoreInit, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    /// Shared training settings; `objective` and `beta` are set per arm.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// One DRO arm per value.
    pub betas: Vec<f64>,
    pub include_erm: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// The imbalanced three-blob benchmark: class 2 thinned to 1%, MLP
    /// `[2, 64, 64, 3]`, ERM against DRO with β = 10 over five seeds.
    fn default() -> Self {
        Self {
            name: "imbalance".into(),
            dataset: DatasetSpec::default(),
            train: TrainConfig {
                objective: Objective::Dro,
                beta: RobustnessParam::new(10.0).unwrap(),
                lr: 0.01,
                batch_size: 32,
                epochs: 5,
                importance_sampling: true,
                hidden_layers: vec![64, 64],
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2, 3, 4],
            betas: vec![10.0],
            include_erm: true,
            out_dir: PathBuf::from("results"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DroError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(DroError::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let d = &mut self.dataset;
        let t = &mut self.train;
        match key {
            "experiment.name" => self.name = value.to_string(),
            "experiment.seeds" => self.seeds = parse_list(key, value)?,
            "experiment.betas" => self.betas = parse_list(key, value)?,
            "experiment.include_erm" => self.include_erm = parse_bool(key, value)?,
            "experiment.out_dir" => self.out_dir = PathBuf::from(value),

            "dataset.num_classes" => d.num_classes = parse(key, value)?,
            "dataset.dim" => d.dim = parse(key, value)?,
            "dataset.train_per_class" => d.train_per_class = parse(key, value)?,
            "dataset.test_per_class" => d.test_per_class = parse(key, value)?,
            "dataset.means" => {
                d.means = value
                    .split(';')
                    .map(|m| parse_list(key, m))
                    .collect::<Result<_>>()?
            }
            "dataset.std_dev" => d.std_dev = parse(key, value)?,
            "dataset.minority_class" => d.minority_class = parse(key, value)?,
            "dataset.imbalance_ratio" => d.imbalance_ratio = parse(key, value)?,
            "dataset.seed" => d.seed = parse(key, value)?,

            "model.hidden" => t.hidden_layers = parse_list(key, value)?,

            "train.objective" => {
                t.objective = match value {
                    "erm" => Objective::Erm,
                    "dro" => Objective::Dro,
                    _ => return Err(DroError::Config(format!("{key}: expected erm or dro"))),
                }
            }
            "train.beta" => {
                t.beta = RobustnessParam::new(parse(key, value)?)
                    .map_err(|e| DroError::Config(format!("{key}: {e}")))?
            }
            "train.lr" => t.lr = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.nesterov" => t.nesterov = parse_bool(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.max_steps" => {
                t.max_steps = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "train.seed" => t.seed = parse(key, value)?,
            "train.importance_sampling" => t.importance_sampling = parse_bool(key, value)?,
            "train.w_min" => t.w_min = parse(key, value)?,
            "train.w_max" => t.w_max = parse(key, value)?,
            "train.with_replacement" => t.with_replacement = parse_bool(key, value)?,
            "train.lr_schedule" => {
                t.lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "poly" => LrSchedule::POLY_DEFAULT,
                    _ => match value.strip_prefix("poly:") {
                        Some(p) => LrSchedule::PolyDecay {
                            power: parse(key, p)?,
                        },
                        None => {
                            return Err(DroError::Config(format!(
                                "{key}: expected constant, poly or poly:<power>"
                            )))
                        }
                    },
                }
            }
            "train.loss" => {
                t.loss_kind = match value {
                    "cross_entropy" => LossKind::CrossEntropySoftmax,
                    "squared_error" => LossKind::SquaredError,
                    _ => {
                        return Err(DroError::Config(format!(
                            "{key}: expected cross_entropy or squared_error"
                        )))
                    }
                }
            }
            "train.log_interval" => {
                t.log_interval = if value == "epoch" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "train.record_wall_time" => t.record_wall_time = parse_bool(key, value)?,
            "train.store_init" => {
                t.store_init = match value {
                    "zeros" => StoreInit::Zeros,
                    "initial_losses" => StoreInit::InitialLosses,
                    _ => {
                        return Err(DroError::Config(format!(
                            "{key}: expected zeros or initial_losses"
                        )))
                    }
                }
            }
            _ => return Err(DroError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DroError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| DroError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(DroError::Config("experiment.seeds is empty".into()));
        }
        if !self.include_erm && self.betas.is_empty() {
            return Err(DroError::Config("experiment has no arms".into()));
        }
        for &b in &self.betas {
            RobustnessParam::new(b)
                .map_err(|e| DroError::Config(format!("experiment.betas: {e}")))?;
        }
        Ok(())
    }

    /// Every field as `key = value` lines in a fixed order; parses back to an
    /// equal config.
    pub fn to_kv_string(&self) -> String {
        let d = &self.dataset;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("experiment.name", self.name.clone());
        kv("experiment.seeds", join(&self.seeds));
        kv("experiment.betas", join(&self.betas));
        kv("experiment.include_erm", self.include_erm.to_string());
        kv("experiment.out_dir", self.out_dir.display().to_string());
        kv("dataset.num_classes", d.num_classes.to_string());
        kv("dataset.dim", d.dim.to_string());
        kv("dataset.train_per_class", d.train_per_class.to_string());
        kv("dataset.test_per_class", d.test_per_class.to_string());
        kv(
            "dataset.means",
            d.means
                .iter()
                .map(|m| join(m))
                .collect::<Vec<_>>()
                .join(";"),
        );
        kv("dataset.std_dev", d.std_dev.to_string());
        kv("dataset.minority_class", d.minority_class.to_string());
        kv("dataset.imbalance_ratio", d.imbalance_ratio.to_string());
        kv("dataset.seed", d.seed.to_string());
        kv("model.hidden", join(&t.hidden_layers));
        kv(
            "train.objective",
            match t.objective {
                Objective::Erm => "erm",
                Objective::Dro => "dro",
            }
            .into(),
        );
        kv("train.beta", t.beta.get().to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.nesterov", t.nesterov.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv(
            "train.max_steps",
            t.max_steps.map_or("none".into(), |m| m.to_string()),
        );
        kv("train.seed", t.seed.to_string());
        kv(
            "train.importance_sampling",
            t.importance_sampling.to_string(),
        );
        kv("train.w_min", t.w_min.to_string());
        kv("train.w_max", t.w_max.to_string());
        kv("train.with_replacement", t.with_replacement.to_string());
        kv(
            "train.store_init",
            match t.store_init {
                StoreInit::Zeros => "zeros",
                StoreInit::InitialLosses => "initial_losses",
            }
            .into(),
        );
        kv(
            "train.lr_schedule",
            match t.lr_schedule {
                LrSchedule::Constant => "constant".into(),
                LrSchedule::PolyDecay { power } => format!("poly:{power}"),
            },
        );
        kv(
            "train.loss",
            match t.loss_kind {
                LossKind::CrossEntropySoftmax => "cross_entropy",
                LossKind::SquaredError => "squared_error",
            }
            .into(),
        );
        kv(
            "train.log_interval",
            t.log_interval.map_or("epoch".into(), |m| m.to_string()),
        );
        kv("train.record_wall_time", t.record_wall_time.to_string());
        s
    }

    /// SHA-256 of [`Self::to_kv_string`], hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_sections_and_lists() {
        let cfg = ExperimentConfig::parse_str(
            "# demo\n\
             experiment.seeds = 3, 4\n\
             \n\
             experiment.betas = 1,10,100\n\
             dataset.means = 0,0 ; 1,1 ; 2,2\n\
             train.lr_schedule = poly\n\
             train.nesterov = true\n\
             train.momentum = 0.99\n\
             model.hidden = 16,8\n",
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.betas, vec![1.0, 10.0, 100.0]);
        assert_eq!(cfg.dataset.means[2], vec![2.0, 2.0]);
        assert_eq!(cfg.train.lr_schedule, LrSchedule::PolyDecay { power: 0.9 });
        assert!(cfg.train.nesterov);
        assert_eq!(cfg.train.hidden_layers, vec![16, 8]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in [
            "train.bogus = 1",
            "train.lr 0.1",
            "train.nesterov = yes",
            "train.beta = 0",
            "train.batch_size = -3",
            "train.objective = maybe",
        ] {
            let err = ExperimentConfig::parse_str(text).unwrap_err();
            assert!(
                matches!(err, DroError::Config(ref m) if m.starts_with("line 1")),
                "{text}: {err}"
            );
        }
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.max_steps = Some(77);
        cfg.train.lr_schedule = LrSchedule::PolyDecay { power: 0.5 };
        cfg.train.lr = 0.1 + 0.2;
        let back = ExperimentConfig::parse_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn digest_tracks_every_field() {
        let base = ExperimentConfig::default();
        let text = base.to_kv_string();
        for line in text.lines() {
            let (key, value) = line.split_once(" = ").unwrap();
            let alt = match key {
                "experiment.name" | "experiment.out_dir" => format!("{value}x"),
                "experiment.seeds" => "9".into(),
                "experiment.betas" => "3".into(),
                "dataset.means" => "0,0;1,1;2,3".into(),
                "train.objective" => "erm".into(),
                "train.max_steps" => "5".into(),
                "train.lr_schedule" => "poly".into(),
                "train.loss" => "squared_error".into(),
                "train.store_init" => "initial_losses".into(),
                "train.log_interval" => "3".into(),
                "model.hidden" => "8".into(),
                _ if value == "true" => "false".into(),
                _ if value == "false" => "true".into(),
                _ => match value.parse::<u64>() {
                    Ok(i) => (i + 1).to_string(),
                    Err(_) => {
                        let v: f64 = value.parse().unwrap();
                        (if v == 0.0 { 0.5 } else { v * 0.5 }).to_string()
                    }
                },
            };
            let mut changed = base.clone();
            changed.set(key, &alt).unwrap();
            assert_ne!(changed.digest(), base.digest(), "{key} = {alt}");
        }
    }
}
