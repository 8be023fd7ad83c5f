//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. `preset = desk|paper` (if given)
//! must come first and picks the defaults the remaining keys override.
//!
//! | key | value |
//! |-----|-------|
//! | `preset` | `paper` (default) or `desk` |
//! | `run.name` | output directory name under the runs root |
//! | `data.manifest` | manifest to split into train/test |
//! | `data.test_manifest` | separate test manifest (disables splitting) |
//! | `data.train_fraction`, `data.split_seed` | split parameters |
//! | `data.rescale_mean`, `data.rescale_std` | rescale MOS before training |
//! | `stages` | `epochs:lr` list, e.g. `30:1e-4, 30:5e-4, 30:1e-5` |
//! | `batch_size`, `seed`, `augment` | |
//! | `loss.form`, `score.form` | `ms` or `plain` |
//! | `roi.normalize` | `linear` or `softmax` |
//! | `use_dim`, `use_highlevel`, `use_roi` | `true`/`false` |
//! | `adam.beta1`, `adam.beta2`, `adam.eps` | |
//! | `stop_below_loss` | early stop threshold on mean epoch loss |
//! | `local.channels`, `local.dropout` | |
//! | `local.head.hidden1`, `local.head.hidden2` | MOS head widths |
//! | `roi.head.hidden1`, `roi.head.hidden2` | ROI head widths |
//! | `embed.channels` | channels after the 1×1 compression |
//! | `backbone.variant` | `toy` or `pretrained` |
//! | `backbone.weights_path` | parameter bundle for `pretrained` |
//! | `backbone.stages` | five stage widths, e.g. `16,32,64,128,256` |
//! | `backbone.freeze` | keep backbone weights fixed |
//! | `dim.rates`, `dim.branch_channels`, `dim.out_channels` | |

use crate::aggregation::ScoreForm;
use crate::backbone::BackboneVariant;
use crate::trainer::{Stage, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {reason}")]
    Value {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: `preset` must be the first key")]
    LatePreset { line: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub rescale: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_name: String,
    pub train: TrainConfig,
    /// Inference score form; defaults to the form training used.
    pub score_form: Option<ScoreForm>,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("paper").expect("known preset")
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let train = match name {
            "paper" => TrainConfig::default(),
            "desk" => TrainConfig::desk(),
            _ => return None,
        };
        Some(Self {
            run_name: "run".into(),
            train,
            score_form: None,
            data: DataConfig {
                train_fraction: 0.8,
                ..DataConfig::default()
            },
        })
    }

    pub fn score_form(&self) -> ScoreForm {
        self.score_form
            .unwrap_or_else(|| self.train.effective_loss_form())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        // Relative data paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.manifest, &mut cfg.data.test_manifest]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let BackboneVariant::Pretrained { weights_path } = &mut cfg.train.arch.backbone.variant {
            if weights_path.is_relative() {
                *weights_path = base.join(&*weights_path);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen_key = false;
        let mut weights_path: Option<PathBuf> = None;
        let mut pretrained = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or(ConfigError::Syntax { line })?;
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            let bad = |reason: String| ConfigError::Value {
                line,
                key: key.to_string(),
                value: value.to_string(),
                reason,
            };
            if key == "preset" {
                if seen_key {
                    return Err(ConfigError::LatePreset { line });
                }
                cfg = Self::preset(value).ok_or_else(|| bad("expected desk|paper".into()))?;
                seen_key = true;
                continue;
            }
            seen_key = true;
            let t = &mut cfg.train;
            let a = &mut t.arch;
            match key {
                "run.name" => cfg.run_name = value.to_string(),
                "data.manifest" => cfg.data.manifest = Some(value.into()),
                "data.test_manifest" => cfg.data.test_manifest = Some(value.into()),
                "data.train_fraction" => cfg.data.train_fraction = num(value).map_err(bad)?,
                "data.split_seed" => cfg.data.split_seed = num(value).map_err(bad)?,
                "data.rescale_mean" => {
                    let m = num(value).map_err(bad)?;
                    cfg.data.rescale = Some((m, cfg.data.rescale.map_or(1.0, |r| r.1)));
                }
                "data.rescale_std" => {
                    let s = num(value).map_err(bad)?;
                    cfg.data.rescale = Some((cfg.data.rescale.map_or(0.0, |r| r.0), s));
                }
                "stages" => t.stages = parse_stages(value).map_err(bad)?,
                "batch_size" => t.batch_size = num(value).map_err(bad)?,
                "seed" => t.seed = num(value).map_err(bad)?,
                "augment" => t.augment = flag(value).map_err(bad)?,
                "loss.form" => t.loss_form = value.parse().map_err(bad)?,
                "score.form" => cfg.score_form = Some(value.parse().map_err(bad)?),
                "roi.normalize" => t.roi_normalize = value.parse().map_err(bad)?,
                "use_dim" => t.use_dim = flag(value).map_err(bad)?,
                "use_highlevel" => t.use_highlevel = flag(value).map_err(bad)?,
                "use_roi" => t.use_roi = flag(value).map_err(bad)?,
                "adam.beta1" => t.adam_betas.0 = num(value).map_err(bad)?,
                "adam.beta2" => t.adam_betas.1 = num(value).map_err(bad)?,
                "adam.eps" => t.adam_eps = num(value).map_err(bad)?,
                "stop_below_loss" => t.stop_below_loss = Some(num(value).map_err(bad)?),
                "local.channels" => a.local.channels = num(value).map_err(bad)?,
                "local.dropout" => a.local.dropout = num(value).map_err(bad)?,
                "local.head.hidden1" => a.local.head.hidden1 = num(value).map_err(bad)?,
                "local.head.hidden2" => a.local.head.hidden2 = num(value).map_err(bad)?,
                "roi.head.hidden1" => a.roi_head.hidden1 = num(value).map_err(bad)?,
                "roi.head.hidden2" => a.roi_head.hidden2 = num(value).map_err(bad)?,
                "embed.channels" => a.embed_channels = num(value).map_err(bad)?,
                "backbone.variant" => match value {
                    "toy" => pretrained = false,
                    "pretrained" => pretrained = true,
                    _ => return Err(bad("expected toy|pretrained".into())),
                },
                "backbone.weights_path" => weights_path = Some(value.into()),
                "backbone.stages" => a.backbone.stages = list(value).map_err(bad)?,
                "backbone.freeze" => a.backbone.freeze = flag(value).map_err(bad)?,
                "dim.rates" => {
                    let r: Vec<usize> = list(value).map_err(bad)?;
                    a.dim.rates = r
                        .try_into()
                        .map_err(|_| bad("expected three rates".into()))?;
                }
                "dim.branch_channels" => a.dim.branch_channels = num(value).map_err(bad)?,
                "dim.out_channels" => a.dim.out_channels = num(value).map_err(bad)?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        cfg.train.arch.backbone.variant = match (pretrained, weights_path) {
            (false, _) => BackboneVariant::Toy,
            (true, Some(weights_path)) => BackboneVariant::Pretrained { weights_path },
            (true, None) => {
                return Err(ConfigError::Invalid(
                    "backbone.variant = pretrained needs backbone.weights_path".into(),
                ))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let f = self.data.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "data.train_fraction must lie in (0, 1), got {f}"
            )));
        }
        if let Some((_, s)) = self.data.rescale {
            if s <= 0.0 {
                return Err(ConfigError::Invalid("data.rescale_std must be > 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.train.arch.local.dropout) {
            return Err(ConfigError::Invalid("local.dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse()
        .map_err(|_| format!("expected a {}", std::any::type_name::<T>()))
}

fn flag(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err("expected true|false".into()),
    }
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|x| num(x.trim())).collect()
}

fn parse_stages(v: &str) -> Result<Vec<Stage>, String> {
    v.split(',')
        .map(|part| {
            let (e, lr) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("stage `{}` is not `epochs:lr`", part.trim()))?;
            Ok(Stage {
                epochs: num(e.trim())?,
                lr: num(lr.trim())?,
            })
        })
        .collect()
}
