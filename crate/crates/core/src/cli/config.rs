//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`ExperimentConfig::to_text`] writes every key, so a snapshot
//! fully describes a run.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::encoder::{AttentionLogits, ModelConfig};
use crate::objective::{LossConfig, Orientation};
use crate::tgraph::SamplerConfig;
use crate::trainer::{AblationFlags, LabelBudget, SplitSpec, TrainConfig};

/// Input file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    EdgeList,
    Jodie,
    Labeled,
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "edgelist" => Ok(Self::EdgeList),
            "jodie" => Ok(Self::Jodie),
            "labeled" => Ok(Self::Labeled),
            _ => Err(format!("unknown format `{s}` (edgelist, jodie, labeled)")),
        }
    }
}

impl Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::EdgeList => "edgelist",
            Self::Jodie => "jodie",
            Self::Labeled => "labeled",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionConfig {
    pub enabled: bool,
    pub rate: f64,
    pub k: usize,
    pub seed: u64,
}

/// Complete description of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub format: DataFormat,
    pub injection: InjectionConfig,
    pub split: SplitSpec,
    pub labels: usize,
    pub label_seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub degree_buckets: usize,
    pub fanouts: Vec<usize>,
    pub shared_endpoint_budget: bool,
    pub attention: AttentionLogits,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub orientation: Orientation,
    pub labeled_only: bool,
    pub ablation: AblationFlags,
    pub seed: u64,
    pub eval_seed: u64,
    pub parallel: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            dataset: PathBuf::new(),
            format: DataFormat::EdgeList,
            injection: InjectionConfig {
                enabled: false,
                rate: 0.03,
                k: 30,
                seed: 0,
            },
            split: train.split,
            labels: train.budget.anomalies,
            label_seed: train.budget.seed,
            layers: train.model.layers,
            heads: train.model.heads,
            hidden: train.model.hidden,
            time_dim: train.model.time_dim,
            degree_buckets: train.model.degree_buckets,
            fanouts: train.sampler.fanouts,
            shared_endpoint_budget: train.sampler.shared_endpoint_budget,
            attention: train.model.attention,
            lr: train.lr,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lambda: train.loss.lambda,
            orientation: train.loss.orientation,
            labeled_only: train.loss.labeled_only,
            ablation: AblationFlags::default(),
            seed: train.seed,
            eval_seed: train.eval_seed,
            parallel: train.parallel,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid boolean `{value}` for `{key}`")),
    }
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), String> {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("override `{kv}` is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value;
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "format" => self.format = v.parse()?,
            "inject" => self.injection.enabled = parse_bool(key, v)?,
            "inject_rate" => self.injection.rate = parse(key, v)?,
            "inject_k" => self.injection.k = parse(key, v)?,
            "inject_seed" => self.injection.seed = parse(key, v)?,
            "split_train" => self.split.train = parse(key, v)?,
            "split_val" => self.split.val = parse(key, v)?,
            "labels" => self.labels = parse(key, v)?,
            "label_seed" => self.label_seed = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "time_dim" => self.time_dim = parse(key, v)?,
            "degree_buckets" => self.degree_buckets = parse(key, v)?,
            "fanouts" => self.fanouts = parse_list(key, v)?,
            "shared_endpoint_budget" => self.shared_endpoint_budget = parse_bool(key, v)?,
            "attention" => {
                self.attention = match v {
                    "event_self" => AttentionLogits::EventSelf,
                    "node_query" => AttentionLogits::NodeQuery,
                    _ => return Err(format!("unknown attention `{v}` (event_self, node_query)")),
                }
            }
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "orientation" => {
                self.orientation = match v {
                    "as_written" => Orientation::AsWritten,
                    "ruff" => Orientation::Ruff,
                    _ => return Err(format!("unknown orientation `{v}` (as_written, ruff)")),
                }
            }
            "labeled_only" => self.labeled_only = parse_bool(key, v)?,
            "no_local_mha" => self.ablation.no_local_mha = parse_bool(key, v)?,
            "no_global_mha" => self.ablation.no_global_mha = parse_bool(key, v)?,
            "no_time_embed" => self.ablation.no_time_embed = parse_bool(key, v)?,
            "no_ecc" => self.ablation.no_ecc = parse_bool(key, v)?,
            "no_ego_context" => self.ablation.no_ego_context = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key in a fixed order.
    pub fn to_text(&self) -> String {
        let orientation = match self.orientation {
            Orientation::AsWritten => "as_written",
            Orientation::Ruff => "ruff",
        };
        let attention = match self.attention {
            AttentionLogits::EventSelf => "event_self",
            AttentionLogits::NodeQuery => "node_query",
        };
        let a = &self.ablation;
        let pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.display().to_string()),
            ("format", self.format.to_string()),
            ("inject", self.injection.enabled.to_string()),
            ("inject_rate", self.injection.rate.to_string()),
            ("inject_k", self.injection.k.to_string()),
            ("inject_seed", self.injection.seed.to_string()),
            ("split_train", self.split.train.to_string()),
            ("split_val", self.split.val.to_string()),
            ("labels", self.labels.to_string()),
            ("label_seed", self.label_seed.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("hidden", self.hidden.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("degree_buckets", self.degree_buckets.to_string()),
            ("fanouts", join(&self.fanouts)),
            ("shared_endpoint_budget", self.shared_endpoint_budget.to_string()),
            ("attention", attention.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lambda", self.lambda.to_string()),
            ("orientation", orientation.to_string()),
            ("labeled_only", self.labeled_only.to_string()),
            ("no_local_mha", a.no_local_mha.to_string()),
            ("no_global_mha", a.no_global_mha.to_string()),
            ("no_time_embed", a.no_time_embed.to_string()),
            ("no_ecc", a.no_ecc.to_string()),
            ("no_ego_context", a.no_ego_context.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("parallel", self.parallel.to_string()),
            ("out", self.out.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                hidden: self.hidden,
                layers: self.layers,
                heads: self.heads,
                time_dim: self.time_dim,
                degree_buckets: self.degree_buckets,
                attention: self.attention,
                ..ModelConfig::default()
            },
            loss: LossConfig {
                lambda: self.lambda,
                orientation: self.orientation,
                labeled_only: self.labeled_only,
                ablation: self.ablation,
            },
            sampler: SamplerConfig {
                fanouts: self.fanouts.clone(),
                shared_endpoint_budget: self.shared_endpoint_budget,
            },
            ablation: self.ablation,
            split: self.split,
            budget: LabelBudget {
                anomalies: self.labels,
                seed: self.label_seed,
            },
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_seed: self.eval_seed,
            parallel: self.parallel,
        }
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<(), String> {
        if self.dataset.as_os_str().is_empty() {
            return Err("`dataset` is not set".into());
        }
        let s = self.split;
        if !(s.train > 0.0 && s.val > 0.0 && s.train + s.val < 1.0) {
            return Err(format!("split fractions train={} val={} leave no test split", s.train, s.val));
        }
        if self.labels == 0 {
            return Err("`labels` must be at least 1".into());
        }
        let inj = &self.injection;
        if inj.enabled && !(inj.rate >= 0.0 && inj.rate.is_finite()) {
            return Err(format!("`inject_rate` {} must be finite and non-negative", inj.rate));
        }
        if inj.enabled && inj.k == 0 {
            return Err("`inject_k` must be positive".into());
        }
        if self.format == DataFormat::Labeled && inj.enabled {
            return Err("labeled input already carries anomalies; set inject = false".into());
        }
        self.train_config().validate().map_err(|e| e.to_string())
    }
}
