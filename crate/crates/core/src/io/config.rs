//! Flat `key = value` run configuration.
//!
//! Resolution order: preset, then the config file, then command-line
//! overrides. The resolved configuration is written next to every output
//! and re-loads to identical values.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::model::layers::Activation;
use crate::model::optim::{OptimizerConfig, OptimizerKind};
use crate::model::{DropoutRates, ModelConfig, ResidualSource};
use crate::propagation::DEFAULT_MEMORY_BUDGET;
use crate::real::DType;
use crate::training::StagePlan;

pub const DEFAULT_PRESET: &str = "products";
pub const PRESETS: &[&str] = &["products", "papers100m"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationName {
    LeakyRelu,
    Sigmoid,
}

impl FromStr for ActivationName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leaky_relu" => Ok(ActivationName::LeakyRelu),
            "sigmoid" => Ok(ActivationName::Sigmoid),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for ActivationName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActivationName::LeakyRelu => "leaky_relu",
            ActivationName::Sigmoid => "sigmoid",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub precision: DType,
    pub memory_budget: u64,

    pub r: f64,
    pub hops: usize,
    pub label_hops: usize,

    pub attention: AttentionKind,
    pub hidden: usize,
    pub num_layers: usize,
    pub jk_layers: usize,
    pub jk_include_step0: bool,
    pub label_layers: usize,
    pub activation: ActivationName,
    pub leaky_slope: f64,
    pub residual: ResidualSource,
    pub input_dropout: f64,
    pub attention_dropout: f64,
    pub dropout: f64,

    pub stages: Vec<usize>,
    pub threshold: f64,
    pub temperature: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub patience: usize,
}

/// Every settable key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "base hyperparameters: products | papers100m"),
    ("dataset", "dataset directory"),
    ("output_dir", "directory for all artifacts"),
    ("precision", "f32 | f64"),
    ("memory_budget", "max bytes for the propagated stack"),
    ("r", "normalization exponent in [0, 1]"),
    ("hops", "feature propagation steps K"),
    ("label_hops", "label propagation steps"),
    ("attention", "smoothing | recursive | jk | uniform"),
    ("hidden", "hidden width"),
    ("num_layers", "residual hidden layers"),
    ("jk_layers", "layers of the JK-branch MLP"),
    ("jk_include_step0", "feed step 0 to the JK branch: true | false"),
    ("label_layers", "layers of the label-embedding MLP"),
    ("activation", "leaky_relu | sigmoid"),
    ("leaky_slope", "negative slope of leaky_relu"),
    ("residual", "initial residual source: combined | raw"),
    ("input_dropout", "dropout on propagated features"),
    ("attention_dropout", "dropout on attention scores"),
    ("dropout", "dropout after hidden activations"),
    ("stages", "epochs per stage, comma separated"),
    ("threshold", "reliable-label threshold"),
    ("temperature", "softmax temperature in (0, 1]"),
    ("gamma", "distillation weight"),
    ("batch_size", "training batch size"),
    ("optimizer", "adam | sgd"),
    ("lr", "learning rate"),
    ("weight_decay", "L2 penalty"),
    ("seed", "root random seed"),
    ("patience", "epochs without validation gain before a stage stops; 0 disables"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

fn parse_stages(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse::<usize>("stages", s.trim()))
        .collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(DEFAULT_PRESET).expect("default preset exists")
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let products = RunConfig {
            preset: "products".into(),
            dataset: PathBuf::from("data/toy"),
            output_dir: PathBuf::from("out"),
            precision: DType::F32,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            r: 0.5,
            hops: 5,
            label_hops: 9,
            attention: AttentionKind::Recursive,
            hidden: 512,
            num_layers: 4,
            jk_layers: 2,
            jk_include_step0: false,
            label_layers: 2,
            activation: ActivationName::LeakyRelu,
            leaky_slope: 0.2,
            residual: ResidualSource::Combined,
            input_dropout: 0.2,
            attention_dropout: 0.5,
            dropout: 0.5,
            stages: vec![400, 300, 300, 300],
            threshold: 0.85,
            temperature: 1.0,
            gamma: 0.1,
            batch_size: 50000,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            patience: 0,
        };
        match name {
            "products" => Ok(products),
            "papers100m" => Ok(RunConfig {
                preset: "papers100m".into(),
                hops: 6,
                label_hops: 9,
                attention: AttentionKind::Jk,
                hidden: 1024,
                num_layers: 6,
                jk_layers: 4,
                activation: ActivationName::Sigmoid,
                input_dropout: 0.0,
                attention_dropout: 0.0,
                dropout: 0.5,
                stages: vec![100, 150, 150, 150],
                threshold: 0.0,
                temperature: 0.001,
                gamma: 1.0,
                batch_size: 5000,
                ..products
            }),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "preset" => {
                let keep = (self.dataset.clone(), self.output_dir.clone());
                *self = Self::preset(value)?;
                (self.dataset, self.output_dir) = keep;
            }
            "dataset" => self.dataset = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "precision" => {
                self.precision = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("precision = {value:?}: expected f32 or f64"))),
                }
            }
            "memory_budget" => self.memory_budget = parse(key, value)?,
            "r" => self.r = parse(key, value)?,
            "hops" => self.hops = parse(key, value)?,
            "label_hops" => self.label_hops = parse(key, value)?,
            "attention" => self.attention = value.parse()?,
            "hidden" => self.hidden = parse(key, value)?,
            "num_layers" => self.num_layers = parse(key, value)?,
            "jk_layers" => self.jk_layers = parse(key, value)?,
            "jk_include_step0" => self.jk_include_step0 = parse_bool(key, value)?,
            "label_layers" => self.label_layers = parse(key, value)?,
            "activation" => self.activation = value.parse()?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "residual" => self.residual = value.parse()?,
            "input_dropout" => self.input_dropout = parse(key, value)?,
            "attention_dropout" => self.attention_dropout = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "stages" => self.stages = parse_stages(value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "preset" => self.preset.clone(),
            "dataset" => self.dataset.display().to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "precision" => self.precision.name().to_string(),
            "memory_budget" => self.memory_budget.to_string(),
            "r" => self.r.to_string(),
            "hops" => self.hops.to_string(),
            "label_hops" => self.label_hops.to_string(),
            "attention" => self.attention.to_string(),
            "hidden" => self.hidden.to_string(),
            "num_layers" => self.num_layers.to_string(),
            "jk_layers" => self.jk_layers.to_string(),
            "jk_include_step0" => self.jk_include_step0.to_string(),
            "label_layers" => self.label_layers.to_string(),
            "activation" => self.activation.to_string(),
            "leaky_slope" => self.leaky_slope.to_string(),
            "residual" => self.residual.to_string(),
            "input_dropout" => self.input_dropout.to_string(),
            "attention_dropout" => self.attention_dropout.to_string(),
            "dropout" => self.dropout.to_string(),
            "stages" => self
                .stages
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "threshold" => self.threshold.to_string(),
            "temperature" => self.temperature.to_string(),
            "gamma" => self.gamma.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "seed" => self.seed.to_string(),
            "patience" => self.patience.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut bad = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
                None => bad.push(format!("line {}: expected key = value, got {line:?}", no + 1)),
            }
        }
        if bad.is_empty() {
            Ok(out)
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Builds a config from a preset, file entries and overrides, in that
    /// order. A `preset` among the overrides wins over one in the file.
    pub fn resolve(file_entries: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let find = |entries: &[(String, String)]| {
            entries
                .iter()
                .rev()
                .find(|(k, _)| k == "preset")
                .map(|(_, v)| v.clone())
        };
        let preset = find(overrides)
            .or_else(|| find(file_entries))
            .unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let mut cfg = Self::preset(&preset)?;
        for (k, v) in file_entries.iter().chain(overrides) {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(&Self::parse_entries(&text)?, overrides)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, help) in KEYS {
            out.push_str(&format!("# {help}\n{key} = {}\n", self.get(key).unwrap_or_default()));
        }
        out
    }

    pub fn activation(&self) -> Activation {
        match self.activation {
            ActivationName::LeakyRelu => Activation::LeakyRelu {
                slope: self.leaky_slope,
            },
            ActivationName::Sigmoid => Activation::Sigmoid,
        }
    }

    pub fn model_config(&self, feature_width: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            attention: self.attention,
            activation: self.activation(),
            feature_width,
            hops: self.hops,
            hidden: self.hidden,
            num_layers: self.num_layers,
            num_classes,
            jk_layers: self.jk_layers,
            jk_include_step0: self.jk_include_step0,
            label_layers: self.label_layers,
            residual: self.residual,
            dropout: DropoutRates {
                input: self.input_dropout,
                attention: self.attention_dropout,
                hidden: self.dropout,
            },
        }
    }

    pub fn stage_plan(&self) -> StagePlan {
        StagePlan {
            stage_epochs: self.stages.clone(),
            threshold: self.threshold,
            temperature: self.temperature,
            gamma: self.gamma,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig {
                kind: self.optimizer,
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..OptimizerConfig::default()
            },
            seed: self.seed,
            patience: self.patience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::Config(format!("r = {} outside [0, 1]", self.r)));
        }
        self.model_config(1, 1).validate()?;
        self.stage_plan().validate()?;
        crate::model::optim::Optimizer::new(self.stage_plan().optimizer)?;
        Ok(())
    }
}
