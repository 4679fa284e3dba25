//! Run configuration: built-in defaults, then a `key=value` file, then
//! command-line overrides.

use std::path::Path;

use swinca_core::optim::OptimizerKind;
use swinca_core::{ModelConfig, Scale};

use crate::CliError;

pub const KEYS: [&str; 9] = ["scale", "window", "heads", "lr", "optimizer", "epochs", "batch", "seed", "augment"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scale: Scale,
    pub window: usize,
    pub heads: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scale: Scale::ONE,
            window: 4,
            heads: 8,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            epochs: 100,
            batch: 16,
            seed: 0,
            augment: true,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Usage(format!("invalid value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid value {value:?} for `{key}` (expected true/false)"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "scale" => {
                self.scale = value.parse().map_err(|e: swinca_core::Error| CliError::Usage(e.to_string()))?
            }
            "window" => self.window = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "optimizer" => {
                self.optimizer = value.parse().map_err(|e: swinca_core::Error| CliError::Usage(e.to_string()))?
            }
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines. `#` starts a comment; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {raw:?}", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "scale={}\nwindow={}\nheads={}\nlr={}\noptimizer={}\nepochs={}\nbatch={}\nseed={}\naugment={}\n",
            self.scale,
            self.window,
            self.heads,
            self.lr,
            match self.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            },
            self.epochs,
            self.batch,
            self.seed,
            self.augment
        )
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut m = ModelConfig::scaled(self.scale).map_err(|e| CliError::Usage(e.to_string()))?;
        m.window = self.window;
        m.heads = self.heads;
        m.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(m)
    }
}
