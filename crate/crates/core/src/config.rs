//! Run configuration: `key = value` text, resolved as flag > file > default.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{DEFAULT_ALPHA, DEFAULT_RANK};
use crate::corpus::DEFAULT_INTERVAL;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PretrainConfig};
use crate::optim::OptimizerKind;
use crate::tensor::Seed;
use crate::trainer::{Stage, TrainConfig};

macro_rules! run_config {
    ($( $(#[$doc:meta])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name) ),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $( stringify!($name) => {
                        self.$name = value.parse().map_err(|_| {
                            Error::Config(format!("invalid value {value:?} for key {}", stringify!($name)))
                        })?;
                    } )*
                    other => return Err(Error::Config(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }

            /// Every key, one `key = value` line each, in declaration order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( writeln!(s, "{} = {}", stringify!($name), self.$name).expect("string write"); )*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 0,
    /// Synthetic training files.
    files: usize = 2000,
    /// Synthetic files held out for evaluation.
    heldout_files: usize = 200,
    interval: usize = DEFAULT_INTERVAL,
    d_model: usize = 64,
    n_layers: usize = 2,
    mlp_hidden: usize = 128,
    max_seq_len: usize = 320,
    pretrain_steps: usize = 4000,
    pretrain_batch_size: usize = 16,
    pretrain_learning_rate: f64 = 2e-3,
    rank: usize = DEFAULT_RANK,
    alpha: f64 = DEFAULT_ALPHA,
    steps: usize = 6000,
    batch_size: usize = 64,
    learning_rate: f64 = 1.5e-3,
    /// Linear learning-rate decay to zero in both adapter stages.
    lr_decay: bool = true,
    stage2_steps: usize = 300,
    stage2_learning_rate: f64 = 1e-5,
    /// Training queries that get stage-2 samples.
    stage2_queries: usize = 1000,
    /// Explicit negatives per stage-2 query.
    negatives: usize = 4,
    /// Fragments placed in a completion prompt.
    k: usize = 1,
    /// Prompt window for line completion, in tokens.
    window: usize = 256,
    /// Probes for the invariance check.
    probes: usize = 100,
}

impl RunConfig {
    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` (`key=value` each).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.parse_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override must be key=value, got {o:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let positive = [
            ("files", self.files),
            ("heldout_files", self.heldout_files),
            ("interval", self.interval),
            ("pretrain_batch_size", self.pretrain_batch_size),
            ("negatives", self.negatives),
            ("k", self.k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.rank == 0 || 2 * self.rank > self.d_model {
            return Err(Error::Config(format!("rank must be in 1..={}", self.d_model / 2)));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("learning_rate", self.learning_rate),
            ("stage2_learning_rate", self.stage2_learning_rate),
            ("pretrain_learning_rate", self.pretrain_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.window < 2 || self.window > self.max_seq_len {
            return Err(Error::Config(format!("window must be in 2..={}", self.max_seq_len)));
        }
        Ok(())
    }

    pub fn base_seed(&self) -> Seed {
        Seed(self.seed)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            mlp_hidden: self.mlp_hidden,
            max_seq_len: self.max_seq_len,
            ..ModelConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch_size,
            learning_rate: self.pretrain_learning_rate,
            seed: self.base_seed().derive_str("pretrain"),
            ..PretrainConfig::default()
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: match stage {
                Stage::One => self.learning_rate,
                Stage::Two => self.stage2_learning_rate,
            },
            steps: match stage {
                Stage::One => self.steps,
                Stage::Two => self.stage2_steps,
            },
            optimizer: OptimizerKind::default(),
            linear_decay: self.lr_decay,
            seed: self.base_seed().derive_str(match stage {
                Stage::One => "stage1",
                Stage::Two => "stage2",
            }),
            stage,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("learning_rate", "0.0005").unwrap();
        cfg.set("seed", "7").unwrap();
        let mut back = RunConfig::default();
        back.parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_text().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn precedence_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nseed = 3\nsteps = 10 # trailing\n\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["seed=9".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.steps), (9, 10));
        assert_eq!(cfg.rank, 16);
        assert_eq!(cfg.alpha, 32.0);

        let err = RunConfig::resolve(None, &["sede=1".into()]).unwrap_err();
        assert_eq!(err.kind(), "config_violation");
        assert!(err.to_string().contains("sede"));
        assert!(RunConfig::resolve(None, &["steps=many".into()]).is_err());
        assert!(RunConfig::resolve(None, &["rank=40".into()]).is_err());
        std::fs::write(&path, "steps\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &[]).is_err());
    }
}
