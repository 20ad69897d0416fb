//! Experiment configuration files: strict JSON, unknown keys rejected.

use std::path::{Path, PathBuf};

use asgo::optim::{OptimizerConfig, OptimizerKind};
use asgo::problems::ProblemSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::BenchError;

fn one() -> usize {
    1
}

fn default_max_cells() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Column prefix in `compare` output; defaults to the optimizer name.
    #[serde(default)]
    pub label: Option<String>,
    pub problem: ProblemSpec,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    /// Use exact gradients instead of the stochastic oracle.
    #[serde(default)]
    pub exact_gradient: bool,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "one")]
    pub record_every: usize,
    /// Output directory; defaults to `out/<config file stem>`.
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    /// Off by default so that CSVs stay byte-identical across runs.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub grid: Option<Grid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear warm-up from 0 over `warmup_steps`, then cosine decay to `final_lr`.
    WarmupCosine { warmup_steps: usize, final_lr: f64 },
}

impl Schedule {
    /// Learning rate for step `t` (0-based) of `total`.
    pub fn lr(&self, base: f64, t: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::WarmupCosine { warmup_steps, final_lr } => {
                if t < warmup_steps {
                    base * (t + 1) as f64 / warmup_steps as f64
                } else {
                    let span = total.saturating_sub(warmup_steps).max(1) as f64;
                    let progress = (t - warmup_steps) as f64 / span;
                    final_lr + 0.5 * (base - final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

/// Hyperparameter grid for `sweep`; an empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub lr: Vec<f64>,
    #[serde(default)]
    pub beta1: Vec<f64>,
    #[serde(default)]
    pub beta2: Vec<f64>,
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub damping: Vec<f64>,
    #[serde(default = "default_max_cells")]
    pub max_cells: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            BenchError::Config(m) => BenchError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if cfg.output_path.is_none() {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            cfg.output_path = Some(PathBuf::from("out").join(stem));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.record_every == 0 {
            return bad("record_every must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if let Schedule::WarmupCosine { warmup_steps, final_lr } = self.schedule {
            if warmup_steps > self.steps || !(final_lr >= 0.0) {
                return bad("warmup-cosine needs warmup_steps <= steps and final_lr >= 0");
            }
        }
        self.optimizer.validate().map_err(|e| BenchError::Config(format!("optimizer: {e}")))?;
        if let Some(g) = &self.grid {
            if g.max_cells == 0 {
                return bad("grid.max_cells must be >= 1");
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.optimizer.kind.name().to_string())
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_path.clone().unwrap_or_else(|| PathBuf::from("out/run"))
    }

    pub fn with_optimizer(&self, optimizer: OptimizerConfig) -> Self {
        Self {
            optimizer,
            ..self.clone()
        }
    }

    /// Convenience constructor for programmatic use.
    pub fn new(problem: ProblemSpec, kind: OptimizerKind, lr: f64, steps: usize, seeds: Vec<u64>) -> Self {
        Self {
            label: None,
            problem,
            optimizer: OptimizerConfig::new(kind, lr),
            steps,
            batch_size: 1,
            exact_gradient: false,
            seeds,
            schedule: Schedule::Constant,
            record_every: 1,
            output_path: None,
            record_wall_time: false,
            grid: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "problem": {"name": "quadratic", "m": 4, "n": 3},
        "optimizer": {"kind": "sgd", "lr": 0.1},
        "steps": 10,
        "seeds": [1]
    }"#;

    #[test]
    fn minimal_config_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.record_every, 1);
        assert_eq!(c.schedule, Schedule::Constant);
        assert_eq!(c.label(), "sgd");
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_and_names_are_rejected() {
        let typo = MINIMAL.replace("\"steps\"", "\"stpes\"");
        assert!(matches!(ExperimentConfig::from_json(&typo), Err(BenchError::Config(_))));
        let name = MINIMAL.replace("\"sgd\"", "\"sgdd\"");
        let err = ExperimentConfig::from_json(&name).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
        let inner = MINIMAL.replace("\"lr\": 0.1", "\"lr\": 0.1, \"beta_2\": 0.9");
        assert!(ExperimentConfig::from_json(&inner).is_err());
    }

    #[test]
    fn invariants_checked() {
        assert!(ExperimentConfig::from_json(&MINIMAL.replace("[1]", "[]")).is_err());
        assert!(ExperimentConfig::from_json(&MINIMAL.replace("\"steps\": 10", "\"steps\": 0")).is_err());
    }

    #[test]
    fn warmup_cosine_shape() {
        let s = Schedule::WarmupCosine {
            warmup_steps: 4,
            final_lr: 0.0,
        };
        assert_eq!(s.lr(1.0, 0, 20), 0.25);
        assert_eq!(s.lr(1.0, 3, 20), 1.0);
        assert_eq!(s.lr(1.0, 4, 20), 1.0);
        assert!(s.lr(1.0, 19, 20) < 0.02);
        assert_eq!(Schedule::Constant.lr(0.3, 7, 10), 0.3);
    }
}
