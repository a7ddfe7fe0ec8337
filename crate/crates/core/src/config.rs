//! Training configuration, read from TOML.
//!
//! ```toml
//! [train]
//! seed = 0
//! batch_size = 8
//! [optim]
//! lr = 1e-4
//! [ssl]
//! tau = 0.1
//! [model.sat]
//! d_model = 64
//! [data]
//! cohorts = ["data/A", "data/B", "data/C"]
//! ```
//!
//! Relative cohort and header-table paths are resolved against the config
//! file's directory. `CITAB_SEED` overrides `train.seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::ModelConfig;
use crate::ssl::SslConfig;

pub const SEED_ENV: &str = "CITAB_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Decoupled weight decay, applied after each Adam step.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 1.5e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Fraction of a cohort's training split whose labels fine-tuning may use.
    pub label_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { seed: 0, batch_size: 8, pretrain_epochs: 30, finetune_epochs: 20, label_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Generated cohort directories (`schema.toml`, `table.csv`, `images.citb`, ...).
    pub cohorts: Vec<PathBuf>,
    /// Optional precomputed header table; columns it lacks fall back to hashing.
    pub header_embeddings: Option<PathBuf>,
    pub header_seed: u64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { cohorts: Vec::new(), header_embeddings: None, header_seed: 0, split: [0.7, 0.1, 0.2], split_seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub optim: OptimConfig,
    pub ssl: SslConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Parses and validates without touching the environment or the file system.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolves relative paths against its directory and
    /// applies `CITAB_SEED`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path).at(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.cohorts.iter_mut().for_each(fix);
        if let Some(p) = self.data.header_embeddings.as_mut() {
            fix(p);
        }
        if let Some(p) = self.output_dir.as_mut() {
            fix(p);
        }
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ssl.validate()?;
        if self.train.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 for negative mining, got {}",
                self.train.batch_size
            )));
        }
        if !(self.train.label_fraction > 0.0 && self.train.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label fraction {} outside (0, 1]", self.train.label_fraction)));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        let s = self.data.split;
        if s.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 || s[0] == 0.0 {
            return Err(Error::Config(format!("split fractions {s:?} must be nonnegative, sum to 1 and train > 0")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_desk_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.train.batch_size, 8);
        assert_eq!((c.train.pretrain_epochs, c.train.finetune_epochs), (30, 20));
        assert_eq!(c.optim.lr, 1e-4);
        assert_eq!(c.optim.weight_decay, 1.5e-6);
        assert_eq!(c.ssl.tau, 0.1);
        assert_eq!(c.model.sat.n_experts, 5);
    }

    #[test]
    fn parses_sections_and_round_trips() {
        let c = TrainConfig::from_toml_str(
            "[train]\nseed = 4\nbatch_size = 4\n[model.sat]\nd_model = 16\nn_heads = 2\n[data]\ncohorts = [\"a\"]\n",
        )
        .unwrap();
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.model.sat.d_model, 16);
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(TrainConfig::from_toml_str("[train]\nbatch_size = 1\n"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml_str("[ssl]\ntau = 0.0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override() {
        let mut c = TrainConfig::default();
        c.apply_seed_override(Some("17")).unwrap();
        assert_eq!(c.train.seed, 17);
        assert!(c.apply_seed_override(Some("x")).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_config() {
        let mut c = TrainConfig::default();
        c.data.cohorts = vec!["data/A".into(), "/abs/B".into()];
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.data.cohorts, vec![PathBuf::from("/cfg/data/A"), PathBuf::from("/abs/B")]);
    }
}
