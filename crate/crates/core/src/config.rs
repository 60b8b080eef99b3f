//! Run configuration, read from a `key = value` TOML file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

/// Which split the accuracy-recovery gate measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSplit {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of the epoch budget at which the learning rate is scaled by
    /// `lr_drop_factor`.
    pub lr_drop_points: Vec<f64>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Strictly ascending, all positive.
    pub alpha_grid: Vec<f64>,
    /// Per-α retraining budget; defaults to `epochs`. Zero gates on the
    /// pruned model as is.
    pub retrain_epochs: Option<usize>,
    /// Post-pruning training budget; defaults to `epochs`.
    pub finetune_epochs: Option<usize>,
    pub acceptance_epsilon: f64,
    pub max_rollbacks: usize,
    pub seed: u64,
    pub snapshot_epochs: Vec<usize>,
    pub gate_split: GateSplit,
    /// Keep the copied weights of a pruned layer instead of re-drawing them.
    pub keep_pruned_weights: bool,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 160,
            batch_size: 64,
            lr: 0.1,
            lr_drop_points: vec![0.5, 0.75],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha_grid: vec![0.3, 0.5, 0.8, 1.0, 1.5, 2.0, 2.5, 3.0],
            retrain_epochs: None,
            finetune_epochs: None,
            acceptance_epsilon: 0.0,
            max_rollbacks: 2,
            seed: 0,
            snapshot_epochs: Vec::new(),
            gate_split: GateSplit::Eval,
            keep_pruned_weights: false,
            eval_batch_size: 256,
        }
    }
}

impl RunConfig {
    pub fn retrain_epochs(&self) -> usize {
        self.retrain_epochs.unwrap_or(self.epochs)
    }

    pub fn finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.epochs)
    }

    /// Learning rate for `epoch` (0-based) of a run lasting `total` epochs.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let drops = self
            .lr_drop_points
            .iter()
            .filter(|&&p| epoch as f64 >= p * total as f64)
            .count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(format!("config: {msg}")));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if let Some(p) = self
            .lr_drop_points
            .iter()
            .find(|p| !(**p > 0.0 && **p < 1.0))
        {
            return bad(format!("lr_drop_points must lie in (0, 1), got {p}"));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!(
                "lr_drop_factor must be positive, got {}",
                self.lr_drop_factor
            ));
        }
        if self.alpha_grid.is_empty() {
            return bad("alpha_grid is empty".into());
        }
        if self.alpha_grid.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad(format!(
                "alpha_grid values must be positive, got {:?}",
                self.alpha_grid
            ));
        }
        if !self.alpha_grid.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!(
                "alpha_grid must be strictly ascending, got {:?}",
                self.alpha_grid
            ));
        }
        if !(self.acceptance_epsilon >= 0.0 && self.acceptance_epsilon.is_finite()) {
            return bad(format!(
                "acceptance_epsilon must be >= 0, got {}",
                self.acceptance_epsilon
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, FormatError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| FormatError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one field from a `key=value` pair, where `value` is a TOML
    /// value (`epochs=30`, `alpha_grid=[0.5, 1.0]`, `gate_split="train"`).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
        let mut table =
            toml::Table::try_from(&*self).map_err(|e| Error::Invariant(e.to_string()))?;
        let doc = format!("{} = {}", key.trim(), value.trim());
        let parsed: toml::Table = toml::from_str(&doc)
            .map_err(|e| Error::Usage(format!("override {assignment:?}: {e}")))?;
        table.extend(parsed);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Usage(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.alpha_grid[0], 0.3);
        assert_eq!(cfg.retrain_epochs(), 160);
    }

    #[test]
    fn step_schedule() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_at(0, 160), 0.1);
        assert_eq!(cfg.lr_at(79, 160), 0.1);
        assert!((cfg.lr_at(80, 160) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(120, 160) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn file_values_and_overrides() {
        let mut cfg =
            RunConfig::from_toml("epochs = 30\nalpha_grid = [0.5, 1.0]\ngate_split = \"train\"\n")
                .unwrap();
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.gate_split, GateSplit::Train);
        cfg.set("epochs=12").unwrap();
        cfg.set("retrain_epochs = 4").unwrap();
        assert_eq!((cfg.epochs, cfg.retrain_epochs()), (12, 4));
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_grids() {
        assert!(RunConfig::from_toml("epoch = 3").is_err());
        assert!(RunConfig::default().clone().set("nope=1").is_err());
        let cfg = RunConfig {
            alpha_grid: vec![0.5, 0.3],
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
