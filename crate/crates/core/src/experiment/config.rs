use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, RngSeed};
use crate::synth::{World, WorldSpec};
use crate::train::{Mode, TrainConfig};

/// Either `preset = "<name>"` or an explicit component list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldConfig {
    Preset { preset: String },
    Explicit(WorldSpec),
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig::Preset {
            preset: "default_ring".into(),
        }
    }
}

impl WorldConfig {
    pub fn spec(&self) -> Result<WorldSpec> {
        match self {
            WorldConfig::Preset { preset } => WorldSpec::preset(preset),
            WorldConfig::Explicit(spec) => Ok(spec.clone()),
        }
    }
}

/// Everything one run depends on. Stored as TOML; unknown keys are
/// rejected. `train.mode` and `train.seed` are set by the runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: RngSeed,
    /// Labeled training set size.
    pub n: usize,
    /// Unlabeled pool size.
    pub m: usize,
    pub n_in_val: usize,
    pub n_ood_val: usize,
    pub n_test: usize,
    /// Held-out out-distribution samples for AUROC.
    pub n_ood_test: usize,
    /// Shift of the optional far out-distribution test block.
    pub far_shift: Option<f64>,
    pub alpha: f64,
    pub iterations: usize,
    pub mode: Mode,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: RngSeed(0),
            n: 4000,
            m: 200_000,
            n_in_val: 2000,
            n_ood_val: 5000,
            n_test: 10_000,
            n_ood_test: 10_000,
            far_shift: Some(12.0),
            alpha: 0.98,
            iterations: 3,
            mode: Mode::Odst,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0,1)", self.alpha)));
        }
        let counts = [
            ("n", self.n),
            ("m", self.m),
            ("n_in_val", self.n_in_val),
            ("n_ood_val", self.n_ood_val),
            ("n_test", self.n_test),
            ("n_ood_test", self.n_ood_test),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be > 0")));
        }
        if self.mode.is_base() {
            return Err(Error::Config(format!(
                "mode {} is a base objective; pick a self-training mode",
                self.mode
            )));
        }
        self.train.validate()?;
        self.compile_world().map(|_| ())
    }

    pub fn compile_world(&self) -> Result<World> {
        self.world.spec()?.compile()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
        Self::from_toml(&text)
    }

    /// Hash of the settings that determine artifacts (output path excluded).
    pub fn fingerprint(&self) -> Result<u64> {
        let mut c = self.clone();
        c.out = None;
        Ok(fnv1a(c.to_toml()?.as_bytes()))
    }

    /// Training settings for the model produced at iteration `t`
    /// (`t = 0` is the base teacher).
    pub fn train_config(&self, t: usize) -> TrainConfig {
        let mut tc = self.train.clone();
        tc.mode = if t == 0 { self.mode.base_mode() } else { self.mode };
        tc.seed = self.seed.derive("model", t as u64);
        tc
    }

    /// Iterations that train a student; NON_ITERATIVE trains one student
    /// with the budget of the last iteration.
    pub fn student_iterations(&self) -> Vec<usize> {
        match self.mode {
            Mode::NonIterative if self.iterations > 0 => vec![self.iterations - 1],
            Mode::NonIterative => Vec::new(),
            _ => (0..self.iterations).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_defaults() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        let partial = ExperimentConfig::from_toml("seed = 3\nmode = \"ST\"\n[train]\nepochs = 10\n").unwrap();
        assert_eq!(partial.seed, RngSeed(3));
        assert_eq!(partial.mode, Mode::St);
        assert_eq!(partial.train.epochs, 10);
        assert_eq!(partial.n, 4000);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn explicit_world() {
        let spec = WorldSpec::default_ring();
        let c = ExperimentConfig {
            world: WorldConfig::Explicit(spec.clone()),
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back.world.spec().unwrap(), spec);
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = ExperimentConfig {
            alpha: 1.0,
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            mode: Mode::BaseOe,
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_iterative_runs_last_budget() {
        let c = ExperimentConfig {
            mode: Mode::NonIterative,
            ..ExperimentConfig::default()
        };
        assert_eq!(c.student_iterations(), vec![2]);
        assert_eq!(ExperimentConfig::default().student_iterations(), vec![0, 1, 2]);
    }
}
