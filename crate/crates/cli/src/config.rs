//! Run configuration: defaults, then an optional TOML file, then command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use ssrec_core::bihmm::StateCount;
use ssrec_core::expansion::ExpansionConfig;
use ssrec_core::harness::{SearchMode, SimulationConfig, DEFAULT_PARTITIONS};
use ssrec_core::hmm::TrainConfig;
use ssrec_core::index::IndexConfig;
use ssrec_core::scoring::ScoringConfig;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Distinct test items timed.
    pub queries: usize,
    /// Leading share of the interaction stream the index is built from.
    pub train_fraction: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            queries: 100,
            train_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The only source of randomness; copied into `train.seed`.
    pub seed: u64,
    /// Short-term window capacity.
    pub window: usize,
    pub k: Vec<usize>,
    pub partitions: usize,
    pub producer_states: StateCount,
    pub consumer_states: StateCount,
    pub scoring: ScoringConfig,
    pub train: TrainConfig,
    pub expansion: ExpansionConfig,
    pub index: IndexConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimulationConfig::default();
        Self {
            seed: 0,
            window: sim.window,
            k: sim.k,
            partitions: DEFAULT_PARTITIONS,
            producer_states: sim.producer_states,
            consumer_states: sim.consumer_states,
            scoring: sim.scoring,
            train: sim.train,
            expansion: sim.expansion,
            index: sim.index,
            bench: BenchConfig::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the file or default value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda_s: Option<f64>,
    pub mu_producer: Option<f64>,
    pub mu_entity: Option<f64>,
    pub k: Option<Vec<usize>>,
    pub partitions: Option<usize>,
    pub window: Option<usize>,
    pub states_override: Option<usize>,
}

impl RunConfig {
    pub fn load(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(flags);
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }

    fn apply(&mut self, f: &Overrides) {
        if let Some(s) = f.seed {
            self.seed = s;
        }
        if let Some(x) = f.lambda_s {
            self.scoring.lambda_s = x;
        }
        if let Some(x) = f.mu_producer {
            self.scoring.mu_producer = x;
        }
        if let Some(x) = f.mu_entity {
            self.scoring.mu_entity = x;
        }
        if let Some(k) = &f.k {
            self.k = k.clone();
        }
        if let Some(p) = f.partitions {
            self.partitions = p;
        }
        if let Some(w) = f.window {
            self.window = w;
        }
        if let Some(n) = f.states_override {
            self.producer_states = StateCount::Fixed(n);
            self.consumer_states = StateCount::Fixed(n);
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        for states in [&self.producer_states, &self.consumer_states] {
            match *states {
                StateCount::Fixed(0) => return Err(UsageError("hidden state count must be at least 1".into()).into()),
                StateCount::Select { min, max } if min == 0 || min > max => {
                    return Err(UsageError(format!("bad state count range {min}..={max}")).into())
                }
                _ => {}
            }
        }
        if self.bench.queries == 0 || !(self.bench.train_fraction > 0.0 && self.bench.train_fraction < 1.0) {
            return Err(UsageError("bench needs at least one query and a train fraction in (0, 1)".into()).into());
        }
        self.simulation(SearchMode::Index).validate()?;
        Ok(())
    }

    pub fn k_max(&self) -> usize {
        self.k.iter().copied().max().unwrap_or(1)
    }

    pub fn simulation(&self, mode: SearchMode) -> SimulationConfig {
        SimulationConfig {
            k: self.k.clone(),
            partitions: self.partitions,
            window: self.window,
            scoring: self.scoring,
            expansion: self.expansion,
            index: self.index,
            train: self.train,
            producer_states: self.producer_states.clone(),
            consumer_states: self.consumer_states.clone(),
            mode,
            updates: true,
            timing: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\nwindow = 3\n[scoring]\nlambda_s = 0.3\nmu_entity = 10.0\n").unwrap();
        let flags = Overrides {
            lambda_s: Some(0.6),
            ..Overrides::default()
        };
        let cfg = RunConfig::load(Some(&path), &flags).unwrap();
        assert_eq!(cfg.scoring.lambda_s, 0.6);
        assert_eq!(cfg.scoring.mu_entity, 10.0);
        assert_eq!(cfg.scoring.mu_producer, 50.0);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.window), (4, 4, 3));
    }

    #[test]
    fn state_override_fixes_both_layers() {
        let flags = Overrides {
            states_override: Some(2),
            ..Overrides::default()
        };
        let cfg = RunConfig::load(None, &flags).unwrap();
        assert_eq!(cfg.producer_states, StateCount::Fixed(2));
        assert_eq!(cfg.consumer_states, StateCount::Fixed(2));
    }

    #[test]
    fn invalid_combinations_fail_up_front() {
        let bad = |f: Overrides| RunConfig::load(None, &f).is_err();
        assert!(bad(Overrides {
            lambda_s: Some(1.5),
            ..Overrides::default()
        }));
        assert!(bad(Overrides {
            partitions: Some(2),
            ..Overrides::default()
        }));
        assert!(bad(Overrides {
            k: Some(vec![0]),
            ..Overrides::default()
        }));
        assert!(bad(Overrides {
            states_override: Some(0),
            ..Overrides::default()
        }));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.toml");
        std::fs::write(&path, "no_such_field = 1\n").unwrap();
        assert!(RunConfig::load(Some(&path), &Overrides::default()).is_err());
    }
}
