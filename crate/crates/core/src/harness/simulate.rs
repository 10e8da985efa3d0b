//! Rolling six-partition stream simulation.
//!
//! For every test partition `p`, models, co-occurrence statistics and the index are built
//! from partitions `< p` only. The partition is then replayed in order: an item is queried
//! the first time it is browsed in `p`, and a recommended user is a hit when they browse
//! that item anywhere in `p`. Browses update profiles between queries.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bench::LatencyStats;
use super::report::{EvalReport, PartitionResult, PrecisionRow, SweepPoint, REPORT_SCHEMA_VERSION};
use super::{partition_stream, PartitionPlan, DEFAULT_PARTITIONS, TRAINING_PARTITIONS};
use crate::bihmm::{train_bundle, ModelBundle, StateCount};
use crate::domain::{build_profiles, ConsumerId, Dataset, HistoryEntry, Interaction, ItemKey, SocialItem, UserProfile};
use crate::error::{Error, Result};
use crate::expansion::{build_cooccurrence, CooccurrenceStats, ExpansionConfig};
use crate::hmm::TrainConfig;
use crate::index::{CppseIndex, IndexConfig};
use crate::scoring::{brute_force_top_k, BackgroundModel, ItemQuery, ScoringConfig, UserState};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Pruned index search.
    #[default]
    Index,
    /// Exhaustive scoring of the users the index can reach.
    Oracle,
}

impl SearchMode {
    fn name(self) -> &'static str {
        match self {
            SearchMode::Index => "index",
            SearchMode::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub k: Vec<usize>,
    pub partitions: usize,
    /// Short-term window capacity `|W|`.
    pub window: usize,
    pub scoring: ScoringConfig,
    pub expansion: ExpansionConfig,
    pub index: IndexConfig,
    pub train: TrainConfig,
    pub producer_states: StateCount,
    pub consumer_states: StateCount,
    pub mode: SearchMode,
    /// Feed browses back into the profiles and the index while replaying.
    pub updates: bool,
    /// Record wall-clock query latency (makes the report non-reproducible).
    pub timing: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            k: vec![1, 5, 10, 20, 30],
            partitions: DEFAULT_PARTITIONS,
            window: 5,
            scoring: ScoringConfig::default(),
            expansion: ExpansionConfig::default(),
            index: IndexConfig::default(),
            train: TrainConfig::default(),
            producer_states: StateCount::default(),
            consumer_states: StateCount::default(),
            mode: SearchMode::Index,
            updates: true,
            timing: false,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Error::config("k values must be non-empty and at least 1"));
        }
        if self.partitions <= TRAINING_PARTITIONS {
            return Err(Error::config(format!(
                "need more than {TRAINING_PARTITIONS} partitions to have a test partition"
            )));
        }
        if self.window == 0 {
            return Err(Error::config("short-term window capacity must be at least 1"));
        }
        self.scoring.validate()?;
        self.expansion.validate()?;
        self.index.validate()?;
        self.train.validate()
    }

    fn k_max(&self) -> usize {
        self.k.iter().copied().max().unwrap_or(1)
    }
}

/// Everything learned at one partition boundary.
#[derive(Debug)]
struct Stage {
    partition: usize,
    models: ModelBundle,
    stats: CooccurrenceStats,
}

/// Models trained once per partition boundary, replayable under different run settings.
#[derive(Debug)]
pub struct Simulator<'d> {
    dataset: &'d Dataset,
    plan: PartitionPlan,
    stages: Vec<Stage>,
}

impl<'d> Simulator<'d> {
    /// Trains models and co-occurrence statistics for every test partition. Uses the
    /// partition count and the training, state-count and expansion-statistics fields of
    /// `config`.
    pub fn prepare(dataset: &'d Dataset, config: &SimulationConfig) -> Result<Self> {
        config.validate()?;
        let interactions = &dataset.interactions;
        let plan = partition_stream(interactions.len(), config.partitions)?;
        let n_categories = dataset.n_categories();
        let mut stages = Vec::new();
        for p in plan.test_partitions() {
            let cutoff = plan.ranges[p].start;
            let train = &interactions[..cutoff];
            let items = known_items(dataset, train, interactions.get(cutoff).map(|i| i.timestamp));
            // consumer models see the whole history, so the window size does not matter here
            let profiles = build_profiles(train, &dataset.items, 1)?;
            let models = train_bundle(
                &items,
                &profiles,
                n_categories,
                &config.producer_states,
                &config.consumer_states,
                &config.train,
            )?;
            let stats = build_cooccurrence(items.iter(), &config.expansion)?;
            log::info!(
                "partition {p}: trained on {} interactions, {} producer and {} consumer models",
                train.len(),
                models.producers.len(),
                models.consumers.len()
            );
            stages.push(Stage {
                partition: p,
                models,
                stats,
            });
        }
        Ok(Self { dataset, plan, stages })
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    /// Replays every test partition. Uses the run-time fields of `config`: `k`, `window`,
    /// `scoring`, `expansion.per_entity`, `index`, `mode`, `updates` and `timing`.
    pub fn run(&self, config: &SimulationConfig) -> Result<EvalReport> {
        config.validate()?;
        self.evaluate(config)
    }

    /// `run` minus validation; sweeps reach the closed endpoint `λ_s = 1`.
    fn evaluate(&self, config: &SimulationConfig) -> Result<EvalReport> {
        let mut partitions = Vec::with_capacity(self.stages.len());
        let mut pooled_hits = vec![0u64; config.k.len()];
        let mut pooled_items = 0u64;
        let mut latencies = Vec::new();
        for stage in &self.stages {
            let (hits, items) = self.replay(stage, config, &mut latencies)?;
            for (acc, h) in pooled_hits.iter_mut().zip(&hits) {
                *acc += h;
            }
            pooled_items += items;
            let range = &self.plan.ranges[stage.partition];
            partitions.push(PartitionResult {
                partition: stage.partition,
                train_interactions: range.start,
                test_interactions: range.len(),
                precision: rows(&config.k, &hits, items),
            });
        }
        Ok(EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            mode: config.mode.name().to_owned(),
            window: config.window,
            lambda_s: config.scoring.lambda_s,
            expansion_per_entity: config.expansion.per_entity,
            partitions,
            pooled: rows(&config.k, &pooled_hits, pooled_items),
            sweep: Vec::new(),
            latency: config.timing.then(|| LatencyStats::from_micros(latencies)),
        })
    }

    /// Returns hits per `k` and the number of distinct items queried.
    fn replay(&self, stage: &Stage, config: &SimulationConfig, latencies: &mut Vec<f64>) -> Result<(Vec<u64>, u64)> {
        let dataset = self.dataset;
        let range = self.plan.ranges[stage.partition].clone();
        let train = &dataset.interactions[..range.start];
        let test = &dataset.interactions[range];
        let n_categories = dataset.n_categories();
        let floor = config.scoring.floor;
        let models = &stage.models;

        let mut profiles = build_profiles(train, &dataset.items, config.window)?;
        let bg = BackgroundModel::from_profiles(profiles.values());
        let state_of = |p: &UserProfile| {
            UserState::new(p.clone(), models.consumers.get(&p.consumer), &models.producers, n_categories, floor)
        };
        let states: Vec<UserState> = profiles.par_iter().map(|(_, p)| state_of(p)).collect();
        let mut index = CppseIndex::build(states, bg, config.scoring, config.index, n_categories)?;

        let mut browsed_by: HashMap<ItemKey, HashSet<ConsumerId>> = HashMap::new();
        for it in test {
            browsed_by.entry(it.item).or_default().insert(it.consumer);
        }
        let k_max = config.k_max();
        let mut hits = vec![0u64; config.k.len()];
        let mut queried: HashSet<ItemKey> = HashSet::new();
        let mut dirty: BTreeSet<ConsumerId> = BTreeSet::new();
        for it in test {
            let item = dataset.item(it.item);
            if queried.insert(it.item) {
                if !dirty.is_empty() {
                    let batch: Vec<&UserProfile> = dirty.iter().map(|c| &profiles[c]).collect();
                    let updates: Vec<UserState> = batch.par_iter().map(|p| state_of(p)).collect();
                    index.apply_updates(updates)?;
                    dirty.clear();
                }
                let q = ItemQuery::new(item, &stage.stats, config.expansion.per_entity);
                let started = Instant::now();
                let top = match config.mode {
                    SearchMode::Index => index.knn_query(&q, k_max)?,
                    SearchMode::Oracle => {
                        let reachable = index.reachable_users(&q);
                        let users = reachable.iter().filter_map(|&c| index.user(c));
                        brute_force_top_k(&q, users, k_max, index.background(), index.scoring())?
                    }
                };
                if config.timing {
                    latencies.push(started.elapsed().as_secs_f64() * 1e6);
                }
                let relevant = &browsed_by[&it.item];
                for (h, &k) in hits.iter_mut().zip(&config.k) {
                    *h += top.iter().take(k).filter(|(c, _)| relevant.contains(c)).count() as u64;
                }
            }
            if config.updates {
                push_browse(&mut profiles, it, item, config.window)?;
                dirty.insert(it.consumer);
            }
        }
        Ok((hits, queried.len() as u64))
    }
}

fn push_browse(
    profiles: &mut BTreeMap<ConsumerId, UserProfile>,
    it: &Interaction,
    item: &SocialItem,
    window: usize,
) -> Result<()> {
    let profile = match profiles.entry(it.consumer) {
        std::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
        std::collections::btree_map::Entry::Vacant(v) => v.insert(UserProfile::new(it.consumer, window)?),
    };
    profile.push(HistoryEntry::new(item, it.timestamp));
    Ok(())
}

/// Items known at a partition boundary: those browsed in `train` and those created
/// strictly before the first test timestamp.
fn known_items(dataset: &Dataset, train: &[Interaction], boundary: Option<u64>) -> Vec<SocialItem> {
    let browsed: HashSet<ItemKey> = train.iter().map(|i| i.item).collect();
    dataset
        .items
        .iter()
        .filter(|it| browsed.contains(&it.key) || boundary.is_none_or(|b| it.timestamp < b))
        .cloned()
        .collect()
}

fn rows(ks: &[usize], hits: &[u64], items: u64) -> Vec<PrecisionRow> {
    ks.iter().zip(hits).map(|(&k, &h)| PrecisionRow::new(k, h, items)).collect()
}

pub fn run_stream_simulation(dataset: &Dataset, config: &SimulationConfig) -> Result<EvalReport> {
    Simulator::prepare(dataset, config)?.run(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    WindowSize,
    LambdaS,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::WindowSize => "window_size",
            SweepParameter::LambdaS => "lambda_s",
        }
    }

    /// `|W|` in `1..=10`, or `λ_s` in `0.1..=1.0` by `0.1`.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParameter::WindowSize => (1..=10).map(f64::from).collect(),
            SweepParameter::LambdaS => (1..=10).map(|i| f64::from(i) / 10.0).collect(),
        }
    }
}

/// Evaluates every grid point. A window-size point reports, per `k`, the best `P@k` over
/// the default `λ_s` grid together with the `λ_s` achieving it (smallest on ties).
pub fn sweep(
    simulator: &Simulator<'_>,
    parameter: SweepParameter,
    grid: &[f64],
    base: &SimulationConfig,
) -> Result<EvalReport> {
    base.validate()?;
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let point = match parameter {
            SweepParameter::LambdaS => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::config(format!("lambda_s {value} is outside [0, 1]")));
                }
                let cfg = SimulationConfig {
                    scoring: base.scoring.with_lambda(value),
                    ..base.clone()
                };
                SweepPoint {
                    parameter: parameter.name().to_owned(),
                    value,
                    best_lambda: Vec::new(),
                    precision: simulator.evaluate(&cfg)?.pooled,
                }
            }
            SweepParameter::WindowSize => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::config(format!("window size {value} is not a positive integer")));
                }
                let mut best: Vec<(f64, PrecisionRow)> = Vec::new();
                for lambda in SweepParameter::LambdaS.default_grid() {
                    let cfg = SimulationConfig {
                        window: value as usize,
                        scoring: base.scoring.with_lambda(lambda),
                        ..base.clone()
                    };
                    let pooled = simulator.evaluate(&cfg)?.pooled;
                    if best.is_empty() {
                        best = pooled.into_iter().map(|r| (lambda, r)).collect();
                    } else {
                        for (b, r) in best.iter_mut().zip(pooled) {
                            if r.precision > b.1.precision {
                                *b = (lambda, r);
                            }
                        }
                    }
                }
                let (best_lambda, precision) = best.into_iter().unzip();
                SweepPoint {
                    parameter: parameter.name().to_owned(),
                    value,
                    best_lambda,
                    precision,
                }
            }
        };
        points.push(point);
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: base.mode.name().to_owned(),
        window: base.window,
        lambda_s: base.scoring.lambda_s,
        expansion_per_entity: base.expansion.per_entity,
        partitions: Vec::new(),
        pooled: Vec::new(),
        sweep: points,
        latency: None,
    })
}
