//! Item-user relevance.
//!
//! `R = (1 - λ_s)·R_ℓ + λ_s·R_s` where the long-term score adds the log category
//! prediction, the log smoothed producer probability and the log of the weighted sum of
//! smoothed entity probabilities, and the short-term score is the log category
//! prediction from the short-term window. Every probability is floored before its log.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::bihmm::{self, ConsumerModel, ProducerModel};
use crate::domain::{CategoryId, ConsumerId, EntityId, HistoryEntry, LongTermList, ProducerId, SocialItem, UserProfile};
use crate::error::{Error, Result};
use crate::expansion::{expand_entities, CooccurrenceStats};

pub const DEFAULT_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub lambda_s: f64,
    pub mu_producer: f64,
    pub mu_entity: f64,
    pub floor: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            lambda_s: 0.4,
            mu_producer: 50.0,
            mu_entity: 100.0,
            floor: DEFAULT_FLOOR,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s > 0.0 && self.lambda_s < 1.0) {
            return Err(Error::config(format!("lambda_s must lie in (0, 1), got {}", self.lambda_s)));
        }
        if !(self.mu_producer >= 0.0 && self.mu_entity >= 0.0) {
            return Err(Error::config("Dirichlet priors must be non-negative"));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::config("probability floor must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn with_lambda(self, lambda_s: f64) -> Self {
        Self { lambda_s, ..self }
    }
}

/// Corpus-wide relative frequencies of producers (per browse) and entities (per
/// occurrence in browsed items).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    producers: BTreeMap<ProducerId, f64>,
    entities: BTreeMap<EntityId, f64>,
}

impl BackgroundModel {
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = &'a HistoryEntry>) -> Self {
        let mut producers: BTreeMap<ProducerId, f64> = BTreeMap::new();
        let mut entities: BTreeMap<EntityId, f64> = BTreeMap::new();
        for e in entries {
            *producers.entry(e.producer).or_default() += 1.0;
            for &x in &e.entities {
                *entities.entry(x).or_default() += 1.0;
            }
        }
        Self::from_counts(producers, entities)
    }

    pub fn from_profiles<'a>(profiles: impl IntoIterator<Item = &'a UserProfile>) -> Self {
        Self::from_entries(profiles.into_iter().flat_map(UserProfile::history))
    }

    /// Normalises raw counts; empty maps stay empty.
    pub fn from_counts(mut producers: BTreeMap<ProducerId, f64>, mut entities: BTreeMap<EntityId, f64>) -> Self {
        normalise(&mut producers);
        normalise(&mut entities);
        Self { producers, entities }
    }

    pub fn producer(&self, p: ProducerId) -> f64 {
        self.producers.get(&p).copied().unwrap_or(0.0)
    }

    pub fn entity(&self, e: EntityId) -> f64 {
        self.entities.get(&e).copied().unwrap_or(0.0)
    }

    pub fn producer_total(&self) -> f64 {
        self.producers.values().sum()
    }

    pub fn entity_total(&self) -> f64 {
        self.entities.values().sum()
    }
}

fn normalise<K>(m: &mut BTreeMap<K, f64>) {
    let total: f64 = m.values().sum();
    if total > 0.0 {
        m.values_mut().for_each(|v| *v /= total);
    }
}

fn dirichlet(count: u32, total: u32, mu: f64, bg: f64, what: &str) -> Result<f64> {
    let denom = total as f64 + mu;
    if !(denom > 0.0) {
        return Err(Error::invalid(format!("{what} probability undefined: empty history and zero prior")));
    }
    // split as c/(n+μ) + (μ/(n+μ))·bg so index signatures reproduce it bit for bit
    Ok(count as f64 / denom + mu / denom * bg)
}

pub fn smoothed_producer_prob(long: &LongTermList, producer: ProducerId, bg: &BackgroundModel, mu: f64) -> Result<f64> {
    dirichlet(long.producer_count(producer), long.total_producers(), mu, bg.producer(producer), "producer")
}

pub fn smoothed_entity_prob(long: &LongTermList, entity: EntityId, bg: &BackgroundModel, mu: f64) -> Result<f64> {
    dirichlet(long.entity_count(entity), long.total_entities(), mu, bg.entity(entity), "entity")
}

/// An incoming item reduced to what scoring needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemQuery {
    pub category: CategoryId,
    pub producer: ProducerId,
    /// `E ∪ E'` with weights; original occurrences carry weight 1.
    pub expanded: Vec<(EntityId, f64)>,
}

impl ItemQuery {
    pub fn new(item: &SocialItem, stats: &CooccurrenceStats, per_entity: usize) -> Self {
        Self {
            category: item.category,
            producer: item.producer,
            expanded: expand_entities(&item.entities, item.category, stats, per_entity),
        }
    }

    /// The item's own entities, unexpanded.
    pub fn plain(item: &SocialItem) -> Self {
        Self {
            category: item.category,
            producer: item.producer,
            expanded: item.entities.iter().map(|&e| (e, 1.0)).collect(),
        }
    }
}

/// A profile together with its cached category predictions: from the long-term list
/// (for `R_ℓ`) and from the short-term window (for `R_s`). Empty sequences yield the
/// model's prior prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub profile: UserProfile,
    pub long_term_pred: Vec<f64>,
    pub short_term_pred: Vec<f64>,
}

impl UserState {
    /// Users without a trained model get the one-state empirical model of their history.
    pub fn new(
        profile: UserProfile,
        model: Option<&ConsumerModel>,
        producers: &BTreeMap<ProducerId, ProducerModel>,
        n_categories: usize,
        floor: f64,
    ) -> Self {
        let fallback;
        let model = match model {
            Some(m) => m,
            None => {
                let history = bihmm::annotate_consumer_history(&profile, producers);
                fallback = bihmm::empirical_model(profile.consumer, &history, n_categories, floor);
                &fallback
            }
        };
        let long = bihmm::annotate_history(profile.long_term.entries(), producers);
        let short = bihmm::annotate_history(profile.short_term.iter(), producers);
        Self {
            long_term_pred: bihmm::predict_category_prob(Some(model), &long, n_categories, floor),
            short_term_pred: bihmm::predict_category_prob(Some(model), &short, n_categories, floor),
            profile,
        }
    }

    /// Uses the given predictions verbatim.
    pub fn with_predictions(profile: UserProfile, long_term_pred: Vec<f64>, short_term_pred: Vec<f64>) -> Self {
        Self {
            profile,
            long_term_pred,
            short_term_pred,
        }
    }

    pub fn consumer(&self) -> ConsumerId {
        self.profile.consumer
    }
}

fn ln_floored(p: f64, floor: f64) -> f64 {
    if p >= floor {
        p.ln()
    } else {
        floor.ln()
    }
}

fn category_prob(pred: &[f64], c: CategoryId) -> f64 {
    pred.get(c.index()).copied().unwrap_or(0.0)
}

/// `Σ w_e · p̂(e|u)` over the expanded entities.
///
/// Evaluated in a fixed order that index bounds mirror: the count part per distinct
/// entity in id order (weights of repeats summed first), then the smoothing share over
/// the occurrences in query order.
pub fn weighted_entity_mass(q: &ItemQuery, long: &LongTermList, bg: &BackgroundModel, mu: f64) -> f64 {
    let denom = long.total_entities() as f64 + mu;
    if !(denom > 0.0) {
        return 0.0;
    }
    let mut weights: BTreeMap<EntityId, f64> = BTreeMap::new();
    let mut bg_mass = 0.0;
    for &(e, w) in &q.expanded {
        bg_mass += w * bg.entity(e);
        *weights.entry(e).or_insert(0.0) += w;
    }
    let mut mass = 0.0;
    for (e, w) in weights {
        mass += w * (long.entity_count(e) as f64 / denom);
    }
    mass + mu / denom * bg_mass
}

/// `F·W` as `W` added to itself `F` times. Never below the running sum of `F` weights
/// that are each at most `W`, which a plain product does not guarantee in floating point.
pub fn repeated_weight(w: f64, f: f64) -> f64 {
    let mut total = 0.0;
    for _ in 0..f as u64 {
        total += w;
    }
    total
}

pub fn long_term_score(q: &ItemQuery, user: &UserState, bg: &BackgroundModel, cfg: &ScoringConfig) -> f64 {
    let long = &user.profile.long_term;
    let pc = category_prob(&user.long_term_pred, q.category);
    let pp = smoothed_producer_prob(long, q.producer, bg, cfg.mu_producer).unwrap_or(0.0);
    let pe = weighted_entity_mass(q, long, bg, cfg.mu_entity);
    ln_floored(pc, cfg.floor) + ln_floored(pp, cfg.floor) + ln_floored(pe, cfg.floor)
}

pub fn short_term_score(q: &ItemQuery, user: &UserState, cfg: &ScoringConfig) -> f64 {
    ln_floored(category_prob(&user.short_term_pred, q.category), cfg.floor)
}

pub fn combine(lambda_s: f64, long: f64, short: f64) -> f64 {
    (1.0 - lambda_s) * long + lambda_s * short
}

pub fn combined_score(q: &ItemQuery, user: &UserState, bg: &BackgroundModel, cfg: &ScoringConfig) -> f64 {
    combine(cfg.lambda_s, long_term_score(q, user, bg, cfg), short_term_score(q, user, cfg))
}

#[derive(Debug, Clone, Copy)]
struct Ranked(ConsumerId, f64);

impl Ranked {
    /// `Less` means ranked higher: larger score, then smaller id.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other.1.total_cmp(&self.1).then(self.0.cmp(&other.0))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    /// Worst-ranked is greatest, so a max-heap keeps it on top.
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// Bounded collector of the best `k` (consumer, score) pairs under the ranking order
/// "score descending, consumer ascending".
#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub fn offer(&mut self, consumer: ConsumerId, score: f64) {
        let r = Ranked(consumer, score);
        if self.heap.len() < self.k {
            self.heap.push(r);
        } else if let Some(worst) = self.heap.peek() {
            if r < *worst {
                self.heap.pop();
                self.heap.push(r);
            }
        }
    }

    pub fn is_full(&self) -> bool {
        self.heap.len() >= self.k
    }

    /// Score of the current k-th entry once `k` entries are held.
    pub fn threshold(&self) -> Option<f64> {
        if self.is_full() {
            self.heap.peek().map(|r| r.1)
        } else {
            None
        }
    }

    pub fn into_sorted(self) -> Vec<(ConsumerId, f64)> {
        self.heap.into_sorted_vec().into_iter().map(|r| (r.0, r.1)).collect()
    }
}

pub fn brute_force_top_k<'a>(
    q: &ItemQuery,
    users: impl IntoIterator<Item = &'a UserState>,
    k: usize,
    bg: &BackgroundModel,
    cfg: &ScoringConfig,
) -> Result<Vec<(ConsumerId, f64)>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut top = TopK::new(k);
    for u in users {
        top.offer(u.consumer(), combined_score(q, u, bg, cfg));
    }
    Ok(top.into_sorted())
}
