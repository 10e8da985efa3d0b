//! The bi-layer HMM.
//!
//! Each producer gets its own HMM over the categories of the items it creates. A
//! consumer's browsing history is annotated with the producer hidden state under which
//! every browsed item was created, and the consumer model runs over composite
//! `(consumer state, producer state)` states. The producer component of a composite state
//! is observed through the annotation, so training masks responsibilities to the
//! composite states whose producer component matches the annotation at that step.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::RangeInclusive;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{CategoryId, ConsumerId, HistoryEntry, ItemKey, ProducerId, SocialItem, UserProfile};
use crate::error::{Error, Result};
use crate::hmm::{self, HmmParams, OnlineDecoder, TrainConfig};

/// Candidate hidden-state counts tried by [`select_state_count`] unless overridden.
pub const DEFAULT_STATE_RANGE: RangeInclusive<usize> = 1..=8;

/// An annotated browse: the item's category and the producer state it was created under.
pub type Annotated = (CategoryId, usize);

/// Mixes a base seed with a tag and an id so that independently trained models draw from
/// unrelated streams regardless of training order.
pub fn derive_seed(base: u64, tag: u64, id: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PRODUCER_TAG: u64 = 1;
const CONSUMER_TAG: u64 = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProducerModel {
    pub producer: ProducerId,
    pub params: HmmParams,
    /// Created items in creation order.
    pub items: Vec<ItemKey>,
    /// Viterbi state at each creation position, aligned with `items`.
    pub decoded_states: Vec<usize>,
    #[serde(skip)]
    position: OnceLock<HashMap<ItemKey, usize>>,
}

impl PartialEq for ProducerModel {
    fn eq(&self, other: &Self) -> bool {
        self.producer == other.producer
            && self.params == other.params
            && self.items == other.items
            && self.decoded_states == other.decoded_states
    }
}

impl ProducerModel {
    fn positions(&self) -> &HashMap<ItemKey, usize> {
        self.position
            .get_or_init(|| self.items.iter().enumerate().map(|(i, &k)| (k, i)).collect())
    }

    /// Producer state for a browsed item. Items created after training are placed one
    /// step after the last decoded state: the successor state that best explains the
    /// item's category.
    pub fn state_of(&self, item: ItemKey, category: CategoryId) -> usize {
        if let Some(&pos) = self.positions().get(&item) {
            return self.decoded_states[pos];
        }
        let c = category.index();
        if c >= self.params.n_obs {
            return 0;
        }
        let row: &[f64] = match self.decoded_states.last() {
            Some(&s) => &self.params.a[s],
            None => &self.params.pi,
        };
        (0..self.params.n_states)
            .map(|j| row[j] * self.params.b[j][c])
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(a, av), (j, v)| if v > av { (j, v) } else { (a, av) })
            .0
    }
}

/// Per-producer creation histories `(item, category)`, each in creation order.
pub fn group_by_producer(items: &[SocialItem]) -> BTreeMap<ProducerId, Vec<(ItemKey, CategoryId)>> {
    let mut sorted: Vec<&SocialItem> = items.iter().collect();
    sorted.sort_by_key(|i| (i.timestamp, i.key));
    let mut groups: BTreeMap<ProducerId, Vec<(ItemKey, CategoryId)>> = BTreeMap::new();
    for it in sorted {
        groups.entry(it.producer).or_default().push((it.key, it.category));
    }
    groups
}

/// How many hidden states a model gets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateCount {
    Fixed(usize),
    /// Chosen per history by [`select_state_count`].
    Select { min: usize, max: usize },
}

impl Default for StateCount {
    fn default() -> Self {
        StateCount::Select {
            min: *DEFAULT_STATE_RANGE.start(),
            max: *DEFAULT_STATE_RANGE.end(),
        }
    }
}

impl StateCount {
    fn resolve(&self, history: &[Annotated], n_categories: usize, config: &TrainConfig) -> Result<usize> {
        match *self {
            StateCount::Fixed(n) if n >= 1 => Ok(n),
            StateCount::Fixed(_) => Err(Error::config("hidden state count must be at least 1")),
            StateCount::Select { min, max } => {
                if min == 0 || min > max {
                    return Err(Error::config(format!("bad state count range {min}..={max}")));
                }
                select_state_count(history, n_categories, min..=max, config)
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ProducerTraining {
    pub models: BTreeMap<ProducerId, ProducerModel>,
    /// Producers left out because they have no creation history.
    pub skipped: Vec<ProducerId>,
}

pub fn train_producer_models(
    histories: &BTreeMap<ProducerId, Vec<(ItemKey, CategoryId)>>,
    n_categories: usize,
    states: &StateCount,
    config: &TrainConfig,
) -> Result<ProducerTraining> {
    config.validate()?;
    let trained: Vec<(ProducerId, Option<ProducerModel>)> = histories
        .par_iter()
        .map(|(&producer, history)| -> Result<_> {
            if history.is_empty() {
                return Ok((producer, None));
            }
            let cfg = config.with_seed(derive_seed(config.seed, PRODUCER_TAG, producer.0 as u64));
            Ok((producer, Some(train_producer(producer, history, n_categories, states, &cfg)?)))
        })
        .collect::<Result<_>>()?;
    let mut out = ProducerTraining::default();
    for (producer, model) in trained {
        match model {
            Some(m) => {
                out.models.insert(producer, m);
            }
            None => {
                log::warn!("producer {producer} has no creation history; no model trained");
                out.skipped.push(producer);
            }
        }
    }
    Ok(out)
}

fn train_producer(
    producer: ProducerId,
    history: &[(ItemKey, CategoryId)],
    n_categories: usize,
    states: &StateCount,
    config: &TrainConfig,
) -> Result<ProducerModel> {
    let cats: Vec<usize> = history.iter().map(|(_, c)| c.index()).collect();
    let plain: Vec<Annotated> = history.iter().map(|&(_, c)| (c, 0)).collect();
    let n = states.resolve(&plain, n_categories, config)?;
    let trained = hmm::baum_welch(&[cats.clone()], n, n_categories, config)?;
    let params = canonical_order(&trained.params);
    let (decoded, _) = hmm::viterbi(&params, &cats)?;
    Ok(ProducerModel {
        producer,
        params,
        items: history.iter().map(|(k, _)| *k).collect(),
        decoded_states: decoded,
        position: OnceLock::new(),
    })
}

/// Relabels states by their most likely category, then by emission centroid
/// `sum_m m * b[j][m]`, so that state ids of different producers line up when their
/// regimes favour the same categories.
fn canonical_order(params: &HmmParams) -> HmmParams {
    let mode = |j: usize| -> usize {
        params.b[j]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(a, av), (m, &p)| if p > av { (m, p) } else { (a, av) })
            .0
    };
    let centroid = |j: usize| -> f64 { params.b[j].iter().enumerate().map(|(m, p)| m as f64 * p).sum() };
    let mut perm: Vec<usize> = (0..params.n_states).collect();
    perm.sort_by(|&x, &y| {
        mode(x)
            .cmp(&mode(y))
            .then(centroid(x).total_cmp(&centroid(y)))
            .then(x.cmp(&y))
    });
    params.permuted(&perm)
}

/// Annotates browses with producer states. Producers without a model map to the single
/// state `0` of a one-state stand-in.
pub fn annotate_history<'a>(
    entries: impl IntoIterator<Item = &'a HistoryEntry>,
    producers: &BTreeMap<ProducerId, ProducerModel>,
) -> Vec<Annotated> {
    entries
        .into_iter()
        .map(|e| {
            let z = producers
                .get(&e.producer)
                .map_or(0, |m| m.state_of(e.item, e.category));
            (e.category, z)
        })
        .collect()
}

pub fn annotate_consumer_history(
    profile: &UserProfile,
    producers: &BTreeMap<ProducerId, ProducerModel>,
) -> Vec<Annotated> {
    annotate_history(profile.history(), producers)
}

/// Composite `(consumer state, producer state)` space. Only producer states that occur in
/// the consumer's annotated history get a slot; they are kept sorted in
/// `producer_states` and addressed densely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeStateSpace {
    pub n_consumer_states: usize,
    pub producer_states: Vec<usize>,
}

impl CompositeStateSpace {
    pub fn new(n_consumer_states: usize, observed: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = observed.into_iter().collect();
        Self {
            n_consumer_states,
            producer_states: set.into_iter().collect(),
        }
    }

    pub fn n_producer_states(&self) -> usize {
        self.producer_states.len().max(1)
    }

    pub fn n_states(&self) -> usize {
        self.n_consumer_states * self.n_producer_states()
    }

    pub fn index(&self, consumer_state: usize, producer_slot: usize) -> usize {
        consumer_state * self.n_producer_states() + producer_slot
    }

    pub fn split(&self, state: usize) -> (usize, usize) {
        let k = self.n_producer_states();
        (state / k, state % k)
    }

    fn slot_of(&self, z: usize) -> Option<usize> {
        self.producer_states.binary_search(&z).ok()
    }

    /// Whether composite `state` agrees with an observed producer state `z`. A `z` with no
    /// slot constrains nothing.
    pub fn allows(&self, z: usize, state: usize) -> bool {
        match self.slot_of(z) {
            Some(slot) => self.split(state).1 == slot,
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerModel {
    pub consumer: ConsumerId,
    pub space: CompositeStateSpace,
    /// HMM over composite states with categories as observations.
    pub params: HmmParams,
    pub annotated_history: Vec<Annotated>,
    pub log_likelihood: f64,
}

impl ConsumerModel {
    pub fn n_categories(&self) -> usize {
        self.params.n_obs
    }
}

/// Trains a consumer model on an annotated history. Histories shorter than two steps get
/// a one-state model holding the empirical category frequencies.
pub fn train_consumer_model(
    consumer: ConsumerId,
    history: &[Annotated],
    n_consumer_states: usize,
    n_categories: usize,
    config: &TrainConfig,
) -> Result<ConsumerModel> {
    config.validate()?;
    if history.is_empty() {
        return Err(Error::invalid(format!("consumer {consumer} has an empty history")));
    }
    if n_consumer_states == 0 || n_categories == 0 {
        return Err(Error::config("consumer models need at least one state and one category"));
    }
    if let Some((c, _)) = history.iter().find(|(c, _)| c.index() >= n_categories) {
        return Err(Error::invalid(format!("category {c} out of range")));
    }
    if history.len() < 2 {
        return Ok(empirical_model(consumer, history, n_categories, config.floor));
    }
    let space = CompositeStateSpace::new(n_consumer_states, history.iter().map(|&(_, z)| z));
    let cats: Vec<usize> = history.iter().map(|(c, _)| c.index()).collect();
    let mask = |_: usize, t: usize, s: usize| space.allows(history[t].1, s);
    let trained = hmm::baum_welch_masked(&[cats], space.n_states(), n_categories, config, &mask)?;
    Ok(ConsumerModel {
        consumer,
        space,
        params: trained.params,
        annotated_history: history.to_vec(),
        log_likelihood: trained.log_likelihood,
    })
}

/// One-state model emitting the empirical category frequencies of `history` (uniform when
/// empty). Out-of-range categories are ignored.
pub fn empirical_model(consumer: ConsumerId, history: &[Annotated], n_categories: usize, floor: f64) -> ConsumerModel {
    let history: Vec<Annotated> = history.iter().copied().filter(|(c, _)| c.index() < n_categories).collect();
    let history = history.as_slice();
    let mut params = HmmParams::uniform(1, n_categories);
    let mut counts = vec![0.0; n_categories];
    for (c, _) in history {
        counts[c.index()] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        params.b[0] = counts.iter().map(|x| x / total).collect();
    }
    params.apply_floor(floor);
    let cats: Vec<usize> = history.iter().map(|(c, _)| c.index()).collect();
    let ll = hmm::forward_log_likelihood(&params, &cats).unwrap_or(f64::NEG_INFINITY);
    ConsumerModel {
        consumer,
        space: CompositeStateSpace::new(1, std::iter::empty()),
        params,
        annotated_history: history.to_vec(),
        log_likelihood: ll,
    }
}

/// Clamps to `floor` and renormalises.
pub(crate) fn floored(mut dist: Vec<f64>, floor: f64) -> Vec<f64> {
    for x in dist.iter_mut() {
        if !(*x >= floor) {
            *x = floor;
        }
    }
    let s: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|x| *x /= s);
    dist
}

/// `p(c | consumer)` for every category: decode `recent` over the composite states (with
/// the producer components pinned), step once through the transition matrix, emit. No
/// model means a uniform distribution.
pub fn predict_category_prob(
    model: Option<&ConsumerModel>,
    recent: &[Annotated],
    n_categories: usize,
    floor: f64,
) -> Vec<f64> {
    let Some(model) = model else {
        return vec![1.0 / n_categories as f64; n_categories];
    };
    let mut decoder = OnlineDecoder::new(&model.params);
    for &(c, z) in recent {
        if c.index() < model.params.n_obs {
            decoder.step(c.index(), |s| model.space.allows(z, s));
        }
    }
    floored(decoder.predict(), floor)
}

/// Category distribution from a plain HMM over the categories of `recent`.
pub fn plain_category_prob(params: &HmmParams, recent: &[CategoryId], floor: f64) -> Result<Vec<f64>> {
    let seq: Vec<usize> = recent.iter().map(|c| c.index()).collect();
    Ok(floored(hmm::predict_next_obs(params, &seq)?, floor))
}

/// Categories by descending probability, ties by ascending id.
pub fn top_k_categories(dist: &[f64], k: usize) -> Vec<(CategoryId, f64)> {
    let mut ranked: Vec<(CategoryId, f64)> =
        dist.iter().enumerate().map(|(i, &p)| (CategoryId(i as u32), p)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

fn argmax_category(dist: &[f64]) -> usize {
    dist.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(a, av), (i, &v)| if v > av { (i, v) } else { (a, av) })
        .0
}

/// Train on the first 80% of `history`, then predict each remaining step from everything
/// before it (top-1). Returns the fraction predicted correctly.
pub fn rolling_accuracy(
    history: &[Annotated],
    n_states: usize,
    n_categories: usize,
    config: &TrainConfig,
) -> Result<f64> {
    let split = history.len() * 4 / 5;
    if split == 0 || split == history.len() {
        return Err(Error::invalid("history too short for an 80/20 split"));
    }
    let model = train_consumer_model(ConsumerId(u32::MAX), &history[..split], n_states, n_categories, config)?;
    let mut decoder = OnlineDecoder::new(&model.params);
    for &(c, z) in &history[..split] {
        decoder.step(c.index(), |s| model.space.allows(z, s));
    }
    let mut hits = 0usize;
    for &(c, z) in &history[split..] {
        if argmax_category(&decoder.predict()) == c.index() {
            hits += 1;
        }
        decoder.step(c.index(), |s| model.space.allows(z, s));
    }
    Ok(hits as f64 / (history.len() - split) as f64)
}

/// Rolling accuracy for every candidate state count.
pub fn state_count_accuracies(
    history: &[Annotated],
    n_categories: usize,
    candidates: RangeInclusive<usize>,
    config: &TrainConfig,
) -> Result<Vec<(usize, f64)>> {
    candidates
        .map(|n| Ok((n, rolling_accuracy(history, n, n_categories, config)?)))
        .collect()
}

/// Hidden-state count with the best held-out next-category accuracy (ties to the
/// smaller count). Histories shorter than 5 get 1.
pub fn select_state_count(
    history: &[Annotated],
    n_categories: usize,
    candidates: RangeInclusive<usize>,
    config: &TrainConfig,
) -> Result<usize> {
    if history.len() < 5 {
        return Ok(1);
    }
    let mut best = (*candidates.start(), f64::NEG_INFINITY);
    for (n, acc) in state_count_accuracies(history, n_categories, candidates, config)? {
        if acc > best.1 {
            best = (n, acc);
        }
    }
    Ok(best.0)
}

/// Every trained model of a dataset, keyed by user id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub n_categories: usize,
    pub producers: BTreeMap<ProducerId, ProducerModel>,
    pub consumers: BTreeMap<ConsumerId, ConsumerModel>,
}

impl ModelBundle {
    pub fn annotate(&self, entries: &[HistoryEntry]) -> Vec<Annotated> {
        annotate_history(entries, &self.producers)
    }
}

pub fn train_consumer_models(
    profiles: &BTreeMap<ConsumerId, UserProfile>,
    producers: &BTreeMap<ProducerId, ProducerModel>,
    n_categories: usize,
    states: &StateCount,
    config: &TrainConfig,
) -> Result<BTreeMap<ConsumerId, ConsumerModel>> {
    profiles
        .par_iter()
        .filter(|(_, p)| !p.is_empty())
        .map(|(&consumer, profile)| {
            let history = annotate_consumer_history(profile, producers);
            let cfg = config.with_seed(derive_seed(config.seed, CONSUMER_TAG, consumer.0 as u64));
            let n = states.resolve(&history, n_categories, &cfg)?;
            Ok((consumer, train_consumer_model(consumer, &history, n, n_categories, &cfg)?))
        })
        .collect()
}

/// Producer and consumer models for a set of items and profiles.
pub fn train_bundle(
    items: &[SocialItem],
    profiles: &BTreeMap<ConsumerId, UserProfile>,
    n_categories: usize,
    producer_states: &StateCount,
    consumer_states: &StateCount,
    config: &TrainConfig,
) -> Result<ModelBundle> {
    let producers = train_producer_models(&group_by_producer(items), n_categories, producer_states, config)?.models;
    let consumers = train_consumer_models(profiles, &producers, n_categories, consumer_states, config)?;
    Ok(ModelBundle {
        n_categories,
        producers,
        consumers,
    })
}
