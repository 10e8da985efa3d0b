//! Entry signatures, block vocabularies, pseudo-queries and the recommendation upper
//! bound.
//!
//! A smoothed probability `(n + μ·bg)/(N + μ)` is split into a count part `n/(N + μ)`,
//! stored per vocabulary slot, and a smoothing mass `α = μ/(N + μ)` that multiplies the
//! background probability. Both are non-negative and the bound is monotone in every
//! component, so the component-wise maximum of several signatures bounds each of them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{CategoryId, EntityId, ProducerId};
use crate::error::{Error, Result};
use crate::scoring::{repeated_weight, BackgroundModel, ItemQuery, ScoringConfig, UserState};

/// Dense vocabulary with a zero-valued reserve at the tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotVocab<K: Ord> {
    keys: Vec<K>,
    slots: BTreeMap<K, u32>,
    capacity: usize,
}

impl<K: Ord + Copy> SlotVocab<K> {
    /// Slots follow the given order; capacity reserves `ceil(reserve · len)` more.
    pub fn from_ordered(keys: Vec<K>, reserve: f64) -> Self {
        let slots = keys.iter().enumerate().map(|(i, &k)| (k, i as u32)).collect();
        let capacity = keys.len() + (keys.len() as f64 * reserve).ceil() as usize;
        Self { keys, slots, capacity }
    }

    pub fn slot(&self, k: K) -> Option<u32> {
        self.slots.get(&k).copied()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Length of the impact lists aligned to this vocabulary.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn keys(&self) -> &[K] {
        &self.keys
    }

    pub fn contains(&self, k: K) -> bool {
        self.slots.contains_key(&k)
    }

    /// Places `k` in a reserved slot. `Err(())` when the reserve is used up.
    pub fn try_insert(&mut self, k: K) -> std::result::Result<u32, ()> {
        if let Some(s) = self.slot(k) {
            return Ok(s);
        }
        if self.keys.len() >= self.capacity {
            return Err(());
        }
        let s = self.keys.len() as u32;
        self.keys.push(k);
        self.slots.insert(k, s);
        Ok(s)
    }
}

/// Sparse non-negative vector sorted by slot; absent slots are zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVec(pub Vec<(u32, f64)>);

impl SparseVec {
    pub fn get(&self, slot: u32) -> f64 {
        match self.0.binary_search_by_key(&slot, |x| x.0) {
            Ok(i) => self.0[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn max_with(&self, other: &SparseVec) -> SparseVec {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len().max(b.len()));
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push((a[i].0, a[i].1.max(b[j].1)));
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        SparseVec(out)
    }

    /// Sum of `max(0, other - self)` over all slots.
    pub fn enlargement(&self, other: &SparseVec) -> f64 {
        other.0.iter().map(|&(s, v)| (v - self.get(s)).max(0.0)).sum()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().map(|x| x.1).sum()
    }

    pub fn dense(&self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        for &(s, x) in &self.0 {
            v[s as usize] = x;
        }
        v
    }
}

/// `⟨p_ℓ, P_{U^p}, P_E, p_s⟩` plus the smoothing masses. Leaf signatures describe one
/// user; internal ones are component-wise maxima.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub p_long: f64,
    pub p_short: f64,
    pub producers: SparseVec,
    pub entities: SparseVec,
    pub alpha_producer: f64,
    pub alpha_entity: f64,
}

fn count_part(count: u32, total: u32, mu: f64) -> (f64, f64) {
    let denom = total as f64 + mu;
    if denom > 0.0 {
        (count as f64 / denom, mu / denom)
    } else {
        (0.0, 0.0)
    }
}

impl Signature {
    /// Leaf signature of `user` in the tree of `category`. Every long-term producer and
    /// entity of the user must have a slot.
    pub fn leaf(
        user: &UserState,
        category: CategoryId,
        producers: &SlotVocab<ProducerId>,
        entities: &SlotVocab<EntityId>,
        cfg: &ScoringConfig,
    ) -> Result<Self> {
        let long = &user.profile.long_term;
        let missing = || Error::Integrity(format!("user {} has terms outside its block vocabulary", user.consumer()));
        let mut ps = Vec::with_capacity(long.producer_counts().len());
        for (&p, &n) in long.producer_counts() {
            let v = count_part(n, long.total_producers(), cfg.mu_producer).0;
            ps.push((producers.slot(p).ok_or_else(missing)?, v));
        }
        let mut es = Vec::with_capacity(long.entity_counts().len());
        for (&e, &n) in long.entity_counts() {
            let v = count_part(n, long.total_entities(), cfg.mu_entity).0;
            es.push((entities.slot(e).ok_or_else(missing)?, v));
        }
        ps.sort_by_key(|x| x.0);
        es.sort_by_key(|x| x.0);
        Ok(Self {
            p_long: user.long_term_pred.get(category.index()).copied().unwrap_or(0.0),
            p_short: user.short_term_pred.get(category.index()).copied().unwrap_or(0.0),
            producers: SparseVec(ps),
            entities: SparseVec(es),
            alpha_producer: count_part(0, long.total_producers(), cfg.mu_producer).1,
            alpha_entity: count_part(0, long.total_entities(), cfg.mu_entity).1,
        })
    }

    pub fn max_with(&self, other: &Signature) -> Signature {
        Signature {
            p_long: self.p_long.max(other.p_long),
            p_short: self.p_short.max(other.p_short),
            producers: self.producers.max_with(&other.producers),
            entities: self.entities.max_with(&other.entities),
            alpha_producer: self.alpha_producer.max(other.alpha_producer),
            alpha_entity: self.alpha_entity.max(other.alpha_entity),
        }
    }

    pub fn max_of<'a>(sigs: impl IntoIterator<Item = &'a Signature>) -> Signature {
        let mut it = sigs.into_iter();
        let Some(first) = it.next() else {
            return Signature::default();
        };
        it.fold(first.clone(), |acc, s| acc.max_with(s))
    }

    /// How much `self` would grow to cover `other`.
    pub fn enlargement(&self, other: &Signature) -> f64 {
        (other.p_long - self.p_long).max(0.0)
            + (other.p_short - self.p_short).max(0.0)
            + (other.alpha_producer - self.alpha_producer).max(0.0)
            + (other.alpha_entity - self.alpha_entity).max(0.0)
            + self.producers.enlargement(&other.producers)
            + self.entities.enlargement(&other.entities)
    }

    pub fn size(&self) -> f64 {
        self.p_long + self.p_short + self.alpha_producer + self.alpha_entity + self.producers.sum() + self.entities.sum()
    }

    /// Every component is a probability-like value in `[0, 1]` and every slot is below
    /// the given list lengths.
    pub fn well_formed(&self, producer_len: usize, entity_len: usize) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let list_ok = |v: &SparseVec, len: usize| {
            v.0.windows(2).all(|w| w[0].0 < w[1].0) && v.0.iter().all(|&(s, x)| (s as usize) < len && unit(x))
        };
        unit(self.p_long)
            && unit(self.p_short)
            && unit(self.alpha_producer)
            && unit(self.alpha_entity)
            && list_ok(&self.producers, producer_len)
            && list_ok(&self.entities, entity_len)
    }
}

/// An item encoded against one block: the producer's slot (one-hot), and for every
/// expanded entity with a slot its occurrence count `F` and weight `W` (max over its
/// occurrences). The background masses carry the smoothing share of every entity,
/// including those outside the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoQuery {
    pub block: u32,
    pub category: CategoryId,
    pub producer_slot: Option<u32>,
    /// `(slot, F, W)` in entity-id order, the order exact scoring sums in.
    pub entities: Vec<(u32, f64, f64)>,
    pub producer_bg: f64,
    pub entity_bg_mass: f64,
}

impl PseudoQuery {
    pub fn encode(
        block: u32,
        item: &ItemQuery,
        producers: &SlotVocab<ProducerId>,
        entities: &SlotVocab<EntityId>,
        bg: &BackgroundModel,
    ) -> Self {
        let mut by_entity: BTreeMap<EntityId, (u32, f64, f64)> = BTreeMap::new();
        let mut entity_bg_mass = 0.0;
        for &(e, w) in &item.expanded {
            entity_bg_mass += w * bg.entity(e);
            if let Some(s) = entities.slot(e) {
                let x = by_entity.entry(e).or_insert((s, 0.0, 0.0));
                x.1 += 1.0;
                x.2 = x.2.max(w);
            }
        }
        Self {
            block,
            category: item.category,
            producer_slot: producers.slot(item.producer),
            entities: by_entity.into_values().collect(),
            producer_bg: bg.producer(item.producer),
            entity_bg_mass,
        }
    }

    /// `F_{U^p}` as a dense vector of length `len`.
    pub fn producer_vector(&self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        if let Some(s) = self.producer_slot {
            v[s as usize] = 1.0;
        }
        v
    }

    /// `F_E` as a dense vector of length `len`.
    pub fn frequency_vector(&self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        for &(s, f, _) in &self.entities {
            v[s as usize] = f;
        }
        v
    }

    /// `W_e` as a dense vector of length `len`.
    pub fn weight_vector(&self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        for &(s, _, w) in &self.entities {
            v[s as usize] = w;
        }
        v
    }
}

fn ln_floored(p: f64, floor: f64) -> f64 {
    if p >= floor {
        p.ln()
    } else {
        floor.ln()
    }
}

/// `(1-λ)(log p_ℓ + log(F_U·P_U + α_p·bg_p) + log(F_E·(W⊗P_E) + α_e·Σw·bg_e)) + λ·log p_s`
/// with every log argument floored.
pub fn upper_bound(q: &PseudoQuery, sig: &Signature, lambda_s: f64, floor: f64) -> f64 {
    let producer = q.producer_slot.map_or(0.0, |s| sig.producers.get(s)) + sig.alpha_producer * q.producer_bg;
    let mut entity = 0.0;
    for &(s, f, w) in &q.entities {
        entity += repeated_weight(w, f) * sig.entities.get(s);
    }
    entity += sig.alpha_entity * q.entity_bg_mass;
    let long = ln_floored(sig.p_long, floor) + ln_floored(producer, floor) + ln_floored(entity, floor);
    (1.0 - lambda_s) * long + lambda_s * ln_floored(sig.p_short, floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ConsumerId, HistoryEntry, ItemKey, UserProfile};
    use crate::scoring::{combined_score, DEFAULT_FLOOR};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example_pseudo_query() {
        // U^p_0 = <weSpeakFootball, Wrzzer, SirMan, bundesteam>
        // E_0 = <Beckham, football, worldcup, FIFA, Brazil, Messi>
        let (beckham, football, worldcup, fifa, brazil, messi) =
            (EntityId(10), EntityId(11), EntityId(12), EntityId(13), EntityId(14), EntityId(15));
        let producers = SlotVocab::from_ordered(vec![ProducerId(3), ProducerId(1), ProducerId(7), ProducerId(2)], 0.2);
        let entities = SlotVocab::from_ordered(vec![beckham, football, worldcup, fifa, brazil, messi], 0.2);
        let item = ItemQuery {
            category: CategoryId(0),
            producer: ProducerId(1),
            expanded: vec![(beckham, 1.0), (messi, 0.7), (worldcup, 1.0), (fifa, 0.9), (worldcup, 1.0), (fifa, 0.9)],
        };
        let q = PseudoQuery::encode(0, &item, &producers, &entities, &BackgroundModel::default());
        assert_eq!(q.block, 0);
        assert_eq!(q.category, CategoryId(0));
        assert_eq!(q.producer_vector(4), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(q.frequency_vector(6), vec![1.0, 0.0, 2.0, 2.0, 0.0, 1.0]);
        assert_eq!(q.weight_vector(6), vec![1.0, 0.0, 1.0, 0.9, 0.0, 0.7]);
        let _ = (football, brazil);
    }

    #[test]
    fn disjoint_item_encodes_to_zeros() {
        let producers = SlotVocab::from_ordered(vec![ProducerId(0)], 0.2);
        let entities = SlotVocab::from_ordered(vec![EntityId(0), EntityId(1)], 0.2);
        let item = ItemQuery {
            category: CategoryId(0),
            producer: ProducerId(5),
            expanded: vec![(EntityId(9), 1.0)],
        };
        let q = PseudoQuery::encode(0, &item, &producers, &entities, &BackgroundModel::default());
        assert_eq!(q.producer_vector(1), vec![0.0]);
        assert_eq!(q.frequency_vector(2), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_query_bound_is_floored() {
        let sig = Signature {
            p_long: 0.3,
            p_short: 0.2,
            producers: SparseVec(vec![(0, 0.5)]),
            entities: SparseVec(vec![(0, 0.5)]),
            alpha_producer: 0.4,
            alpha_entity: 0.4,
        };
        let q = PseudoQuery {
            block: 0,
            category: CategoryId(0),
            producer_slot: None,
            entities: vec![],
            producer_bg: 0.0,
            entity_bg_mass: 0.0,
        };
        let f = DEFAULT_FLOOR;
        let expect = 0.6 * (0.3f64.ln() + 2.0 * f.ln()) + 0.4 * 0.2f64.ln();
        assert!((upper_bound(&q, &sig, 0.4, f) - expect).abs() < 1e-12);
    }

    #[test]
    fn reserve_slots() {
        let mut v = SlotVocab::from_ordered((0..10).map(EntityId).collect(), 0.2);
        assert_eq!(v.capacity(), 12);
        assert_eq!(v.try_insert(EntityId(3)), Ok(3));
        assert_eq!(v.try_insert(EntityId(50)), Ok(10));
        assert_eq!(v.try_insert(EntityId(51)), Ok(11));
        assert_eq!(v.try_insert(EntityId(52)), Err(()));
        assert_eq!(v.capacity(), 12);
        assert_eq!(SlotVocab::<EntityId>::from_ordered(vec![EntityId(1)], 0.2).capacity(), 2);
    }

    #[test]
    fn sparse_max_and_enlargement() {
        let a = SparseVec(vec![(0, 0.2), (3, 0.5)]);
        let b = SparseVec(vec![(1, 0.1), (3, 0.7)]);
        assert_eq!(a.max_with(&b), SparseVec(vec![(0, 0.2), (1, 0.1), (3, 0.7)]));
        assert!((a.enlargement(&b) - 0.3).abs() < 1e-12);
        assert_eq!(a.dense(4), vec![0.2, 0.0, 0.0, 0.5]);
    }

    fn random_user(rng: &mut ChaCha8Rng, id: u32) -> UserState {
        let mut profile = UserProfile::new(ConsumerId(id), 2).unwrap();
        for t in 0..rng.random_range(0..12) {
            let ents = (0..rng.random_range(0..4)).map(|_| EntityId(rng.random_range(0..10))).collect();
            profile.push(HistoryEntry {
                item: ItemKey(t),
                category: CategoryId(rng.random_range(0..3)),
                producer: ProducerId(rng.random_range(0..5)),
                entities: ents,
                timestamp: t as u64,
            });
        }
        let mut pred = || {
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (a, b) = (pred(), pred());
        UserState::with_predictions(profile, a, b)
    }

    #[test]
    fn leaf_bound_matches_score_and_max_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let producers = SlotVocab::from_ordered((0..5).map(ProducerId).collect(), 0.2);
        let entities = SlotVocab::from_ordered((0..10).map(EntityId).collect(), 0.2);
        let cfg = ScoringConfig::default();
        for _ in 0..100 {
            let users: Vec<UserState> = (0..6).map(|i| random_user(&mut rng, i)).collect();
            let bg = BackgroundModel::from_profiles(users.iter().map(|u| &u.profile));
            let mut expanded = vec![];
            for _ in 0..rng.random_range(0..5) {
                expanded.push((EntityId(rng.random_range(0..12)), if rng.random_bool(0.5) { 1.0 } else { 0.8 }));
            }
            let item = ItemQuery {
                category: CategoryId(rng.random_range(0..3)),
                producer: ProducerId(rng.random_range(0..6)),
                expanded,
            };
            let q = PseudoQuery::encode(0, &item, &producers, &entities, &bg);
            let sigs: Vec<Signature> = users
                .iter()
                .map(|u| Signature::leaf(u, item.category, &producers, &entities, &cfg).unwrap())
                .collect();
            let top = Signature::max_of(&sigs);
            let bound = upper_bound(&q, &top, cfg.lambda_s, cfg.floor);
            for (u, s) in users.iter().zip(&sigs) {
                assert!(s.well_formed(producers.capacity(), entities.capacity()));
                let leaf = upper_bound(&q, s, cfg.lambda_s, cfg.floor);
                let exact = combined_score(&item, u, &bg, &cfg);
                // Equal up to rounding, or above when an entity repeats with different weights.
                assert!(leaf >= exact - 1e-12 * (1.0 + exact.abs()), "{leaf} < {exact}");
                assert!(bound >= leaf);
            }
        }
    }
}
