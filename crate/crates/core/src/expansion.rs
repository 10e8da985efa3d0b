//! Proximity co-occurrence statistics and entity expansion.
//!
//! Two entities that occur close together in item descriptions of the same category are
//! treated as related. Every pair at sequence distance `d <= window` adds `1/d` to the
//! pair's score. An entity's expansion weights are its pair scores divided by its best
//! partner's score, capped so an expansion never weighs as much as an exact occurrence.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::{CategoryId, EntityId, SocialItem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    /// Proximity window `d`.
    pub window: usize,
    /// Partners added per entity occurrence (`m`).
    pub per_entity: usize,
    /// Upper bound `γ` on expansion weights.
    pub cap: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            window: 5,
            per_entity: 1,
            cap: 0.95,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("expansion window must be at least 1"));
        }
        if !(self.cap > 0.0 && self.cap <= 1.0) {
            return Err(Error::config("expansion cap must lie in (0, 1]"));
        }
        Ok(())
    }

    /// No expansion at all.
    pub fn disabled() -> Self {
        Self {
            per_entity: 0,
            ..Self::default()
        }
    }
}

type Pair = (EntityId, EntityId);

fn pair(a: EntityId, b: EntityId) -> Pair {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "StatsDoc", from = "StatsDoc")]
pub struct CooccurrenceStats {
    window: usize,
    cap: f64,
    /// Symmetric pair scores per category, keyed by the ordered pair.
    scores: BTreeMap<CategoryId, HashMap<Pair, f64>>,
    /// Derived: partners of each entity by descending weight (ties by entity id).
    partners: HashMap<(CategoryId, EntityId), Vec<(EntityId, f64)>>,
}

impl CooccurrenceStats {
    pub fn new(window: usize, cap: f64) -> Self {
        Self {
            window,
            cap,
            ..Self::default()
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Accumulates one item's pairs. Call [`Self::refresh`] before querying partners.
    pub fn add_item(&mut self, item: &SocialItem) {
        let ents = &item.entities;
        if ents.len() < 2 {
            return;
        }
        let scores = self.scores.entry(item.category).or_default();
        for i in 0..ents.len() {
            for j in i + 1..ents.len().min(i + self.window + 1) {
                if ents[i] == ents[j] {
                    continue;
                }
                *scores.entry(pair(ents[i], ents[j])).or_default() += 1.0 / (j - i) as f64;
            }
        }
    }

    /// Adds another accumulation into this one; pair scores add.
    pub fn merge(&mut self, other: &CooccurrenceStats) {
        for (cat, pairs) in &other.scores {
            let mine = self.scores.entry(*cat).or_default();
            for (p, s) in pairs {
                *mine.entry(*p).or_default() += s;
            }
        }
        self.refresh();
    }

    pub fn score(&self, category: CategoryId, a: EntityId, b: EntityId) -> f64 {
        self.scores
            .get(&category)
            .and_then(|m| m.get(&pair(a, b)))
            .copied()
            .unwrap_or(0.0)
    }

    /// Recomputes the normalised partner lists from the raw scores.
    pub fn refresh(&mut self) {
        let mut raw: HashMap<(CategoryId, EntityId), Vec<(EntityId, f64)>> = HashMap::new();
        for (&cat, pairs) in &self.scores {
            for (&(a, b), &s) in pairs {
                raw.entry((cat, a)).or_default().push((b, s));
                raw.entry((cat, b)).or_default().push((a, s));
            }
        }
        self.partners = raw
            .into_iter()
            .map(|(key, mut list)| {
                let max = list.iter().map(|x| x.1).fold(0.0, f64::max);
                for x in list.iter_mut() {
                    x.1 = (x.1 / max).min(self.cap);
                }
                list.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
                (key, list)
            })
            .collect();
    }

    /// Sets a partner weight directly, bypassing proximity scores.
    pub fn insert_partner(&mut self, category: CategoryId, entity: EntityId, partner: EntityId, weight: f64) {
        let list = self.partners.entry((category, entity)).or_default();
        list.retain(|x| x.0 != partner);
        list.push((partner, weight));
        list.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    }

    pub fn partners(&self, category: CategoryId, entity: EntityId) -> &[(EntityId, f64)] {
        self.partners
            .get(&(category, entity))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn n_pairs(&self) -> usize {
        self.scores.values().map(HashMap::len).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct StatsDoc {
    window: usize,
    cap: f64,
    /// `(category, a, b, score)` sorted.
    pairs: Vec<(CategoryId, EntityId, EntityId, f64)>,
    /// Partner weights set directly rather than derived from scores.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    manual: Vec<(CategoryId, EntityId, EntityId, f64)>,
}

impl From<CooccurrenceStats> for StatsDoc {
    fn from(s: CooccurrenceStats) -> Self {
        let mut pairs: Vec<_> = s
            .scores
            .iter()
            .flat_map(|(&c, m)| m.iter().map(move |(&(a, b), &v)| (c, a, b, v)))
            .collect();
        pairs.sort_by(|x, y| (x.0, x.1, x.2).cmp(&(y.0, y.1, y.2)));
        let mut derived = CooccurrenceStats {
            partners: HashMap::new(),
            ..s.clone()
        };
        derived.refresh();
        let mut manual: Vec<_> = s
            .partners
            .iter()
            .filter(|(k, v)| derived.partners.get(k) != Some(v))
            .flat_map(|(&(c, e), v)| v.iter().map(move |&(p, w)| (c, e, p, w)))
            .collect();
        manual.sort_by(|x, y| (x.0, x.1, x.2).cmp(&(y.0, y.1, y.2)));
        StatsDoc {
            window: s.window,
            cap: s.cap,
            pairs,
            manual,
        }
    }
}

impl From<StatsDoc> for CooccurrenceStats {
    fn from(d: StatsDoc) -> Self {
        let mut s = CooccurrenceStats::new(d.window, d.cap);
        for (c, a, b, v) in d.pairs {
            s.scores.entry(c).or_default().insert(pair(a, b), v);
        }
        s.refresh();
        let mut manual_keys: Vec<(CategoryId, EntityId)> = d.manual.iter().map(|m| (m.0, m.1)).collect();
        manual_keys.dedup();
        for key in manual_keys {
            s.partners.remove(&key);
        }
        for (c, e, p, w) in d.manual {
            s.insert_partner(c, e, p, w);
        }
        s
    }
}

pub fn build_cooccurrence<'a>(
    items: impl IntoIterator<Item = &'a SocialItem>,
    config: &ExpansionConfig,
) -> Result<CooccurrenceStats> {
    config.validate()?;
    let mut stats = CooccurrenceStats::new(config.window, config.cap);
    for item in items {
        stats.add_item(item);
    }
    stats.refresh();
    Ok(stats)
}

/// Every occurrence keeps weight 1 and is followed by up to `per_entity` of its strongest
/// partners with their weights. Repeated occurrences expand repeatedly.
pub fn expand_entities(
    entities: &[EntityId],
    category: CategoryId,
    stats: &CooccurrenceStats,
    per_entity: usize,
) -> Vec<(EntityId, f64)> {
    let mut out = Vec::with_capacity(entities.len() * (1 + per_entity));
    for &e in entities {
        out.push((e, 1.0));
        out.extend(stats.partners(category, e).iter().take(per_entity).copied());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ItemKey, ProducerId};

    fn item(cat: u32, ents: &[u32]) -> SocialItem {
        SocialItem {
            key: ItemKey(0),
            category: CategoryId(cat),
            producer: ProducerId(0),
            entities: ents.iter().map(|&e| EntityId(e)).collect(),
            timestamp: 0,
        }
    }

    fn cfg(window: usize) -> ExpansionConfig {
        ExpansionConfig {
            window,
            ..Default::default()
        }
    }

    #[test]
    fn no_cooccurrence_no_expansion() {
        let stats = build_cooccurrence(&[item(0, &[1, 2]), item(0, &[3, 4])], &cfg(3)).unwrap();
        assert_eq!(stats.score(CategoryId(0), EntityId(1), EntityId(3)), 0.0);
        let exp = expand_entities(&[EntityId(1)], CategoryId(0), &stats, 3);
        assert!(exp.iter().all(|(e, _)| *e != EntityId(3)));
    }

    #[test]
    fn adjacent_pair_scores_one_and_is_capped() {
        let stats = build_cooccurrence(&[item(0, &[1, 2])], &cfg(3)).unwrap();
        assert_eq!(stats.score(CategoryId(0), EntityId(1), EntityId(2)), 1.0);
        assert_eq!(stats.partners(CategoryId(0), EntityId(1)), &[(EntityId(2), 0.95)]);
    }

    #[test]
    fn window_bounds_pairs() {
        let stats = build_cooccurrence(&[item(0, &[1, 9, 2])], &cfg(1)).unwrap();
        assert_eq!(stats.score(CategoryId(0), EntityId(1), EntityId(2)), 0.0);
        let stats = build_cooccurrence(&[item(0, &[1, 9, 2])], &cfg(2)).unwrap();
        assert_eq!(stats.score(CategoryId(0), EntityId(1), EntityId(2)), 0.5);
    }

    #[test]
    fn scores_are_per_category_and_normalised_per_source() {
        let items = [item(0, &[1, 2, 3]), item(0, &[1, 2]), item(1, &[1, 3])];
        let stats = build_cooccurrence(&items, &cfg(5)).unwrap();
        // cat 0: (1,2) = 1 + 1 = 2, (1,3) = 1/2, (2,3) = 1
        assert_eq!(stats.score(CategoryId(0), EntityId(1), EntityId(2)), 2.0);
        assert_eq!(stats.score(CategoryId(0), EntityId(3), EntityId(1)), 0.5);
        assert_eq!(stats.score(CategoryId(1), EntityId(1), EntityId(3)), 1.0);
        let p1 = stats.partners(CategoryId(0), EntityId(1));
        assert_eq!(p1, &[(EntityId(2), 0.95), (EntityId(3), 0.25)]);
        // entity 3's best partner is 2 (score 1); weight to 1 is 0.5
        let p3 = stats.partners(CategoryId(0), EntityId(3));
        assert_eq!(p3, &[(EntityId(2), 0.95), (EntityId(1), 0.5)]);
    }

    #[test]
    fn repeated_entities_never_pair_with_themselves() {
        let stats = build_cooccurrence(&[item(0, &[4, 4, 4])], &cfg(5)).unwrap();
        assert_eq!(stats.n_pairs(), 0);
        assert!(stats.partners(CategoryId(0), EntityId(4)).is_empty());
    }

    #[test]
    fn worked_example_expansion() {
        // Beckham=0, worldcup=1, Messi=2, FIFA=3
        let sports = CategoryId(0);
        let mut stats = CooccurrenceStats::new(5, 0.95);
        stats.insert_partner(sports, EntityId(0), EntityId(2), 0.7);
        stats.insert_partner(sports, EntityId(1), EntityId(3), 0.9);
        let e = [EntityId(0), EntityId(1), EntityId(1)];
        let out = expand_entities(&e, sports, &stats, 1);
        assert_eq!(
            out,
            vec![
                (EntityId(0), 1.0),
                (EntityId(2), 0.7),
                (EntityId(1), 1.0),
                (EntityId(3), 0.9),
                (EntityId(1), 1.0),
                (EntityId(3), 0.9),
            ]
        );
        let plain = expand_entities(&e, sports, &stats, 0);
        assert_eq!(plain, e.iter().map(|&x| (x, 1.0)).collect::<Vec<_>>());
        assert_eq!(expand_entities(&[EntityId(9)], sports, &stats, 2), vec![(EntityId(9), 1.0)]);
    }

    #[test]
    fn json_round_trip_keeps_manual_and_derived_partners() {
        let mut stats = build_cooccurrence(&[item(0, &[1, 2, 3])], &cfg(5)).unwrap();
        stats.insert_partner(CategoryId(2), EntityId(7), EntityId(8), 0.4);
        let back: CooccurrenceStats = serde_json::from_str(&serde_json::to_string(&stats).unwrap()).unwrap();
        assert_eq!(back, stats);
    }

    #[test]
    fn merge_adds_scores() {
        let a = build_cooccurrence(&[item(0, &[1, 2])], &cfg(5)).unwrap();
        let b = build_cooccurrence(&[item(0, &[2, 1]), item(0, &[5, 6])], &cfg(5)).unwrap();
        let mut m = a.clone();
        m.merge(&b);
        let all = build_cooccurrence(&[item(0, &[1, 2]), item(0, &[2, 1]), item(0, &[5, 6])], &cfg(5)).unwrap();
        assert_eq!(m, all);
    }

    proptest::proptest! {
        #[test]
        fn invariants(
            corpus in proptest::collection::vec(
                (0u32..3, proptest::collection::vec(0u32..12, 0..9)), 0..25),
            extra in proptest::collection::vec(0u32..12, 0..9),
            window in 1usize..6,
            m in 0usize..4,
        ) {
            let items: Vec<SocialItem> = corpus.iter().map(|(c, e)| item(*c, e)).collect();
            let stats = build_cooccurrence(&items, &cfg(window)).unwrap();
            for c in 0..3 {
                for a in 0..12 {
                    for (p, w) in stats.partners(CategoryId(c), EntityId(a)) {
                        proptest::prop_assert!(*w > 0.0 && *w <= 0.95);
                        proptest::prop_assert!(*p != EntityId(a));
                    }
                    for b in 0..12 {
                        let ab = stats.score(CategoryId(c), EntityId(a), EntityId(b));
                        proptest::prop_assert_eq!(ab, stats.score(CategoryId(c), EntityId(b), EntityId(a)));
                    }
                }
            }
            let mut grown = items.clone();
            grown.push(item(0, &extra));
            let bigger = build_cooccurrence(&grown, &cfg(window)).unwrap();
            for c in 0..3 {
                for a in 0..12 {
                    for b in 0..12 {
                        let before = stats.score(CategoryId(c), EntityId(a), EntityId(b));
                        proptest::prop_assert!(bigger.score(CategoryId(c), EntityId(a), EntityId(b)) >= before);
                    }
                }
            }
            let ents: Vec<EntityId> = extra.iter().map(|&e| EntityId(e)).collect();
            let out = expand_entities(&ents, CategoryId(0), &stats, m);
            proptest::prop_assert!(out.len() <= ents.len() * (1 + m));
        }
    }
}
