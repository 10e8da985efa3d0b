//! Seeded synthetic interaction logs with planted structure.
//!
//! Generative model, one tick at a time:
//! - A shared sticky regime chain over `producer_states` states advances once per tick.
//! - `items_per_tick` items are created, each by a producer drawn by Zipf popularity. A
//!   producer adopts the current regime with probability `producer_sync` and otherwise
//!   keeps its previous state, so every producer's categories follow its own hidden
//!   chain. State `z` emits its mode category with probability `mode_weight` and the
//!   remaining categories uniformly.
//! - An item's entities come from one topic cluster of its category (the producer's
//!   favourite cluster half of the time), Zipf-ranked inside the cluster, so entities
//!   of one cluster co-occur.
//! - Each consumer follows `follows` producers (by popularity) and runs a sticky chain
//!   over them. When browsing, it picks among the followed producer's `recent` latest
//!   items it has not seen, favouring its preferred cluster of each category. Browses
//!   come in sessions of `session_length` within one tick, so one session sees one regime.
//!
//! A consumer's next category therefore depends on the hidden state of the producer it
//! currently reads, which is what the bi-layer model can exploit.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, DatasetBuilder, LogRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub producers: usize,
    pub consumers: usize,
    pub categories: usize,
    pub clusters_per_category: usize,
    pub entities_per_cluster: usize,
    pub max_entities_per_item: usize,
    pub ticks: usize,
    pub items_per_tick: usize,
    /// Expected browses per consumer over the whole run.
    pub browses_per_consumer: f64,
    /// Browses per session; a session happens within one tick.
    pub session_length: usize,
    pub follows: usize,
    pub recent: usize,
    pub producer_states: usize,
    /// Per-tick probability that the shared regime stays put.
    pub regime_stay: f64,
    pub producer_sync: f64,
    /// Probability of a state's mode category.
    pub mode_weight: f64,
    pub consumer_stay: f64,
    /// Extra selection weight for items of a consumer's preferred cluster.
    pub topic_affinity: f64,
    /// Zipf exponent for producer popularity and within-cluster entity rank.
    pub zipf_exponent: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            producers: 8,
            consumers: 200,
            categories: 6,
            clusters_per_category: 4,
            entities_per_cluster: 10,
            max_entities_per_item: 4,
            ticks: 300,
            items_per_tick: 30,
            browses_per_consumer: 75.0,
            session_length: 4,
            follows: 3,
            recent: 15,
            producer_states: 2,
            regime_stay: 0.9,
            producer_sync: 0.9,
            mode_weight: 0.4,
            consumer_stay: 0.9,
            topic_affinity: 4.0,
            zipf_exponent: 0.8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("producers", self.producers),
            ("categories", self.categories),
            ("clusters_per_category", self.clusters_per_category),
            ("entities_per_cluster", self.entities_per_cluster),
            ("producer_states", self.producer_states),
            ("recent", self.recent),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("synthetic `{name}` must be at least 1")));
            }
        }
        if !(1..30).contains(&self.session_length) {
            return Err(Error::config("synthetic `session_length` must lie in 1..30"));
        }
        if self.producer_states > self.categories {
            return Err(Error::config("synthetic producer states cannot exceed categories"));
        }
        if self.consumers > 0 && self.follows == 0 {
            return Err(Error::config("synthetic consumers must follow at least one producer"));
        }
        let probs = [
            ("regime_stay", self.regime_stay),
            ("producer_sync", self.producer_sync),
            ("mode_weight", self.mode_weight),
            ("consumer_stay", self.consumer_stay),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("synthetic `{name}` must lie in [0, 1]")));
            }
        }
        if !(self.browses_per_consumer >= 0.0 && self.topic_affinity >= 0.0 && self.zipf_exponent > 0.0) {
            return Err(Error::config("synthetic rates must be non-negative and the Zipf exponent positive"));
        }
        Ok(())
    }

    /// Category weights of producer state `z`; modes are spread evenly over the categories.
    fn emission(&self, z: usize) -> Vec<f64> {
        let mode = z * self.categories / self.producer_states;
        if self.categories == 1 {
            return vec![1.0];
        }
        let rest = (1.0 - self.mode_weight) / (self.categories - 1) as f64;
        (0..self.categories)
            .map(|c| if c == mode { self.mode_weight } else { rest })
            .collect()
    }
}

struct Item {
    id: usize,
    category: usize,
    cluster: usize,
    producer: usize,
    entities: Vec<usize>,
}

/// Rows in timestamp order: item creations (without a consumer) and browses.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<LogRow>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dist_err = |e: &dyn std::fmt::Display| Error::config(format!("synthetic distribution: {e}"));

    let popularity: Vec<f64> = (0..spec.producers)
        .map(|p| (p as f64 + 1.0).powf(-spec.zipf_exponent))
        .collect();
    let pick_producer = WeightedIndex::new(&popularity).map_err(|e| dist_err(&e))?;
    let emissions: Vec<WeightedIndex<f64>> = (0..spec.producer_states)
        .map(|z| WeightedIndex::new(spec.emission(z)).map_err(|e| dist_err(&e)))
        .collect::<Result<_>>()?;
    let entity_rank = Zipf::new(spec.entities_per_cluster as f64, spec.zipf_exponent).map_err(|e| dist_err(&e))?;

    let mut regime = rng.random_range(0..spec.producer_states);
    let mut producer_state: Vec<usize> = (0..spec.producers)
        .map(|_| rng.random_range(0..spec.producer_states))
        .collect();
    let favourite_cluster: Vec<Vec<usize>> = (0..spec.producers)
        .map(|_| {
            (0..spec.categories)
                .map(|_| rng.random_range(0..spec.clusters_per_category))
                .collect()
        })
        .collect();

    struct Consumer {
        follows: Vec<usize>,
        current: usize,
        preferred: Vec<usize>,
        seen: HashSet<usize>,
    }
    let follows = spec.follows.min(spec.producers);
    let mut consumers: Vec<Consumer> = (0..spec.consumers)
        .map(|_| {
            let mut f: Vec<usize> = Vec::with_capacity(follows);
            while f.len() < follows {
                let p = pick_producer.sample(&mut rng);
                if !f.contains(&p) {
                    f.push(p);
                }
            }
            Consumer {
                follows: f,
                current: 0,
                preferred: (0..spec.categories)
                    .map(|_| rng.random_range(0..spec.clusters_per_category))
                    .collect(),
                seen: HashSet::new(),
            }
        })
        .collect();

    let browse_p = if spec.ticks == 0 {
        0.0
    } else {
        (spec.browses_per_consumer / (spec.ticks * spec.session_length) as f64).min(1.0)
    };
    let mut items: Vec<Item> = Vec::new();
    let mut by_producer: Vec<Vec<usize>> = vec![Vec::new(); spec.producers];
    let mut rows = Vec::new();
    for tick in 0..spec.ticks {
        let ts = tick as i64 * 60;
        if tick > 0 && rng.random::<f64>() >= spec.regime_stay {
            regime = next_other(&mut rng, regime, spec.producer_states);
        }
        for _ in 0..spec.items_per_tick {
            let p = pick_producer.sample(&mut rng);
            if rng.random::<f64>() < spec.producer_sync {
                producer_state[p] = regime;
            }
            let category = emissions[producer_state[p]].sample(&mut rng);
            let cluster = if rng.random::<f64>() < 0.5 {
                favourite_cluster[p][category]
            } else {
                rng.random_range(0..spec.clusters_per_category)
            };
            let n = rng.random_range(1..=spec.max_entities_per_item.max(1));
            let base = (category * spec.clusters_per_category + cluster) * spec.entities_per_cluster;
            let entities = (0..n)
                .map(|_| base + entity_rank.sample(&mut rng) as usize - 1)
                .collect();
            let item = Item {
                id: items.len(),
                category,
                cluster,
                producer: p,
                entities,
            };
            rows.push(row(ts, None, &item));
            by_producer[p].push(item.id);
            items.push(item);
        }
        let mut browses = Vec::new();
        for (ci, c) in consumers.iter_mut().enumerate() {
            if rng.random::<f64>() >= browse_p {
                continue;
            }
            if c.follows.len() > 1 && rng.random::<f64>() >= spec.consumer_stay {
                c.current = next_other(&mut rng, c.current, c.follows.len());
            }
            for step in 0..spec.session_length {
                let unseen = |p: usize| -> Vec<usize> {
                    by_producer[p]
                        .iter()
                        .rev()
                        .take(spec.recent)
                        .copied()
                        .filter(|i| !c.seen.contains(i))
                        .collect()
                };
                let mut pool = unseen(c.follows[c.current]);
                if pool.is_empty() {
                    // the current producer is exhausted; read whatever else is fresh
                    pool = c.follows.iter().flat_map(|&p| unseen(p)).collect();
                }
                if pool.is_empty() {
                    break;
                }
                let weights: Vec<f64> = pool
                    .iter()
                    .map(|&i| {
                        let it = &items[i];
                        1.0 + spec.topic_affinity * f64::from(u8::from(c.preferred[it.category] == it.cluster))
                    })
                    .collect();
                let chosen = pool[WeightedIndex::new(&weights).map_err(|e| dist_err(&e))?.sample(&mut rng)];
                c.seen.insert(chosen);
                browses.push(row(ts + 30 + step as i64, Some(ci), &items[chosen]));
            }
        }
        // stable: one session step of every consumer, then the next step
        browses.sort_by_key(|r| r.ts);
        rows.extend(browses);
    }
    Ok(rows)
}

fn next_other(rng: &mut ChaCha8Rng, current: usize, n: usize) -> usize {
    if n <= 1 {
        return current;
    }
    let j = rng.random_range(0..n - 1);
    if j >= current {
        j + 1
    } else {
        j
    }
}

fn row(ts: i64, consumer: Option<usize>, item: &Item) -> LogRow {
    LogRow {
        ts,
        consumer: consumer.map(|c| format!("c{c}")),
        item: format!("i{}", item.id),
        category: format!("cat{}", item.category),
        producer: format!("p{}", item.producer),
        entities: item.entities.iter().map(|e| format!("e{e}")).collect(),
    }
}

pub fn write_jsonl(rows: &[LogRow], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl SyntheticSpec {
    /// Generates and ingests in memory.
    pub fn dataset(&self) -> Result<Dataset> {
        let mut builder = DatasetBuilder::default();
        for (i, r) in generate_synthetic(self)?.iter().enumerate() {
            builder.push(i + 1, r)?;
        }
        Ok(builder.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            consumers: 20,
            ticks: 60,
            items_per_tick: 3,
            browses_per_consumer: 20.0,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_rows() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        let other = SyntheticSpec { seed: 1, ..small() };
        assert_ne!(generate_synthetic(&small()).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn zero_consumers_means_items_only() {
        let rows = generate_synthetic(&SyntheticSpec { consumers: 0, ..small() }).unwrap();
        assert_eq!(rows.len(), 60 * 3);
        assert!(rows.iter().all(|r| r.consumer.is_none()));
        let d = SyntheticSpec { consumers: 0, ..small() }.dataset().unwrap();
        assert!(d.interactions.is_empty());
        assert_eq!(d.items.len(), 180);
    }

    #[test]
    fn rows_are_time_ordered_and_browse_existing_items() {
        let rows = generate_synthetic(&small()).unwrap();
        assert!(rows.windows(2).all(|w| w[0].ts <= w[1].ts));
        let d = small().dataset().unwrap();
        for it in &d.interactions {
            assert!(d.item(it.item).timestamp < it.timestamp);
        }
        assert!(d.n_categories() <= 6);
    }

    #[test]
    fn emissions_are_distributions_with_distinct_modes() {
        let s = SyntheticSpec::default();
        assert_eq!(s.emission(0), vec![0.4, 0.12, 0.12, 0.12, 0.12, 0.12]);
        let b = s.emission(1);
        assert_eq!(b[3], 0.4);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        assert!(SyntheticSpec { producers: 0, ..small() }.validate().is_err());
        assert!(SyntheticSpec { regime_stay: 1.5, ..small() }.validate().is_err());
        assert!(SyntheticSpec { producer_states: 7, ..small() }.validate().is_err());
    }
}
