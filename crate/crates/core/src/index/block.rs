//! One-pass cosine clustering of consumers into blocks by long-term category interest.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::signature::SlotVocab;
use crate::domain::{CategoryId, ConsumerId, EntityId, ProducerId, UserProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserBlock {
    pub id: u32,
    pub members: BTreeSet<ConsumerId>,
    pub categories: BTreeSet<CategoryId>,
    pub producers: SlotVocab<ProducerId>,
    pub entities: SlotVocab<EntityId>,
    /// Tree id per category.
    pub trees: BTreeMap<CategoryId, u32>,
}

/// Category-frequency vector over the long-term list; the whole history when the
/// long-term list is still empty.
pub fn category_vector(profile: &UserProfile, n_categories: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_categories];
    if profile.long_term.is_empty() {
        for e in profile.short_term.iter() {
            if let Some(x) = v.get_mut(e.category.index()) {
                *x += 1.0;
            }
        }
    } else {
        for (c, &n) in profile.long_term.category_counts() {
            if let Some(x) = v.get_mut(c.index()) {
                *x += n as f64;
            }
        }
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Incremental clustering state: per block, the running mean of its members' unit-length
/// category vectors and the member count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub threshold: f64,
    pub centroids: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
}

impl Clustering {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    /// Joins the most similar block (lowest id on ties) when its similarity reaches the
    /// threshold, otherwise opens a new block. Returns the block id.
    pub fn assign(&mut self, v: &[f64]) -> u32 {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.centroids.iter().enumerate() {
            let s = cosine(v, c);
            if s >= self.threshold && best.is_none_or(|(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let unit: Vec<f64> = v.iter().map(|x| if norm > 0.0 { x / norm } else { 0.0 }).collect();
        match best {
            Some((i, _)) => {
                let n = self.sizes[i] as f64;
                for (c, u) in self.centroids[i].iter_mut().zip(&unit) {
                    *c = (*c * n + u) / (n + 1.0);
                }
                self.sizes[i] += 1;
                i as u32
            }
            None => {
                self.centroids.push(unit);
                self.sizes.push(1);
                (self.centroids.len() - 1) as u32
            }
        }
    }
}

/// Block id for every non-empty profile, assigned in consumer id order.
pub fn assign_blocks<'a>(
    profiles: impl IntoIterator<Item = &'a UserProfile>,
    n_categories: usize,
    threshold: f64,
) -> (Clustering, BTreeMap<ConsumerId, u32>) {
    let mut sorted: Vec<&UserProfile> = profiles.into_iter().filter(|p| !p.is_empty()).collect();
    sorted.sort_by_key(|p| p.consumer);
    let mut clustering = Clustering::new(threshold);
    let assignment = sorted
        .into_iter()
        .map(|p| (p.consumer, clustering.assign(&category_vector(p, n_categories))))
        .collect();
    (clustering, assignment)
}
