use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bihmm::{annotate_consumer_history, derive_seed, rolling_accuracy, select_state_count, Annotated, ProducerModel};
use crate::domain::{ConsumerId, ProducerId, UserProfile};
use crate::error::Result;
use crate::hmm::TrainConfig;

const ACCURACY_TAG: u64 = 3;
/// Shortest history that leaves a non-empty 20% tail.
pub const MIN_HISTORY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Consumer states only; producer states are ignored.
    Hmm,
    /// Composite consumer × producer states.
    BiHmm,
}

/// Users sharing one selected hidden-state count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGroup {
    pub states: usize,
    pub users: usize,
    pub hmm: f64,
    pub bihmm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub groups: Vec<AccuracyGroup>,
    pub users: usize,
    /// Mean over users, not over groups.
    pub hmm: f64,
    pub bihmm: f64,
    /// Users with fewer than [`MIN_HISTORY`] browses.
    pub skipped: usize,
}

impl AccuracyReport {
    pub fn mean(&self, kind: ModelKind) -> f64 {
        match kind {
            ModelKind::Hmm => self.hmm,
            ModelKind::BiHmm => self.bihmm,
        }
    }
}

struct UserAccuracy {
    states: usize,
    hmm: f64,
    bihmm: f64,
}

/// Next-category accuracy of both model kinds for every consumer with at least
/// [`MIN_HISTORY`] browses.
///
/// Each history is split 80/20 in time. The consumer-state count is chosen by plain-HMM
/// accuracy on a further 80/20 split of the training part alone, then both kinds are
/// trained on the full 80% with that count and predict the 20% one step at a time.
pub fn compare_prediction_accuracy(
    profiles: &BTreeMap<ConsumerId, UserProfile>,
    producers: &BTreeMap<ProducerId, ProducerModel>,
    n_categories: usize,
    candidates: RangeInclusive<usize>,
    config: &TrainConfig,
) -> Result<AccuracyReport> {
    config.validate()?;
    let eligible: Vec<&UserProfile> = profiles.values().filter(|p| p.len() >= MIN_HISTORY).collect();
    let per_user: Vec<UserAccuracy> = eligible
        .par_iter()
        .map(|p| {
            let cfg = config.with_seed(derive_seed(config.seed, ACCURACY_TAG, p.consumer.0 as u64));
            let annotated = annotate_consumer_history(p, producers);
            let plain: Vec<Annotated> = annotated.iter().map(|&(c, _)| (c, 0)).collect();
            let split = annotated.len() * 4 / 5;
            let states = select_state_count(&plain[..split], n_categories, candidates.clone(), &cfg)?;
            Ok(UserAccuracy {
                states,
                hmm: rolling_accuracy(&plain, states, n_categories, &cfg)?,
                bihmm: rolling_accuracy(&annotated, states, n_categories, &cfg)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for u in &per_user {
        let g = groups.entry(u.states).or_default();
        g.0 += 1;
        g.1 += u.hmm;
        g.2 += u.bihmm;
    }
    let n = per_user.len();
    let mean = |f: fn(&UserAccuracy) -> f64| if n == 0 { 0.0 } else { per_user.iter().map(f).sum::<f64>() / n as f64 };
    Ok(AccuracyReport {
        groups: groups
            .into_iter()
            .map(|(states, (users, h, b))| AccuracyGroup {
                states,
                users,
                hmm: h / users as f64,
                bihmm: b / users as f64,
            })
            .collect(),
        users: n,
        hmm: mean(|u| u.hmm),
        bihmm: mean(|u| u.bihmm),
        skipped: profiles.len() - n,
    })
}

/// Mean accuracy of one model kind per selected state count.
pub fn prediction_accuracy(
    kind: ModelKind,
    profiles: &BTreeMap<ConsumerId, UserProfile>,
    producers: &BTreeMap<ProducerId, ProducerModel>,
    n_categories: usize,
    candidates: RangeInclusive<usize>,
    config: &TrainConfig,
) -> Result<Vec<(usize, f64)>> {
    let report = compare_prediction_accuracy(profiles, producers, n_categories, candidates, config)?;
    Ok(report
        .groups
        .iter()
        .map(|g| {
            (
                g.states,
                match kind {
                    ModelKind::Hmm => g.hmm,
                    ModelKind::BiHmm => g.bihmm,
                },
            )
        })
        .collect())
}
