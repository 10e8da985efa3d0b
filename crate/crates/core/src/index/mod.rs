//! Pruned top-k user search.
//!
//! Consumers are clustered into blocks; each block has one signature tree per category
//! its members browsed, and a chained hash table maps every `(category, entity)` pair to
//! the trees whose members saw it. A query hashes the item's pairs to locate trees,
//! encodes the item against each block's vocabularies and runs a best-first search over
//! entry upper bounds, scoring leaves exactly. The result equals exhaustive scoring of
//! the users reachable through the located trees.

pub mod block;
pub mod hash;
pub mod signature;
pub mod snapshot;
pub mod tree;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::domain::{CategoryId, ConsumerId, EntityId, ProducerId};
use crate::error::{Error, Result};
use crate::scoring::{combined_score, BackgroundModel, ItemQuery, ScoringConfig, TopK, UserState};

pub use block::{assign_blocks, category_vector, Clustering, UserBlock};
pub use hash::{shift_add_xor, shift_add_xor_hash, HashParams, PairTable};
pub use signature::{upper_bound, PseudoQuery, Signature, SlotVocab, SparseVec};
pub use tree::{LEntry, NodeKind, SigTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub hash: HashParams,
    pub fanout: usize,
    /// Cosine threshold `τ_b` for joining a block.
    pub block_threshold: f64,
    /// Fraction of each vocabulary kept free for later terms.
    pub reserve: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            hash: HashParams::default(),
            fanout: 16,
            block_threshold: 0.6,
            reserve: 0.2,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        self.hash.validate()?;
        if self.fanout < 2 {
            return Err(Error::config("tree fanout must be at least 2"));
        }
        if !(self.block_threshold > 0.0 && self.block_threshold <= 1.0) {
            return Err(Error::config("block threshold must lie in (0, 1]"));
        }
        if !(self.reserve >= 0.0 && self.reserve.is_finite()) {
            return Err(Error::config("vocabulary reserve must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub state: UserState,
    pub block: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnStats {
    pub trees: usize,
    pub nodes_expanded: usize,
    pub entries_bounded: usize,
    pub users_scored: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub updated: usize,
    pub inserted: usize,
    pub removed: usize,
    pub vocabulary_rebuilds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CppseIndex {
    config: IndexConfig,
    scoring: ScoringConfig,
    bg: BackgroundModel,
    n_categories: usize,
    table: PairTable,
    clustering: Clustering,
    blocks: Vec<UserBlock>,
    trees: Vec<SigTree>,
    users: BTreeMap<ConsumerId, UserRecord>,
}

/// Relative slack below the current k-th score under which an entry may be pruned. It
/// absorbs rounding between the bound and the exact score; ties are never pruned.
fn prune_slack(lb: f64) -> f64 {
    1e-9 * (1.0 + lb.abs())
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    bound: f64,
    tree: u32,
    node: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then_with(|| (other.tree, other.node).cmp(&(self.tree, self.node)))
    }
}

impl CppseIndex {
    /// Clusters the users and builds every tree. Users with an empty history are left out.
    pub fn build(
        states: Vec<UserState>,
        bg: BackgroundModel,
        scoring: ScoringConfig,
        config: IndexConfig,
        n_categories: usize,
    ) -> Result<Self> {
        config.validate()?;
        let (clustering, assignment) =
            assign_blocks(states.iter().map(|s| &s.profile), n_categories, config.block_threshold);
        Self::build_with_assignment(states, &assignment, clustering, bg, scoring, config, n_categories)
    }

    /// Builds with a fixed block assignment (every non-empty user must be assigned).
    pub fn build_with_assignment(
        states: Vec<UserState>,
        assignment: &BTreeMap<ConsumerId, u32>,
        clustering: Clustering,
        bg: BackgroundModel,
        scoring: ScoringConfig,
        config: IndexConfig,
        n_categories: usize,
    ) -> Result<Self> {
        config.validate()?;
        let mut users = BTreeMap::new();
        for state in states {
            let c = state.consumer();
            if state.profile.is_empty() {
                log::debug!("consumer {c} has an empty history and is not indexed");
                continue;
            }
            let block = *assignment
                .get(&c)
                .ok_or_else(|| Error::invalid(format!("consumer {c} has no block")))?;
            users.insert(c, UserRecord { state, block });
        }
        let n_blocks = assignment.values().map(|&b| b as usize + 1).max().unwrap_or(0).max(clustering.centroids.len());
        let mut members: Vec<BTreeSet<ConsumerId>> = vec![BTreeSet::new(); n_blocks];
        for (&c, r) in &users {
            members[r.block as usize].insert(c);
        }
        let mut index = Self {
            table: PairTable::new(config.hash)?,
            config,
            scoring,
            bg,
            n_categories,
            clustering,
            blocks: Vec::with_capacity(n_blocks),
            trees: Vec::new(),
            users,
        };
        for (b, members) in members.into_iter().enumerate() {
            index.build_block(b as u32, members)?;
        }
        Ok(index)
    }

    fn build_block(&mut self, b: u32, members: BTreeSet<ConsumerId>) -> Result<()> {
        let mut producers = BTreeSet::new();
        let mut entities = BTreeSet::new();
        let mut by_category: BTreeMap<CategoryId, Vec<ConsumerId>> = BTreeMap::new();
        for c in &members {
            let profile = &self.users[c].state.profile;
            for e in profile.history() {
                producers.insert(e.producer);
                entities.extend(e.entities.iter().copied());
            }
            for cat in profile.categories() {
                by_category.entry(cat).or_default().push(*c);
            }
        }
        let mut block = UserBlock {
            id: b,
            members,
            categories: by_category.keys().copied().collect(),
            producers: SlotVocab::from_ordered(producers.into_iter().collect(), self.config.reserve),
            entities: SlotVocab::from_ordered(entities.into_iter().collect(), self.config.reserve),
            trees: BTreeMap::new(),
        };
        for (cat, consumers) in by_category {
            let tree_id = self.trees.len() as u32;
            let mut entries = Vec::with_capacity(consumers.len());
            for c in consumers {
                let state = &self.users[&c].state;
                let sig = Signature::leaf(state, cat, &block.producers, &block.entities, &self.scoring)?;
                entries.push(LEntry { consumer: c, sig });
                link_pairs(&mut self.table, state, cat, tree_id);
            }
            self.trees.push(SigTree::bulk_load(b, cat, self.config.fanout, entries));
            block.trees.insert(cat, tree_id);
        }
        self.blocks.push(block);
        Ok(())
    }

    /// A fresh build over the current users with their current block assignment.
    pub fn rebuild(&self) -> Result<Self> {
        let assignment = self.users.iter().map(|(&c, r)| (c, r.block)).collect();
        let states = self.users.values().map(|r| r.state.clone()).collect();
        Self::build_with_assignment(
            states,
            &assignment,
            self.clustering.clone(),
            self.bg.clone(),
            self.scoring,
            self.config,
            self.n_categories,
        )
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn scoring(&self) -> &ScoringConfig {
        &self.scoring
    }

    pub fn background(&self) -> &BackgroundModel {
        &self.bg
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn blocks(&self) -> &[UserBlock] {
        &self.blocks
    }

    pub fn trees(&self) -> &[SigTree] {
        &self.trees
    }

    pub fn table(&self) -> &PairTable {
        &self.table
    }

    pub fn users(&self) -> &BTreeMap<ConsumerId, UserRecord> {
        &self.users
    }

    pub fn user(&self, c: ConsumerId) -> Option<&UserState> {
        self.users.get(&c).map(|r| &r.state)
    }

    /// Trees linked from the item's `(category, entity)` pairs, over all expanded
    /// entities. When none is linked, every tree of the category.
    pub fn locate_trees(&self, q: &ItemQuery) -> Vec<u32> {
        let mut trees = BTreeSet::new();
        for &(e, _) in &q.expanded {
            trees.extend(self.table.lookup(q.category, e).iter().copied());
        }
        if trees.is_empty() {
            trees.extend(self.blocks.iter().filter_map(|b| b.trees.get(&q.category).copied()));
        }
        trees.into_iter().collect()
    }

    /// Users in the located trees: the population a query ranks.
    pub fn reachable_users(&self, q: &ItemQuery) -> BTreeSet<ConsumerId> {
        self.locate_trees(q)
            .into_iter()
            .flat_map(|t| self.trees[t as usize].members())
            .collect()
    }

    pub fn pseudo_query(&self, block: u32, q: &ItemQuery) -> PseudoQuery {
        let b = &self.blocks[block as usize];
        PseudoQuery::encode(block, q, &b.producers, &b.entities, &self.bg)
    }

    /// One pseudo-query per block owning a located tree.
    pub fn pseudo_queries(&self, q: &ItemQuery) -> Vec<PseudoQuery> {
        let blocks: BTreeSet<u32> = self.locate_trees(q).into_iter().map(|t| self.trees[t as usize].block).collect();
        blocks.into_iter().map(|b| self.pseudo_query(b, q)).collect()
    }

    pub fn knn_query(&self, q: &ItemQuery, k: usize) -> Result<Vec<(ConsumerId, f64)>> {
        Ok(self.knn_query_traced(q, k, self.scoring.lambda_s)?.0)
    }

    /// Best-first search with upper-bound pruning under short-term weight `lambda_s`.
    pub fn knn_query_traced(&self, q: &ItemQuery, k: usize, lambda_s: f64) -> Result<(Vec<(ConsumerId, f64)>, KnnStats)> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let cfg = self.scoring.with_lambda(lambda_s);
        let floor = cfg.floor;
        let trees = self.locate_trees(q);
        let mut stats = KnnStats {
            trees: trees.len(),
            ..KnnStats::default()
        };
        let mut queries: BTreeMap<u32, PseudoQuery> = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        for &t in &trees {
            let tree = &self.trees[t as usize];
            if tree.is_empty() {
                continue;
            }
            let pq = queries.entry(tree.block).or_insert_with(|| self.pseudo_query(tree.block, q));
            let bound = upper_bound(pq, &tree.node(tree.root()).sig, lambda_s, floor);
            heap.push(Candidate {
                bound,
                tree: t,
                node: tree.root(),
            });
        }
        let mut top = TopK::new(k);
        let mut scored: HashSet<ConsumerId> = HashSet::new();
        let prunable = |top: &TopK, b: f64| top.threshold().is_some_and(|lb| b < lb - prune_slack(lb));
        while let Some(cand) = heap.pop() {
            if prunable(&top, cand.bound) {
                break;
            }
            stats.nodes_expanded += 1;
            let tree = &self.trees[cand.tree as usize];
            let pq = &queries[&tree.block];
            match &tree.node(cand.node).kind {
                NodeKind::Leaf(entries) => {
                    for e in entries {
                        if scored.contains(&e.consumer) {
                            continue;
                        }
                        stats.entries_bounded += 1;
                        if prunable(&top, upper_bound(pq, &e.sig, lambda_s, floor)) {
                            continue;
                        }
                        let state = &self.users[&e.consumer].state;
                        stats.users_scored += 1;
                        scored.insert(e.consumer);
                        top.offer(e.consumer, combined_score(q, state, &self.bg, &cfg));
                    }
                }
                NodeKind::Internal(children) => {
                    for &c in children {
                        stats.entries_bounded += 1;
                        let bound = upper_bound(pq, &tree.node(c).sig, lambda_s, floor);
                        if !prunable(&top, bound) {
                            heap.push(Candidate {
                                bound,
                                tree: cand.tree,
                                node: c,
                            });
                        }
                    }
                }
            }
        }
        Ok((top.into_sorted(), stats))
    }

    /// Applies recomputed user states: refreshes existing entries and their ancestors,
    /// inserts users into trees of newly browsed categories, places new users by the
    /// clustering rule, and extends vocabularies through their reserve, rebuilding a
    /// block's vocabulary when the reserve runs out. A later state for the same user
    /// replaces an earlier one. Histories are expected to only grow.
    pub fn apply_updates(&mut self, updates: Vec<UserState>) -> Result<UpdateSummary> {
        let mut summary = UpdateSummary::default();
        for state in updates {
            let c = state.consumer();
            if state.profile.is_empty() {
                if self.remove_user(c) {
                    summary.removed += 1;
                }
                continue;
            }
            let (b, old_categories, old_pairs) = match self.users.get(&c) {
                Some(r) => {
                    summary.updated += 1;
                    (r.block, r.state.profile.categories(), pairs_of(&r.state))
                }
                None => {
                    summary.inserted += 1;
                    let b = self.clustering.assign(&category_vector(&state.profile, self.n_categories));
                    while self.blocks.len() <= b as usize {
                        let id = self.blocks.len() as u32;
                        self.blocks.push(UserBlock {
                            id,
                            members: BTreeSet::new(),
                            categories: BTreeSet::new(),
                            producers: SlotVocab::from_ordered(Vec::new(), self.config.reserve),
                            entities: SlotVocab::from_ordered(Vec::new(), self.config.reserve),
                            trees: BTreeMap::new(),
                        });
                    }
                    (b, BTreeSet::new(), BTreeSet::new())
                }
            };
            let new_categories = state.profile.categories();
            let block = &mut self.blocks[b as usize];
            block.members.insert(c);
            let mut overflow = false;
            for e in state.profile.history() {
                overflow |= block.producers.try_insert(e.producer).is_err();
                for &x in &e.entities {
                    overflow |= block.entities.try_insert(x).is_err();
                }
            }
            self.users.insert(c, UserRecord { state, block: b });
            if overflow {
                self.rebuild_vocabulary(b)?;
                summary.vocabulary_rebuilds += 1;
            }
            for &cat in &new_categories {
                let t = self.tree_for(b, cat);
                let block = &self.blocks[b as usize];
                let state = &self.users[&c].state;
                let sig = Signature::leaf(state, cat, &block.producers, &block.entities, &self.scoring)?;
                let tree = &mut self.trees[t as usize];
                if !tree.update(c, sig.clone()) {
                    tree.insert(LEntry { consumer: c, sig });
                }
                link_pairs(&mut self.table, state, cat, t);
            }
            for cat in old_categories.difference(&new_categories) {
                if let Some(&t) = self.blocks[b as usize].trees.get(cat) {
                    self.trees[t as usize].remove(c);
                }
            }
            let new_pairs = pairs_of(&self.users[&c].state);
            for &(cat, e) in old_pairs.difference(&new_pairs) {
                self.unlink_if_uncovered(b, cat, e);
            }
        }
        Ok(summary)
    }

    /// Drops the link from `(cat, e)` to block `b`'s tree unless a member still has it.
    fn unlink_if_uncovered(&mut self, b: u32, cat: CategoryId, e: EntityId) {
        let Some(&t) = self.blocks[b as usize].trees.get(&cat) else {
            return;
        };
        let covered = self.trees[t as usize].members().any(|m| {
            self.users[&m]
                .state
                .profile
                .history()
                .any(|h| h.category == cat && h.entities.contains(&e))
        });
        if !covered {
            self.table.unlink(cat, e, t);
        }
    }

    fn tree_for(&mut self, b: u32, cat: CategoryId) -> u32 {
        if let Some(&t) = self.blocks[b as usize].trees.get(&cat) {
            return t;
        }
        let t = self.trees.len() as u32;
        self.trees.push(SigTree::empty(b, cat, self.config.fanout));
        let block = &mut self.blocks[b as usize];
        block.trees.insert(cat, t);
        block.categories.insert(cat);
        t
    }

    fn remove_user(&mut self, c: ConsumerId) -> bool {
        let Some(r) = self.users.remove(&c) else {
            return false;
        };
        let block = &mut self.blocks[r.block as usize];
        block.members.remove(&c);
        for &t in block.trees.values() {
            self.trees[t as usize].remove(c);
        }
        for (cat, e) in pairs_of(&r.state) {
            self.unlink_if_uncovered(r.block, cat, e);
        }
        true
    }

    /// Re-sorts a block's vocabularies over its members' current histories with a fresh
    /// reserve and recomputes every entry of its trees.
    fn rebuild_vocabulary(&mut self, b: u32) -> Result<()> {
        let block = &self.blocks[b as usize];
        let mut producers: BTreeSet<ProducerId> = BTreeSet::new();
        let mut entities: BTreeSet<EntityId> = BTreeSet::new();
        for c in &block.members {
            for e in self.users[c].state.profile.history() {
                producers.insert(e.producer);
                entities.extend(e.entities.iter().copied());
            }
        }
        let reserve = self.config.reserve;
        let block = &mut self.blocks[b as usize];
        block.producers = SlotVocab::from_ordered(producers.into_iter().collect(), reserve);
        block.entities = SlotVocab::from_ordered(entities.into_iter().collect(), reserve);
        let block = &self.blocks[b as usize];
        for (&cat, &t) in &block.trees {
            let users = &self.users;
            let scoring = &self.scoring;
            self.trees[t as usize].refresh_all(|c| {
                Signature::leaf(&users[&c].state, cat, &block.producers, &block.entities, scoring)
            })?;
        }
        Ok(())
    }

    /// Replays every structural invariant; the first violation is reported.
    pub fn verify(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Integrity(m));
        self.config.validate().map_err(|e| Error::Integrity(e.to_string()))?;
        if !self.table.chains_complete() {
            return fail("hash chains do not cover every triad".into());
        }
        if let Some(t) = self.table.triads().iter().find(|t| t.trees.len() > self.blocks.len()) {
            return fail(format!("triad ({}, {}) links more trees than blocks", t.category, t.entity));
        }
        for (i, tree) in self.trees.iter().enumerate() {
            tree.verify()?;
            let block = self
                .blocks
                .get(tree.block as usize)
                .ok_or_else(|| Error::Integrity(format!("tree {i} points at a missing block")))?;
            if block.trees.get(&tree.category) != Some(&(i as u32)) {
                return fail(format!("tree {i} is not registered with block {}", block.id));
            }
            for c in tree.members() {
                let Some(r) = self.users.get(&c) else {
                    return fail(format!("tree {i} holds unknown consumer {c}"));
                };
                if r.block != tree.block {
                    return fail(format!("consumer {c} sits in a tree of another block"));
                }
                let entry = tree.entry(c).expect("member has an entry");
                let fresh = Signature::leaf(&r.state, tree.category, &block.producers, &block.entities, &self.scoring)?;
                if entry.sig != fresh {
                    return fail(format!("stale signature for consumer {c} in tree {i}"));
                }
                if !entry.sig.well_formed(block.producers.capacity(), block.entities.capacity()) {
                    return fail(format!("malformed signature for consumer {c} in tree {i}"));
                }
            }
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.id as usize != b {
                return fail(format!("block {b} carries id {}", block.id));
            }
            if block.producers.len() > block.producers.capacity() || block.entities.len() > block.entities.capacity() {
                return fail(format!("block {b} vocabulary exceeds its capacity"));
            }
        }
        let mut members: Vec<BTreeSet<ConsumerId>> = vec![BTreeSet::new(); self.blocks.len()];
        for (&c, r) in &self.users {
            let Some(block) = self.blocks.get(r.block as usize) else {
                return fail(format!("consumer {c} points at a missing block"));
            };
            members[r.block as usize].insert(c);
            for e in r.state.profile.history() {
                let Some(&t) = block.trees.get(&e.category) else {
                    return fail(format!("consumer {c} lacks a tree for category {}", e.category));
                };
                if !self.trees[t as usize].contains(c) {
                    return fail(format!("consumer {c} missing from tree {t}"));
                }
                if !block.producers.contains(e.producer) {
                    return fail(format!("producer {} outside block {} vocabulary", e.producer, block.id));
                }
                for &x in &e.entities {
                    if !block.entities.contains(x) {
                        return fail(format!("entity {x} outside block {} vocabulary", block.id));
                    }
                    if self.table.lookup(e.category, x).binary_search(&t).is_err() {
                        return fail(format!("pair ({}, {x}) does not reach tree {t}", e.category));
                    }
                }
            }
        }
        for (b, m) in members.iter().enumerate() {
            if *m != self.blocks[b].members {
                return fail(format!("block {b} member list is out of date"));
            }
        }
        Ok(())
    }
}

fn pairs_of(state: &UserState) -> BTreeSet<(CategoryId, EntityId)> {
    state
        .profile
        .history()
        .flat_map(|h| h.entities.iter().map(move |&e| (h.category, e)))
        .collect()
}

fn link_pairs(table: &mut PairTable, state: &UserState, category: CategoryId, tree: u32) {
    for e in state.profile.history().filter(|e| e.category == category) {
        for &x in &e.entities {
            table.link(category, x, tree);
        }
    }
}
