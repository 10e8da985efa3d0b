//! Extended signature tree: an arena of nodes whose signatures are the exact
//! component-wise maxima of their entries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::signature::Signature;
use crate::domain::{CategoryId, ConsumerId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LEntry {
    pub consumer: ConsumerId,
    pub sig: Signature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Leaf(Vec<LEntry>),
    /// Child node ids; each child's signature is the IEntry pointing to it.
    Internal(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub parent: Option<u32>,
    pub sig: Signature,
    pub kind: NodeKind,
}

impl Node {
    fn occupancy(&self) -> usize {
        match &self.kind {
            NodeKind::Leaf(v) => v.len(),
            NodeKind::Internal(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigTree {
    pub block: u32,
    pub category: CategoryId,
    fanout: usize,
    pub(crate) nodes: Vec<Node>,
    root: u32,
    free: Vec<u32>,
    pub(crate) leaf_of: BTreeMap<ConsumerId, u32>,
}

impl SigTree {
    pub fn empty(block: u32, category: CategoryId, fanout: usize) -> Self {
        Self {
            block,
            category,
            fanout,
            nodes: vec![Node {
                parent: None,
                sig: Signature::default(),
                kind: NodeKind::Leaf(Vec::new()),
            }],
            root: 0,
            free: Vec::new(),
            leaf_of: BTreeMap::new(),
        }
    }

    /// Packs entries bottom-up after sorting by `p_ℓ` descending (consumer id on ties).
    pub fn bulk_load(block: u32, category: CategoryId, fanout: usize, mut entries: Vec<LEntry>) -> Self {
        let mut tree = Self::empty(block, category, fanout);
        if entries.is_empty() {
            return tree;
        }
        tree.nodes.clear();
        entries.sort_by(|a, b| b.sig.p_long.total_cmp(&a.sig.p_long).then(a.consumer.cmp(&b.consumer)));
        let mut level: Vec<u32> = Vec::new();
        let mut it = entries.into_iter().peekable();
        while it.peek().is_some() {
            let chunk: Vec<LEntry> = it.by_ref().take(fanout).collect();
            let id = tree.nodes.len() as u32;
            for e in &chunk {
                tree.leaf_of.insert(e.consumer, id);
            }
            tree.nodes.push(Node {
                parent: None,
                sig: Signature::max_of(chunk.iter().map(|e| &e.sig)),
                kind: NodeKind::Leaf(chunk),
            });
            level.push(id);
        }
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len().div_ceil(fanout));
            for chunk in level.chunks(fanout) {
                let id = tree.nodes.len() as u32;
                for &c in chunk {
                    tree.nodes[c as usize].parent = Some(id);
                }
                let sig = Signature::max_of(chunk.iter().map(|&c| &tree.nodes[c as usize].sig));
                tree.nodes.push(Node {
                    parent: None,
                    sig,
                    kind: NodeKind::Internal(chunk.to_vec()),
                });
                next.push(id);
            }
            level = next;
        }
        tree.root = level[0];
        tree
    }

    pub fn root(&self) -> u32 {
        self.root
    }

    pub fn node(&self, id: u32) -> &Node {
        &self.nodes[id as usize]
    }

    pub fn fanout(&self) -> usize {
        self.fanout
    }

    pub fn len(&self) -> usize {
        self.leaf_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_of.is_empty()
    }

    pub fn contains(&self, consumer: ConsumerId) -> bool {
        self.leaf_of.contains_key(&consumer)
    }

    pub fn members(&self) -> impl Iterator<Item = ConsumerId> + '_ {
        self.leaf_of.keys().copied()
    }

    /// Node levels from the root down to the leaves.
    pub fn height(&self) -> usize {
        let mut h = 1;
        let mut n = self.root;
        while let NodeKind::Internal(children) = &self.node(n).kind {
            n = children[0];
            h += 1;
        }
        h
    }

    pub fn entry(&self, consumer: ConsumerId) -> Option<&LEntry> {
        let leaf = *self.leaf_of.get(&consumer)?;
        match &self.node(leaf).kind {
            NodeKind::Leaf(v) => v.iter().find(|e| e.consumer == consumer),
            NodeKind::Internal(_) => None,
        }
    }

    fn exact_sig(&self, id: u32) -> Signature {
        match &self.node(id).kind {
            NodeKind::Leaf(v) => Signature::max_of(v.iter().map(|e| &e.sig)),
            NodeKind::Internal(v) => Signature::max_of(v.iter().map(|&c| &self.node(c).sig)),
        }
    }

    fn recompute_up(&mut self, mut id: u32) {
        loop {
            self.nodes[id as usize].sig = self.exact_sig(id);
            match self.node(id).parent {
                Some(p) => id = p,
                None => return,
            }
        }
    }

    /// Replaces a member's signature and refreshes its ancestors. False if absent.
    pub fn update(&mut self, consumer: ConsumerId, sig: Signature) -> bool {
        let Some(&leaf) = self.leaf_of.get(&consumer) else {
            return false;
        };
        if let NodeKind::Leaf(v) = &mut self.nodes[leaf as usize].kind {
            if let Some(e) = v.iter_mut().find(|e| e.consumer == consumer) {
                e.sig = sig;
            }
        }
        self.recompute_up(leaf);
        true
    }

    /// Recomputes every leaf signature with `f`, then every node bottom-up.
    pub fn refresh_all(&mut self, mut f: impl FnMut(ConsumerId) -> Result<Signature>) -> Result<()> {
        for n in self.nodes.iter_mut() {
            if let NodeKind::Leaf(v) = &mut n.kind {
                for e in v.iter_mut() {
                    e.sig = f(e.consumer)?;
                }
            }
        }
        let order = self.post_order();
        for id in order {
            self.nodes[id as usize].sig = self.exact_sig(id);
        }
        Ok(())
    }

    fn post_order(&self) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![(self.root, false)];
        while let Some((id, expanded)) = stack.pop() {
            if expanded {
                out.push(id);
                continue;
            }
            stack.push((id, true));
            if let NodeKind::Internal(children) = &self.node(id).kind {
                for &c in children.iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        out
    }

    fn alloc(&mut self, node: Node) -> u32 {
        match self.free.pop() {
            Some(id) => {
                self.nodes[id as usize] = node;
                id
            }
            None => {
                self.nodes.push(node);
                (self.nodes.len() - 1) as u32
            }
        }
    }

    fn release(&mut self, id: u32) {
        self.nodes[id as usize] = Node {
            parent: None,
            sig: Signature::default(),
            kind: NodeKind::Leaf(Vec::new()),
        };
        self.free.push(id);
    }

    /// Inserts a new member, descending by least enlargement (first child on ties) and
    /// splitting overflowing nodes.
    pub fn insert(&mut self, entry: LEntry) {
        debug_assert!(!self.contains(entry.consumer));
        let mut id = self.root;
        while let NodeKind::Internal(children) = &self.node(id).kind {
            let mut best = (children[0], f64::INFINITY);
            for &c in children {
                let grow = self.node(c).sig.enlargement(&entry.sig);
                if grow < best.1 {
                    best = (c, grow);
                }
            }
            id = best.0;
        }
        self.leaf_of.insert(entry.consumer, id);
        if let NodeKind::Leaf(v) = &mut self.nodes[id as usize].kind {
            v.push(entry);
        }
        self.fix_up(id);
    }

    fn fix_up(&mut self, mut id: u32) {
        loop {
            if self.node(id).occupancy() > self.fanout {
                self.split(id);
            }
            self.nodes[id as usize].sig = self.exact_sig(id);
            match self.node(id).parent {
                Some(p) => id = p,
                None => return,
            }
        }
    }

    /// Moves part of an overflowing node into a new sibling, creating a new root when
    /// the root splits.
    fn split(&mut self, id: u32) {
        let sigs: Vec<Signature> = match &self.node(id).kind {
            NodeKind::Leaf(v) => v.iter().map(|e| e.sig.clone()).collect(),
            NodeKind::Internal(v) => v.iter().map(|&c| self.node(c).sig.clone()).collect(),
        };
        let in_b = partition(&sigs);
        let kind = std::mem::replace(&mut self.nodes[id as usize].kind, NodeKind::Leaf(Vec::new()));
        let (keep, moved) = match kind {
            NodeKind::Leaf(v) => {
                let (a, b): (Vec<_>, Vec<_>) = v.into_iter().enumerate().partition(|(i, _)| !in_b[*i]);
                (
                    NodeKind::Leaf(a.into_iter().map(|x| x.1).collect()),
                    NodeKind::Leaf(b.into_iter().map(|x| x.1).collect()),
                )
            }
            NodeKind::Internal(v) => {
                let (a, b): (Vec<_>, Vec<_>) = v.into_iter().enumerate().partition(|(i, _)| !in_b[*i]);
                (
                    NodeKind::Internal(a.into_iter().map(|x| x.1).collect()),
                    NodeKind::Internal(b.into_iter().map(|x| x.1).collect()),
                )
            }
        };
        self.nodes[id as usize].kind = keep;
        let parent = self.node(id).parent;
        let sib = self.alloc(Node {
            parent,
            sig: Signature::default(),
            kind: moved,
        });
        match &self.node(sib).kind {
            NodeKind::Leaf(v) => {
                let ids: Vec<ConsumerId> = v.iter().map(|e| e.consumer).collect();
                for c in ids {
                    self.leaf_of.insert(c, sib);
                }
            }
            NodeKind::Internal(v) => {
                for c in v.clone() {
                    self.nodes[c as usize].parent = Some(sib);
                }
            }
        }
        self.nodes[sib as usize].sig = self.exact_sig(sib);
        self.nodes[id as usize].sig = self.exact_sig(id);
        match parent {
            Some(p) => {
                if let NodeKind::Internal(v) = &mut self.nodes[p as usize].kind {
                    let pos = v.iter().position(|&c| c == id).map_or(v.len(), |i| i + 1);
                    v.insert(pos, sib);
                }
            }
            None => {
                let sig = self.node(id).sig.max_with(&self.node(sib).sig);
                let root = self.alloc(Node {
                    parent: None,
                    sig,
                    kind: NodeKind::Internal(vec![id, sib]),
                });
                self.nodes[id as usize].parent = Some(root);
                self.nodes[sib as usize].parent = Some(root);
                self.root = root;
            }
        }
    }

    /// Removes a member. Emptied non-root nodes are dropped and a root with a single
    /// child is collapsed. False if absent.
    pub fn remove(&mut self, consumer: ConsumerId) -> bool {
        let Some(leaf) = self.leaf_of.remove(&consumer) else {
            return false;
        };
        if let NodeKind::Leaf(v) = &mut self.nodes[leaf as usize].kind {
            v.retain(|e| e.consumer != consumer);
        }
        let mut id = leaf;
        while id != self.root && self.node(id).occupancy() == 0 {
            let p = self.node(id).parent.expect("non-root node has a parent");
            if let NodeKind::Internal(v) = &mut self.nodes[p as usize].kind {
                v.retain(|&c| c != id);
            }
            self.release(id);
            id = p;
        }
        self.recompute_up(id);
        loop {
            let only = match &self.node(self.root).kind {
                NodeKind::Internal(v) if v.len() == 1 => v[0],
                _ => break,
            };
            let old = self.root;
            self.nodes[only as usize].parent = None;
            self.root = only;
            self.release(old);
        }
        true
    }

    /// Checks parent links, occupancy, membership bookkeeping, uniform leaf depth and that
    /// every node signature is the exact maximum of its entries.
    pub fn verify(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Integrity(format!("tree (block {}, category {}): {m}", self.block, self.category)));
        if self.node(self.root).parent.is_some() {
            return fail("root has a parent".into());
        }
        let mut seen_members = 0;
        let mut reachable = 0;
        let mut leaf_depth = None;
        let mut stack = vec![(self.root, 1usize)];
        while let Some((id, depth)) = stack.pop() {
            reachable += 1;
            let node = self.node(id);
            let occ = node.occupancy();
            if occ > self.fanout || (occ == 0 && id != self.root) {
                return fail(format!("node {id} holds {occ} entries"));
            }
            if node.sig != self.exact_sig(id) {
                return fail(format!("node {id} signature is not the maximum of its entries"));
            }
            match &node.kind {
                NodeKind::Leaf(v) => {
                    if *leaf_depth.get_or_insert(depth) != depth {
                        return fail("leaves at different depths".into());
                    }
                    for e in v {
                        seen_members += 1;
                        if self.leaf_of.get(&e.consumer) != Some(&id) {
                            return fail(format!("consumer {} misfiled", e.consumer));
                        }
                    }
                }
                NodeKind::Internal(v) => {
                    for &c in v {
                        if self.node(c).parent != Some(id) {
                            return fail(format!("node {c} has a stale parent link"));
                        }
                        stack.push((c, depth + 1));
                    }
                }
            }
        }
        if seen_members != self.leaf_of.len() {
            return fail("member map disagrees with leaves".into());
        }
        if reachable + self.free.len() != self.nodes.len() {
            return fail("unreachable nodes".into());
        }
        Ok(())
    }
}

/// Two-way split: seeds are the pair wasting the most when merged, the rest go to the
/// group needing the smaller enlargement (smaller group, then first group, on ties).
/// Returns membership of the second group.
fn partition(sigs: &[Signature]) -> Vec<bool> {
    let n = sigs.len();
    let mut seeds = (0, 1, f64::NEG_INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            let waste = sigs[i].max_with(&sigs[j]).size() - sigs[i].size() - sigs[j].size();
            if waste > seeds.2 {
                seeds = (i, j, waste);
            }
        }
    }
    let mut in_b = vec![false; n];
    in_b[seeds.1] = true;
    let mut ga = sigs[seeds.0].clone();
    let mut gb = sigs[seeds.1].clone();
    let (mut na, mut nb) = (1, 1);
    for i in 0..n {
        if i == seeds.0 || i == seeds.1 {
            continue;
        }
        let (ea, eb) = (ga.enlargement(&sigs[i]), gb.enlargement(&sigs[i]));
        let to_b = eb < ea || (eb == ea && nb < na);
        if to_b {
            in_b[i] = true;
            gb = gb.max_with(&sigs[i]);
            nb += 1;
        } else {
            ga = ga.max_with(&sigs[i]);
            na += 1;
        }
    }
    in_b
}
