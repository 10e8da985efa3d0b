//! Shift-add-xor string hashing and the chained table routing `(category, entity)` pairs
//! to the trees that cover them.

use serde::{Deserialize, Serialize};

use crate::domain::{CategoryId, EntityId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashParams {
    pub seed: u64,
    pub left: u32,
    pub right: u32,
    pub table_size: u64,
}

impl Default for HashParams {
    fn default() -> Self {
        Self {
            seed: 31,
            left: 5,
            right: 2,
            table_size: 1 << 17,
        }
    }
}

impl HashParams {
    pub fn validate(&self) -> Result<()> {
        if self.table_size == 0 {
            return Err(Error::config("hash table size must be at least 1"));
        }
        if self.left >= 64 || self.right >= 64 {
            return Err(Error::config("hash shifts must be below 64"));
        }
        Ok(())
    }
}

/// Raw 64-bit hash: `h = s; h ^= (h << L) + (h >> R) + byte` with wrapping arithmetic.
pub fn shift_add_xor(bytes: impl IntoIterator<Item = u8>, seed: u64, left: u32, right: u32) -> u64 {
    bytes.into_iter().fold(seed, |h, c| {
        h ^ (h << left).wrapping_add(h >> right).wrapping_add(c as u64)
    })
}

/// Bucket of `phrase` in a table of `table_size` buckets.
pub fn shift_add_xor_hash(phrase: &str, seed: u64, left: u32, right: u32, table_size: u64) -> Result<u64> {
    if table_size == 0 {
        return Err(Error::config("hash table size must be at least 1"));
    }
    Ok(shift_add_xor(phrase.bytes(), seed, left, right) % table_size)
}

/// Bytes of the phrase `"{category}#{entity}"` over numeric ids, without allocating.
fn pair_phrase(c: CategoryId, e: EntityId) -> impl Iterator<Item = u8> {
    fn digits(mut x: u32) -> ([u8; 10], usize) {
        let mut buf = [0u8; 10];
        let mut n = 0;
        loop {
            buf[9 - n] = b'0' + (x % 10) as u8;
            n += 1;
            x /= 10;
            if x == 0 {
                return (buf, n);
            }
        }
    }
    let (cb, cn) = digits(c.0);
    let (eb, en) = digits(e.0);
    cb.into_iter()
        .skip(10 - cn)
        .chain(std::iter::once(b'#'))
        .chain(eb.into_iter().skip(10 - en))
}

const NIL: u32 = u32::MAX;

/// `⟨key, tree links, next⟩`. The pair itself is kept so colliding pairs never share
/// links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triad {
    pub key: u64,
    pub category: CategoryId,
    pub entity: EntityId,
    /// Sorted tree ids; at most one per block.
    pub trees: Vec<u32>,
    next: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTable {
    params: HashParams,
    buckets: Vec<u32>,
    triads: Vec<Triad>,
}

impl PairTable {
    pub fn new(params: HashParams) -> Result<Self> {
        params.validate()?;
        let n = usize::try_from(params.table_size).map_err(|_| Error::config("hash table too large"))?;
        Ok(Self {
            params,
            buckets: vec![NIL; n],
            triads: Vec::new(),
        })
    }

    pub fn params(&self) -> &HashParams {
        &self.params
    }

    pub fn key(&self, c: CategoryId, e: EntityId) -> u64 {
        shift_add_xor(pair_phrase(c, e), self.params.seed, self.params.left, self.params.right)
    }

    fn find(&self, c: CategoryId, e: EntityId) -> (u64, usize, Option<usize>) {
        let key = self.key(c, e);
        let bucket = (key % self.params.table_size) as usize;
        let mut at = self.buckets[bucket];
        while at != NIL {
            let t = &self.triads[at as usize];
            if t.key == key && t.category == c && t.entity == e {
                return (key, bucket, Some(at as usize));
            }
            at = t.next;
        }
        (key, bucket, None)
    }

    pub fn lookup(&self, c: CategoryId, e: EntityId) -> &[u32] {
        match self.find(c, e).2 {
            Some(i) => &self.triads[i].trees,
            None => &[],
        }
    }

    /// Links `tree` from the pair's triad, creating the triad at the bucket head if new.
    /// Returns true if the link was added.
    pub fn link(&mut self, c: CategoryId, e: EntityId, tree: u32) -> bool {
        let (key, bucket, found) = self.find(c, e);
        let i = match found {
            Some(i) => i,
            None => {
                self.triads.push(Triad {
                    key,
                    category: c,
                    entity: e,
                    trees: Vec::new(),
                    next: self.buckets[bucket],
                });
                self.buckets[bucket] = (self.triads.len() - 1) as u32;
                self.triads.len() - 1
            }
        };
        let trees = &mut self.triads[i].trees;
        match trees.binary_search(&tree) {
            Ok(_) => false,
            Err(pos) => {
                trees.insert(pos, tree);
                true
            }
        }
    }

    pub fn unlink(&mut self, c: CategoryId, e: EntityId, tree: u32) {
        if let Some(i) = self.find(c, e).2 {
            let trees = &mut self.triads[i].trees;
            if let Ok(pos) = trees.binary_search(&tree) {
                trees.remove(pos);
            }
        }
    }

    pub fn triads(&self) -> &[Triad] {
        &self.triads
    }

    /// Every triad is reachable from the bucket its key maps to.
    pub fn chains_complete(&self) -> bool {
        let mut seen = 0;
        for &head in &self.buckets {
            let mut at = head;
            while at != NIL {
                let t = &self.triads[at as usize];
                if self.find(t.category, t.entity).2 != Some(at as usize) {
                    return false;
                }
                seen += 1;
                at = t.next;
            }
        }
        seen == self.triads.len()
    }
}
