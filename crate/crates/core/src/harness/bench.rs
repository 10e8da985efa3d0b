use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::ConsumerId;
use crate::error::Result;
use crate::index::CppseIndex;
use crate::scoring::{brute_force_top_k, ItemQuery};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub queries: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
}

impl LatencyStats {
    /// Nearest-rank quantiles over per-query microseconds.
    pub fn from_micros(mut samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let rank = |q: f64| samples[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            queries: n,
            mean_us: samples.iter().sum::<f64>() / n as f64,
            median_us: rank(0.5),
            p99_us: rank(0.99),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub users: usize,
    pub items: usize,
    pub k: usize,
    pub index: LatencyStats,
    pub brute_force: LatencyStats,
    /// Brute-force mean over index mean.
    pub speedup: f64,
    /// Items whose index answer differs from exhaustive scoring of the reachable users.
    pub oracle_mismatches: usize,
    /// FNV-1a over the returned consumer ids, to compare result sets across runs.
    pub result_checksum: u64,
}

/// Times `knn_query` against a sequential scan over every indexed user, item by item on
/// the calling thread, then checks each index answer against the reachable-user oracle.
pub fn bench_latency(index: &CppseIndex, items: &[ItemQuery], k: usize) -> Result<BenchReport> {
    let users: Vec<_> = index.users().values().map(|r| &r.state).collect();
    let mut index_us = Vec::with_capacity(items.len());
    let mut brute_us = Vec::with_capacity(items.len());
    let mut answers = Vec::with_capacity(items.len());
    for q in items {
        let t = Instant::now();
        let top = index.knn_query(q, k)?;
        index_us.push(t.elapsed().as_secs_f64() * 1e6);
        let t = Instant::now();
        let scan = brute_force_top_k(q, users.iter().copied(), k, index.background(), index.scoring())?;
        brute_us.push(t.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(scan);
        answers.push(top);
    }
    let mut oracle_mismatches = 0;
    let mut checksum = Fnv::default();
    for (q, top) in items.iter().zip(&answers) {
        let reachable = index.reachable_users(q);
        let oracle = brute_force_top_k(
            q,
            reachable.iter().filter_map(|&c| index.user(c)),
            k,
            index.background(),
            index.scoring(),
        )?;
        if ids(&oracle) != ids(top) {
            oracle_mismatches += 1;
        }
        for c in ids(top) {
            checksum.write(c.0);
        }
        checksum.write(u32::MAX);
    }
    let index_stats = LatencyStats::from_micros(index_us);
    let brute_stats = LatencyStats::from_micros(brute_us);
    let speedup = if index_stats.mean_us > 0.0 {
        brute_stats.mean_us / index_stats.mean_us
    } else {
        f64::INFINITY
    };
    Ok(BenchReport {
        users: users.len(),
        items: items.len(),
        k,
        index: index_stats,
        brute_force: brute_stats,
        speedup,
        oracle_mismatches,
        result_checksum: checksum.0,
    })
}

fn ids(top: &[(ConsumerId, f64)]) -> Vec<ConsumerId> {
    top.iter().map(|(c, _)| *c).collect()
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, x: u32) {
        for b in x.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}
