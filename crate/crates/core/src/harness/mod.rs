//! Offline evaluation: rolling stream simulation, category prediction accuracy,
//! parameter sweeps, latency benchmarks and a synthetic log generator.

mod accuracy;
mod bench;
mod report;
mod simulate;
mod synth;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use accuracy::{compare_prediction_accuracy, prediction_accuracy, AccuracyGroup, AccuracyReport, ModelKind};
pub use bench::{bench_latency, BenchReport, LatencyStats};
pub use report::{EvalReport, PartitionResult, PrecisionRow, SweepPoint, REPORT_SCHEMA_VERSION};
pub use simulate::{run_stream_simulation, SearchMode, SimulationConfig, Simulator};
pub use simulate::{sweep, SweepParameter};
pub use synth::{generate_synthetic, write_jsonl, SyntheticSpec};

pub const DEFAULT_PARTITIONS: usize = 6;
/// Leading partitions that only ever train.
pub const TRAINING_PARTITIONS: usize = 2;

/// Contiguous slices of a time-ordered stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub ranges: Vec<Range<usize>>,
}

impl PartitionPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    /// Indices of the partitions that are tested, each after training on all before it.
    pub fn test_partitions(&self) -> Range<usize> {
        TRAINING_PARTITIONS.min(self.ranges.len())..self.ranges.len()
    }
}

/// Splits `n` stream positions into `parts` slices whose sizes differ by at most one;
/// the remainder goes one each to the trailing slices.
pub fn partition_stream(n: usize, parts: usize) -> Result<PartitionPlan> {
    if parts == 0 {
        return Err(Error::config("partition count must be at least 1"));
    }
    let base = n / parts;
    let extra = n % parts;
    let mut ranges = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p >= parts - extra);
        ranges.push(start..start + len);
        start += len;
    }
    debug_assert_eq!(start, n);
    Ok(PartitionPlan { ranges })
}
