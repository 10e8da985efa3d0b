use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bench::LatencyStats;
use crate::error::{Error, Result};

/// Bumped whenever a field of [`EvalReport`] changes meaning or disappears.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `P@k = hits / (items * k)`; zero when no item was tested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub k: usize,
    pub hits: u64,
    /// `|V|`: distinct items queried.
    pub items: u64,
    pub precision: f64,
}

impl PrecisionRow {
    pub fn new(k: usize, hits: u64, items: u64) -> Self {
        let precision = if items == 0 || k == 0 {
            0.0
        } else {
            hits as f64 / (items as f64 * k as f64)
        };
        Self {
            k,
            hits,
            items,
            precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub partition: usize,
    pub train_interactions: usize,
    pub test_interactions: usize,
    pub precision: Vec<PrecisionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub parameter: String,
    pub value: f64,
    /// For window sweeps: the short-term weight that maximised each `P@k`, aligned with
    /// `precision`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub best_lambda: Vec<f64>,
    pub precision: Vec<PrecisionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: String,
    pub window: usize,
    pub lambda_s: f64,
    pub expansion_per_entity: usize,
    pub partitions: Vec<PartitionResult>,
    /// Hits and items pooled over every test partition before dividing.
    pub pooled: Vec<PrecisionRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

impl EvalReport {
    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.pooled.iter().find(|r| r.k == k).map(|r| r.precision)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode={} window={} lambda_s={} expansion={}",
            self.mode, self.window, self.lambda_s, self.expansion_per_entity
        );
        let _ = writeln!(s, "{:>9} {:>5} {:>8} {:>8} {:>10}", "partition", "k", "hits", "items", "P@k");
        for p in &self.partitions {
            for r in &p.precision {
                let _ = writeln!(
                    s,
                    "{:>9} {:>5} {:>8} {:>8} {:>10.6}",
                    p.partition, r.k, r.hits, r.items, r.precision
                );
            }
        }
        for r in &self.pooled {
            let _ = writeln!(
                s,
                "{:>9} {:>5} {:>8} {:>8} {:>10.6}",
                "pooled", r.k, r.hits, r.items, r.precision
            );
        }
        for pt in &self.sweep {
            for (i, r) in pt.precision.iter().enumerate() {
                let best = pt.best_lambda.get(i).map(|l| format!(" best_lambda={l}")).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "sweep {}={} k={} P@k={:.6}{best}",
                    pt.parameter, pt.value, r.k, r.precision
                );
            }
        }
        if let Some(l) = &self.latency {
            let _ = writeln!(
                s,
                "latency: {} queries, mean {:.1}us, median {:.1}us, p99 {:.1}us",
                l.queries, l.mean_us, l.median_us, l.p99_us
            );
        }
        s
    }

    /// Long-form series for external plotting: one row per (series, key, k).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["series", "parameter", "value", "k", "hits", "items", "precision"])
            .map_err(csv_err)?;
        let mut row = |series: &str, param: &str, value: String, r: &PrecisionRow| {
            w.write_record([
                series.to_owned(),
                param.to_owned(),
                value,
                r.k.to_string(),
                r.hits.to_string(),
                r.items.to_string(),
                r.precision.to_string(),
            ])
        };
        for p in &self.partitions {
            for r in &p.precision {
                row("partition", "partition", p.partition.to_string(), r).map_err(csv_err)?;
            }
        }
        for r in &self.pooled {
            row("pooled", "", String::new(), r).map_err(csv_err)?;
        }
        for pt in &self.sweep {
            for r in &pt.precision {
                row("sweep", &pt.parameter, pt.value.to_string(), r).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }
}
