//! Multi-seed aggregation and report rendering.
//!
//! Standard deviations are population deviations over the per-seed values
//! (divide by `n`, not `n - 1`).

use serde::{Deserialize, Serialize};

use crate::config::ReportStat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn headline(&self, stat: ReportStat) -> f64 {
        match stat {
            ReportStat::Median => self.median,
            ReportStat::Mean => self.mean,
        }
    }
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Input("cannot aggregate zero values".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(Aggregate {
        n,
        median,
        mean,
        std: var.sqrt(),
    })
}

/// One aggregate line: a method evaluated over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub rank: Option<usize>,
    pub stat: ReportStat,
    pub seeds: Vec<u64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub mcc: Aggregate,
    pub accuracy: Aggregate,
    /// Set when a sweep cell failed; the metric fields are then zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

const HEADER: &str = "method\trank\tstat\tseeds\ttrainable_params\ttotal_params\tmcc\tmcc_std\tmcc_median\tmcc_mean\taccuracy\taccuracy_std\taccuracy_median\taccuracy_mean\terror";

fn stat_name(stat: ReportStat) -> &'static str {
    match stat {
        ReportStat::Median => "median",
        ReportStat::Mean => "mean",
    }
}

/// Tab-separated table; the `mcc` and `accuracy` columns hold the headline
/// statistic named in `stat`.
pub fn render_table(rows: &[AggregateRow]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in rows {
        let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let rank = r.rank.map_or_else(|| "-".to_string(), |k| k.to_string());
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            r.method,
            rank,
            stat_name(r.stat),
            seeds,
            r.trainable_params,
            r.total_params,
            r.mcc.headline(r.stat),
            r.mcc.std,
            r.mcc.median,
            r.mcc.mean,
            r.accuracy.headline(r.stat),
            r.accuracy.std,
            r.accuracy.median,
            r.accuracy.mean,
            r.error.as_deref().unwrap_or("-"),
        ));
    }
    out
}

/// One JSON object per row.
pub fn render_jsonl(rows: &[AggregateRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}
