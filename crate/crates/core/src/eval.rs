//! Q-error reports over labeled workloads.
//!
//! Each query is estimated independently with hard progressive sampling on
//! its own RNG stream (base seed + 1000 + query index), so reports are
//! identical no matter how many worker threads run. Latency capture is
//! optional; with it off the timing fields are zero and a fixed seed makes
//! the whole report byte-reproducible.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::ColumnDictionary;
use crate::error::Result;
use crate::model::ResMadeModel;
use crate::sampler::progressive_sample_estimate;
use crate::trainer::{floor_true_sel, qerror, rng_stream};
use crate::workload::{to_region, LabeledQuery};

/// Wall-clock per-query latency statistics, in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Q-error quantiles of one evaluated suite.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    pub count: usize,
    pub latency: LatencyStats,
}

/// One query's evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEval {
    /// Estimated selectivity after the 1/|T| floor.
    pub est_sel: f64,
    /// Estimate scaled to a row count.
    pub est_card: f64,
    pub true_card: u64,
    pub qerror: f64,
    pub millis: f64,
}

/// Nearest-rank percentile of an ascending-sorted slice.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let rank = (percentile / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn stats_of(mut values: Vec<f64>) -> (f64, f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.sort_by(f64::total_cmp);
    (mean, nearest_rank(&values, 50.0), nearest_rank(&values, 95.0), values[values.len() - 1])
}

/// Estimate every query with S progressive samples and aggregate q-errors.
/// Empty-region queries estimate zero and meet the selectivity floors like
/// any other estimate.
pub fn evaluate(
    model: &ResMadeModel,
    queries: &[LabeledQuery],
    columns: &[ColumnDictionary],
    samples: usize,
    seed: u64,
    timing: bool,
) -> Result<(ErrorReport, Vec<QueryEval>)> {
    if queries.is_empty() {
        return Err(crate::Error::Config("nothing to evaluate: the workload is empty".into()));
    }
    let rows = model.row_count as f64;
    let per_query: Vec<QueryEval> = queries
        .par_iter()
        .enumerate()
        .map(|(i, lq)| -> Result<QueryEval> {
            let started = timing.then(std::time::Instant::now);
            let region = to_region(&lq.query, columns)?;
            let raw = if region.is_empty() {
                0.0
            } else {
                let mut rng = rng_stream(seed, 1000 + i as u64);
                progressive_sample_estimate(model, &region, samples, &mut rng)?
            };
            let est_sel = raw.max(1.0 / rows);
            let q = qerror(floor_true_sel(lq.card, model.row_count), est_sel)?;
            Ok(QueryEval {
                est_sel,
                est_card: est_sel * rows,
                true_card: lq.card,
                qerror: q,
                millis: started.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3),
            })
        })
        .collect::<Result<_>>()?;

    let (mean, median, p95, max) = stats_of(per_query.iter().map(|e| e.qerror).collect());
    let (mean_ms, median_ms, p95_ms, max_ms) =
        stats_of(per_query.iter().map(|e| e.millis).collect());
    Ok((
        ErrorReport {
            mean,
            median,
            p95,
            max,
            count: per_query.len(),
            latency: LatencyStats { mean_ms, median_ms, p95_ms, max_ms },
        },
        per_query,
    ))
}

impl ErrorReport {
    pub const CSV_HEADER: &'static str =
        "count,mean,median,p95,max,mean_ms,median_ms,p95_ms,max_ms";

    /// Full-precision CSV row matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.count,
            self.mean,
            self.median,
            self.p95,
            self.max,
            self.latency.mean_ms,
            self.latency.median_ms,
            self.latency.p95_ms,
            self.latency.max_ms,
        )
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "queries        {}", self.count)?;
        writeln!(
            f,
            "q-error        mean {:.3}  median {:.3}  95th {:.3}  max {:.3}",
            self.mean, self.median, self.p95, self.max
        )?;
        write!(
            f,
            "latency (ms)   mean {:.3}  median {:.3}  95th {:.3}  max {:.3}",
            self.latency.mean_ms, self.latency.median_ms, self.latency.p95_ms, self.latency.max_ms
        )
    }
}

/// Per-query CSV: everything needed to recompute the summary statistics.
pub fn write_query_csv(path: impl AsRef<Path>, rows: &[QueryEval]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "query,true_card,est_card,est_sel,qerror,millis")?;
    for (i, e) in rows.iter().enumerate() {
        writeln!(
            file,
            "{},{},{:?},{:?},{:?},{:?}",
            i, e.true_card, e.est_card, e.est_sel, e.qerror, e.millis
        )?;
    }
    file.flush()?;
    Ok(())
}
