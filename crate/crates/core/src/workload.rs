//! Query representation, ground-truth labeling, and workload generation.
//!
//! A query is a conjunction of per-column predicates; columns without a
//! predicate are wildcards. Comparisons use the dictionary's total order
//! (NULL < numbers < strings), so every predicate compiles to an
//! allowed-code mask and a query to a [`QueryRegion`]. True cardinalities
//! come from a full scan — the labeler for generated workloads and the
//! reference for q-error reports.
//!
//! Workload files are JSON Lines, one object per query:
//! `{"predicates":[{"col":"age","op":">=","vals":[25]}],"card":1234}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use rayon::prelude::*;

use crate::data::{ColumnDictionary, EncodedTable, Value};
use crate::error::{Error, Result};
use crate::sampler::QueryRegion;

// ───────────────────────── query types ─────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
}

impl CompareOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
            CompareOp::In => "in",
        }
    }

    pub fn parse(s: &str) -> Option<CompareOp> {
        Some(match s {
            "=" => CompareOp::Eq,
            "!=" => CompareOp::Ne,
            "<" => CompareOp::Lt,
            "<=" => CompareOp::Le,
            ">" => CompareOp::Gt,
            ">=" => CompareOp::Ge,
            "in" => CompareOp::In,
            _ => return None,
        })
    }
}

/// One predicate: `col op literal` (or `col IN {literals}`).
#[derive(Clone, Debug, PartialEq)]
pub struct Predicate {
    pub col: String,
    pub op: CompareOp,
    pub vals: Vec<Value>,
}

/// Conjunction of predicates; absent columns are wildcards.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Query {
    pub predicates: Vec<Predicate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledQuery {
    pub query: Query,
    pub card: u64,
}

// ───────────────────────── JSON lines ─────────────────────────

fn predicate_json(p: &Predicate) -> String {
    let vals: Vec<String> = p.vals.iter().map(|v| v.to_json().to_string()).collect();
    format!(
        "{{\"col\":{},\"op\":\"{}\",\"vals\":[{}]}}",
        serde_json::Value::String(p.col.clone()),
        p.op.as_str(),
        vals.join(",")
    )
}

/// Canonical one-line JSON for a query; also the dedup key.
pub fn query_json(q: &Query) -> String {
    let preds: Vec<String> = q.predicates.iter().map(predicate_json).collect();
    format!("{{\"predicates\":[{}]}}", preds.join(","))
}

fn labeled_json(lq: &LabeledQuery) -> String {
    let preds: Vec<String> = lq.query.predicates.iter().map(predicate_json).collect();
    format!("{{\"predicates\":[{}],\"card\":{}}}", preds.join(","), lq.card)
}

fn parse_line(line: &str, row: usize) -> Result<(Query, Option<u64>)> {
    let bad = |msg: &str| Error::Parse { row, msg: msg.into() };
    let v: serde_json::Value =
        serde_json::from_str(line).map_err(|e| bad(&format!("invalid JSON: {e}")))?;
    let obj = v.as_object().ok_or_else(|| bad("expected an object"))?;
    let card = match obj.get("card") {
        None => None,
        Some(c) => {
            Some(c.as_u64().ok_or_else(|| bad("\"card\" must be a non-negative integer"))?)
        }
    };
    let preds = obj
        .get("predicates")
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| bad("missing \"predicates\" array"))?;

    let mut predicates = Vec::with_capacity(preds.len());
    for p in preds {
        let p = p.as_object().ok_or_else(|| bad("predicate must be an object"))?;
        let col = p
            .get("col")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| bad("predicate missing \"col\""))?;
        let op = p
            .get("op")
            .and_then(serde_json::Value::as_str)
            .and_then(CompareOp::parse)
            .ok_or_else(|| bad("predicate has no recognizable \"op\""))?;
        let vals = p
            .get("vals")
            .and_then(serde_json::Value::as_array)
            .ok_or_else(|| bad("predicate missing \"vals\" array"))?;
        let vals = vals
            .iter()
            .map(Value::from_json)
            .collect::<Result<Vec<Value>>>()
            .map_err(|_| bad("unsupported literal type in \"vals\""))?;
        predicates.push(Predicate { col: col.to_string(), op, vals });
    }
    Ok((Query { predicates }, card))
}

/// Read a labeled JSON-Lines workload; blank lines are skipped, malformed
/// lines (including a missing `card`) report their 1-based line number.
pub fn read_workload(path: impl AsRef<Path>) -> Result<Vec<LabeledQuery>> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 1;
        let (query, card) = parse_line(&line, row)?;
        let card = card.ok_or(Error::Parse { row, msg: "missing \"card\" label".into() })?;
        out.push(LabeledQuery { query, card });
    }
    Ok(out)
}

/// Read queries only, tolerating absent `card` labels — the estimation
/// commands don't need ground truth.
pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?.0);
    }
    Ok(out)
}

pub fn write_workload(path: impl AsRef<Path>, queries: &[LabeledQuery]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    for lq in queries {
        writeln!(file, "{}", labeled_json(lq))?;
    }
    file.flush()?;
    Ok(())
}

// ───────────────────────── region compilation ─────────────────────────

fn op_mask(dict: &ColumnDictionary, op: CompareOp, vals: &[Value]) -> Result<Vec<bool>> {
    let n = dict.domain_size();
    let need_one = || -> Result<&Value> {
        vals.first().ok_or_else(|| Error::Config(format!("{} needs a literal", op.as_str())))
    };
    // Point ops must name real dictionary values; range ops only need a
    // position in the total order, so absent literals are fine there.
    let resolve = |v: &Value| -> Result<usize> {
        dict.code_of(v).map(|c| c as usize).ok_or_else(|| {
            Error::Dictionary(format!("literal {v} not in the dictionary of column {}", dict.name))
        })
    };
    let mut mask = vec![false; n];
    match op {
        CompareOp::Eq => mask[resolve(need_one()?)?] = true,
        CompareOp::Ne => {
            let c = resolve(need_one()?)?;
            mask.fill(true);
            mask[c] = false;
        }
        CompareOp::Lt => mask[..dict.lower_bound(need_one()?) as usize].fill(true),
        CompareOp::Le => mask[..dict.upper_bound(need_one()?) as usize].fill(true),
        CompareOp::Gt => mask[dict.upper_bound(need_one()?) as usize..].fill(true),
        CompareOp::Ge => mask[dict.lower_bound(need_one()?) as usize..].fill(true),
        CompareOp::In => {
            if vals.is_empty() {
                return Err(Error::Config("IN list must not be empty".into()));
            }
            for v in vals {
                mask[resolve(v)?] = true;
            }
        }
    }
    Ok(mask)
}

/// Compile a query to per-column allowed-code masks. Contradictory
/// predicates produce an (explicitly representable) empty region, not an
/// error; unknown columns and unresolvable point literals do error.
pub fn to_region(query: &Query, columns: &[ColumnDictionary]) -> Result<QueryRegion> {
    let sizes: Vec<usize> = columns.iter().map(ColumnDictionary::domain_size).collect();
    let mut region = QueryRegion::full(&sizes);
    for p in &query.predicates {
        let col = columns
            .iter()
            .position(|c| c.name == p.col)
            .ok_or_else(|| Error::UnknownColumn(p.col.clone()))?;
        let mask = op_mask(&columns[col], p.op, &p.vals)?;
        region.restrict(col, &mask)?;
    }
    Ok(region)
}

/// Ground truth by full scan: how many tuples satisfy the query.
pub fn exact_cardinality(table: &EncodedTable, query: &Query) -> Result<u64> {
    let region = to_region(query, &table.columns)?;
    if region.is_empty() {
        return Ok(0);
    }
    let n = table.col_count();
    Ok(table.codes().chunks_exact(n).filter(|row| region.contains(row)).count() as u64)
}

// ───────────────────────── generation ─────────────────────────

/// Recipe for a generated workload: one range-bounded column plus a random
/// number of point/range filters whose literals come from sampled tuples.
#[derive(Clone, Debug)]
pub struct WorkloadSpec {
    pub bounded_column: String,
    /// Fraction of the bounded column's distinct values one range covers.
    pub target_volume: f64,
    /// Lower bound on the number of extra filters per query (capped by the
    /// number of non-bounded columns).
    pub n_filters_min: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            bounded_column: String::new(),
            target_volume: 0.01,
            n_filters_min: 1,
            train_count: 1000,
            test_count: 100,
            seed: 0,
        }
    }
}

pub struct GeneratedWorkload {
    pub train: Vec<LabeledQuery>,
    /// Held-out queries from the same distribution as `train`.
    pub test_in: Vec<LabeledQuery>,
    /// Queries with fully random literals and no bounded column.
    pub test_random: Vec<LabeledQuery>,
}

const FILTER_OPS: [CompareOp; 5] =
    [CompareOp::Eq, CompareOp::Lt, CompareOp::Le, CompareOp::Gt, CompareOp::Ge];

struct Generator<'a> {
    table: &'a EncodedTable,
    bounded: usize,
    others: Vec<usize>,
    half_width: i64,
    center_lo: u32,
    center_hi: u32, // exclusive
}

impl<'a> Generator<'a> {
    fn new(table: &'a EncodedTable, spec: &WorkloadSpec) -> Result<Generator<'a>> {
        if !(spec.target_volume > 0.0 && spec.target_volume <= 1.0) {
            return Err(Error::Config(format!(
                "target volume must be in (0, 1], got {}",
                spec.target_volume
            )));
        }
        let bounded = table.column_index(&spec.bounded_column)?;
        let domain = table.columns[bounded].domain_size();
        if (domain as f64) < 1.0 / spec.target_volume {
            return Err(Error::Config(format!(
                "bounded column {} has {domain} distinct values; too few for a target volume of {}",
                spec.bounded_column, spec.target_volume
            )));
        }
        // Centers are uniform over the middle 80% of the code range.
        let center_lo = (0.1 * domain as f64).floor() as u32;
        let center_hi = ((0.9 * domain as f64).ceil() as u32).clamp(center_lo + 1, domain as u32);
        Ok(Generator {
            table,
            bounded,
            others: (0..table.col_count()).filter(|&c| c != bounded).collect(),
            half_width: (spec.target_volume * domain as f64 / 2.0).round() as i64,
            center_lo,
            center_hi,
        })
    }

    /// Bounded-column range predicates around a random center. The window
    /// keeps its size by sliding off the edges instead of truncating, so
    /// the covered volume stays on target; a window spanning the whole
    /// domain degenerates to a wildcard (no predicates at all).
    fn bounded_range(&self, rng: &mut ChaCha12Rng) -> Vec<Predicate> {
        let dict = &self.table.columns[self.bounded];
        let domain = dict.domain_size() as i64;
        let center = rng.random_range(self.center_lo..self.center_hi) as i64;
        let size = (2 * self.half_width + 1).min(domain);
        let lo = (center - self.half_width).clamp(0, domain - size) as u32;
        let hi = lo + size as u32 - 1;
        if lo == 0 && hi as i64 == domain - 1 {
            return Vec::new();
        }
        vec![
            Predicate {
                col: dict.name.clone(),
                op: CompareOp::Ge,
                vals: vec![dict.value_of(lo).clone()],
            },
            Predicate {
                col: dict.name.clone(),
                op: CompareOp::Le,
                vals: vec![dict.value_of(hi).clone()],
            },
        ]
    }

    /// Pick n_f distinct non-bounded columns, in ascending column order for
    /// a canonical predicate layout.
    fn pick_columns(&self, rng: &mut ChaCha12Rng, n_min: usize) -> Vec<usize> {
        let avail = self.others.len();
        if avail == 0 {
            return Vec::new();
        }
        let lo = n_min.min(avail).max(1);
        let n_f = rng.random_range(lo..=avail);
        let mut pool = self.others.clone();
        pool.partial_shuffle(rng, n_f);
        let mut picked: Vec<usize> = pool[..n_f].to_vec();
        picked.sort_unstable();
        picked
    }

    /// In-workload candidate: bounded range ∧ filters whose literals come
    /// from one randomly sampled tuple.
    fn in_workload_candidate(&self, rng: &mut ChaCha12Rng, n_min: usize) -> Query {
        let mut predicates = self.bounded_range(rng);
        let row = rng.random_range(0..self.table.row_count());
        for col in self.pick_columns(rng, n_min) {
            let dict = &self.table.columns[col];
            let op = FILTER_OPS[rng.random_range(0..FILTER_OPS.len())];
            let val = dict.value_of(self.table.code(row, col)).clone();
            predicates.push(Predicate { col: dict.name.clone(), op, vals: vec![val] });
        }
        Query { predicates }
    }

    /// Random-suite candidate: no bounded column, literals drawn uniformly
    /// from each dictionary.
    fn random_candidate(&self, rng: &mut ChaCha12Rng, n_min: usize) -> Query {
        let mut predicates = Vec::new();
        for col in self.pick_columns(rng, n_min) {
            let dict = &self.table.columns[col];
            let op = FILTER_OPS[rng.random_range(0..FILTER_OPS.len())];
            let code = rng.random_range(0..dict.domain_size() as u32);
            let val = dict.value_of(code).clone();
            predicates.push(Predicate { col: dict.name.clone(), op, vals: vec![val] });
        }
        Query { predicates }
    }
}

/// Generate and label a training set plus two test suites: held-out
/// in-workload queries (deduplicated against training) and fully random
/// queries. Deterministic for a given spec.
pub fn generate_workload(table: &EncodedTable, spec: &WorkloadSpec) -> Result<GeneratedWorkload> {
    let gen = Generator::new(table, spec)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    let fill = |rng: &mut ChaCha12Rng,
                count: usize,
                reject_zero: bool,
                exclude: &[&[LabeledQuery]],
                random_suite: bool|
     -> Result<Vec<LabeledQuery>> {
        let mut seen: std::collections::HashSet<String> = exclude
            .iter()
            .flat_map(|qs| qs.iter().map(|lq| query_json(&lq.query)))
            .collect();
        let mut out = Vec::with_capacity(count);
        let cap = 1000 + 200 * count;
        let mut attempts = 0;
        while out.len() < count {
            let batch_size = (count - out.len()).max(32);
            attempts += batch_size;
            if attempts > cap {
                return Err(Error::Config(format!(
                    "workload spec too restrictive: {} distinct queries after {attempts} attempts",
                    out.len()
                )));
            }
            let batch: Vec<Query> = (0..batch_size)
                .map(|_| {
                    if random_suite {
                        gen.random_candidate(rng, spec.n_filters_min)
                    } else {
                        gen.in_workload_candidate(rng, spec.n_filters_min)
                    }
                })
                .collect();
            let cards: Vec<u64> = batch
                .par_iter()
                .map(|q| exact_cardinality(table, q))
                .collect::<Result<Vec<u64>>>()?;
            for (query, card) in batch.into_iter().zip(cards) {
                if out.len() == count || (reject_zero && card == 0) {
                    continue;
                }
                if seen.insert(query_json(&query)) {
                    out.push(LabeledQuery { query, card });
                }
            }
        }
        Ok(out)
    };

    let train = fill(&mut rng, spec.train_count, true, &[], false)?;
    let test_in = fill(&mut rng, spec.test_count, true, &[&train], false)?;
    let test_random = fill(&mut rng, spec.test_count, false, &[&train], true)?;
    Ok(GeneratedWorkload { train, test_in, test_random })
}
