//! Hybrid training: maximum likelihood on tuples, q-error supervision on
//! labeled queries, or both at once.
//!
//! Every step draws one batch of rows and (outside data-only mode) one
//! batch of queries, then minimizes `L = L^data + λ·L^query` with Adam.
//! The query loss flows through the differentiable progressive sampler, so
//! a single backward pass reaches the same parameters from both sides. At
//! λ = 0 the query pass is skipped entirely and the trajectory is
//! bit-identical to data-only training under the same seed.
//!
//! Refinement reuses the same loop: new tuples continue data-only training
//! ([`incremental_ingest_data`]); a shifted workload runs a few query-only
//! epochs ([`incremental_ingest_workload`]).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::{ColumnDictionary, EncodedTable};
use crate::error::{Error, Result};
use crate::model::ResMadeModel;
use crate::sampler::{dps_estimate_batch, GumbelNoise, QueryRegion, SamplerConfig};
use crate::workload::{to_region, LabeledQuery};

/// Fraction of input cells wildcarded during likelihood training, so the
/// network also learns the marginals progressive sampling asks it for.
const WILDCARD_RATE: f64 = 0.25;

/// Queries per DPS tape; keeps peak memory bounded while gradients
/// accumulate across chunks.
const QUERY_CHUNK: usize = 8;

/// One deterministic RNG stream per concern: 0 = data batching, 1 = query
/// batching and Gumbel noise, 2 = parameter init (model module), 1000+i =
/// per-query estimation.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ───────────────────────── q-error ─────────────────────────

/// max(1, t/e, e/t). Callers floor first: true selectivity to one tuple,
/// estimates to 1/|T|.
pub fn qerror(true_sel: f64, est_sel: f64) -> Result<f64> {
    if !(true_sel > 0.0) || !(est_sel > 0.0) {
        return Err(Error::Numeric(format!(
            "q-error needs positive selectivities, got {true_sel} and {est_sel}"
        )));
    }
    Ok((true_sel / est_sel).max(est_sel / true_sel).max(1.0))
}

/// True selectivity with the one-tuple floor applied.
pub fn floor_true_sel(card: u64, rows: u64) -> f64 {
    card.max(1) as f64 / rows as f64
}

/// Mean q-error of a query batch as a differentiable node: estimates come
/// from batched DPS, are floored at 1/|T|, and meet the (constant) true
/// selectivities in max(1, t/e, e/t).
pub fn query_loss(
    model: &ResMadeModel,
    tape: &mut Tape,
    tp: &crate::model::TapeParams,
    regions: &[&QueryRegion],
    true_sels: &[f64],
    config: &SamplerConfig,
    noise: &mut GumbelNoise,
) -> Result<NodeId> {
    if regions.len() != true_sels.len() {
        return Err(Error::Dimension(format!(
            "{} regions vs {} labels",
            regions.len(),
            true_sels.len()
        )));
    }
    let est = dps_estimate_batch(model, tape, tp, regions, config, noise)?;
    let est = tape.max_const(est, 1.0 / model.row_count as f64);
    let truth = tape.constant(Tensor::col(true_sels.to_vec()));
    let over = tape.div(truth, est)?;
    let under = tape.div(est, truth)?;
    let q = tape.max_pair(over, under)?;
    let q = tape.max_const(q, 1.0);
    Ok(tape.mean_all(q))
}

// ───────────────────────── optimizer ─────────────────────────

/// Adam with bias correction; no weight decay. Masked weights receive
/// exactly-zero gradients and therefore stay exactly zero.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v))
        {
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

// ───────────────────────── configuration ─────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    DataOnly,
    QueryOnly,
    Hybrid,
}

#[derive(Clone, Debug)]
pub struct TrainingConfig {
    /// Trade-off between the (mean-reduced) data and query losses.
    pub lambda: f64,
    pub data_batch: usize,
    pub query_batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub mode: TrainMode,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 1e-4,
            data_batch: 512,
            query_batch: 64,
            epochs: 20,
            lr: 2e-4,
            mode: TrainMode::Hybrid,
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_batch == 0 || self.query_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.sampler.validate()
    }
}

/// One optimizer step as logged to the training CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub data_loss: f64,
    pub query_loss: f64,
    pub millis: f64,
}

/// `step,loss,data_loss,query_loss,millis` with full float round-tripping.
pub fn write_training_log(path: impl AsRef<Path>, records: &[StepRecord]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "step,loss,data_loss,query_loss,millis")?;
    for r in records {
        writeln!(
            file,
            "{},{:?},{:?},{:?},{:?}",
            r.step, r.loss, r.data_loss, r.query_loss, r.millis
        )?;
    }
    file.flush()?;
    Ok(())
}

/// `model.uae` → `model.ep03.uae`.
fn checkpoint_path(base: &Path, epoch: usize) -> PathBuf {
    base.with_extension(format!("ep{epoch:02}.uae"))
}

// ───────────────────────── batching helpers ─────────────────────────

/// Endless shuffled cycle over 0..len, reshuffling whenever a pass ends.
struct Cycler {
    perm: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(len: usize, rng: &mut ChaCha12Rng) -> Cycler {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(rng);
        Cycler { perm, pos: 0 }
    }

    fn next_batch(&mut self, k: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.perm.len() {
                self.perm.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn resolve_workload(
    workload: &[LabeledQuery],
    columns: &[ColumnDictionary],
    rows: u64,
) -> Result<Vec<(QueryRegion, f64)>> {
    workload
        .iter()
        .map(|lq| {
            if lq.card > rows {
                return Err(Error::Config(format!(
                    "label {} exceeds the table's {rows} rows",
                    lq.card
                )));
            }
            let region = to_region(&lq.query, columns)?;
            if region.is_empty() {
                return Err(Error::Config(
                    "training query has an empty region; nothing to sample".into(),
                ));
            }
            Ok((region, floor_true_sel(lq.card, rows)))
        })
        .collect()
}

// ───────────────────────── the training loop ─────────────────────────

/// Train `model` in place. An epoch is one pass over the table's rows
/// (over the workload in query-only mode). If `checkpoint` names the
/// model's output path, each epoch also persists `…epNN.uae` next to it.
/// Returns the per-step log.
pub fn hybrid_train(
    model: &mut ResMadeModel,
    table: &EncodedTable,
    workload: &[LabeledQuery],
    config: &TrainingConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if model.dict_hash != table.dict_hash() {
        return Err(Error::Dictionary(
            "table dictionaries do not match the ones the model was built on".into(),
        ));
    }
    let resolved = resolve_workload(workload, &table.columns, model.row_count)?;
    if resolved.is_empty() && config.mode != TrainMode::DataOnly {
        return Err(Error::Config("query-supervised modes need a non-empty workload".into()));
    }

    train_loop(model, table.codes(), &resolved, config, checkpoint)
}

fn train_loop(
    model: &mut ResMadeModel,
    codes: &[u32],
    resolved: &[(QueryRegion, f64)],
    config: &TrainingConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    let n_cols = model.encoding.col_count();
    let rows = codes.len() / n_cols;
    let use_data = config.mode != TrainMode::QueryOnly;
    let use_query = match config.mode {
        TrainMode::DataOnly => false,
        TrainMode::QueryOnly => true,
        TrainMode::Hybrid => config.lambda > 0.0,
    };
    let query_weight = if config.mode == TrainMode::QueryOnly { 1.0 } else { config.lambda };

    let mut data_rng = rng_stream(config.seed, 0);
    let mut query_rng = rng_stream(config.seed, 1);
    let mut data_cycle = use_data.then(|| Cycler::new(rows, &mut data_rng));
    let mut query_cycle = use_query.then(|| Cycler::new(resolved.len(), &mut query_rng));

    let steps_per_epoch = if use_data {
        rows.div_ceil(config.data_batch)
    } else {
        resolved.len().div_ceil(config.query_batch)
    };

    let mut adam = Adam::new(config.lr, model.params());
    let mut records = Vec::with_capacity(config.epochs * steps_per_epoch);
    let mut step = 0;

    for epoch in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let started = Instant::now();
            let mut grads: Vec<Vec<f64>> =
                model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
            let mut data_loss = 0.0;
            let mut query_loss_val = 0.0;

            if let Some(cycle) = data_cycle.as_mut() {
                // Tail batches shrink instead of wrapping, so one epoch
                // sees every row exactly once.
                let remaining = rows - (cycle.pos % rows.max(1));
                let k = config.data_batch.min(remaining.max(1));
                let batch = cycle.next_batch(k, &mut data_rng);
                let mut batch_codes = Vec::with_capacity(k * n_cols);
                for &r in &batch {
                    batch_codes.extend_from_slice(&codes[r * n_cols..(r + 1) * n_cols]);
                }
                let skip: Vec<bool> =
                    (0..k * n_cols).map(|_| data_rng.random_bool(WILDCARD_RATE)).collect();

                let mut tape = Tape::new();
                let tp = model.params_on_tape(&mut tape, true);
                let loss = model.nll_loss(&mut tape, &tp, &batch_codes, &skip)?;
                data_loss = tape.scalar(loss);
                tape.backward(loss)?;
                accumulate(&mut grads, &tape, &tp.raw, 1.0);
            }

            if let Some(cycle) = query_cycle.as_mut() {
                let batch = cycle.next_batch(config.query_batch, &mut query_rng);
                for chunk in batch.chunks(QUERY_CHUNK) {
                    let regions: Vec<&QueryRegion> =
                        chunk.iter().map(|&i| &resolved[i].0).collect();
                    let sels: Vec<f64> = chunk.iter().map(|&i| resolved[i].1).collect();
                    let weight = chunk.len() as f64 / batch.len() as f64;

                    let mut noise = GumbelNoise::draw(&mut query_rng);
                    let mut tape = Tape::new();
                    let tp = model.params_on_tape(&mut tape, true);
                    let loss = query_loss(
                        model,
                        &mut tape,
                        &tp,
                        &regions,
                        &sels,
                        &config.sampler,
                        &mut noise,
                    )?;
                    query_loss_val += weight * tape.scalar(loss);
                    tape.backward(loss)?;
                    accumulate(&mut grads, &tape, &tp.raw, query_weight * weight);
                }
            }

            adam.step(model.params_mut(), &grads);
            step += 1;
            records.push(StepRecord {
                step,
                loss: data_loss + query_weight * query_loss_val,
                data_loss,
                query_loss: query_loss_val,
                millis: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        if let Some(base) = checkpoint {
            model.save(checkpoint_path(base, epoch + 1))?;
        }
    }
    Ok(records)
}

fn accumulate(grads: &mut [Vec<f64>], tape: &Tape, raw: &[NodeId], weight: f64) {
    for (acc, &id) in grads.iter_mut().zip(raw) {
        if let Some(g) = tape.grad(id) {
            for (a, &gi) in acc.iter_mut().zip(g) {
                *a += weight * gi;
            }
        }
    }
}

// ───────────────────────── incremental refinement ─────────────────────────

/// Continue data-only training on freshly arrived rows (flat [rows×n]
/// codes, already dictionary-encoded). Zero rows is a no-op. Values
/// outside the original dictionaries must be caught at encoding time;
/// codes out of range error here.
pub fn incremental_ingest_data(
    model: &mut ResMadeModel,
    new_codes: &[u32],
    config: &TrainingConfig,
) -> Result<Vec<StepRecord>> {
    let n = model.encoding.col_count();
    if new_codes.len() % n != 0 {
        return Err(Error::Dimension(format!("{} codes for {n} columns", new_codes.len())));
    }
    if new_codes.is_empty() {
        return Ok(Vec::new());
    }
    for (i, &code) in new_codes.iter().enumerate() {
        if code as usize >= model.encoding.domain_size(i % n) {
            return Err(Error::Dictionary(format!(
                "code {code} outside the dictionary of column {}; re-ingestion required",
                i % n
            )));
        }
    }
    let config = TrainingConfig { mode: TrainMode::DataOnly, ..config.clone() };
    train_loop(model, new_codes, &[], &config, None)
}

/// Query-only refinement on a shifted workload; a handful of epochs
/// (10–20) adapts estimates without catastrophic forgetting. Zero epochs
/// is a no-op; an empty workload is an error.
pub fn incremental_ingest_workload(
    model: &mut ResMadeModel,
    new_queries: &[LabeledQuery],
    columns: &[ColumnDictionary],
    config: &TrainingConfig,
) -> Result<Vec<StepRecord>> {
    if new_queries.is_empty() {
        return Err(Error::Config("refinement workload is empty".into()));
    }
    let resolved = resolve_workload(new_queries, columns, model.row_count)?;
    let config = TrainingConfig { mode: TrainMode::QueryOnly, ..config.clone() };
    train_loop(model, &[], &resolved, &config, None)
}
