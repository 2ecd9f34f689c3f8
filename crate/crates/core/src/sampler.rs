//! Range-query estimators over a trained model.
//!
//! Four ways to turn per-column conditionals into a selectivity:
//! exhaustive enumeration (exact under the model, capped), uniform
//! Monte-Carlo over the region, progressive sampling (hard categorical
//! draws from truncated conditionals — the inference path), and
//! differentiable progressive sampling (DPS), which replaces the hard draw
//! with a Gumbel-Softmax relaxation so the estimate carries gradients back
//! to the model parameters during training.
//!
//! A query's region is the cartesian product of per-column allowed-code
//! sets ([`QueryRegion`]); wildcard columns keep their full domain and are
//! skipped by the progressive paths.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{NodeId, Tape, Tensor, NEG_INF};
use crate::error::{Error, Result};
use crate::model::{ResMadeModel, TapeParams};

/// Largest region exhaustive enumeration will walk by default.
pub const DEFAULT_ENUM_CAP: u128 = 1_000_000;

/// Below this, a truncated conditional is treated as having no mass: the
/// sample's estimate collapses to zero instead of erroring (a legal model
/// state early in training).
const ZERO_MASS: f64 = 1e-300;

/// Rows processed per forward pass on the inference paths.
const CHUNK: usize = 4096;

// ───────────────────────── query regions ─────────────────────────

/// Per-column allowed-code sets of one conjunctive query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRegion {
    cols: Vec<Vec<bool>>,
}

impl QueryRegion {
    /// The all-wildcard region over a schema.
    pub fn full(domain_sizes: &[usize]) -> QueryRegion {
        QueryRegion { cols: domain_sizes.iter().map(|&n| vec![true; n]).collect() }
    }

    pub fn col_count(&self) -> usize {
        self.cols.len()
    }

    /// Intersect a column's allowed set with `allowed`.
    pub fn restrict(&mut self, col: usize, allowed: &[bool]) -> Result<()> {
        let mask = &mut self.cols[col];
        if allowed.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "mask over {} codes for a domain of {}",
                allowed.len(),
                mask.len()
            )));
        }
        for (m, &a) in mask.iter_mut().zip(allowed) {
            *m &= a;
        }
        Ok(())
    }

    pub fn allowed(&self, col: usize) -> &[bool] {
        &self.cols[col]
    }

    pub fn allowed_count(&self, col: usize) -> usize {
        self.cols[col].iter().filter(|&&a| a).count()
    }

    pub fn allowed_codes(&self, col: usize) -> Vec<u32> {
        self.cols[col]
            .iter()
            .enumerate()
            .filter_map(|(c, &a)| a.then_some(c as u32))
            .collect()
    }

    pub fn is_wildcard(&self, col: usize) -> bool {
        self.cols[col].iter().all(|&a| a)
    }

    /// True if some column admits no code at all (contradictory predicates).
    pub fn is_empty(&self) -> bool {
        (0..self.cols.len()).any(|c| self.allowed_count(c) == 0)
    }

    /// Number of tuples in the region, Π_i |R_i|.
    pub fn size(&self) -> u128 {
        (0..self.cols.len()).map(|c| self.allowed_count(c) as u128).product()
    }

    pub fn contains(&self, tuple: &[u32]) -> bool {
        tuple.len() == self.cols.len()
            && tuple.iter().zip(&self.cols).all(|(&code, mask)| mask[code as usize])
    }
}

// ───────────────────────── sampling configuration ─────────────────────────

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Samples per query.
    pub samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { tau: 1.0, samples: 200, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.samples == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Source of Gumbel(0,1) noise. Training draws fresh uniforms; gradient
/// checks record one run and replay the identical stream around perturbed
/// evaluations.
pub struct GumbelNoise<'a> {
    source: NoiseSource<'a>,
    recorded: Vec<f64>,
    recording: bool,
}

enum NoiseSource<'a> {
    Rng(&'a mut ChaCha12Rng),
    Replay { vals: &'a [f64], pos: usize },
}

impl<'a> GumbelNoise<'a> {
    pub fn draw(rng: &'a mut ChaCha12Rng) -> Self {
        GumbelNoise { source: NoiseSource::Rng(rng), recorded: Vec::new(), recording: false }
    }

    /// Draw fresh noise while keeping the raw uniforms for later replay.
    pub fn record(rng: &'a mut ChaCha12Rng) -> Self {
        GumbelNoise { source: NoiseSource::Rng(rng), recorded: Vec::new(), recording: true }
    }

    pub fn replay(vals: &'a [f64]) -> Self {
        GumbelNoise { source: NoiseSource::Replay { vals, pos: 0 }, recorded: Vec::new(), recording: false }
    }

    /// g = −log(−log u), with u clamped away from {0,1} so g stays finite.
    pub fn gumbel(&mut self) -> f64 {
        let u: f64 = match &mut self.source {
            NoiseSource::Rng(rng) => rng.random(),
            NoiseSource::Replay { vals, pos } => {
                let u = *vals.get(*pos).expect("gumbel replay stream exhausted");
                *pos += 1;
                u
            }
        };
        if self.recording {
            self.recorded.push(u);
        }
        let u = u.clamp(1e-12, 1.0 - 1e-12);
        -(-u.ln()).ln()
    }

    pub fn into_recorded(self) -> Vec<f64> {
        self.recorded
    }
}

/// Gumbel-Softmax: y = softmax((logπ + g)/τ) per row, one fresh g per
/// entry. Entries at the masking floor keep exactly zero mass; gradients
/// flow to `logpi` through the softmax only (the noise is a constant).
pub fn gs_sample(tape: &mut Tape, logpi: NodeId, tau: f64, noise: &mut GumbelNoise) -> Result<NodeId> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (r, c) = {
        let v = tape.value(logpi);
        (v.rows(), v.cols())
    };
    let g = Tensor::new(r, c, (0..r * c).map(|_| noise.gumbel()).collect());
    let gn = tape.constant(g);
    let z = tape.add(logpi, gn)?;
    let z = tape.scale(z, 1.0 / tau);
    tape.softmax(z)
}

// ───────────────────────── inference estimators ─────────────────────────

/// Log joint density of a batch of full tuples under the model (flat
/// [rows×n] codes), teacher-forced in one pass.
fn batch_log_density(model: &ResMadeModel, codes: &[u32]) -> Result<Vec<f64>> {
    let n = model.encoding.col_count();
    let rows = codes.len() / n;
    let mut tape = Tape::new();
    let tp = model.params_on_tape(&mut tape, false);
    let x = model.encode_batch(&mut tape, codes, &[])?;
    let trunk = model.trunk(&mut tape, &tp, x)?;
    let mut out = vec![0.0; rows];
    for r in 0..n {
        let col = model.ordering()[r];
        let logits = model.head(&mut tape, &tp, trunk, r)?;
        let ls = tape.log_softmax(logits)?;
        let idx: Vec<u32> = (0..rows).map(|i| codes[i * n + col]).collect();
        let picked = tape.gather_cols(ls, &idx)?;
        for (o, &v) in out.iter_mut().zip(&tape.value(picked).data) {
            *o += v;
        }
    }
    Ok(out)
}

/// Exact selectivity under the model: Σ_{x ∈ region} p̂(x). Refuses regions
/// larger than `cap` tuples.
pub fn exhaustive_estimate(model: &ResMadeModel, region: &QueryRegion, cap: u128) -> Result<f64> {
    let size = region.size();
    if size == 0 {
        return Ok(0.0);
    }
    if size > cap {
        return Err(Error::RegionTooLarge { size, cap });
    }
    let n = region.col_count();
    let codes: Vec<Vec<u32>> = (0..n).map(|c| region.allowed_codes(c)).collect();

    let mut total = 0.0;
    let mut odometer = vec![0usize; n];
    let mut buf: Vec<u32> = Vec::with_capacity(CHUNK * n);
    let mut remaining = size as usize;
    while remaining > 0 {
        buf.clear();
        let batch = remaining.min(CHUNK);
        for _ in 0..batch {
            buf.extend(odometer.iter().enumerate().map(|(c, &i)| codes[c][i]));
            // Advance the odometer, least-significant column last.
            for c in (0..n).rev() {
                odometer[c] += 1;
                if odometer[c] < codes[c].len() {
                    break;
                }
                odometer[c] = 0;
            }
        }
        total += batch_log_density(model, &buf)?.iter().map(|&lp| lp.exp()).sum::<f64>();
        remaining -= batch;
    }
    Ok(total)
}

/// Monte-Carlo over the region with uniform proposals:
/// (|region|/S) · Σ_s p̂(x^s).
pub fn uniform_sample_estimate(
    model: &ResMadeModel,
    region: &QueryRegion,
    samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let size = region.size();
    if size == 0 {
        return Ok(0.0);
    }
    let n = region.col_count();
    let codes: Vec<Vec<u32>> = (0..n).map(|c| region.allowed_codes(c)).collect();

    let mut total = 0.0;
    let mut done = 0;
    let mut buf: Vec<u32> = Vec::with_capacity(CHUNK * n);
    while done < samples {
        let batch = (samples - done).min(CHUNK);
        buf.clear();
        for _ in 0..batch {
            for list in &codes {
                buf.push(list[rng.random_range(0..list.len())]);
            }
        }
        total += batch_log_density(model, &buf)?.iter().map(|&lp| lp.exp()).sum::<f64>();
        done += batch;
    }
    Ok(size as f64 / samples as f64 * total)
}

/// Per-sample progressive-sampling estimates (hard categorical draws from
/// each truncated conditional). [`progressive_sample_estimate`] is their
/// mean; the raw values let callers estimate Monte-Carlo error.
pub fn progressive_sample_values(
    model: &ResMadeModel,
    region: &QueryRegion,
    samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if region.col_count() != model.encoding.col_count() {
        return Err(Error::Dimension(format!(
            "region covers {} columns, model has {}",
            region.col_count(),
            model.encoding.col_count()
        )));
    }
    if region.is_empty() {
        return Ok(vec![0.0; samples]);
    }
    let enc = &model.encoding;
    let in_w = enc.total_width;

    let mut values = Vec::with_capacity(samples);
    let mut done = 0;
    while done < samples {
        let batch = (samples - done).min(CHUNK);
        let mut rows = vec![-1.0; batch * in_w];
        let mut factors = vec![1.0; batch];

        for rank in 0..enc.col_count() {
            let col = model.ordering()[rank];
            if region.is_wildcard(col) {
                continue;
            }
            let allowed = region.allowed(col);

            let mut tape = Tape::new();
            let tp = model.params_on_tape(&mut tape, false);
            let x = tape.constant(Tensor::new(batch, in_w, rows.clone()));
            let trunk = model.trunk(&mut tape, &tp, x)?;
            let logits = model.head(&mut tape, &tp, trunk, rank)?;
            let probs = tape.softmax(logits)?;
            let width = enc.domain_size(col);
            let pdata = &tape.value(probs).data;

            for i in 0..batch {
                let row = &pdata[i * width..(i + 1) * width];
                let mass: f64 = row
                    .iter()
                    .zip(allowed)
                    .filter_map(|(&p, &a)| a.then_some(p))
                    .sum();
                let code = if mass <= ZERO_MASS {
                    factors[i] = 0.0;
                    allowed.iter().position(|&a| a).unwrap() as u32
                } else {
                    factors[i] *= mass;
                    // Inverse-CDF draw over the truncated, renormalized
                    // conditional.
                    let u: f64 = rng.random();
                    let mut cum = 0.0;
                    let mut chosen = None;
                    for (c, (&p, &a)) in row.iter().zip(allowed).enumerate() {
                        if a {
                            cum += p / mass;
                            if u <= cum {
                                chosen = Some(c as u32);
                                break;
                            }
                        }
                    }
                    chosen.unwrap_or_else(|| {
                        // Rounding can leave cum fractionally below 1.
                        allowed.iter().rposition(|&a| a).unwrap() as u32
                    })
                };
                let bits = enc.binary_encode(col, code)?;
                let off = i * in_w + enc.offset(col);
                rows[off..off + bits.len()].copy_from_slice(&bits);
            }
        }
        values.extend(factors);
        done += batch;
    }
    Ok(values)
}

/// Inference-path range estimator: mean over S hard progressive samples of
/// Π_i P̂(X_i ∈ R_i | ẑ_{<i}).
pub fn progressive_sample_estimate(
    model: &ResMadeModel,
    region: &QueryRegion,
    samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let values = progressive_sample_values(model, region, samples, rng)?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

// ───────────────────────── differentiable path ─────────────────────────

/// Differentiable progressive sampling for a batch of queries on one tape.
///
/// Lays out Q·S rows (query-major), walks columns in model order, and for
/// every query filtering that column: computes the conditional logits from
/// the partially materialized encoding, accumulates the log in-region mass,
/// renormalizes the truncated conditional in log space, soft-samples it via
/// Gumbel-Softmax, and writes the sample's expected encoding into the rows.
/// Returns the [Q×1] node of per-query mean estimates, differentiable with
/// respect to anything `tp` tracks.
pub fn dps_estimate_batch(
    model: &ResMadeModel,
    tape: &mut Tape,
    tp: &TapeParams,
    regions: &[&QueryRegion],
    config: &SamplerConfig,
    noise: &mut GumbelNoise,
) -> Result<NodeId> {
    config.validate()?;
    if regions.is_empty() {
        return Err(Error::Config("no queries in batch".into()));
    }
    let enc = &model.encoding;
    let n = enc.col_count();
    for region in regions {
        if region.col_count() != n {
            return Err(Error::Dimension(format!(
                "region covers {} columns, model has {n}",
                region.col_count()
            )));
        }
        if region.is_empty() {
            return Err(Error::Config("empty region cannot be sampled".into()));
        }
    }

    let q = regions.len();
    let s = config.samples;
    let rows = q * s;
    let mut x = tape.constant(Tensor::full(rows, enc.total_width, -1.0));
    let mut total: Option<NodeId> = None;

    for rank in 0..n {
        let col = model.ordering()[rank];
        let filt: Vec<u32> = (0..q)
            .filter(|&qi| !regions[qi].is_wildcard(col))
            .flat_map(|qi| (qi * s..(qi + 1) * s).map(|r| r as u32))
            .collect();
        if filt.is_empty() {
            continue;
        }

        let sel = tape.select_rows(x, &filt)?;
        let trunk = model.trunk(tape, tp, sel)?;
        let logits = model.head(tape, tp, trunk, rank)?;

        let width = enc.domain_size(col);
        let mut mask = Vec::with_capacity(filt.len() * width);
        for &row in &filt {
            let allowed = regions[row as usize / s].allowed(col);
            mask.extend(allowed.iter().map(|&a| !a));
        }
        let masked = tape.masked_fill(logits, &mask, NEG_INF)?;

        // log P(Z ∈ R | z_<) = logΣexp(masked) − logΣexp(raw).
        let lse_masked = tape.log_sum_exp_rows(masked)?;
        let lse_raw = tape.log_sum_exp_rows(logits)?;
        let logmass = tape.sub(lse_masked, lse_raw)?;
        let placed = tape.scatter_rows(logmass, &filt, rows, 0.0)?;
        total = Some(match total {
            None => placed,
            Some(t) => tape.add(t, placed)?,
        });

        // Truncate, renormalize in log space, soft-sample, and feed the
        // expected encoding forward.
        let renorm = tape.log_softmax(masked)?;
        let y = gs_sample(tape, renorm, config.tau, noise)?;
        let enc_mat = tape.constant(enc.enc_matrix(col));
        let vals = tape.matmul(y, enc_mat)?;
        x = tape.scatter_assign_cols(x, vals, &filt, enc.offset(col))?;
    }

    let p = match total {
        None => tape.constant(Tensor::full(rows, 1, 1.0)), // all-wildcard batch
        Some(t) => tape.exp(t),
    };
    let grouped = tape.reshape(p, q, s)?;
    Ok(tape.mean_rows(grouped))
}

/// Single-query DPS estimate: a [1×1] differentiable selectivity node.
pub fn dps_estimate(
    model: &ResMadeModel,
    tape: &mut Tape,
    tp: &TapeParams,
    region: &QueryRegion,
    config: &SamplerConfig,
    noise: &mut GumbelNoise,
) -> Result<NodeId> {
    dps_estimate_batch(model, tape, tp, &[region], config, noise)
}
