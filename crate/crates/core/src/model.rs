//! Masked residual autoregressive network (ResMADE).
//!
//! One network holds the full factorization P(x) = Π_i P(x_i | x_<i) under a
//! fixed column ordering. Autoregressivity is enforced structurally: every
//! weight matrix is elementwise-multiplied by a 0/1 mask built so the logits
//! for the column at rank r depend only on input bits of ranks strictly
//! below r. The masks participate in the graph as constant multipliers, so
//! masked weights receive exactly zero gradient and never move.
//!
//! The trunk is an input projection followed by residual blocks of two
//! masked linear layers (`h ← h + W₂·relu(W₁·relu(h))`); each column then
//! has its own output head of width |A_i| read off `relu(h)`. Computing a
//! single head costs one trunk pass plus that head's matmul only, which the
//! progressive sampler leans on heavily.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::{bit_width_for, EncodedTable, InputEncoding};
use crate::error::{Error, Result};

const MODEL_MAGIC: &[u8; 4] = b"UAE1";
const MODEL_VERSION: u32 = 1;

/// RNG stream used for parameter initialization (data and query sampling use
/// streams 0 and 1; estimation uses 1000+).
const INIT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    /// `ordering[r]` is the column predicted at rank r. Empty means the
    /// identity (left-to-right) order.
    pub ordering: Vec<usize>,
    pub residual: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_layers: 2,
            hidden_units: 128,
            ordering: Vec::new(),
            residual: true,
            seed: 0,
        }
    }
}

/// Parameter handles registered on a tape for one forward/backward pass.
///
/// `raw` are the stored tensors (read gradients from these); `effective` are
/// the mask-multiplied weights actually used in matmuls (identical node for
/// biases, which carry no mask).
pub struct TapeParams {
    pub raw: Vec<NodeId>,
    effective: Vec<NodeId>,
}

pub struct ResMadeModel {
    pub config: ModelConfig,
    pub encoding: InputEncoding,
    pub column_names: Vec<String>,
    /// Tuple count of the training table; estimators floor at 1/row_count.
    pub row_count: u64,
    /// Hash of the training table's dictionaries, to refuse mismatched
    /// tables at estimation time.
    pub dict_hash: u64,
    rank_of: Vec<usize>,
    n_layers: usize,
    params: Vec<Tensor>,
    masks: Vec<Option<Tensor>>,
}

impl ResMadeModel {
    /// Build a fresh model for a table, initializing parameters from the
    /// config seed.
    pub fn build(config: ModelConfig, table: &EncodedTable) -> Result<ResMadeModel> {
        ResMadeModel::build_from_schema(
            config,
            InputEncoding::new(&table.columns),
            table.columns.iter().map(|c| c.name.clone()).collect(),
            table.row_count() as u64,
            table.dict_hash(),
        )
    }

    pub fn build_from_schema(
        mut config: ModelConfig,
        encoding: InputEncoding,
        column_names: Vec<String>,
        row_count: u64,
        dict_hash: u64,
    ) -> Result<ResMadeModel> {
        let n = encoding.col_count();
        if config.hidden_units == 0 || config.hidden_layers == 0 {
            return Err(Error::Config("hidden_layers and hidden_units must be positive".into()));
        }
        if column_names.len() != n {
            return Err(Error::Config(format!(
                "{} column names for {n} columns",
                column_names.len()
            )));
        }
        if config.ordering.is_empty() {
            config.ordering = (0..n).collect();
        }
        let rank_of = invert_permutation(&config.ordering, n)?;

        // Residual blocks hold two masked layers each, so an odd layer count
        // rounds up to the next even.
        let n_layers = if config.residual {
            config.hidden_layers.div_ceil(2) * 2
        } else {
            config.hidden_layers
        };

        let mut model = ResMadeModel {
            config,
            encoding,
            column_names,
            row_count,
            dict_hash,
            rank_of,
            n_layers,
            params: Vec::new(),
            masks: Vec::new(),
        };
        model.build_masks();
        model.init_params();
        Ok(model)
    }

    fn n_cols(&self) -> usize {
        self.encoding.col_count()
    }

    pub fn ordering(&self) -> &[usize] {
        &self.config.ordering
    }

    pub fn rank_of(&self, col: usize) -> usize {
        self.rank_of[col]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Effective (mask-applied) parameter tensors, for inspection and
    /// independent-oracle tests.
    pub fn masked_params(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&self.masks)
            .map(|(p, m)| match m {
                None => p.clone(),
                Some(mask) => Tensor {
                    shape: p.shape.clone(),
                    data: p.data.iter().zip(&mask.data).map(|(w, m)| w * m).collect(),
                },
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    // ───────────────────────── construction ─────────────────────────

    /// MADE degree of hidden unit k: cycles over 0..n−1 (the ranks a unit is
    /// allowed to have seen).
    fn degree(&self, k: usize) -> usize {
        k % usize::max(1, self.n_cols() - 1)
    }

    fn build_masks(&mut self) {
        let n = self.n_cols();
        let h = self.config.hidden_units;
        let in_w = self.encoding.total_width;

        // Input layer: bit of column c connects to unit k iff the unit's
        // degree covers the column's rank.
        let mut m_in = Tensor::zeros(in_w, h);
        for c in 0..n {
            let rank = self.rank_of[c];
            for b in 0..self.encoding.width(c) {
                let row = self.encoding.offset(c) + b;
                for k in 0..h {
                    if self.degree(k) >= rank {
                        m_in.set(row, k, 1.0);
                    }
                }
            }
        }
        self.masks.push(Some(m_in));
        self.masks.push(None); // lin_in bias

        // Hidden layers: unit k2 may read k1 iff degree(k2) ≥ degree(k1).
        for _ in 0..self.n_layers {
            let mut m_hh = Tensor::zeros(h, h);
            for k1 in 0..h {
                for k2 in 0..h {
                    if self.degree(k2) >= self.degree(k1) {
                        m_hh.set(k1, k2, 1.0);
                    }
                }
            }
            self.masks.push(Some(m_hh));
            self.masks.push(None);
        }

        // Head at rank r reads units of degree < r; head 0 is bias-only.
        for r in 0..n {
            let width = self.encoding.domain_size(self.config.ordering[r]);
            let mut m_head = Tensor::zeros(h, width);
            for k in 0..h {
                if self.degree(k) < r {
                    for j in 0..width {
                        m_head.set(k, j, 1.0);
                    }
                }
            }
            self.masks.push(Some(m_head));
            self.masks.push(None);
        }
    }

    fn init_params(&mut self) {
        let mut rng = ChaCha12Rng::seed_from_u64(self.config.seed);
        rng.set_stream(INIT_STREAM);
        let h = self.config.hidden_units;
        let in_w = self.encoding.total_width;

        let mut shapes: Vec<(usize, usize)> = vec![(in_w, h), (1, h)];
        for _ in 0..self.n_layers {
            shapes.push((h, h));
            shapes.push((1, h));
        }
        for r in 0..self.n_cols() {
            let width = self.encoding.domain_size(self.config.ordering[r]);
            shapes.push((h, width));
            shapes.push((1, width));
        }

        self.params = shapes
            .iter()
            .map(|&(rows, cols)| {
                if rows == 1 {
                    Tensor::zeros(1, cols) // biases start at zero
                } else {
                    let bound = 1.0 / (rows as f64).sqrt();
                    let data =
                        (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(rows, cols, data)
                }
            })
            .collect();

        // Zero masked weights up front so the stored tensors are canonical;
        // masked gradients are exactly zero, so they stay that way.
        for (p, m) in self.params.iter_mut().zip(&self.masks) {
            if let Some(mask) = m {
                for (w, &m) in p.data.iter_mut().zip(&mask.data) {
                    *w *= m;
                }
            }
        }
    }

    fn head_base(&self) -> usize {
        2 + 2 * self.n_layers
    }

    // ───────────────────────── tape forward ─────────────────────────

    /// Register every parameter on `tape`. With `trainable` the raw nodes
    /// accumulate gradients; otherwise everything enters as constants and
    /// backward skips the whole subgraph.
    pub fn params_on_tape(&self, tape: &mut Tape, trainable: bool) -> TapeParams {
        let raw: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        self.tape_params_from(tape, &raw)
    }

    /// Wrap caller-registered parameter nodes (layout of [`Self::params`])
    /// with the connectivity masks. Lets gradient checks register perturbed
    /// tensors themselves and still run the masked forward pass.
    pub fn tape_params_from(&self, tape: &mut Tape, ids: &[NodeId]) -> TapeParams {
        let effective = ids
            .iter()
            .zip(&self.masks)
            .map(|(&id, m)| match m {
                None => id,
                Some(mask) => {
                    let mask_node = tape.constant(mask.clone());
                    tape.mul(id, mask_node).expect("mask shape matches weight")
                }
            })
            .collect();
        TapeParams { raw: ids.to_vec(), effective }
    }

    /// Shared trunk: encoded batch [B × input_width] → post-activation
    /// hidden state [B × hidden_units], ready for any head.
    pub fn trunk(&self, tape: &mut Tape, tp: &TapeParams, x: NodeId) -> Result<NodeId> {
        let width = tape.value(x).cols();
        if width != self.encoding.total_width {
            return Err(Error::Dimension(format!(
                "batch is {width} wide, encoding needs {}",
                self.encoding.total_width
            )));
        }
        let wx = tape.matmul(x, tp.effective[0])?;
        let mut h = tape.add_bias(wx, tp.effective[1])?;

        if self.config.residual {
            for block in 0..self.n_layers / 2 {
                let (l1, l2) = (2 * block, 2 * block + 1);
                let a = tape.relu(h);
                let z = tape.matmul(a, tp.effective[2 + 2 * l1])?;
                let z = tape.add_bias(z, tp.effective[3 + 2 * l1])?;
                let a2 = tape.relu(z);
                let z2 = tape.matmul(a2, tp.effective[2 + 2 * l2])?;
                let z2 = tape.add_bias(z2, tp.effective[3 + 2 * l2])?;
                h = tape.add(h, z2)?;
            }
        } else {
            for l in 0..self.n_layers {
                let a = tape.relu(h);
                let z = tape.matmul(a, tp.effective[2 + 2 * l])?;
                h = tape.add_bias(z, tp.effective[3 + 2 * l])?;
            }
        }
        Ok(tape.relu(h))
    }

    /// Logits [B × |A_{ordering[r]}|] for the column at rank `r`.
    pub fn head(&self, tape: &mut Tape, tp: &TapeParams, trunk: NodeId, rank: usize) -> Result<NodeId> {
        let base = self.head_base() + 2 * rank;
        let z = tape.matmul(trunk, tp.effective[base])?;
        tape.add_bias(z, tp.effective[base + 1])
    }

    /// All heads at once (teacher forcing), indexed by rank.
    pub fn forward(&self, tape: &mut Tape, tp: &TapeParams, x: NodeId) -> Result<Vec<NodeId>> {
        let t = self.trunk(tape, tp, x)?;
        (0..self.n_cols()).map(|r| self.head(tape, tp, t, r)).collect()
    }

    /// Encode a batch of code tuples into a constant input node. `skip`
    /// (flat [B×n], or empty for none) wildcard-masks individual cells.
    pub fn encode_batch(&self, tape: &mut Tape, codes: &[u32], skip: &[bool]) -> Result<NodeId> {
        let n = self.n_cols();
        if codes.len() % n != 0 {
            return Err(Error::Dimension(format!("{} codes for {n} columns", codes.len())));
        }
        if !skip.is_empty() && skip.len() != codes.len() {
            return Err(Error::Dimension("skip mask must cover every cell".into()));
        }
        let rows = codes.len() / n;
        self.validate_codes(codes)?;
        let mut enc = vec![0.0; rows * self.encoding.total_width];
        for i in 0..rows {
            let row = &mut enc[i * self.encoding.total_width..(i + 1) * self.encoding.total_width];
            self.encoding.write_tuple(&codes[i * n..(i + 1) * n], row)?;
            for c in 0..n {
                if !skip.is_empty() && skip[i * n + c] {
                    let off = self.encoding.offset(c);
                    row[off..off + self.encoding.width(c)].fill(-1.0);
                }
            }
        }
        Ok(tape.constant(Tensor::new(rows, self.encoding.total_width, enc)))
    }

    fn validate_codes(&self, codes: &[u32]) -> Result<()> {
        let n = self.n_cols();
        for (i, &code) in codes.iter().enumerate() {
            let col = i % n;
            if code as usize >= self.encoding.domain_size(col) {
                return Err(Error::Dictionary(format!(
                    "code {code} out of domain {} for column {}",
                    self.encoding.domain_size(col),
                    self.column_names[col]
                )));
            }
        }
        Ok(())
    }

    /// Mean negative log-likelihood of a batch of tuples (flat [B×n] codes,
    /// natural log). Cells marked in `skip` are wildcarded on input and
    /// their own prediction terms are dropped from the sum.
    pub fn nll_loss(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        codes: &[u32],
        skip: &[bool],
    ) -> Result<NodeId> {
        let n = self.n_cols();
        let rows = codes.len() / n;
        let x = self.encode_batch(tape, codes, skip)?;
        let trunk = self.trunk(tape, tp, x)?;

        let mut total: Option<NodeId> = None;
        for r in 0..n {
            let col = self.config.ordering[r];
            let logits = self.head(tape, tp, trunk, r)?;
            let ls = tape.log_softmax(logits)?;
            let idx: Vec<u32> = (0..rows).map(|i| codes[i * n + col]).collect();
            let mut picked = tape.gather_cols(ls, &idx)?;
            if !skip.is_empty() {
                let keep: Vec<f64> = (0..rows)
                    .map(|i| if skip[i * n + col] { 0.0 } else { 1.0 })
                    .collect();
                let keep_node = tape.constant(Tensor::col(keep));
                picked = tape.mul(picked, keep_node)?;
            }
            total = Some(match total {
                None => picked,
                Some(t) => tape.add(t, picked)?,
            });
        }
        let total = total.expect("at least one column");
        let mean = tape.mean_all(total);
        Ok(tape.scale(mean, -1.0))
    }

    /// Joint probability of one fully specified tuple.
    pub fn density(&self, tuple: &[u32]) -> Result<f64> {
        if tuple.len() != self.n_cols() {
            return Err(Error::Dimension(format!(
                "tuple has {} codes, schema has {} columns",
                tuple.len(),
                self.n_cols()
            )));
        }
        let mut tape = Tape::new();
        let tp = self.params_on_tape(&mut tape, false);
        let nll = self.nll_loss(&mut tape, &tp, tuple, &[])?;
        Ok((-tape.scalar(nll)).exp())
    }

    // ───────────────────────── persistence ─────────────────────────

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;

        let n = self.n_cols();
        w.write_u32::<LittleEndian>(n as u32)?;
        for c in 0..n {
            w.write_u32::<LittleEndian>(self.column_names[c].len() as u32)?;
            w.write_all(self.column_names[c].as_bytes())?;
            w.write_u32::<LittleEndian>(self.encoding.domain_size(c) as u32)?;
            w.write_u32::<LittleEndian>(self.encoding.width(c) as u32)?;
        }
        for &col in &self.config.ordering {
            w.write_u32::<LittleEndian>(col as u32)?;
        }
        w.write_u64::<LittleEndian>(self.row_count)?;
        w.write_u64::<LittleEndian>(self.dict_hash)?;

        w.write_u32::<LittleEndian>(self.config.hidden_layers as u32)?;
        w.write_u32::<LittleEndian>(self.config.hidden_units as u32)?;
        w.write_u8(self.config.residual as u8)?;
        w.write_u64::<LittleEndian>(self.config.seed)?;

        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            w.write_u32::<LittleEndian>(p.rows() as u32)?;
            w.write_u32::<LittleEndian>(p.cols() as u32)?;
            for &x in &p.data {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ResMadeModel> {
        let mut r = BufReader::new(File::open(path.as_ref())?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format(format!(
                "{} is not a model file (bad magic)",
                path.as_ref().display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }

        let n = r.read_u32::<LittleEndian>()? as usize;
        if n == 0 {
            return Err(Error::Format("model has no columns".into()));
        }
        let mut names = Vec::with_capacity(n);
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            names.push(
                String::from_utf8(buf)
                    .map_err(|e| Error::Format(format!("column name not utf-8: {e}")))?,
            );
            let size = r.read_u32::<LittleEndian>()? as usize;
            let width = r.read_u32::<LittleEndian>()? as usize;
            if width != bit_width_for(size) {
                return Err(Error::Format(format!(
                    "column {}: stored width {width} does not fit domain {size}",
                    names.last().unwrap()
                )));
            }
            sizes.push(size);
        }
        let mut ordering = Vec::with_capacity(n);
        for _ in 0..n {
            ordering.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let row_count = r.read_u64::<LittleEndian>()?;
        let dict_hash = r.read_u64::<LittleEndian>()?;

        let config = ModelConfig {
            hidden_layers: r.read_u32::<LittleEndian>()? as usize,
            hidden_units: r.read_u32::<LittleEndian>()? as usize,
            ordering,
            residual: r.read_u8()? != 0,
            seed: r.read_u64::<LittleEndian>()?,
        };

        let mut model = ResMadeModel::build_from_schema(
            config,
            InputEncoding::from_domain_sizes(&sizes),
            names,
            row_count,
            dict_hash,
        )?;

        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "model stores {count} tensors, architecture has {}",
                model.params.len()
            )));
        }
        for p in model.params.iter_mut() {
            let rows = r.read_u32::<LittleEndian>()? as usize;
            let cols = r.read_u32::<LittleEndian>()? as usize;
            if rows != p.rows() || cols != p.cols() {
                return Err(Error::Format(format!(
                    "tensor shape {rows}×{cols} does not match architecture {}×{}",
                    p.rows(),
                    p.cols()
                )));
            }
            for x in p.data.iter_mut() {
                *x = r.read_f64::<LittleEndian>()?;
            }
        }
        Ok(model)
    }
}

fn invert_permutation(ordering: &[usize], n: usize) -> Result<Vec<usize>> {
    if ordering.len() != n {
        return Err(Error::Config(format!("ordering lists {} of {n} columns", ordering.len())));
    }
    let mut rank_of = vec![usize::MAX; n];
    for (rank, &col) in ordering.iter().enumerate() {
        if col >= n || rank_of[col] != usize::MAX {
            return Err(Error::Config(format!("ordering is not a permutation of 0..{n}")));
        }
        rank_of[col] = rank;
    }
    Ok(rank_of)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_err;

    /// Domain sizes shaped like the census table the paper reports on.
    const CENSUS_SIZES: [usize; 14] = [74, 9, 123, 16, 16, 7, 15, 6, 5, 2, 100, 92, 42, 41];

    fn tiny_model(sizes: &[usize], hidden: usize, ordering: Vec<usize>) -> ResMadeModel {
        let n = sizes.len();
        ResMadeModel::build_from_schema(
            ModelConfig {
                hidden_layers: 2,
                hidden_units: hidden,
                ordering,
                residual: true,
                seed: 7,
            },
            InputEncoding::from_domain_sizes(sizes),
            (0..n).map(|i| format!("c{i}")).collect(),
            1000,
            0xABCD,
        )
        .unwrap()
    }

    fn head_logits(model: &ResMadeModel, enc_row: &[f64]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let tp = model.params_on_tape(&mut tape, false);
        let x = tape.constant(Tensor::row(enc_row.to_vec()));
        let heads = model.forward(&mut tape, &tp, x).unwrap();
        heads.iter().map(|&h| tape.value(h).data.clone()).collect()
    }

    #[test]
    fn single_column_model_is_a_bias_only_marginal() {
        let model = tiny_model(&[5], 16, vec![]);
        let enc = model.encoding.clone();
        let a = head_logits(&model, &enc.binary_encode(0, 0).unwrap());
        let b = head_logits(&model, &enc.binary_encode(0, 4).unwrap());
        let w = head_logits(&model, &enc.wildcard_row());
        assert_eq!(a, b, "head 0 must ignore its own column's input");
        assert_eq!(a, w);
        // Fresh biases are zero, so the marginal starts uniform.
        assert!(a[0].iter().all(|&l| l == 0.0));
    }

    #[test]
    fn autoregressive_masking_is_exact_under_perturbation() {
        // Non-identity ordering: rank 0 → column 2, rank 1 → column 0,
        // rank 2 → column 1.
        let model = tiny_model(&[3, 4, 2], 16, vec![2, 0, 1]);
        let enc = model.encoding.clone();
        let mut rng = rand::rngs::StdRng::seed_from_u64(99);

        for _ in 0..1000 {
            let tuple: Vec<u32> = (0..3).map(|c| rng.random_range(0..enc.domain_size(c)) as u32).collect();
            let mut row = vec![0.0; enc.total_width];
            enc.write_tuple(&tuple, &mut row).unwrap();
            let base = head_logits(&model, &row);

            for rank in 0..3 {
                // Scramble the input bits of every column at rank ≥ rank.
                let mut perturbed = row.clone();
                for c in 0..3 {
                    if model.rank_of(c) >= rank {
                        let off = enc.offset(c);
                        for b in 0..enc.width(c) {
                            perturbed[off + b] = rng.random_range(-3.0..3.0);
                        }
                    }
                }
                let got = head_logits(&model, &perturbed);
                // Heads at ranks ≤ rank read only strictly smaller ranks,
                // all untouched — so they must match bit for bit.
                for r in 0..=rank {
                    assert_eq!(base[r], got[r], "head {r} moved under rank-{rank} scramble");
                }
            }
        }
    }

    #[test]
    fn heads_normalize_even_for_wildcard_inputs() {
        let model = tiny_model(&[3, 4, 2], 16, vec![]);
        let enc = model.encoding.clone();
        let mut tape = Tape::new();
        let tp = model.params_on_tape(&mut tape, false);
        let mut rows = Vec::new();
        rows.extend(enc.wildcard_row());
        let mut second = vec![0.0; enc.total_width];
        enc.write_tuple(&[2, 3, 1], &mut second).unwrap();
        rows.extend(second);
        let x = tape.constant(Tensor::new(2, enc.total_width, rows));
        for head in model.forward(&mut tape, &tp, x).unwrap() {
            let ls = tape.log_softmax(head).unwrap();
            let width = tape.value(ls).cols();
            for row in tape.value(ls).data.chunks_exact(width) {
                let mass: f64 = row.iter().map(|l| l.exp()).sum();
                assert!((mass - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|l| l.is_finite()));
            }
        }
    }

    #[test]
    fn census_sized_model_lands_near_the_expected_budget() {
        let model = tiny_model(&CENSUS_SIZES, 128, vec![]);
        let count = model.param_count();
        // ~131K 32-bit parameters ≈ 0.5MB; accept ±50%.
        assert!(
            (65_536..=196_608).contains(&count),
            "parameter count {count} outside the expected band"
        );
    }

    #[test]
    fn untrained_single_column_loss_is_ln_k() {
        let k = 7;
        let model = tiny_model(&[k], 32, vec![]);
        let codes: Vec<u32> = (0..k as u32).collect();
        let mut tape = Tape::new();
        let tp = model.params_on_tape(&mut tape, false);
        let loss = model.nll_loss(&mut tape, &tp, &codes, &[]).unwrap();
        assert!((tape.scalar(loss) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_an_independent_dense_forward() {
        // Recompute the whole network with plain loops from the effective
        // weights and compare: same trunk, same softmax, same mean.
        let model = tiny_model(&[3, 2, 4], 8, vec![]);
        let enc = model.encoding.clone();
        let codes: Vec<u32> = vec![2, 0, 3, 1, 1, 0];
        let masked = model.masked_params();

        let dense = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (rows, cols) = (w.rows(), w.cols());
            assert_eq!(x.len(), rows);
            (0..cols)
                .map(|j| (0..rows).map(|i| x[i] * w.get(i, j)).sum::<f64>() + b.data[j])
                .collect()
        };
        let relu = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| x.max(0.0)).collect() };

        let mut expected = 0.0;
        for row in codes.chunks_exact(3) {
            let mut x = vec![0.0; enc.total_width];
            enc.write_tuple(row, &mut x).unwrap();
            let mut h = dense(&x, &masked[0], &masked[1]);
            for block in 0..1 {
                let a = relu(&h);
                let z = dense(&a, &masked[2 + 4 * block], &masked[3 + 4 * block]);
                let a2 = relu(&z);
                let z2 = dense(&a2, &masked[4 + 4 * block], &masked[5 + 4 * block]);
                for (h, z) in h.iter_mut().zip(z2) {
                    *h += z;
                }
            }
            let t = relu(&h);
            for (r, &code) in row.iter().enumerate() {
                let base = 6 + 2 * r;
                let logits = dense(&t, &masked[base], &masked[base + 1]);
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                expected -= logits[code as usize] - lse;
            }
        }
        expected /= 2.0;

        let mut tape = Tape::new();
        let tp = model.params_on_tape(&mut tape, false);
        let loss = model.nll_loss(&mut tape, &tp, &codes, &[]).unwrap();
        assert!(
            (tape.scalar(loss) - expected).abs() < 1e-12,
            "{} vs oracle {expected}",
            tape.scalar(loss)
        );
    }

    #[test]
    fn density_sums_to_one_and_respects_wildcard_skipping() {
        let model = tiny_model(&[2, 3], 16, vec![]);
        let mut total = 0.0;
        for a in 0..2u32 {
            for b in 0..3u32 {
                total += model.density(&[a, b]).unwrap();
            }
        }
        assert!((total - 1.0).abs() < 1e-9, "total mass {total}");

        assert!(model.density(&[2, 0]).is_err(), "code beyond the domain");

        // Skipping column 0 must leave only column 1's term, conditioned on
        // the wildcard.
        let mut tape = Tape::new();
        let tp = model.params_on_tape(&mut tape, false);
        let skip = vec![true, false];
        let loss = model.nll_loss(&mut tape, &tp, &[1, 2], &skip).unwrap();

        let mut tape2 = Tape::new();
        let tp2 = model.params_on_tape(&mut tape2, false);
        let enc = model.encoding.clone();
        let mut row = vec![0.0; enc.total_width];
        enc.write_tuple(&[1, 2], &mut row).unwrap();
        row[0..enc.width(0)].fill(-1.0);
        let x = tape2.constant(Tensor::row(row));
        let t = model.trunk(&mut tape2, &tp2, x).unwrap();
        let logits = model.head(&mut tape2, &tp2, t, 1).unwrap();
        let ls = tape2.log_softmax(logits).unwrap();
        let manual = -tape2.value(ls).data[2];
        assert!((tape.scalar(loss) - manual).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let model = tiny_model(&[3, 2], 6, vec![]);
        let codes = vec![2u32, 1, 0, 0, 1, 1];
        // Fresh biases are exactly zero, which can park a pre-activation on
        // the ReLU kink where central differences disagree with the
        // subgradient by construction; nudge them off it.
        let mut params: Vec<Tensor> = model.params().to_vec();
        for p in params.iter_mut().filter(|p| p.rows() == 1) {
            p.data.fill(0.01);
        }
        let err = max_rel_err(
            &params,
            |tape, ids| {
                let tp = model.tape_params_from(tape, ids);
                model.nll_loss(tape, &tp, &codes, &[]).unwrap()
            },
            1e-5,
            1e-3,
        );
        assert!(err <= 1e-4, "nll FD error {err}");
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(&[5, 3, 2], 16, vec![1, 2, 0]);
        let path = dir.path().join("m.uae");
        model.save(&path).unwrap();
        let loaded = ResMadeModel::load(&path).unwrap();

        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.row_count, model.row_count);
        assert_eq!(loaded.dict_hash, model.dict_hash);
        assert_eq!(loaded.params().len(), model.params().len());
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        let path2 = dir.path().join("m2.uae");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.uae");
        std::fs::write(&junk, b"UAETnotamodel").unwrap();
        assert!(matches!(ResMadeModel::load(&junk), Err(Error::Format(_))));

        let model = tiny_model(&[4, 2], 8, vec![]);
        let path = dir.path().join("m.uae");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.uae");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(ResMadeModel::load(&cut).is_err());
    }

    #[test]
    fn bad_orderings_are_rejected() {
        let enc = InputEncoding::from_domain_sizes(&[2, 3]);
        for ordering in [vec![0, 0], vec![0, 2], vec![0]] {
            let out = ResMadeModel::build_from_schema(
                ModelConfig { ordering, ..ModelConfig::default() },
                enc.clone(),
                vec!["a".into(), "b".into()],
                10,
                0,
            );
            assert!(matches!(out, Err(Error::Config(_))));
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = tiny_model(&[3, 2], 8, vec![]);
        let mut tape = Tape::new();
        let tp = model.params_on_tape(&mut tape, false);
        let x = tape.constant(Tensor::row(vec![0.0; 99]));
        assert!(model.forward(&mut tape, &tp, x).is_err());
    }
}
