//! Table ingestion and tuple encoding.
//!
//! Every column gets a dictionary mapping its distinct values, in natural
//! sort order, onto the codes `0..|A_i|`. Tuples become rows of integer
//! codes, and codes become fixed-width big-endian bit vectors when fed to
//! the model — `width_i = ceil(log2 |A_i|)` reals per column (minimum 1),
//! each 0.0 or 1.0. A reserved all-(−1.0) wildcard vector per column stands
//! for "this attribute is unconstrained"; it is linearly separable from
//! every valid bit pattern.

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const TABLE_MAGIC: &[u8; 4] = b"UAET";
const TABLE_VERSION: u32 = 1;

/// A raw cell value. The ordering (`Null` first, then numbers by value, then
/// strings lexicographically) defines the "natural order" dictionary codes
/// follow.
#[derive(Clone, Debug)]
pub enum Value {
    Null,
    Num(f64),
    Str(String),
}

impl Value {
    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Num(_) => 1,
            Value::Str(_) => 2,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Null => serde_json::Value::Null,
            Value::Num(x) => serde_json::json!(x),
            Value::Str(s) => serde_json::Value::String(s.clone()),
        }
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Value> {
        match v {
            serde_json::Value::Null => Ok(Value::Null),
            serde_json::Value::Number(n) => n
                .as_f64()
                .map(Value::Num)
                .ok_or_else(|| Error::Parse { row: 0, msg: format!("literal {n} is not a real") }),
            serde_json::Value::String(s) => Ok(Value::Str(s.clone())),
            other => Err(Error::Parse { row: 0, msg: format!("unsupported literal {other}") }),
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Num(a), Value::Num(b)) => a.total_cmp(b),
            (Value::Str(a), Value::Str(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => write!(f, "NULL"),
            Value::Num(x) => write!(f, "{x}"),
            Value::Str(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnKind {
    Categorical,
    Numeric,
}

impl ColumnKind {
    fn as_str(self) -> &'static str {
        match self {
            ColumnKind::Categorical => "categorical",
            ColumnKind::Numeric => "numeric",
        }
    }
}

/// Bits needed to address a domain of `n` values, with a floor of one so a
/// constant column still occupies a slot in the input encoding.
pub fn bit_width_for(n: usize) -> usize {
    if n <= 1 {
        1
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Sorted distinct values of one column; the value's position is its code.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnDictionary {
    pub name: String,
    pub kind: ColumnKind,
    values: Vec<Value>,
}

impl ColumnDictionary {
    /// Build from any bag of values; sorts and deduplicates.
    pub fn new(name: impl Into<String>, kind: ColumnKind, mut values: Vec<Value>) -> Self {
        values.sort();
        values.dedup();
        ColumnDictionary { name: name.into(), kind, values }
    }

    fn from_sorted(name: String, kind: ColumnKind, values: Vec<Value>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Format(format!("column {name}: empty dictionary")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format(format!("column {name}: dictionary not strictly sorted")));
        }
        Ok(ColumnDictionary { name, kind, values })
    }

    pub fn domain_size(&self) -> usize {
        self.values.len()
    }

    pub fn bit_width(&self) -> usize {
        bit_width_for(self.values.len())
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    /// Code of a value present in the dictionary.
    pub fn code_of(&self, v: &Value) -> Option<u32> {
        self.values.binary_search(v).ok().map(|i| i as u32)
    }

    pub fn value_of(&self, code: u32) -> &Value {
        &self.values[code as usize]
    }

    /// First code whose value is ≥ `v` (may equal the domain size). Lets
    /// range predicates resolve literals that are absent from the column.
    pub fn lower_bound(&self, v: &Value) -> u32 {
        self.values.partition_point(|x| x < v) as u32
    }

    /// First code whose value is > `v`.
    pub fn upper_bound(&self, v: &Value) -> u32 {
        self.values.partition_point(|x| x <= v) as u32
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(self.name.len() as u32)?;
        w.write_all(self.name.as_bytes())?;
        w.write_u8(match self.kind {
            ColumnKind::Categorical => 0,
            ColumnKind::Numeric => 1,
        })?;
        w.write_u32::<LittleEndian>(self.values.len() as u32)?;
        for v in &self.values {
            match v {
                Value::Null => w.write_u8(0)?,
                Value::Num(x) => {
                    w.write_u8(1)?;
                    w.write_u64::<LittleEndian>(x.to_bits())?;
                }
                Value::Str(s) => {
                    w.write_u8(2)?;
                    w.write_u32::<LittleEndian>(s.len() as u32)?;
                    w.write_all(s.as_bytes())?;
                }
            }
        }
        Ok(())
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let name = read_string(r)?;
        let kind = match r.read_u8()? {
            0 => ColumnKind::Categorical,
            1 => ColumnKind::Numeric,
            k => return Err(Error::Format(format!("column {name}: unknown kind tag {k}"))),
        };
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(match r.read_u8()? {
                0 => Value::Null,
                1 => Value::Num(f64::from_bits(r.read_u64::<LittleEndian>()?)),
                2 => Value::Str(read_string(r)?),
                t => return Err(Error::Format(format!("column {name}: unknown value tag {t}"))),
            });
        }
        ColumnDictionary::from_sorted(name, kind, values)
    }
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
}

/// CSV ingestion settings. `numeric_columns` lists the zero-based indices
/// parsed as reals; everything else is categorical.
#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub header: bool,
    pub delimiter: u8,
    pub numeric_columns: Vec<usize>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions { header: true, delimiter: b',', numeric_columns: Vec::new() }
    }
}

/// A relation encoded column-by-column into dictionary codes.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTable {
    pub columns: Vec<ColumnDictionary>,
    codes: Vec<u32>,
    row_count: usize,
}

impl EncodedTable {
    pub fn new(columns: Vec<ColumnDictionary>, codes: Vec<u32>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Format("table has no columns".into()));
        }
        if codes.len() % columns.len() != 0 {
            return Err(Error::Format(format!(
                "{} codes do not fill rows of {} columns",
                codes.len(),
                columns.len()
            )));
        }
        for (i, chunk) in codes.chunks_exact(columns.len()).enumerate() {
            for (c, (code, col)) in chunk.iter().zip(&columns).enumerate() {
                if *code as usize >= col.domain_size() {
                    return Err(Error::Format(format!(
                        "row {i} column {c}: code {code} out of domain {}",
                        col.domain_size()
                    )));
                }
            }
        }
        let row_count = codes.len() / columns.len();
        Ok(EncodedTable { columns, codes, row_count })
    }

    pub fn row_count(&self) -> usize {
        self.row_count
    }

    pub fn col_count(&self) -> usize {
        self.columns.len()
    }

    pub fn code(&self, row: usize, col: usize) -> u32 {
        self.codes[row * self.columns.len() + col]
    }

    pub fn row(&self, row: usize) -> &[u32] {
        let n = self.columns.len();
        &self.codes[row * n..(row + 1) * n]
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Scan a CSV file, build per-column dictionaries over the distinct
    /// values, and encode every tuple.
    pub fn ingest_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<EncodedTable> {
        let (names, tuples) = read_csv_tuples(path, options)?;
        let width = tuples[0].len();

        let columns: Vec<ColumnDictionary> = (0..width)
            .map(|c| {
                let kind = if options.numeric_columns.contains(&c) {
                    ColumnKind::Numeric
                } else {
                    ColumnKind::Categorical
                };
                let name =
                    names.get(c).cloned().unwrap_or_else(|| format!("col{c}"));
                ColumnDictionary::new(name, kind, tuples.iter().map(|t| t[c].clone()).collect())
            })
            .collect();

        let mut codes = Vec::with_capacity(tuples.len() * width);
        for tuple in &tuples {
            for (c, v) in tuple.iter().enumerate() {
                // Unwrap is safe: the dictionary was built from these values.
                codes.push(columns[c].code_of(v).unwrap());
            }
        }
        EncodedTable::new(columns, codes)
    }

    /// Encode tuples against the existing (frozen) dictionaries. Values
    /// outside a column's domain are rejected.
    pub fn encode_tuples(&self, tuples: &[Vec<Value>]) -> Result<Vec<u32>> {
        let width = self.columns.len();
        let mut out = Vec::with_capacity(tuples.len() * width);
        for (i, tuple) in tuples.iter().enumerate() {
            if tuple.len() != width {
                return Err(Error::Parse {
                    row: i + 1,
                    msg: format!("expected {width} fields, found {}", tuple.len()),
                });
            }
            for (c, v) in tuple.iter().enumerate() {
                let code = self.columns[c].code_of(v).ok_or_else(|| {
                    Error::Dictionary(format!(
                        "value {v} not in the domain of column {}",
                        self.columns[c].name
                    ))
                })?;
                out.push(code);
            }
        }
        Ok(out)
    }

    /// Encode new tuples against the existing dictionaries and append them;
    /// all-or-nothing on error.
    pub fn append_tuples(&mut self, tuples: &[Vec<Value>]) -> Result<()> {
        let extra = self.encode_tuples(tuples)?;
        self.codes.extend_from_slice(&extra);
        self.row_count = self.codes.len() / self.columns.len();
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(TABLE_MAGIC)?;
        w.write_u32::<LittleEndian>(TABLE_VERSION)?;
        w.write_u64::<LittleEndian>(self.row_count as u64)?;
        w.write_u32::<LittleEndian>(self.columns.len() as u32)?;
        for col in &self.columns {
            col.write_to(&mut w)?;
        }
        for &code in &self.codes {
            w.write_u32::<LittleEndian>(code)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EncodedTable> {
        let mut r = BufReader::new(File::open(path.as_ref())?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(Error::Format(format!(
                "{} is not a table file (bad magic)",
                path.as_ref().display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != TABLE_VERSION {
            return Err(Error::Format(format!("unsupported table version {version}")));
        }
        let row_count = r.read_u64::<LittleEndian>()? as usize;
        let col_count = r.read_u32::<LittleEndian>()? as usize;
        if col_count == 0 {
            return Err(Error::Format("table has no columns".into()));
        }
        let mut columns = Vec::with_capacity(col_count);
        for _ in 0..col_count {
            columns.push(ColumnDictionary::read_from(&mut r)?);
        }
        let mut codes = vec![0u32; row_count * col_count];
        r.read_u32_into::<LittleEndian>(&mut codes)?;
        EncodedTable::new(columns, codes)
    }

    /// FNV-1a over the serialized dictionaries; persisted with trained
    /// models so a model can refuse a table whose encoding differs.
    pub fn dict_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for col in &self.columns {
            col.write_to(&mut bytes).expect("in-memory write");
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// One entry per column: name, kind, domain size, encoded bit width.
    pub fn schema_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.columns
                .iter()
                .map(|c| {
                    serde_json::json!({
                        "name": c.name,
                        "kind": c.kind.as_str(),
                        "domain_size": c.domain_size(),
                        "bit_width": c.bit_width(),
                    })
                })
                .collect(),
        )
    }
}

fn parse_field(field: &str, numeric: bool, row: usize) -> Result<Value> {
    let trimmed = field.trim();
    if trimmed.is_empty() {
        return Ok(Value::Null);
    }
    if numeric {
        trimmed
            .parse::<f64>()
            .map(Value::Num)
            .map_err(|_| Error::Parse { row, msg: format!("'{trimmed}' is not numeric") })
    } else {
        Ok(Value::Str(trimmed.to_string()))
    }
}

/// Parse a CSV file into raw value tuples (plus header names, if any),
/// without building dictionaries. Rows must be rectangular; an empty file
/// is an error.
pub fn read_csv_tuples(
    path: impl AsRef<Path>,
    options: &CsvOptions,
) -> Result<(Vec<String>, Vec<Vec<Value>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.header)
        .delimiter(options.delimiter)
        .flexible(true)
        .from_path(path.as_ref())?;

    let names: Vec<String> = if options.header {
        reader.headers()?.iter().map(str::to_string).collect()
    } else {
        Vec::new()
    };

    let mut width = names.len();
    let mut tuples: Vec<Vec<Value>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        if width == 0 {
            width = record.len();
        } else if record.len() != width {
            return Err(Error::Parse {
                row,
                msg: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let mut tuple = Vec::with_capacity(width);
        for (c, field) in record.iter().enumerate() {
            tuple.push(parse_field(field, options.numeric_columns.contains(&c), row)?);
        }
        tuples.push(tuple);
    }
    if tuples.is_empty() {
        return Err(Error::Parse { row: 0, msg: "table has no rows".into() });
    }
    Ok((names, tuples))
}

/// Fixed layout of the model's input row: column i owns the slice
/// `offset(i) .. offset(i) + width(i)`.
#[derive(Clone, Debug)]
pub struct InputEncoding {
    domain_sizes: Vec<usize>,
    widths: Vec<usize>,
    offsets: Vec<usize>,
    pub total_width: usize,
}

impl InputEncoding {
    pub fn from_domain_sizes(domain_sizes: &[usize]) -> Self {
        let widths: Vec<usize> = domain_sizes.iter().map(|&n| bit_width_for(n)).collect();
        let mut offsets = Vec::with_capacity(widths.len());
        let mut off = 0;
        for &w in &widths {
            offsets.push(off);
            off += w;
        }
        InputEncoding {
            domain_sizes: domain_sizes.to_vec(),
            widths,
            offsets,
            total_width: off,
        }
    }

    pub fn new(columns: &[ColumnDictionary]) -> Self {
        let sizes: Vec<usize> = columns.iter().map(ColumnDictionary::domain_size).collect();
        InputEncoding::from_domain_sizes(&sizes)
    }

    pub fn col_count(&self) -> usize {
        self.widths.len()
    }

    pub fn width(&self, col: usize) -> usize {
        self.widths[col]
    }

    pub fn offset(&self, col: usize) -> usize {
        self.offsets[col]
    }

    pub fn domain_size(&self, col: usize) -> usize {
        self.domain_sizes[col]
    }

    /// Big-endian bits of `code` as 0.0/1.0 reals, exactly `width(col)` of
    /// them.
    pub fn binary_encode(&self, col: usize, code: u32) -> Result<Vec<f64>> {
        let w = self.widths[col];
        if (code as u64) >= (1u64 << w) {
            return Err(Error::Dimension(format!("code {code} needs more than {w} bits")));
        }
        Ok((0..w).map(|b| ((code >> (w - 1 - b)) & 1) as f64).collect())
    }

    /// Inverse of [`InputEncoding::binary_encode`] for exact 0.0/1.0 inputs.
    pub fn decode(&self, col: usize, bits: &[f64]) -> u32 {
        debug_assert_eq!(bits.len(), self.widths[col]);
        bits.iter().fold(0u32, |acc, &b| (acc << 1) | (b as u32))
    }

    /// The column's reserved "unconstrained" token.
    pub fn wildcard(&self, col: usize) -> Vec<f64> {
        vec![-1.0; self.widths[col]]
    }

    /// A full input row with every column wildcarded.
    pub fn wildcard_row(&self) -> Vec<f64> {
        vec![-1.0; self.total_width]
    }

    /// Encode one tuple of codes into `out` (length `total_width`).
    pub fn write_tuple(&self, codes: &[u32], out: &mut [f64]) -> Result<()> {
        if codes.len() != self.widths.len() {
            return Err(Error::Dimension(format!(
                "tuple has {} codes, schema has {} columns",
                codes.len(),
                self.widths.len()
            )));
        }
        if out.len() != self.total_width {
            return Err(Error::Dimension(format!(
                "output slice {} wide, encoding needs {}",
                out.len(),
                self.total_width
            )));
        }
        for (col, &code) in codes.iter().enumerate() {
            let bits = self.binary_encode(col, code)?;
            out[self.offsets[col]..self.offsets[col] + self.widths[col]].copy_from_slice(&bits);
        }
        Ok(())
    }

    /// The [|A_i| × w_i] matrix whose row c is `binary_encode(c)`. A
    /// distribution row-vector times this matrix is its expected encoding,
    /// which keeps the soft-sample path linear (and differentiable).
    pub fn enc_matrix(&self, col: usize) -> Tensor {
        let n = self.domain_sizes[col];
        let w = self.widths[col];
        let mut data = Vec::with_capacity(n * w);
        for code in 0..n {
            data.extend(self.binary_encode(col, code as u32).expect("code within domain"));
        }
        Tensor::new(n, w, data)
    }

    /// Σ_c dist[c] · binary_encode(c), validating that `dist` is a proper
    /// distribution over the column's domain.
    pub fn expected_encoding(&self, col: usize, dist: &[f64]) -> Result<Vec<f64>> {
        let n = self.domain_sizes[col];
        if dist.len() != n {
            return Err(Error::Dimension(format!(
                "distribution over {} values, domain has {n}",
                dist.len()
            )));
        }
        if dist.iter().any(|&p| p < 0.0) {
            return Err(Error::Numeric("distribution has a negative entry".into()));
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("distribution mass {total} is not 1")));
        }
        let w = self.widths[col];
        let mut out = vec![0.0; w];
        for (code, &p) in dist.iter().enumerate() {
            for (b, o) in out.iter_mut().enumerate() {
                *o += p * ((code >> (w - 1 - b)) & 1) as f64;
            }
        }
        Ok(out)
    }
}
