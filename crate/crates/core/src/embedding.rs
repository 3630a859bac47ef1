//! Client-side index encoding and server-side packed embedding lookup.
//!
//! An index into a large table is digit-decomposed in base p client-side,
//! turning one k-row table into l sub-tables of p rows whose selected rows
//! sum to the embedding (exponential compression, deterministic mapping, no
//! code tables shipped to the client). Multiple tables are packed
//! corner-to-corner along a block diagonal so a single matrix-vector
//! product looks every table up at once and lands the results in contiguous
//! output slots. The whole lookup consumes one multiplicative level.

use crate::error::{Error, Result};
use crate::linalg::{diagonalize, matvec_bsgs, plan_bsgs, BsgsPlan, DiagonalizedMatrix, Matrix};
use crate::vm::{ciphertexts_needed, CipherVec, PlainVec, Vm};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Ledger phase tag for the packed lookup's matrix-vector products.
pub const PHASE_BSGS: &str = "bsgs";

/// One embedding table: k rows of dimension d.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table_id: String,
    pub k: usize,
    pub d: usize,
    pub weights: Matrix,
}

impl EmbeddingTable {
    pub fn new(table_id: &str, weights: Matrix) -> Self {
        EmbeddingTable {
            table_id: table_id.to_string(),
            k: weights.rows,
            d: weights.cols,
            weights,
        }
    }

    /// Seeded uniform init in [-1/sqrt(d), 1/sqrt(d)].
    pub fn random(table_id: &str, k: usize, d: usize, seed: u64) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingTable::new(table_id, Matrix::random_uniform(k, d, bound, &mut rng))
    }
}

/// Base-p digit compression parameters for one table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionSpec {
    /// Digit base p >= 2.
    pub base: usize,
    /// Digit count; p^num_digits must cover the table's rows.
    pub num_digits: usize,
}

impl CompressionSpec {
    /// Minimal digit count for k rows: the smallest l with p^l >= k.
    pub fn minimal(base: usize, k: usize) -> Result<Self> {
        if base < 2 {
            return Err(Error::Parameter(format!("digit base {base} must be >= 2")));
        }
        let mut num_digits = 0usize;
        let mut reach = 1u128;
        while reach < k as u128 {
            reach *= base as u128;
            num_digits += 1;
        }
        Ok(CompressionSpec {
            base,
            num_digits: num_digits.max(1),
        })
    }

    /// Rows after compression: p * l.
    pub fn compressed_rows(&self) -> usize {
        self.base * self.num_digits
    }

    fn capacity(&self) -> u128 {
        (self.base as u128).saturating_pow(self.num_digits as u32)
    }

    pub fn validate_for(&self, k: usize) -> Result<()> {
        if self.base < 2 || self.num_digits < 1 {
            return Err(Error::Parameter(format!(
                "compression needs base >= 2 and at least one digit, got p={} l={}",
                self.base, self.num_digits
            )));
        }
        if self.capacity() < k as u128 {
            return Err(Error::Parameter(format!(
                "{} digits in base {} cover {} rows < k = {k}",
                self.num_digits,
                self.base,
                self.capacity()
            )));
        }
        Ok(())
    }
}

/// One-hot encoding of i in Z_k.
pub fn one_hot(i: usize, k: usize) -> Result<Vec<f64>> {
    if i >= k {
        return Err(Error::Index(format!("index {i} outside table of {k} rows")));
    }
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    Ok(v)
}

/// Base-p digits of i, least-significant first, zero-padded to num_digits.
pub fn digit_decompose(i: usize, base: usize, num_digits: usize) -> Result<Vec<usize>> {
    let capacity = (base as u128).saturating_pow(num_digits as u32);
    if (i as u128) >= capacity {
        return Err(Error::Index(format!(
            "index {i} outside {num_digits}-digit base-{base} range"
        )));
    }
    let mut digits = Vec::with_capacity(num_digits);
    let mut rest = i;
    for _ in 0..num_digits {
        digits.push(rest % base);
        rest /= base;
    }
    Ok(digits)
}

/// Inverse of [`digit_decompose`]; test oracle.
pub fn digit_recompose(digits: &[usize], base: usize) -> usize {
    digits.iter().rev().fold(0usize, |acc, &d| acc * base + d)
}

/// A compressed table: l sub-tables of p rows each, stacked vertically.
#[derive(Debug, Clone)]
pub struct CodedTableStack {
    pub parent_id: String,
    pub spec: CompressionSpec,
    pub d: usize,
    pub sub_tables: Vec<Matrix>,
    /// (p * l) x d vertical concatenation; row t*p + r is sub-table t row r.
    pub stacked: Matrix,
}

impl CodedTableStack {
    /// Compositional lookup: the sum of the digit-selected sub-table rows.
    pub fn lookup(&self, i: usize) -> Result<Vec<f64>> {
        let digits = digit_decompose(i, self.spec.base, self.spec.num_digits)?;
        let mut out = vec![0.0; self.d];
        for (t, &digit) in digits.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.sub_tables[t].row(digit)) {
                *o += w;
            }
        }
        Ok(out)
    }
}

/// Builds the compressed parameterization of a table. Sub-table weights are
/// freshly initialized (training them is outside this crate); lookups are
/// defined compositionally over the sub-tables.
pub fn compress_table(
    table: &EmbeddingTable,
    spec: CompressionSpec,
    seed: u64,
) -> Result<CodedTableStack> {
    CodedTableStack::random(&table.table_id, table.k, table.d, spec, seed)
}

impl CodedTableStack {
    /// Fresh seeded stack covering k rows, without materializing the
    /// uncompressed table it replaces.
    pub fn random(
        parent_id: &str,
        k: usize,
        d: usize,
        spec: CompressionSpec,
        seed: u64,
    ) -> Result<CodedTableStack> {
        spec.validate_for(k)?;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub_tables: Vec<Matrix> = (0..spec.num_digits)
            .map(|_| Matrix::random_uniform(spec.base, d, bound, &mut rng))
            .collect();
        let mut stacked = Matrix::zeros(spec.compressed_rows(), d);
        for (t, sub) in sub_tables.iter().enumerate() {
            stacked.paste(sub, t * spec.base, 0);
        }
        Ok(CodedTableStack {
            parent_id: parent_id.to_string(),
            spec,
            d,
            sub_tables,
            stacked,
        })
    }
}

/// A table as it enters the packed layout: full or digit-compressed.
#[derive(Debug, Clone)]
pub enum PackedTable {
    Full(EmbeddingTable),
    Coded(CodedTableStack),
}

impl PackedTable {
    pub fn id(&self) -> &str {
        match self {
            PackedTable::Full(t) => &t.table_id,
            PackedTable::Coded(c) => &c.parent_id,
        }
    }

    /// Rows occupied in the packed matrix (and one-hot slots required).
    pub fn packed_rows(&self) -> usize {
        match self {
            PackedTable::Full(t) => t.k,
            PackedTable::Coded(c) => c.spec.compressed_rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PackedTable::Full(t) => t.d,
            PackedTable::Coded(c) => c.d,
        }
    }

    /// Valid index range of the original table.
    pub fn index_space(&self) -> usize {
        match self {
            PackedTable::Full(t) => t.k,
            PackedTable::Coded(c) => c.spec.capacity().min(usize::MAX as u128) as usize,
        }
    }

    fn matrix(&self) -> &Matrix {
        match self {
            PackedTable::Full(t) => &t.weights,
            PackedTable::Coded(c) => &c.stacked,
        }
    }

    /// Plaintext lookup oracle.
    pub fn lookup(&self, i: usize) -> Result<Vec<f64>> {
        match self {
            PackedTable::Full(t) => {
                if i >= t.k {
                    return Err(Error::Index(format!(
                        "index {i} outside table '{}' of {} rows",
                        t.table_id, t.k
                    )));
                }
                Ok(t.weights.row(i).to_vec())
            }
            PackedTable::Coded(c) => c.lookup(i),
        }
    }

    /// The client-side binary encoding: a single one-hot for full tables,
    /// one one-hot per digit for compressed ones.
    pub fn encode(&self, i: usize) -> Result<Vec<f64>> {
        match self {
            PackedTable::Full(t) => one_hot(i, t.k),
            PackedTable::Coded(c) => {
                let digits = digit_decompose(i, c.spec.base, c.spec.num_digits)?;
                let mut out = Vec::with_capacity(c.spec.compressed_rows());
                for digit in digits {
                    out.extend(one_hot(digit, c.spec.base)?);
                }
                Ok(out)
            }
        }
    }
}

/// Placement of one table inside the packed block-diagonal matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockInfo {
    pub table_id: String,
    pub row_offset: usize,
    pub col_offset: usize,
    pub rows: usize,
    pub cols: usize,
}

/// One input-column chunk of the transposed lookup matrix, in diagonal form
/// with its BSGS plan.
#[derive(Debug)]
pub struct Partition {
    pub diag: DiagonalizedMatrix,
    pub plan: BsgsPlan,
    /// Input slot range [start, end) this chunk multiplies.
    pub input_range: (usize, usize),
}

/// Block-diagonal stack of embedding tables, ready for encrypted lookup.
///
/// `matrix` is the (sum rows_i) x (sum cols_i) packed matrix; the lookup
/// multiplies its transpose against the concatenated one-hot vector. When
/// the one-hot vector exceeds n slots, the transpose is column-partitioned
/// into n-wide chunks multiplied independently and summed.
#[derive(Debug)]
pub struct PackedEmbeddingSet {
    pub tables: Vec<PackedTable>,
    pub blocks: Vec<BlockInfo>,
    pub matrix: Matrix,
    pub total_rows: usize,
    pub total_cols: usize,
    pub partitions: Vec<Partition>,
}

impl PackedEmbeddingSet {
    /// Ciphertexts required for the client's one-hot input.
    pub fn input_ciphertexts(&self) -> usize {
        self.partitions.len()
    }

    /// Square tiling period required of single-ciphertext inputs.
    pub fn input_period(&self, partition: usize) -> usize {
        self.partitions[partition].diag.dim
    }
}

/// Packs tables corner-to-corner: each block starts at the bottom-right
/// corner of the previous one. Off-block entries are exactly zero.
pub fn pack_block_diagonal(tables: Vec<PackedTable>, vm: &Vm) -> Result<PackedEmbeddingSet> {
    if tables.is_empty() {
        return Err(Error::Parameter("no tables to pack".into()));
    }
    let n = vm.n();
    let total_rows: usize = tables.iter().map(|t| t.packed_rows()).sum();
    let total_cols: usize = tables.iter().map(|t| t.dim()).sum();
    if total_cols > n {
        return Err(Error::Capacity(format!(
            "packed output width {total_cols} exceeds {n} slots"
        )));
    }

    let mut blocks = Vec::with_capacity(tables.len());
    let mut matrix = Matrix::zeros(total_rows, total_cols);
    let (mut row_offset, mut col_offset) = (0usize, 0usize);
    for table in &tables {
        let (rows, cols) = (table.packed_rows(), table.dim());
        matrix.paste(table.matrix(), row_offset, col_offset);
        blocks.push(BlockInfo {
            table_id: table.id().to_string(),
            row_offset,
            col_offset,
            rows,
            cols,
        });
        row_offset += rows;
        col_offset += cols;
    }

    // column chunks of the transpose = row chunks of the packed matrix
    let transposed = matrix.transpose();
    let mut partitions = Vec::new();
    let mut start = 0usize;
    while start < total_rows {
        let end = (start + n).min(total_rows);
        let chunk = Matrix::from_fn(total_cols, end - start, |r, c| transposed.get(r, start + c));
        let diag = diagonalize(&chunk, vm.params())?;
        let plan = plan_bsgs(&diag);
        partitions.push(Partition {
            diag,
            plan,
            input_range: (start, end),
        });
        start = end;
    }

    Ok(PackedEmbeddingSet {
        tables,
        blocks,
        matrix,
        total_rows,
        total_cols,
        partitions,
    })
}

/// Ordered per-table indices for one lookup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LookupRequest {
    pub indices: Vec<(String, usize)>,
}

/// Concatenated client-side encoding across the packed tables: one-hot for
/// full tables, per-digit one-hots for compressed ones. Exactly
/// `total_rows` entries; request order must match block order.
pub fn encode_client(req: &LookupRequest, packed: &PackedEmbeddingSet) -> Result<Vec<f64>> {
    if req.indices.len() != packed.tables.len() {
        return Err(Error::Layout(format!(
            "request has {} indices but the packed set holds {} tables",
            req.indices.len(),
            packed.tables.len()
        )));
    }
    let mut out = Vec::with_capacity(packed.total_rows);
    for ((id, index), table) in req.indices.iter().zip(&packed.tables) {
        if id != table.id() {
            return Err(Error::Layout(format!(
                "request table '{id}' does not match packed block '{}'",
                table.id()
            )));
        }
        out.extend(table.encode(*index)?);
    }
    debug_assert_eq!(out.len(), packed.total_rows);
    Ok(out)
}

/// Plaintext oracle: the concatenation of every table's looked-up row.
pub fn lookup_oracle(req: &LookupRequest, packed: &PackedEmbeddingSet) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(packed.total_cols);
    for ((_, index), table) in req.indices.iter().zip(&packed.tables) {
        out.extend(table.lookup(*index)?);
    }
    Ok(out)
}

/// Encrypts a client encoding, one ciphertext per partition. Single-
/// partition inputs are tiled client-side to the partition's square period;
/// tiling an unencrypted vector costs nothing.
pub fn encrypt_encoding(
    vm: &mut Vm,
    packed: &PackedEmbeddingSet,
    encoding: &[f64],
    level: u32,
) -> Result<Vec<CipherVec>> {
    if encoding.len() != packed.total_rows {
        return Err(Error::Layout(format!(
            "encoding has {} entries, packed set expects {}",
            encoding.len(),
            packed.total_rows
        )));
    }
    let n = vm.n();
    let mut out = Vec::with_capacity(packed.partitions.len());
    for part in &packed.partitions {
        let (start, end) = part.input_range;
        let chunk = &encoding[start..end];
        let tiled = PlainVec::tiled(chunk, part.diag.dim, n)?;
        out.push(vm.encrypt(tiled.slots(), level)?);
    }
    Ok(out)
}

/// Server-side packed lookup: one BSGS matrix-vector product per input
/// ciphertext, partial results summed. Output slots
/// [col_offset_i, col_offset_i + d_i) hold table i's embedding, contiguous
/// and row-major. Consumes exactly one multiplicative level.
pub fn lookup_encrypted(
    vm: &mut Vm,
    packed: &PackedEmbeddingSet,
    inputs: &[CipherVec],
) -> Result<CipherVec> {
    if inputs.len() != packed.partitions.len() {
        return Err(Error::Layout(format!(
            "{} input ciphertexts for {} partitions",
            inputs.len(),
            packed.partitions.len()
        )));
    }
    vm.set_phase(PHASE_BSGS);
    let mut acc: Option<CipherVec> = None;
    for (part, input) in packed.partitions.iter().zip(inputs) {
        let partial = matvec_bsgs(vm, &part.diag, &part.plan, input)?;
        acc = Some(match acc {
            None => partial,
            Some(a) => vm.add(&a, &partial),
        });
    }
    Ok(acc.expect("at least one partition"))
}

// ---------------------------------------------------------------------------
// Model spec (JSON external interface)
// ---------------------------------------------------------------------------

/// JSON description of one embedding table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableSpec {
    pub id: String,
    pub k: usize,
    pub d: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub compress: Option<CompressSpecFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressSpecFile {
    pub p: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_dig: Option<usize>,
}

/// JSON description of a sparse-feature model: tables, the row-count
/// threshold above which compression applies, and the dense feature count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub tables: Vec<TableSpec>,
    #[serde(default)]
    pub threshold: usize,
    #[serde(default)]
    pub dense_count: usize,
}

impl ModelSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::Config(format!("model spec (line {}): {e}", e.line())))
    }

    /// Instantiates the tables with seeded weights. A table is compressed
    /// when it has a compression spec and strictly exceeds the threshold.
    pub fn build_tables(&self, seed: u64) -> Result<Vec<PackedTable>> {
        let mut out = Vec::with_capacity(self.tables.len());
        for (idx, spec) in self.tables.iter().enumerate() {
            if spec.k == 0 || spec.d == 0 {
                return Err(Error::Config(format!(
                    "table '{}' must have k >= 1 and d >= 1",
                    spec.id
                )));
            }
            let table_seed = seed.wrapping_add(idx as u64).wrapping_mul(0x9e37_79b9);
            let packed = match &spec.compress {
                Some(c) if spec.k > self.threshold => {
                    let cspec = match c.l_dig {
                        Some(l) => CompressionSpec {
                            base: c.p,
                            num_digits: l,
                        },
                        None => CompressionSpec::minimal(c.p, spec.k)?,
                    };
                    PackedTable::Coded(CodedTableStack::random(
                        &spec.id,
                        spec.k,
                        spec.d,
                        cspec,
                        table_seed ^ 0x5eed,
                    )?)
                }
                _ => {
                    PackedTable::Full(EmbeddingTable::random(&spec.id, spec.k, spec.d, table_seed))
                }
            };
            out.push(packed);
        }
        Ok(out)
    }

    /// One-hot slots the packed input occupies (dense features excluded).
    pub fn input_slots(&self) -> usize {
        self.tables
            .iter()
            .map(|t| match &t.compress {
                Some(c) if t.k > self.threshold => {
                    let l = c.l_dig.unwrap_or_else(|| {
                        CompressionSpec::minimal(c.p, t.k)
                            .map(|s| s.num_digits)
                            .unwrap_or(1)
                    });
                    c.p * l
                }
                _ => t.k,
            })
            .sum()
    }

    /// Total rows across the original (uncompressed) tables.
    pub fn uncompressed_rows(&self) -> usize {
        self.tables.iter().map(|t| t.k).sum()
    }

    /// Compression ratio: original rows over packed one-hot slots.
    pub fn compression_ratio(&self) -> f64 {
        self.uncompressed_rows() as f64 / self.input_slots() as f64
    }
}

/// Ciphertexts needed for a packed one-hot input of `slots` entries.
pub fn input_ciphertexts(slots: usize, n: usize) -> usize {
    ciphertexts_needed(slots, n)
}
