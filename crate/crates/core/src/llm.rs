//! Sequence embedding lookups for language models: the column-packed
//! ciphertext-plaintext matrix-multiply strategy versus block-diagonal
//! packing, both with and without digit compression.
//!
//! Vocabulary-scale runs execute in accounting mode: ledgers, ciphertext
//! counts, and memory footprints come from closed-form block geometry
//! without materializing anything. Functional (slot-level) execution kicks
//! in automatically when the scenario fits the slot budget.

use crate::cost::{estimate, CostReport, CostTable};
use crate::embedding::{
    encode_client, lookup_encrypted, pack_block_diagonal, CodedTableStack, CompressionSpec,
    LookupRequest, PackedTable,
};
use crate::error::{Error, Result};
use crate::ledger::{OpKind, OpLedger};
use crate::vm::{
    ciphertext_size_bytes, ciphertexts_needed, plaintext_size_bytes, CipherVec, PlainVec, Vm,
    VmParams,
};
use serde::{Deserialize, Serialize};

pub const PHASE_CPMM: &str = "cpmm";

/// A batched lookup: m token ids into a V x d table.
#[derive(Debug, Clone)]
pub struct SequenceLookup {
    pub token_ids: Vec<usize>,
    pub vocab: usize,
    pub dim: usize,
}

impl SequenceLookup {
    pub fn validate(&self) -> Result<()> {
        for &t in &self.token_ids {
            if t >= self.vocab {
                return Err(Error::Index(format!(
                    "token id {t} outside vocabulary of {}",
                    self.vocab
                )));
            }
        }
        Ok(())
    }
}

/// The one-hot matrix packed column-wise: one ciphertext per input column,
/// each holding that column across the m token slots.
#[derive(Debug)]
pub struct ColumnPackedMatrix {
    pub columns: Vec<CipherVec>,
}

/// Packs per-token encoding rows into column ciphertexts.
pub fn cpmm_pack(vm: &mut Vm, rows: &[Vec<f64>], level: u32) -> Result<ColumnPackedMatrix> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::Parameter("empty sequence".into()));
    }
    if m > vm.n() {
        return Err(Error::Capacity(format!(
            "{m} tokens exceed {} slots per column",
            vm.n()
        )));
    }
    let width = rows[0].len();
    let mut columns = Vec::with_capacity(width);
    for j in 0..width {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        columns.push(vm.encrypt(&col, level)?);
    }
    Ok(ColumnPackedMatrix { columns })
}

/// Column-packed ciphertext-plaintext product: output column c is
/// `sum_j columns[j] * E[j][c]`. No rotations; V*d scalar multiplies; one
/// level. The output stays column-sharded: d ciphertexts.
pub fn cpmm_embedding(
    vm: &mut Vm,
    cols: &ColumnPackedMatrix,
    table: &crate::linalg::Matrix,
) -> Result<Vec<CipherVec>> {
    if cols.columns.len() != table.rows {
        return Err(Error::Layout(format!(
            "{} packed columns for a table of {} rows",
            cols.columns.len(),
            table.rows
        )));
    }
    vm.set_phase(PHASE_CPMM);
    let n = vm.n();
    let mut outputs = Vec::with_capacity(table.cols);
    for c in 0..table.cols {
        let mut acc: Option<CipherVec> = None;
        for (j, col_ct) in cols.columns.iter().enumerate() {
            let scalar = PlainVec::constant(table.get(j, c), n);
            let term = vm.mul_plain(col_ct, &scalar)?;
            acc = Some(match acc {
                None => term,
                Some(a) => vm.add(&a, &term),
            });
        }
        outputs.push(acc.expect("at least one column"));
    }
    Ok(outputs)
}

// ---------------------------------------------------------------------------
// Accounting mode
// ---------------------------------------------------------------------------

/// Config knobs for the large-scale analyses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LlmParams {
    /// Server RAM available for BSGS diagonal plaintexts, in bytes.
    pub memory_budget_bytes: u64,
    /// Level the diagonal plaintexts are stored at.
    pub diag_storage_level: u32,
    /// Level the client uploads at.
    pub upload_level: u32,
}

impl Default for LlmParams {
    fn default() -> Self {
        LlmParams {
            memory_budget_bytes: 512_000_000_000,
            diag_storage_level: 7,
            upload_level: 1,
        }
    }
}

/// Closed-form geometry of a block-diagonal sequence lookup with m
/// identical blocks of rows_per_block inputs and dim outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockDiagAccounting {
    pub input_cts: u64,
    pub output_cts: u64,
    pub diagonals: u64,
    pub rotation_bound: u64,
    pub plaintext_bytes: u64,
}

fn merge_ranges(mut ranges: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    ranges.sort_unstable();
    let mut merged: Vec<(i64, i64)> = Vec::new();
    for (lo, hi) in ranges {
        match merged.last_mut() {
            Some((_, last_hi)) if lo <= *last_hi + 1 => *last_hi = (*last_hi).max(hi),
            _ => merged.push((lo, hi)),
        }
    }
    merged
}

fn bsgs_bound_for_span(span: u64) -> u64 {
    let span = span.max(1);
    let mut best = u64::MAX;
    let mut n1 = 1u64;
    loop {
        let n2 = span.div_ceil(n1);
        best = best.min(n1 + n2);
        if n1 >= span {
            break;
        }
        n1 *= 2;
    }
    best.saturating_sub(2)
}

/// Computes ciphertext counts, diagonal counts, a rotation bound, and the
/// diagonal-plaintext memory footprint of the chunked lookup, without
/// materializing it.
pub fn blockdiag_accounting(
    m: usize,
    rows_per_block: usize,
    dim: usize,
    params: &VmParams,
    storage_level: u32,
) -> BlockDiagAccounting {
    let n = params.n;
    // the matrix actually multiplied is (m*dim) x (m*rows_per_block)
    let total_rows = m * dim;
    let total_cols = m * rows_per_block;
    let row_chunks = total_rows.div_ceil(n);
    let col_chunks = total_cols.div_ceil(n);

    let mut diagonals = 0u64;
    let mut rotation_bound = 0u64;
    for rc in 0..row_chunks {
        let row_lo = rc * n;
        let row_hi = ((rc + 1) * n).min(total_rows);
        for cc in 0..col_chunks {
            let col_lo = cc * n;
            let col_hi = ((cc + 1) * n).min(total_cols);
            let mut ranges = Vec::new();
            for i in 0..m {
                let b_row_lo = (i * dim).max(row_lo);
                let b_row_hi = ((i + 1) * dim).min(row_hi);
                let b_col_lo = (i * rows_per_block).max(col_lo);
                let b_col_hi = ((i + 1) * rows_per_block).min(col_hi);
                if b_row_lo >= b_row_hi || b_col_lo >= b_col_hi {
                    continue;
                }
                let lo = (b_col_lo as i64 - col_lo as i64) - (b_row_hi as i64 - 1 - row_lo as i64);
                let hi = (b_col_hi as i64 - 1 - col_lo as i64) - (b_row_lo as i64 - row_lo as i64);
                ranges.push((lo, hi));
            }
            if ranges.is_empty() {
                continue;
            }
            let merged = merge_ranges(ranges);
            let count: u64 = merged.iter().map(|(lo, hi)| (hi - lo + 1) as u64).sum();
            let span = (merged.last().unwrap().1 - merged.first().unwrap().0 + 1) as u64;
            diagonals += count;
            rotation_bound += bsgs_bound_for_span(span);
        }
    }

    BlockDiagAccounting {
        input_cts: ciphertexts_needed(total_cols, n) as u64,
        output_cts: ciphertexts_needed(total_rows, n) as u64,
        diagonals,
        rotation_bound,
        plaintext_bytes: diagonals * plaintext_size_bytes(params, storage_level),
    }
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioCompression {
    pub p: usize,
    pub l_dig: usize,
}

/// JSON description of one sequence-lookup experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmScenario {
    #[serde(rename = "V")]
    pub vocab: usize,
    pub d: usize,
    pub m: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub compression: Option<ScenarioCompression>,
    /// "cpmm", "blockdiag", or "client_side".
    pub strategy: String,
}

impl LlmScenario {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::Config(format!("llm scenario (line {}): {e}", e.line())))
    }

    /// Input columns after optional compression.
    pub fn input_columns(&self) -> usize {
        match &self.compression {
            Some(c) => c.p * c.l_dig,
            None => self.vocab,
        }
    }
}

/// One row of the scenario comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub strategy: String,
    pub m: usize,
    pub input_cts: u64,
    pub rotations: u64,
    pub muls: u64,
    pub levels: u32,
    pub est_seconds: f64,
    pub upload_bytes: u64,
    /// Client-server round trips per generated token.
    pub rounds_per_token: u32,
    pub cost: CostReport,
}

impl ScenarioReport {
    pub fn csv_header() -> &'static str {
        "strategy,m,input_cts,rotations,muls,levels,est_seconds"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6}",
            self.strategy,
            self.m,
            self.input_cts,
            self.rotations,
            self.muls,
            self.levels,
            self.est_seconds
        )
    }
}

fn fabricate_cpmm_ledger(cols: u64, d: u64, level: u32) -> OpLedger {
    let mut ledger = OpLedger::new();
    ledger.record_many(OpKind::EncryptUpload, level, None, cols);
    ledger.set_phase(PHASE_CPMM);
    ledger.record_many(OpKind::PtMul, level, None, cols * d);
    ledger.record_many(OpKind::CtAdd, level - 1, None, (cols - 1) * d);
    ledger
}

fn fabricate_blockdiag_ledger(acct: &BlockDiagAccounting, level: u32) -> OpLedger {
    let mut ledger = OpLedger::new();
    ledger.record_many(OpKind::EncryptUpload, level, None, acct.input_cts);
    ledger.set_phase(crate::embedding::PHASE_BSGS);
    ledger.record_many(OpKind::PtMul, level, None, acct.diagonals);
    ledger.record_many(OpKind::Rotate, level, None, acct.rotation_bound);
    ledger.record_many(
        OpKind::CtAdd,
        level - 1,
        None,
        acct.diagonals.saturating_sub(acct.output_cts),
    );
    ledger
}

/// Runs one scenario. Block-diagonal lookups that fit the slot budget run
/// functionally (real slots, real ledger); larger ones run in accounting
/// mode. The column-packed strategy is always counted in closed form; its
/// per-op structure is exact.
pub fn run_scenario(
    scenario: &LlmScenario,
    vm_params: &VmParams,
    llm_params: &LlmParams,
    table: &CostTable,
    seed: u64,
) -> Result<ScenarioReport> {
    let cols = scenario.input_columns();
    let d = scenario.d;
    let m = scenario.m;
    if m == 0 {
        return Err(Error::Config("sequence length m must be >= 1".into()));
    }
    let level = llm_params.upload_level.max(vm_params.min_level + 1);

    match scenario.strategy.as_str() {
        "cpmm" => {
            let ledger = fabricate_cpmm_ledger(cols as u64, d as u64, level);
            let uploads = ledger.uploads();
            let cost = estimate(&ledger, &uploads, table, vm_params)?;
            let upload_bytes = cols as u64 * ciphertext_size_bytes(vm_params, level);
            Ok(ScenarioReport {
                strategy: scenario.strategy.clone(),
                m,
                input_cts: cols as u64,
                rotations: 0,
                muls: (cols * d) as u64,
                levels: 1,
                est_seconds: cost.total,
                upload_bytes,
                rounds_per_token: 0,
                cost,
            })
        }
        "blockdiag" => {
            let acct = blockdiag_accounting(m, cols, d, vm_params, llm_params.diag_storage_level);
            if scenario.compression.is_none()
                && acct.plaintext_bytes > llm_params.memory_budget_bytes
            {
                return Err(Error::Capacity(format!(
                    "uncompressed block-diagonal lookup at m = {m} needs {:.1} GB of diagonal \
                     plaintexts, budget is {:.1} GB",
                    acct.plaintext_bytes as f64 / 1e9,
                    llm_params.memory_budget_bytes as f64 / 1e9
                )));
            }
            let functional = m * cols <= vm_params.n && m * d <= vm_params.n;
            let (ledger, muls, rotations) = if functional {
                let mut vm = Vm::new(*vm_params)?;
                let stack = scenario_stack(scenario, seed)?;
                let outputs = blockdiag_sequence_lookup(
                    &mut vm,
                    &sample_sequence(scenario, seed),
                    &stack,
                    level,
                )?;
                debug_assert!(!outputs.is_empty());
                let ledger = vm.take_ledger();
                let muls = ledger.count(OpKind::PtMul);
                let rotations = ledger.count(OpKind::Rotate);
                (ledger, muls, rotations)
            } else {
                let ledger = fabricate_blockdiag_ledger(&acct, level);
                (ledger, acct.diagonals, acct.rotation_bound)
            };
            let uploads = ledger.uploads();
            let cost = estimate(&ledger, &uploads, table, vm_params)?;
            Ok(ScenarioReport {
                strategy: scenario.strategy.clone(),
                m,
                input_cts: acct.input_cts,
                rotations,
                muls,
                levels: 1,
                est_seconds: cost.total,
                upload_bytes: acct.input_cts * ciphertext_size_bytes(vm_params, level),
                rounds_per_token: 0,
                cost,
            })
        }
        "client_side" => {
            // lookup in the clear on the client: no server ops, but one
            // decrypt-and-reencrypt round per generated token
            let ledger = OpLedger::new();
            let cost = estimate(&ledger, &[], table, vm_params)?;
            Ok(ScenarioReport {
                strategy: scenario.strategy.clone(),
                m,
                input_cts: ciphertexts_needed(m * d, vm_params.n) as u64,
                rotations: 0,
                muls: 0,
                levels: 0,
                est_seconds: cost.total,
                upload_bytes: ciphertexts_needed(m * d, vm_params.n) as u64
                    * ciphertext_size_bytes(vm_params, level),
                rounds_per_token: 1,
                cost,
            })
        }
        other => Err(Error::Config(format!(
            "unknown strategy '{other}' (expected cpmm, blockdiag, or client_side)"
        ))),
    }
}

/// Per-token embedding cost: the scenario at m = 1.
pub fn generation_step_cost(
    scenario: &LlmScenario,
    vm_params: &VmParams,
    llm_params: &LlmParams,
    table: &CostTable,
    seed: u64,
) -> Result<ScenarioReport> {
    let single = LlmScenario {
        m: 1,
        ..scenario.clone()
    };
    run_scenario(&single, vm_params, llm_params, table, seed)
}

fn scenario_stack(scenario: &LlmScenario, seed: u64) -> Result<CodedTableStack> {
    let comp = scenario
        .compression
        .as_ref()
        .ok_or_else(|| Error::Config("functional block-diagonal run needs compression".into()))?;
    CodedTableStack::random(
        "vocab",
        scenario.vocab,
        scenario.d,
        CompressionSpec {
            base: comp.p,
            num_digits: comp.l_dig,
        },
        seed ^ 0x11f,
    )
}

fn sample_sequence(scenario: &LlmScenario, seed: u64) -> SequenceLookup {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    SequenceLookup {
        token_ids: (0..scenario.m)
            .map(|_| rng.random_range(0..scenario.vocab))
            .collect(),
        vocab: scenario.vocab,
        dim: scenario.d,
    }
}

/// Functional block-diagonal sequence lookup: one block per token, all
/// blocks the same compressed stack. Output is row-major contiguous: token
/// i's embedding at slots [i*d, (i+1)*d). One level.
pub fn blockdiag_sequence_lookup(
    vm: &mut Vm,
    seq: &SequenceLookup,
    stack: &CodedTableStack,
    level: u32,
) -> Result<Vec<CipherVec>> {
    seq.validate()?;
    let m = seq.token_ids.len();
    let tables: Vec<PackedTable> = (0..m)
        .map(|i| {
            let mut s = stack.clone();
            s.parent_id = format!("pos{i}");
            PackedTable::Coded(s)
        })
        .collect();
    let packed = pack_block_diagonal(tables, vm)?;
    let req = LookupRequest {
        indices: seq
            .token_ids
            .iter()
            .enumerate()
            .map(|(i, &t)| (format!("pos{i}"), t))
            .collect(),
    };
    let encoding = encode_client(&req, &packed)?;
    let inputs = crate::embedding::encrypt_encoding(vm, &packed, &encoding, level)?;
    let out = lookup_encrypted(vm, &packed, &inputs)?;
    Ok(vec![out])
}

/// Plaintext oracle for the sequence lookup.
pub fn sequence_oracle(seq: &SequenceLookup, stack: &CodedTableStack) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seq.token_ids.len() * seq.dim);
    for &t in &seq.token_ids {
        out.extend(stack.lookup(t)?);
    }
    Ok(out)
}
