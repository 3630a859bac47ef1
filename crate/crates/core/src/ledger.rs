//! Append-only record of every homomorphic operation.
//!
//! Each entry stores the op kind, the level it executed at, and (for
//! rotations) the offset. Consecutive identical ops are run-length merged so
//! that vocabulary-scale accounting runs stay compact. Entries may carry a
//! phase label; phases drive both cost reporting and per-stage assertions.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Kind of a homomorphic operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    PtAdd,
    CtAdd,
    PtMul,
    CtMul,
    Rotate,
    Bootstrap,
    EncryptUpload,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::PtAdd,
        OpKind::CtAdd,
        OpKind::PtMul,
        OpKind::CtMul,
        OpKind::Rotate,
        OpKind::Bootstrap,
        OpKind::EncryptUpload,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::PtAdd => "pt_add",
            OpKind::CtAdd => "ct_add",
            OpKind::PtMul => "pt_mul",
            OpKind::CtMul => "ct_mul",
            OpKind::Rotate => "rotate",
            OpKind::Bootstrap => "bootstrap",
            OpKind::EncryptUpload => "encrypt_upload",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One run of identical operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub op: OpKind,
    /// Multiplicative level the op executed at.
    pub level: u32,
    /// Rotation offset, reduced mod n; present only for rotations.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rotation: Option<usize>,
    /// Index into the ledger's phase table.
    pub phase: usize,
    /// Run length.
    pub count: u64,
}

/// Append-only operation log for one logical execution stream.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OpLedger {
    /// Phase labels in first-use order. Index 0 is the unnamed default phase.
    phases: Vec<String>,
    entries: Vec<LedgerEntry>,
    /// Level alignments applied before binary ops (metadata, not ops).
    pub level_drops: u64,
    /// Non-fatal diagnostics, e.g. activation domain violations.
    pub warnings: Vec<String>,
    #[serde(skip)]
    current_phase: usize,
}

impl OpLedger {
    pub fn new() -> Self {
        OpLedger {
            phases: vec![String::new()],
            entries: Vec::new(),
            level_drops: 0,
            warnings: Vec::new(),
            current_phase: 0,
        }
    }

    /// Switch the phase tag applied to subsequent entries. Reuses the phase
    /// index if the label was seen before.
    pub fn set_phase(&mut self, name: &str) {
        if let Some(idx) = self.phases.iter().position(|p| p == name) {
            self.current_phase = idx;
        } else {
            self.phases.push(name.to_string());
            self.current_phase = self.phases.len() - 1;
        }
    }

    pub fn current_phase(&self) -> &str {
        &self.phases[self.current_phase]
    }

    pub fn phases(&self) -> &[String] {
        &self.phases
    }

    pub fn record(&mut self, op: OpKind, level: u32, rotation: Option<usize>) {
        self.record_many(op, level, rotation, 1);
    }

    /// Bulk append, merged with the previous entry when identical.
    pub fn record_many(&mut self, op: OpKind, level: u32, rotation: Option<usize>, count: u64) {
        if count == 0 {
            return;
        }
        if let Some(last) = self.entries.last_mut() {
            if last.op == op
                && last.level == level
                && last.rotation == rotation
                && last.phase == self.current_phase
            {
                last.count += count;
                return;
            }
        }
        self.entries.push(LedgerEntry {
            op,
            level,
            rotation,
            phase: self.current_phase,
            count,
        });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total count per op kind; exactly the multiset projection of entries.
    pub fn counters(&self) -> BTreeMap<OpKind, u64> {
        let mut map = BTreeMap::new();
        for e in &self.entries {
            *map.entry(e.op).or_insert(0) += e.count;
        }
        map
    }

    pub fn count(&self, op: OpKind) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.op == op)
            .map(|e| e.count)
            .sum()
    }

    pub fn count_in_phase(&self, op: OpKind, phase: &str) -> u64 {
        let Some(idx) = self.phases.iter().position(|p| p == phase) else {
            return 0;
        };
        self.entries
            .iter()
            .filter(|e| e.op == op && e.phase == idx)
            .map(|e| e.count)
            .sum()
    }

    /// Upload summary as (ciphertext_count, level) pairs, in first-seen
    /// level order.
    pub fn uploads(&self) -> Vec<(u64, u32)> {
        let mut order: Vec<u32> = Vec::new();
        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for e in &self.entries {
            if e.op == OpKind::EncryptUpload {
                if !counts.contains_key(&e.level) {
                    order.push(e.level);
                }
                *counts.entry(e.level).or_insert(0) += e.count;
            }
        }
        order.into_iter().map(|l| (counts[&l], l)).collect()
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }
}
