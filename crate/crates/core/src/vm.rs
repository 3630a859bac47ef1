//! Slot-level execution model of CKKS.
//!
//! Ciphertexts are modeled as plain vectors of n real slots plus a
//! multiplicative level and an abstract scale exponent. The model tracks
//! exactly what the higher layers need to reason about: SIMD add/mul
//! semantics, level consumption (one per multiplication, rescale folded in),
//! cyclic rotation, and bootstrapping as a level refresh. Every operation is
//! appended to an [`OpLedger`]. No polynomial arithmetic, noise, or key
//! material is modeled.

use crate::error::{Error, Result};
use crate::ledger::{OpKind, OpLedger};
use serde::{Deserialize, Serialize};

/// Execution-model parameters.
///
/// Loadable from JSON with keys `n`, `L`, `L_boot`, `l_min`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmParams {
    /// Slot count; a power of two.
    pub n: usize,
    /// Maximum multiplicative level.
    #[serde(rename = "L")]
    pub max_level: u32,
    /// Level restored by a bootstrap.
    #[serde(rename = "L_boot")]
    pub boot_level: u32,
    /// Minimum level below which multiplications are refused.
    #[serde(rename = "l_min", default = "default_min_level")]
    pub min_level: u32,
}

fn default_min_level() -> u32 {
    1
}

impl Default for VmParams {
    fn default() -> Self {
        VmParams {
            n: 1 << 15,
            max_level: 24,
            boot_level: 12,
            min_level: 1,
        }
    }
}

impl VmParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || !self.n.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "slot count n must be a power of two >= 2, got {}",
                self.n
            )));
        }
        if self.boot_level < 1 || self.boot_level > self.max_level {
            return Err(Error::Parameter(format!(
                "L_boot must satisfy 1 <= L_boot <= L, got L_boot={} L={}",
                self.boot_level, self.max_level
            )));
        }
        if self.min_level > self.boot_level {
            return Err(Error::Parameter(format!(
                "l_min must satisfy 0 <= l_min <= L_boot, got l_min={} L_boot={}",
                self.min_level, self.boot_level
            )));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let params: VmParams = serde_json::from_str(s)
            .map_err(|e| Error::Config(format!("vm params (line {}): {e}", e.line())))?;
        params.validate()?;
        Ok(params)
    }
}

/// A simulated ciphertext: n slots, a level, and a scale exponent.
///
/// Values are immutable; every op returns a fresh `CipherVec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipherVec {
    slots: Vec<f64>,
    level: u32,
    scale_exp: i32,
}

impl CipherVec {
    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn scale_exp(&self) -> i32 {
        self.scale_exp
    }
}

/// An unencrypted operand with the same slot layout as a ciphertext.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainVec {
    slots: Vec<f64>,
}

impl PlainVec {
    /// Zero-pads `values` to n slots.
    pub fn new(values: &[f64], n: usize) -> Result<Self> {
        if values.len() > n {
            return Err(Error::Capacity(format!(
                "plain vector of length {} exceeds {} slots",
                values.len(),
                n
            )));
        }
        let mut slots = values.to_vec();
        slots.resize(n, 0.0);
        Ok(PlainVec { slots })
    }

    pub fn constant(value: f64, n: usize) -> Self {
        PlainVec {
            slots: vec![value; n],
        }
    }

    /// 1.0 on `[start, start + len)`, 0.0 elsewhere.
    pub fn mask(start: usize, len: usize, n: usize) -> Self {
        let mut slots = vec![0.0; n];
        for s in slots.iter_mut().skip(start).take(len) {
            *s = 1.0;
        }
        PlainVec { slots }
    }

    /// Tiles a base block of length `period` (power of two dividing n)
    /// across all n slots.
    pub fn tiled(base: &[f64], period: usize, n: usize) -> Result<Self> {
        if base.len() > period {
            return Err(Error::Capacity(format!(
                "tile base of length {} exceeds period {}",
                base.len(),
                period
            )));
        }
        if period > n || !period.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "tile period {period} must be a power of two <= n = {n}"
            )));
        }
        let mut block = base.to_vec();
        block.resize(period, 0.0);
        let mut slots = Vec::with_capacity(n);
        while slots.len() < n {
            slots.extend_from_slice(&block);
        }
        Ok(PlainVec { slots })
    }

    pub fn slots(&self) -> &[f64] {
        &self.slots
    }
}

/// One logical execution stream: parameters plus an op ledger.
///
/// Ops take `&mut self` only to append to the ledger; operand values are
/// never mutated. Independent runs each own a `Vm` and may execute in
/// parallel.
#[derive(Debug)]
pub struct Vm {
    params: VmParams,
    ledger: OpLedger,
    /// Remaining greedy bootstraps [`Vm::ensure_level`] may insert; `None`
    /// means unlimited. A testing knob for placement-minimality checks.
    bootstrap_budget: Option<u64>,
}

impl Vm {
    pub fn new(params: VmParams) -> Result<Self> {
        params.validate()?;
        Ok(Vm {
            params,
            ledger: OpLedger::new(),
            bootstrap_budget: None,
        })
    }

    /// Caps how many bootstraps [`Vm::ensure_level`] may insert; once spent,
    /// ciphertexts pass through unrefreshed and the next multiplication
    /// fails. Used to spot-check that every inserted bootstrap is necessary.
    pub fn set_bootstrap_budget(&mut self, budget: Option<u64>) {
        self.bootstrap_budget = budget;
    }

    pub fn params(&self) -> &VmParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn ledger(&self) -> &OpLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut OpLedger {
        &mut self.ledger
    }

    pub fn take_ledger(&mut self) -> OpLedger {
        std::mem::replace(&mut self.ledger, OpLedger::new())
    }

    pub fn set_phase(&mut self, name: &str) {
        self.ledger.set_phase(name);
    }

    /// Encrypts up to n values (zero-padded) at the given level.
    pub fn encrypt(&mut self, values: &[f64], level: u32) -> Result<CipherVec> {
        if values.len() > self.params.n {
            return Err(Error::Capacity(format!(
                "{} values exceed {} slots; split across {} ciphertexts",
                values.len(),
                self.params.n,
                ciphertexts_needed(values.len(), self.params.n)
            )));
        }
        if level < self.params.min_level || level > self.params.max_level {
            return Err(Error::Parameter(format!(
                "encryption level {} outside [{}, {}]",
                level, self.params.min_level, self.params.max_level
            )));
        }
        let mut slots = values.to_vec();
        slots.resize(self.params.n, 0.0);
        self.ledger.record(OpKind::EncryptUpload, level, None);
        Ok(CipherVec {
            slots,
            level,
            scale_exp: 1,
        })
    }

    pub fn plain(&self, values: &[f64]) -> Result<PlainVec> {
        PlainVec::new(values, self.params.n)
    }

    /// Aligns operand levels by dropping the higher one (zero slot cost;
    /// counted as metadata, not as an op).
    fn align(&mut self, a: u32, b: u32) -> u32 {
        if a != b {
            self.ledger.level_drops += 1;
        }
        a.min(b)
    }

    /// Ciphertext-ciphertext addition. Levels auto-align to the lower one.
    pub fn add(&mut self, a: &CipherVec, b: &CipherVec) -> CipherVec {
        let level = self.align(a.level, b.level);
        let slots = a.slots.iter().zip(&b.slots).map(|(x, y)| x + y).collect();
        self.ledger.record(OpKind::CtAdd, level, None);
        CipherVec {
            slots,
            level,
            scale_exp: a.scale_exp.max(b.scale_exp),
        }
    }

    /// Plaintext-ciphertext addition.
    pub fn add_plain(&mut self, a: &CipherVec, b: &PlainVec) -> CipherVec {
        let slots = a.slots.iter().zip(&b.slots).map(|(x, y)| x + y).collect();
        self.ledger.record(OpKind::PtAdd, a.level, None);
        CipherVec {
            slots,
            level: a.level,
            scale_exp: a.scale_exp,
        }
    }

    pub fn sub(&mut self, a: &CipherVec, b: &CipherVec) -> CipherVec {
        let level = self.align(a.level, b.level);
        let slots = a.slots.iter().zip(&b.slots).map(|(x, y)| x - y).collect();
        self.ledger.record(OpKind::CtAdd, level, None);
        CipherVec {
            slots,
            level,
            scale_exp: a.scale_exp.max(b.scale_exp),
        }
    }

    fn check_mul_level(&self, level: u32) -> Result<()> {
        if level < self.params.min_level + 1 {
            return Err(Error::Level(format!(
                "multiplication at level {} would drop below l_min = {}; bootstrap required",
                level, self.params.min_level
            )));
        }
        Ok(())
    }

    /// Ciphertext-ciphertext multiplication with rescaling folded in:
    /// the result sits one level below the (aligned) input level.
    pub fn mul(&mut self, a: &CipherVec, b: &CipherVec) -> Result<CipherVec> {
        let level = self.align(a.level, b.level);
        self.check_mul_level(level)?;
        let slots = a.slots.iter().zip(&b.slots).map(|(x, y)| x * y).collect();
        self.ledger.record(OpKind::CtMul, level, None);
        Ok(CipherVec {
            slots,
            level: level - 1,
            scale_exp: a.scale_exp + b.scale_exp - 1,
        })
    }

    /// Plaintext-ciphertext multiplication; consumes one level.
    pub fn mul_plain(&mut self, a: &CipherVec, b: &PlainVec) -> Result<CipherVec> {
        self.check_mul_level(a.level)?;
        let slots = a.slots.iter().zip(&b.slots).map(|(x, y)| x * y).collect();
        self.ledger.record(OpKind::PtMul, a.level, None);
        Ok(CipherVec {
            slots,
            level: a.level - 1,
            scale_exp: a.scale_exp,
        })
    }

    /// Cyclic rotation. Positive k moves slot i+k to slot i (left shift),
    /// matching the diagonal-method alignment. Offset 0 is a no-op and is
    /// not logged.
    pub fn rotate(&mut self, a: &CipherVec, k: i64) -> CipherVec {
        let n = self.params.n as i64;
        let k = k.rem_euclid(n) as usize;
        if k == 0 {
            return a.clone();
        }
        let mut slots = Vec::with_capacity(self.params.n);
        slots.extend_from_slice(&a.slots[k..]);
        slots.extend_from_slice(&a.slots[..k]);
        self.ledger.record(OpKind::Rotate, a.level, Some(k));
        CipherVec {
            slots,
            level: a.level,
            scale_exp: a.scale_exp,
        }
    }

    /// Slot-wise sign flip. Free: negation folds into the ciphertext
    /// coefficients without key-switching or rescaling, so it is not logged.
    pub fn negate(&self, a: &CipherVec) -> CipherVec {
        CipherVec {
            slots: a.slots.iter().map(|x| -x).collect(),
            level: a.level,
            scale_exp: a.scale_exp,
        }
    }

    /// Restores the level to L_boot; slots pass through unchanged.
    pub fn bootstrap(&mut self, a: &CipherVec) -> CipherVec {
        self.ledger.record(OpKind::Bootstrap, a.level, None);
        CipherVec {
            slots: a.slots.clone(),
            level: self.params.boot_level,
            scale_exp: 1,
        }
    }

    /// Greedy bootstrap insertion: if `a` cannot afford `levels_needed`
    /// more multiplications without dropping below l_min, refresh it.
    pub fn ensure_level(&mut self, a: &CipherVec, levels_needed: u32) -> Result<CipherVec> {
        if a.level >= self.params.min_level + levels_needed {
            return Ok(a.clone());
        }
        match self.bootstrap_budget {
            Some(0) => return Ok(a.clone()),
            Some(ref mut budget) => *budget -= 1,
            None => {}
        }
        let refreshed = self.bootstrap(a);
        if refreshed.level < self.params.min_level + levels_needed {
            return Err(Error::Level(format!(
                "operation needs {} levels above l_min = {} but bootstrap only restores to {}",
                levels_needed, self.params.min_level, self.params.boot_level
            )));
        }
        Ok(refreshed)
    }
}

/// Ciphertexts needed to hold `slot_count` slots.
pub fn ciphertexts_needed(slot_count: usize, n: usize) -> usize {
    slot_count.div_ceil(n)
}

/// Size in bytes of one polynomial at the given level: N * (level + 1) * 8,
/// with ring dimension N = 2n.
pub fn polynomial_size_bytes(params: &VmParams, level: u32) -> u64 {
    let big_n = 2 * params.n as u64;
    big_n * (level as u64 + 1) * 8
}

/// A ciphertext holds two polynomials.
pub fn ciphertext_size_bytes(params: &VmParams, level: u32) -> u64 {
    2 * polynomial_size_bytes(params, level)
}

/// A plaintext holds one polynomial (half a ciphertext).
pub fn plaintext_size_bytes(params: &VmParams, level: u32) -> u64 {
    polynomial_size_bytes(params, level)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vm() -> Vm {
        Vm::new(VmParams {
            n: 8,
            max_level: 10,
            boot_level: 6,
            min_level: 1,
        })
        .unwrap()
    }

    #[test]
    fn encrypt_zero_pads() {
        let mut vm = small_vm();
        let ct = vm.encrypt(&[1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(ct.slots(), &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(ct.level(), 3);
    }

    #[test]
    fn encrypt_capacity_and_level_errors() {
        let mut vm = small_vm();
        assert!(matches!(vm.encrypt(&[0.0; 9], 3), Err(Error::Capacity(_))));
        assert!(matches!(
            vm.encrypt(&[0.0; 4], 11),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(vm.encrypt(&[0.0; 4], 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn criteo_scale_ciphertext_count() {
        // 33.8M one-hot slots at n = 2^15
        assert_eq!(ciphertexts_needed(33_800_000, 1 << 15), 1032);
    }

    #[test]
    fn add_preserves_level() {
        let mut vm = small_vm();
        let a = vm.encrypt(&[1.0, 2.0], 3).unwrap();
        let b = vm.encrypt(&[3.0, 4.0], 3).unwrap();
        let c = vm.add(&a, &b);
        assert_eq!(&c.slots()[..2], &[4.0, 6.0]);
        assert_eq!(c.level(), 3);
    }

    #[test]
    fn add_zero_plain_is_identity() {
        let mut vm = small_vm();
        let a = vm.encrypt(&[1.0, -2.5, 3.0], 4).unwrap();
        let zero = vm.plain(&[]).unwrap();
        let c = vm.add_plain(&a, &zero);
        assert_eq!(c.slots(), a.slots());
        assert_eq!(c.level(), a.level());
    }

    #[test]
    fn level_mismatch_auto_aligns() {
        let mut vm = small_vm();
        let a = vm.encrypt(&[1.0], 3).unwrap();
        let b = vm.encrypt(&[2.0], 2).unwrap();
        let c = vm.add(&a, &b);
        assert_eq!(c.level(), 2);
        assert_eq!(c.slots()[0], 3.0);
        assert_eq!(vm.ledger().level_drops, 1);
    }

    #[test]
    fn mul_consumes_one_level() {
        let mut vm = small_vm();
        let a = vm.encrypt(&[2.0, 3.0], 5).unwrap();
        let ones = PlainVec::constant(1.0, 8);
        let c = vm.mul_plain(&a, &ones).unwrap();
        assert_eq!(c.slots(), a.slots());
        assert_eq!(c.level(), 4);
    }

    #[test]
    fn mul_at_min_level_errors() {
        let mut vm = small_vm();
        let a = vm.encrypt(&[2.0], 1).unwrap();
        let b = vm.encrypt(&[3.0], 1).unwrap();
        assert!(matches!(vm.mul(&a, &b), Err(Error::Level(_))));
    }

    #[test]
    fn rotate_conventions() {
        let mut vm = Vm::new(VmParams {
            n: 4,
            max_level: 4,
            boot_level: 2,
            min_level: 1,
        })
        .unwrap();
        let a = vm.encrypt(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        let r = vm.rotate(&a, 1);
        assert_eq!(r.slots(), &[2.0, 3.0, 4.0, 1.0]);
        // inverse rotation restores the input
        let back = vm.rotate(&r, 4 - 1);
        assert_eq!(back.slots(), a.slots());
        // offset 0 is a no-op and unlogged
        let rotations_before = vm.ledger().count(OpKind::Rotate);
        let same = vm.rotate(&a, 0);
        assert_eq!(same.slots(), a.slots());
        assert_eq!(vm.ledger().count(OpKind::Rotate), rotations_before);
    }

    #[test]
    fn bootstrap_restores_level() {
        let mut vm = small_vm();
        let a = vm.encrypt(&[1.0, 2.0], 1).unwrap();
        let b = vm.bootstrap(&a);
        assert_eq!(b.level(), 6);
        assert_eq!(b.slots(), a.slots());
        let c = vm.bootstrap(&b);
        assert_eq!(c.level(), 6);
        assert_eq!(vm.ledger().count(OpKind::Bootstrap), 2);
    }

    #[test]
    fn value_semantics_inputs_unchanged() {
        let mut vm = small_vm();
        let a = vm.encrypt(&[1.0, 2.0], 5).unwrap();
        let b = vm.encrypt(&[3.0, 4.0], 5).unwrap();
        let a_snapshot = a.clone();
        let b_snapshot = b.clone();
        let _ = vm.add(&a, &b);
        let _ = vm.mul(&a, &b).unwrap();
        let _ = vm.rotate(&a, 3);
        let _ = vm.bootstrap(&a);
        assert_eq!(a, a_snapshot);
        assert_eq!(b, b_snapshot);
    }

    #[test]
    fn object_sizes() {
        let params = VmParams::default();
        // one polynomial at level+1 = 24 residues
        assert_eq!(polynomial_size_bytes(&params, 23), 12_582_912);
        assert_eq!(
            ciphertext_size_bytes(&params, 23),
            2 * polynomial_size_bytes(&params, 23)
        );
        assert_eq!(polynomial_size_bytes(&params, 0), 2 * (1 << 15) * 8);
    }

    #[test]
    fn params_json_round_trip() {
        let params =
            VmParams::from_json(r#"{"n": 32768, "L": 24, "L_boot": 12, "l_min": 1}"#).unwrap();
        assert_eq!(params, VmParams::default());
        assert!(VmParams::from_json(r#"{"n": 3, "L": 4, "L_boot": 2}"#).is_err());
    }
}
