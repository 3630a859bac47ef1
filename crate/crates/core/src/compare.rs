//! Head-to-head comparison of the two server-side lookup strategies on the
//! same compressed table: the indicator-function baseline versus the packed
//! block-diagonal BSGS lookup.

use crate::baseline::{coded_helut_lookup, encode_tokens, IndicatorMode, IndicatorParams};

use crate::cost::{estimate, CostReport, CostTable};
use crate::embedding::{
    encode_client, encrypt_encoding, lookup_encrypted, pack_block_diagonal, CodedTableStack,
    CompressionSpec, LookupRequest, PackedTable,
};
use crate::error::Result;
use crate::ledger::{OpKind, OpLedger};
use crate::vm::{Vm, VmParams};
use serde::{Deserialize, Serialize};

/// Sweep configuration: one compressed table, several hidden dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareConfig {
    #[serde(rename = "V")]
    pub vocab: usize,
    pub p: usize,
    pub l_dig: usize,
    /// Hidden dimensions to sweep.
    pub dims: Vec<usize>,
    #[serde(default = "default_upload_level")]
    pub upload_level: u32,
}

fn default_upload_level() -> u32 {
    1
}

impl CompareConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| crate::Error::Config(format!("compare config (line {}): {e}", e.line())))
    }
}

/// One sweep point: both pipelines on the same table at dimension d.
#[derive(Debug)]
pub struct ComparePoint {
    pub d: usize,
    pub baseline: CostReport,
    pub ours: CostReport,
    pub speedup: f64,
    pub baseline_ledger: OpLedger,
    pub ours_ledger: OpLedger,
}

impl ComparePoint {
    pub fn csv_header() -> &'static str {
        "d,baseline_s,ours_s,speedup,baseline_rotations,ours_rotations"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.3},{},{}",
            self.d,
            self.baseline.total,
            self.ours.total,
            self.speedup,
            self.baseline_ledger.count(OpKind::Rotate),
            self.ours_ledger.count(OpKind::Rotate),
        )
    }
}

/// Runs both lookups for one hidden dimension and prices their ledgers.
pub fn run_comparison_point(
    config: &CompareConfig,
    d: usize,
    vm_params: &VmParams,
    indicator: &IndicatorParams,
    table: &CostTable,
    seed: u64,
) -> Result<ComparePoint> {
    let spec = CompressionSpec {
        base: config.p,
        num_digits: config.l_dig,
    };
    let stack = CodedTableStack::random("vocab", config.vocab, d, spec, seed ^ 0x7a11)?;
    let index = (seed as usize * 7919 + 13) % config.vocab;
    let level = config.upload_level.max(vm_params.min_level + 1);

    // baseline: coded tokens uploaded, one-hot expansion server-side
    let mut vm_base = Vm::new(*vm_params)?;
    let tokens = encode_tokens(&stack, &[index])?;
    let tokens_ct = vm_base.encrypt(&tokens, level)?;
    let sharded = coded_helut_lookup(
        &mut vm_base,
        &tokens_ct,
        &stack,
        1,
        indicator,
        IndicatorMode::Polynomial,
    )?;
    debug_assert_eq!(sharded.len(), d);
    let baseline_ledger = vm_base.take_ledger();
    let baseline = estimate(
        &baseline_ledger,
        &baseline_ledger.uploads(),
        table,
        vm_params,
    )?;

    // ours: client one-hot digits, single packed BSGS product
    let mut vm_ours = Vm::new(*vm_params)?;
    let packed = pack_block_diagonal(vec![PackedTable::Coded(stack.clone())], &vm_ours)?;
    let req = LookupRequest {
        indices: vec![("vocab".into(), index)],
    };
    let encoding = encode_client(&req, &packed)?;
    let inputs = encrypt_encoding(&mut vm_ours, &packed, &encoding, level)?;
    let contiguous = lookup_encrypted(&mut vm_ours, &packed, &inputs)?;
    // functional agreement between the two strategies on the same table
    debug_assert!({
        let oracle = stack.lookup(index)?;
        oracle
            .iter()
            .enumerate()
            .all(|(i, e)| (contiguous.slots()[i] - e).abs() < 1e-6)
    });
    let ours_ledger = vm_ours.take_ledger();
    let ours = estimate(&ours_ledger, &ours_ledger.uploads(), table, vm_params)?;

    let speedup = baseline.total / ours.total;
    let ours = ours.with_baseline(baseline.total);
    Ok(ComparePoint {
        d,
        baseline,
        ours,
        speedup,
        baseline_ledger,
        ours_ledger,
    })
}

/// The parameter set the shipped cost table is calibrated against:
/// level-1 uploads, bootstrap back to 16 so the indicator completes, no
/// minimum level.
pub fn calibration_vm_params() -> VmParams {
    VmParams {
        n: 1 << 15,
        max_level: 24,
        boot_level: 16,
        min_level: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{PHASE_REARRANGE, PHASE_TABLE_MULT};
    use crate::cost::{cpu_default, reference};
    use crate::embedding::PHASE_BSGS;

    fn calibration_point() -> ComparePoint {
        let config = CompareConfig {
            vocab: 50257,
            p: 16,
            l_dig: 32,
            dims: vec![768],
            upload_level: 1,
        };
        let indicator = IndicatorParams::default_for(16);
        run_comparison_point(
            &config,
            768,
            &calibration_vm_params(),
            &indicator,
            &cpu_default(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn pipeline_counts_match_reference() {
        let point = calibration_point();
        let base = &point.baseline_ledger;
        assert_eq!(
            base.count_in_phase(OpKind::Rotate, PHASE_TABLE_MULT),
            reference::TABLE_MULT_ROTATIONS
        );
        assert_eq!(
            base.count_in_phase(OpKind::PtMul, PHASE_TABLE_MULT),
            reference::TABLE_MULT_MULS
        );
        assert_eq!(
            base.count_in_phase(OpKind::CtAdd, PHASE_TABLE_MULT),
            reference::TABLE_MULT_ADDS
        );
        assert_eq!(base.count(OpKind::Bootstrap), 1);
        assert_eq!(base.count_in_phase(OpKind::Rotate, PHASE_REARRANGE), 31);

        let ours = &point.ours_ledger;
        assert_eq!(
            ours.count_in_phase(OpKind::PtMul, PHASE_BSGS),
            reference::BSGS_MULS
        );
        assert_eq!(
            ours.count_in_phase(OpKind::Rotate, PHASE_BSGS),
            reference::BSGS_ROTATIONS
        );
        assert_eq!(
            ours.count_in_phase(OpKind::CtAdd, PHASE_BSGS),
            reference::BSGS_ADDS
        );
    }

    #[test]
    fn degenerate_table_still_speeds_up() {
        let config = CompareConfig {
            vocab: 2,
            p: 2,
            l_dig: 1,
            dims: vec![1],
            upload_level: 1,
        };
        let indicator = IndicatorParams::default_for(2);
        let point = run_comparison_point(
            &config,
            1,
            &calibration_vm_params(),
            &indicator,
            &cpu_default(),
            3,
        )
        .unwrap();
        assert!(point.speedup >= 1.0, "speedup {}", point.speedup);
    }

    #[test]
    fn calibration_point_round_trips_totals() {
        let point = calibration_point();
        assert!(
            (point.baseline.total - 179.1).abs() / 179.1 < 0.01,
            "baseline total {}",
            point.baseline.total
        );
        assert!(
            (point.ours.total - 3.22).abs() / 3.22 < 0.01,
            "ours total {}",
            point.ours.total
        );
        assert!(
            point.speedup >= 55.0 && point.speedup <= 57.0,
            "speedup {}",
            point.speedup
        );
    }
}
