//! Command implementations: parse config, run, write deterministic reports.

use crate::CommonArgs;
use helut_core::baseline::{coded_helut_lookup, encode_tokens, IndicatorMode, IndicatorParams};
use helut_core::compare::{run_comparison_point, CompareConfig};
use helut_core::cost::{builtin, estimate, CostTable};
use helut_core::dlrm::{build_model, infer, sample_input, NetworkSpec};
use helut_core::embedding::{
    encode_client, encrypt_encoding, lookup_encrypted, lookup_oracle, pack_block_diagonal,
    LookupRequest, ModelSpec, PackedTable,
};
use helut_core::error::{Error, Result};
use helut_core::llm::{run_scenario, LlmParams, LlmScenario, ScenarioReport};
use helut_core::vm::{Vm, VmParams};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_report(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Resolves a cost table: built-in name, literal path, then
/// `$HELUT_COST_DIR/<name>[.json]`.
fn load_cost_table(name: &str) -> Result<CostTable> {
    if let Some(table) = builtin(name) {
        return Ok(table);
    }
    let direct = PathBuf::from(name);
    if direct.is_file() {
        return CostTable::from_json(&read_config(&direct)?);
    }
    if let Ok(dir) = std::env::var("HELUT_COST_DIR") {
        for candidate in [
            PathBuf::from(&dir).join(name),
            PathBuf::from(&dir).join(format!("{name}.json")),
        ] {
            if candidate.is_file() {
                return CostTable::from_json(&read_config(&candidate)?);
            }
        }
    }
    Err(Error::Config(format!(
        "cost table '{name}' is neither built-in, a file, nor found in $HELUT_COST_DIR"
    )))
}

fn parse<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        Error::Config(format!(
            "{what} (line {}, column {}): {e}",
            e.line(),
            e.column()
        ))
    })
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: String,
    seed: u64,
    cost_table: &'a str,
}

fn write_manifest(args: &CommonArgs, command: &str, seed: u64) -> Result<()> {
    let manifest = RunManifest {
        command,
        config: args.config.display().to_string(),
        seed,
        cost_table: &args.cost_table,
    };
    write_report(
        &args.out,
        "manifest.json",
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

#[derive(Debug, Deserialize)]
struct IndicatorConfig {
    r: u32,
    s: u32,
}

impl IndicatorConfig {
    fn params(&self) -> IndicatorParams {
        IndicatorParams {
            squarings: self.r,
            cleanings: self.s,
        }
    }
}

// ---------------------------------------------------------------------------
// lookup
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct LookupConfig {
    vm: VmParams,
    strategy: String,
    model: ModelSpec,
    indices: Vec<(String, usize)>,
    #[serde(default = "default_upload_level")]
    upload_level: u32,
    #[serde(default)]
    indicator: Option<IndicatorConfig>,
    /// "polynomial" (default) or "exact": exact slots with identical ops
    /// and depth, for cost experiments isolated from approximation error.
    #[serde(default)]
    indicator_mode: Option<String>,
    #[serde(default)]
    seed: u64,
}

fn default_upload_level() -> u32 {
    1
}

fn parse_indicator_mode(mode: &Option<String>) -> Result<IndicatorMode> {
    match mode.as_deref() {
        None | Some("polynomial") => Ok(IndicatorMode::Polynomial),
        Some("exact") => Ok(IndicatorMode::Exact),
        Some(other) => Err(Error::Config(format!(
            "unknown indicator mode '{other}' (expected polynomial or exact)"
        ))),
    }
}

pub fn lookup(args: &CommonArgs, strategy_override: Option<&str>) -> Result<()> {
    let mut config: LookupConfig = parse(&read_config(&args.config)?, "lookup config")?;
    if let Some(s) = strategy_override {
        config.strategy = s.to_string();
    }
    let seed = args.seed.unwrap_or(config.seed);
    let table = load_cost_table(&args.cost_table)?;
    let mut vm = Vm::new(config.vm)?;
    let level = config.upload_level.max(config.vm.min_level + 1);

    type LookupOutputs = (Vec<f64>, Vec<f64>, Vec<f64>);
    let (output, oracle, client_encoding): LookupOutputs = match config.strategy.as_str() {
        "onehot" | "digit_bsgs" => {
            let mut model = config.model.clone();
            if config.strategy == "onehot" {
                for t in &mut model.tables {
                    t.compress = None;
                }
            }
            let tables = model.build_tables(seed)?;
            let packed = pack_block_diagonal(tables, &vm)?;
            let req = LookupRequest {
                indices: config.indices.clone(),
            };
            let oracle = lookup_oracle(&req, &packed)?;
            let encoding = encode_client(&req, &packed)?;
            let inputs = encrypt_encoding(&mut vm, &packed, &encoding, level)?;
            let out = lookup_encrypted(&mut vm, &packed, &inputs)?;
            (out.slots()[..packed.total_cols].to_vec(), oracle, encoding)
        }
        "coded_helut" => {
            if config.model.tables.len() != 1 {
                return Err(Error::Config(
                    "coded_helut runs on exactly one table".into(),
                ));
            }
            let tables = config.model.build_tables(seed)?;
            let PackedTable::Coded(stack) = &tables[0] else {
                return Err(Error::Config(
                    "coded_helut needs a table with a compression spec".into(),
                ));
            };
            let index = config.indices[0].1;
            let params = match &config.indicator {
                Some(cfg) => cfg.params(),
                None => IndicatorParams::default_for(stack.spec.base),
            };
            let mode = parse_indicator_mode(&config.indicator_mode)?;
            let tokens = encode_tokens(stack, &[index])?;
            let tokens_ct = vm.encrypt(&tokens, level)?;
            let sharded = coded_helut_lookup(&mut vm, &tokens_ct, stack, 1, &params, mode)?;
            let output: Vec<f64> = sharded.iter().map(|ct| ct.slots()[0]).collect();
            (output, stack.lookup(index)?, tokens)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown strategy '{other}' (expected onehot, digit_bsgs, or coded_helut)"
            )))
        }
    };

    let ledger = vm.take_ledger();
    let report = estimate(&ledger, &ledger.uploads(), &table, &config.vm)?;
    write_manifest(args, "lookup", seed)?;
    write_report(&args.out, "ledger.json", &ledger.to_json())?;
    write_report(&args.out, "cost.json", &report.to_json())?;
    write_report(&args.out, "cost.csv", &report.to_csv())?;
    write_report(
        &args.out,
        "client_encoding.json",
        &serde_json::to_string_pretty(&client_encoding).expect("encoding serializes"),
    )?;
    write_report(
        &args.out,
        "output_slots.json",
        &serde_json::to_string_pretty(&json!({
            "strategy": config.strategy,
            "output": output,
            "oracle": oracle,
        }))
        .expect("slots serialize"),
    )?;
    println!(
        "lookup [{}] total {:.6} s, {} ledger entries",
        config.strategy,
        report.total,
        ledger.entries().len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CompareFileConfig {
    vm: VmParams,
    compare: CompareConfig,
    #[serde(default)]
    indicator: Option<IndicatorConfig>,
    #[serde(default)]
    seed: u64,
}

pub fn compare(args: &CommonArgs) -> Result<()> {
    let config: CompareFileConfig = parse(&read_config(&args.config)?, "compare config")?;
    let seed = args.seed.unwrap_or(config.seed);
    let table = load_cost_table(&args.cost_table)?;
    let indicator = match &config.indicator {
        Some(cfg) => cfg.params(),
        None => IndicatorParams::default_for(config.compare.p),
    };

    let mut csv = String::from(helut_core::compare::ComparePoint::csv_header());
    csv.push('\n');
    let mut points = Vec::new();
    for &d in &config.compare.dims {
        let point = run_comparison_point(&config.compare, d, &config.vm, &indicator, &table, seed)?;
        csv.push_str(&point.to_csv_row());
        csv.push('\n');
        println!(
            "d = {d}: baseline {:.3} s, ours {:.3} s, speedup {:.2}x",
            point.baseline.total, point.ours.total, point.speedup
        );
        points.push(json!({
            "d": d,
            "baseline_s": point.baseline.total,
            "ours_s": point.ours.total,
            "speedup": point.speedup,
            "baseline_phases": point.baseline.phases,
            "ours_phases": point.ours.phases,
        }));
    }
    write_manifest(args, "compare", seed)?;
    write_report(&args.out, "compare.csv", &csv)?;
    write_report(
        &args.out,
        "compare.json",
        &serde_json::to_string_pretty(&points).expect("points serialize"),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// dlrm
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum InputSpec {
    Explicit {
        dense: Vec<f64>,
        indices: Vec<(String, usize)>,
    },
    Seeded {
        seed: u64,
    },
}

#[derive(Debug, Deserialize)]
struct DlrmConfig {
    vm: VmParams,
    network: NetworkSpec,
    input: InputSpec,
    #[serde(default)]
    seed: u64,
}

pub fn dlrm(args: &CommonArgs) -> Result<()> {
    let config: DlrmConfig = parse(&read_config(&args.config)?, "dlrm config")?;
    let seed = args.seed.unwrap_or(config.seed);
    let table = load_cost_table(&args.cost_table)?;
    let mut vm = Vm::new(config.vm)?;
    let model = build_model(&config.network, &vm, seed)?;
    let (dense, req) = match &config.input {
        InputSpec::Explicit { dense, indices } => (
            dense.clone(),
            LookupRequest {
                indices: indices.clone(),
            },
        ),
        InputSpec::Seeded { seed } => sample_input(&model, *seed),
    };

    let result = infer(&mut vm, &model, &dense, &req)?;
    let ledger = vm.take_ledger();
    let report = estimate(&ledger, &ledger.uploads(), &table, &config.vm)?;
    let bootstraps = ledger.count(helut_core::ledger::OpKind::Bootstrap);
    let bootstrap_share = report
        .phase("bootstrap")
        .map(|s| s / report.total)
        .unwrap_or(0.0);

    write_manifest(args, "dlrm", seed)?;
    write_report(&args.out, "ledger.json", &ledger.to_json())?;
    write_report(&args.out, "cost.json", &report.to_json())?;
    write_report(&args.out, "cost.csv", &report.to_csv())?;
    write_report(
        &args.out,
        "logit.json",
        &serde_json::to_string_pretty(&json!({
            "logit": result.logit,
            "probability": result.probability,
            "bootstraps": bootstraps,
            "bootstrap_share": bootstrap_share,
            "warnings": ledger.warnings,
        }))
        .expect("logit serializes"),
    )?;
    println!(
        "logit {:.6} (p = {:.4}), {} bootstraps, estimated {:.3} s",
        result.logit, result.probability, bootstraps, report.total
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// llm
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct LlmConfig {
    vm: VmParams,
    #[serde(default)]
    llm: Option<LlmParams>,
    scenarios: Vec<LlmScenario>,
    #[serde(default)]
    seed: u64,
}

pub fn llm(args: &CommonArgs) -> Result<()> {
    let config: LlmConfig = parse(&read_config(&args.config)?, "llm config")?;
    let seed = args.seed.unwrap_or(config.seed);
    let table = load_cost_table(&args.cost_table)?;
    let llm_params = config.llm.unwrap_or_default();

    let mut csv = String::from(ScenarioReport::csv_header());
    csv.push('\n');
    let mut reports = Vec::new();
    for scenario in &config.scenarios {
        let report = run_scenario(scenario, &config.vm, &llm_params, &table, seed)?;
        csv.push_str(&report.to_csv_row());
        csv.push('\n');
        println!(
            "{} m={}: {} input cts, {:.3} s",
            report.strategy, report.m, report.input_cts, report.est_seconds
        );
        reports.push(report);
    }
    write_manifest(args, "llm", seed)?;
    write_report(&args.out, "scenarios.csv", &csv)?;
    write_report(
        &args.out,
        "scenarios.json",
        &serde_json::to_string_pretty(&reports).expect("reports serialize"),
    )?;
    Ok(())
}
