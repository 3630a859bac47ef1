//! End-to-end encrypted recommendation-model inference.
//!
//! The client concatenates dense features with the one-hot (possibly
//! digit-compressed) sparse encoding into a single ciphertext. The server
//! extracts the two parts under masks, runs the dense part through the
//! bottom MLP, looks all embedding tables up with one packed block-diagonal
//! product, concatenates, and runs the top MLP down to a single logit.
//! Nonlinearities are polynomial; bootstraps are placed greedily right
//! before any multiply that would fall below the minimum level.

use crate::cheb::ChebyshevPoly;
use crate::embedding::{
    encode_client, lookup_encrypted, lookup_oracle, pack_block_diagonal, LookupRequest, ModelSpec,
    PackedEmbeddingSet,
};
use crate::error::{Error, Result};
use crate::linalg::{
    diagonalize, matvec_bsgs, plan_bsgs, replicate, BsgsPlan, DiagonalizedMatrix, Matrix,
};
use crate::vm::{CipherVec, PlainVec, Vm, VmParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const PHASE_EXTRACT: &str = "extract";
pub const PHASE_BOTTOM: &str = "bottom_mlp";
pub const PHASE_INTERACTION: &str = "interaction";
pub const PHASE_TOP: &str = "top_mlp";

// ---------------------------------------------------------------------------
// Polynomial activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Square,
    ReluCheb,
    SiluCheb,
}

/// A polynomial activation: either the exact square or a staged Chebyshev
/// approximation evaluated on inputs scaled into [-domain, domain].
#[derive(Debug, Clone)]
pub struct PolyActivation {
    pub kind: ActivationKind,
    pub stages: Vec<ChebyshevPoly>,
    /// Inputs are valid on [-domain, domain].
    pub domain: f64,
}

/// Sign-sharpening stage degrees for the ReLU composition.
const RELU_STAGE_DEGREES: [usize; 3] = [15, 15, 27];
const SILU_DEGREE: usize = 27;

impl PolyActivation {
    pub fn build(kind: ActivationKind, domain: f64) -> Self {
        let stages = match kind {
            ActivationKind::Square => Vec::new(),
            ActivationKind::ReluCheb => {
                // two tanh sharpeners, then a stage mapping straight to
                // (sign(y) + 1) / 2 so the final blend costs no extra level
                vec![
                    ChebyshevPoly::fit(|y| (4.0 * y).tanh(), RELU_STAGE_DEGREES[0]),
                    ChebyshevPoly::fit(|y| (4.0 * y).tanh(), RELU_STAGE_DEGREES[1]),
                    ChebyshevPoly::fit(|y| ((6.0 * y).tanh() + 1.0) / 2.0, RELU_STAGE_DEGREES[2]),
                ]
            }
            ActivationKind::SiluCheb => {
                let b = domain;
                vec![ChebyshevPoly::fit(
                    move |u| {
                        let x = b * u;
                        x / (1.0 + (-x).exp())
                    },
                    SILU_DEGREE,
                )]
            }
        };
        PolyActivation {
            kind,
            stages,
            domain,
        }
    }

    /// The true nonlinearity this activation approximates.
    pub fn true_fn(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Square => x * x,
            ActivationKind::ReluCheb => x.max(0.0),
            ActivationKind::SiluCheb => x / (1.0 + (-x).exp()),
        }
    }

    /// The polynomial actually evaluated; the slot oracle.
    pub fn eval_plain(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Square => x * x,
            ActivationKind::ReluCheb => {
                let u = x / self.domain;
                let s1 = self.stages[0].eval(u);
                let s2 = self.stages[1].eval(s1);
                let gate = self.stages[2].eval(s2);
                x * gate
            }
            ActivationKind::SiluCheb => self.stages[0].eval(x / self.domain),
        }
    }

    /// Max |poly - true| over a dense grid of the domain.
    pub fn approx_error(&self, grid: usize) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..=grid {
            let x = -self.domain + 2.0 * self.domain * i as f64 / grid as f64;
            worst = worst.max((self.eval_plain(x) - self.true_fn(x)).abs());
        }
        worst
    }

    /// Encrypted evaluation. Flags out-of-domain inputs as a ledger warning.
    pub fn eval(&self, vm: &mut Vm, x: &CipherVec, greedy_bootstrap: bool) -> Result<CipherVec> {
        let n = vm.n();
        let bound = x.slots().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if bound > self.domain * (1.0 + 1e-12) {
            vm.ledger_mut().warn(format!(
                "activation input magnitude {bound:.6} exceeds domain {:.6}",
                self.domain
            ));
        }
        match self.kind {
            ActivationKind::Square => {
                let a = if greedy_bootstrap {
                    vm.ensure_level(x, 1)?
                } else {
                    x.clone()
                };
                vm.mul(&a, &a)
            }
            ActivationKind::ReluCheb => {
                let a = if greedy_bootstrap {
                    vm.ensure_level(x, 1)?
                } else {
                    x.clone()
                };
                let u = vm.mul_plain(&a, &PlainVec::constant(1.0 / self.domain, n))?;
                let s1 = self.stages[0].eval_encrypted(vm, &u, greedy_bootstrap)?;
                let s2 = self.stages[1].eval_encrypted(vm, &s1, greedy_bootstrap)?;
                let gate = self.stages[2].eval_encrypted(vm, &s2, greedy_bootstrap)?;
                let (xa, ga) = if greedy_bootstrap {
                    (vm.ensure_level(x, 1)?, vm.ensure_level(&gate, 1)?)
                } else {
                    (x.clone(), gate)
                };
                vm.mul(&xa, &ga)
            }
            ActivationKind::SiluCheb => {
                let a = if greedy_bootstrap {
                    vm.ensure_level(x, 1)?
                } else {
                    x.clone()
                };
                let u = vm.mul_plain(&a, &PlainVec::constant(1.0 / self.domain, n))?;
                self.stages[0].eval_encrypted(vm, &u, greedy_bootstrap)
            }
        }
    }

    /// Multiplicative depth, measured by a dry run on a scratch stream.
    pub fn depth(&self) -> u32 {
        let mut vm = Vm::new(VmParams {
            n: 2,
            max_level: 64,
            boot_level: 32,
            min_level: 0,
        })
        .expect("scratch params");
        let x = vm.encrypt(&[0.25], 60).expect("scratch encrypt");
        let y = self.eval(&mut vm, &x, false).expect("scratch eval");
        x.level() - y.level()
    }
}

// ---------------------------------------------------------------------------
// Network spec and weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightsSource {
    Seed { seed: u64 },
    File { file: PathBuf },
}

/// Full network description: sparse model, MLP widths, activation, input
/// encryption level, and weight provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub model: ModelSpec,
    /// Widths from dense input through the bottom MLP, e.g. [5, 64, 16].
    pub bottom_dims: Vec<usize>,
    /// Widths from the concatenated vector down to the logit; the first
    /// entry must equal bottom output + total embedding dimension and the
    /// last must be 1.
    pub top_dims: Vec<usize>,
    pub activation: ActivationKind,
    /// Activation domain bound; calibrated from sample inputs when absent.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub activation_domain: Option<f64>,
    pub input_level: u32,
    pub weights: WeightsSource,
}

impl NetworkSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::Config(format!("network spec (line {}): {e}", e.line())))
    }

    pub fn embedding_width(&self) -> usize {
        self.model.tables.iter().map(|t| t.d).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottom_dims.len() < 2 || self.top_dims.len() < 2 {
            return Err(Error::Config(
                "bottom_dims and top_dims each need at least two widths".into(),
            ));
        }
        if self.bottom_dims[0] != self.model.dense_count {
            return Err(Error::Config(format!(
                "bottom input width {} must equal dense_count {}",
                self.bottom_dims[0], self.model.dense_count
            )));
        }
        let expected = self.bottom_dims.last().unwrap() + self.embedding_width();
        if self.top_dims[0] != expected {
            return Err(Error::Config(format!(
                "top input width {} must equal bottom output + embedding width = {expected}",
                self.top_dims[0]
            )));
        }
        if *self.top_dims.last().unwrap() != 1 {
            return Err(Error::Config("final top width must be 1".into()));
        }
        if self
            .bottom_dims
            .iter()
            .chain(&self.top_dims)
            .any(|&w| w == 0)
        {
            return Err(Error::Config("layer widths must be nonzero".into()));
        }
        Ok(())
    }
}

/// One linear layer with its diagonal form.
#[derive(Debug)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub diag: DiagonalizedMatrix,
    pub plan: BsgsPlan,
}

impl Layer {
    fn new(weights: Matrix, bias: Vec<f64>, params: &VmParams) -> Result<Self> {
        let diag = diagonalize(&weights, params)?;
        let plan = plan_bsgs(&diag);
        Ok(Layer {
            weights,
            bias,
            diag,
            plan,
        })
    }

    pub fn out_width(&self) -> usize {
        self.weights.rows
    }
}

/// Weight-file manifest: raw little-endian f64, row-major, one named entry
/// per tensor.
#[derive(Debug, Serialize, Deserialize)]
pub struct WeightManifest {
    pub data_file: String,
    pub entries: Vec<WeightEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the data file.
    pub offset: u64,
}

/// Loads named tensors from a manifest + raw data file pair.
#[derive(Debug)]
pub struct WeightFile {
    manifest: WeightManifest,
    data: Vec<u8>,
}

impl WeightFile {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: WeightManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("weight manifest (line {}): {e}", e.line())))?;
        let data_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.data_file);
        let data =
            std::fs::read(&data_path).map_err(|e| Error::io(data_path.display().to_string(), e))?;
        Ok(WeightFile { manifest, data })
    }

    pub fn tensor(&self, name: &str) -> Result<Matrix> {
        let entry = self
            .manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| {
                Error::Config(format!("weight tensor '{name}' missing from manifest"))
            })?;
        let count = entry.rows * entry.cols;
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > self.data.len() {
            return Err(Error::Config(format!(
                "weight tensor '{name}' overruns the data file"
            )));
        }
        let mut values = Vec::with_capacity(count);
        for chunk in self.data[start..end].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(Matrix::from_fn(entry.rows, entry.cols, |r, c| {
            values[r * entry.cols + c]
        }))
    }
}

/// Writes tensors as a manifest + raw data pair; the inverse of
/// [`WeightFile::load`].
pub fn write_weight_file(
    manifest_path: &Path,
    data_file_name: &str,
    tensors: &[(String, Matrix)],
) -> Result<()> {
    let mut data: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, m) in tensors {
        entries.push(WeightEntry {
            name: name.clone(),
            rows: m.rows,
            cols: m.cols,
            offset: data.len() as u64,
        });
        for r in 0..m.rows {
            for c in 0..m.cols {
                data.extend_from_slice(&m.get(r, c).to_le_bytes());
            }
        }
    }
    let manifest = WeightManifest {
        data_file: data_file_name.to_string(),
        entries,
    };
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    std::fs::write(
        manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let data_path = dir.join(data_file_name);
    std::fs::write(&data_path, data).map_err(|e| Error::io(data_path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Model instantiation
// ---------------------------------------------------------------------------

/// A built network: packed tables, diagonalized layers, activation.
pub struct DlrmModel {
    pub spec: NetworkSpec,
    pub packed: PackedEmbeddingSet,
    pub bottom: Vec<Layer>,
    pub top: Vec<Layer>,
    pub activation: PolyActivation,
}

fn seeded_layer(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> (Matrix, Vec<f64>) {
    let bound = 1.0 / (inp as f64).sqrt();
    let w = Matrix::random_uniform(out, inp, bound, rng);
    let b: Vec<f64> = (0..out).map(|_| rng.random_range(-bound..=bound)).collect();
    (w, b)
}

/// Builds the model: tables and layer weights from the stated source, the
/// packed embedding set, and a calibrated activation domain when the spec
/// leaves it open.
pub fn build_model(spec: &NetworkSpec, vm: &Vm, seed: u64) -> Result<DlrmModel> {
    spec.validate()?;
    let tables = spec.model.build_tables(seed)?;
    let packed = pack_block_diagonal(tables, vm)?;
    if spec.model.dense_count + packed.total_rows > vm.n() {
        return Err(Error::Capacity(format!(
            "client input needs {} slots, only {} available",
            spec.model.dense_count + packed.total_rows,
            vm.n()
        )));
    }

    let mut bottom = Vec::new();
    let mut top = Vec::new();
    match &spec.weights {
        WeightsSource::Seed { seed: wseed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*wseed);
            for w in spec.bottom_dims.windows(2) {
                let (m, b) = seeded_layer(&mut rng, w[1], w[0]);
                bottom.push(Layer::new(m, b, vm.params())?);
            }
            for w in spec.top_dims.windows(2) {
                let (m, b) = seeded_layer(&mut rng, w[1], w[0]);
                top.push(Layer::new(m, b, vm.params())?);
            }
        }
        WeightsSource::File { file } => {
            let weights = WeightFile::load(file)?;
            for (i, w) in spec.bottom_dims.windows(2).enumerate() {
                let m = weights.tensor(&format!("bottom.{i}.weight"))?;
                let b = weights.tensor(&format!("bottom.{i}.bias"))?;
                if m.rows != w[1] || m.cols != w[0] {
                    return Err(Error::Config(format!(
                        "bottom.{i}.weight is {}x{}, spec wants {}x{}",
                        m.rows, m.cols, w[1], w[0]
                    )));
                }
                bottom.push(Layer::new(m, b.row(0).to_vec(), vm.params())?);
            }
            for (i, w) in spec.top_dims.windows(2).enumerate() {
                let m = weights.tensor(&format!("top.{i}.weight"))?;
                let b = weights.tensor(&format!("top.{i}.bias"))?;
                if m.rows != w[1] || m.cols != w[0] {
                    return Err(Error::Config(format!(
                        "top.{i}.weight is {}x{}, spec wants {}x{}",
                        m.rows, m.cols, w[1], w[0]
                    )));
                }
                top.push(Layer::new(m, b.row(0).to_vec(), vm.params())?);
            }
        }
    }

    let domain = match spec.activation_domain {
        Some(d) => d,
        None => calibrate_domain(spec, &bottom, &top, &packed, seed)?,
    };
    let activation = PolyActivation::build(spec.activation, domain);

    Ok(DlrmModel {
        spec: spec.clone(),
        packed,
        bottom,
        top,
        activation,
    })
}

/// Plaintext calibration pass: the largest pre-activation magnitude over
/// seeded sample inputs, with headroom.
fn calibrate_domain(
    spec: &NetworkSpec,
    bottom: &[Layer],
    top: &[Layer],
    packed: &PackedEmbeddingSet,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0_0d);
    let mut worst = 1e-6f64;
    // square as a stand-in activation keeps the pass activation-agnostic
    let probe = PolyActivation::build(ActivationKind::Square, 1.0);
    for _ in 0..32 {
        let dense: Vec<f64> = (0..spec.model.dense_count)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let indices: Vec<(String, usize)> = packed
            .tables
            .iter()
            .map(|t| (t.id().to_string(), rng.random_range(0..t.index_space())))
            .collect();
        let req = LookupRequest { indices };
        let trace = plain_trace(bottom, top, packed, &probe, &dense, &req, true)?;
        worst = worst.max(trace.max_preactivation);
    }
    Ok(worst * 1.25)
}

// ---------------------------------------------------------------------------
// Plaintext reference path
// ---------------------------------------------------------------------------

pub struct PlainTrace {
    pub logit: f64,
    pub max_preactivation: f64,
}

fn apply_layer_plain(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let mut y = layer.weights.matvec(x);
    for (v, b) in y.iter_mut().zip(&layer.bias) {
        *v += b;
    }
    y
}

fn plain_trace(
    bottom: &[Layer],
    top: &[Layer],
    packed: &PackedEmbeddingSet,
    activation: &PolyActivation,
    dense: &[f64],
    req: &LookupRequest,
    use_true: bool,
) -> Result<PlainTrace> {
    let act = |x: f64, a: &PolyActivation| {
        if use_true {
            a.true_fn(x)
        } else {
            a.eval_plain(x)
        }
    };
    let mut max_pre = 0.0f64;
    let mut x = dense.to_vec();
    for (i, layer) in bottom.iter().enumerate() {
        x = apply_layer_plain(layer, &x);
        if i + 1 < bottom.len() || !top.is_empty() {
            for v in &x {
                max_pre = max_pre.max(v.abs());
            }
            x = x.iter().map(|&v| act(v, activation)).collect();
        }
    }
    let emb = lookup_oracle(req, packed)?;
    let mut t: Vec<f64> = x;
    t.extend(emb);
    for (i, layer) in top.iter().enumerate() {
        t = apply_layer_plain(layer, &t);
        if i + 1 < top.len() {
            for v in &t {
                max_pre = max_pre.max(v.abs());
            }
            t = t.iter().map(|&v| act(v, activation)).collect();
        }
    }
    Ok(PlainTrace {
        logit: t[0],
        max_preactivation: max_pre,
    })
}

/// Plaintext forward pass with the same polynomial activations the
/// encrypted path evaluates; the end-to-end slot oracle.
pub fn plain_infer(model: &DlrmModel, dense: &[f64], req: &LookupRequest) -> Result<f64> {
    Ok(plain_trace(
        &model.bottom,
        &model.top,
        &model.packed,
        &model.activation,
        dense,
        req,
        false,
    )?
    .logit)
}

/// Plaintext forward pass with the true nonlinearities; the reference for
/// approximation-bounded comparisons.
pub fn plain_infer_true(model: &DlrmModel, dense: &[f64], req: &LookupRequest) -> Result<f64> {
    Ok(plain_trace(
        &model.bottom,
        &model.top,
        &model.packed,
        &model.activation,
        dense,
        req,
        true,
    )?
    .logit)
}

// ---------------------------------------------------------------------------
// Encrypted pipeline
// ---------------------------------------------------------------------------

/// A ciphertext plus what is known about its slot layout: values valid on
/// [0, width); `period` is the tiling period when every period-block holds
/// a copy, `None` when slots beyond the width are zero.
struct Staged {
    ct: CipherVec,
    width: usize,
    period: Option<usize>,
}

/// Re-tiles a staged vector to the given period, masking first when stale
/// copies from a different period would leak into the block.
fn prepare_input(vm: &mut Vm, staged: &Staged, period: usize) -> Result<CipherVec> {
    match staged.period {
        Some(p) if p == period => Ok(staged.ct.clone()),
        Some(_) => {
            let masked = {
                let ready = vm.ensure_level(&staged.ct, 1)?;
                let mask = PlainVec::mask(0, staged.width, vm.n());
                vm.mul_plain(&ready, &mask)?
            };
            replicate(vm, &masked, period)
        }
        None => replicate(vm, &staged.ct, period),
    }
}

fn linear_layer_staged(vm: &mut Vm, layer: &Layer, x: &Staged) -> Result<Staged> {
    let input = prepare_input(vm, x, layer.diag.dim)?;
    let ready = vm.ensure_level(&input, 1)?;
    let out = matvec_bsgs(vm, &layer.diag, &layer.plan, &ready)?;
    let bias = PlainVec::tiled(&layer.bias, layer.diag.dim, vm.n())?;
    let with_bias = vm.add_plain(&out, &bias);
    Ok(Staged {
        ct: with_bias,
        width: layer.out_width(),
        period: Some(layer.diag.dim),
    })
}

/// Splits the client ciphertext into dense and sparse parts: mask the dense
/// prefix; rotate the one-hots to slot 0, then mask. One level per branch.
pub fn extract_features(
    vm: &mut Vm,
    x: &CipherVec,
    dense_count: usize,
    sparse_width: usize,
) -> Result<(CipherVec, CipherVec)> {
    vm.set_phase(PHASE_EXTRACT);
    let n = vm.n();
    let ready = vm.ensure_level(x, 1)?;
    let dense = vm.mul_plain(&ready, &PlainVec::mask(0, dense_count, n))?;
    let shifted = vm.rotate(&ready, dense_count as i64);
    let sparse = vm.mul_plain(&shifted, &PlainVec::mask(0, sparse_width, n))?;
    Ok((dense, sparse))
}

/// Joins the bottom-MLP output and the embedding block into one contiguous
/// vector: embeddings rotate right by the bottom width and both sides are
/// masked. At most one level.
pub fn concat_interaction(
    vm: &mut Vm,
    dense_out: &CipherVec,
    dense_width: usize,
    emb_out: &CipherVec,
    emb_width: usize,
) -> Result<CipherVec> {
    vm.set_phase(PHASE_INTERACTION);
    let n = vm.n();
    if dense_width + emb_width > n {
        return Err(Error::Layout(format!(
            "concatenated width {} exceeds {n} slots",
            dense_width + emb_width
        )));
    }
    let d = vm.ensure_level(dense_out, 1)?;
    let left = vm.mul_plain(&d, &PlainVec::mask(0, dense_width, n))?;
    let e = vm.ensure_level(emb_out, 1)?;
    let shifted = vm.rotate(&e, -(dense_width as i64));
    let right = vm.mul_plain(&shifted, &PlainVec::mask(dense_width, emb_width, n))?;
    Ok(vm.add(&left, &right))
}

/// Result of one encrypted inference.
pub struct Inference {
    pub logit_ct: CipherVec,
    pub logit: f64,
    /// Client-side sigmoid of the decrypted logit.
    pub probability: f64,
}

/// Runs the full encrypted pipeline on one client input and returns the
/// encrypted logit (slot 0). The ledger on `vm` holds the complete trace.
pub fn infer(
    vm: &mut Vm,
    model: &DlrmModel,
    dense: &[f64],
    req: &LookupRequest,
) -> Result<Inference> {
    let spec = &model.spec;
    if dense.len() != spec.model.dense_count {
        return Err(Error::Config(format!(
            "{} dense features supplied, spec wants {}",
            dense.len(),
            spec.model.dense_count
        )));
    }

    // client side: dense features, then the one-hot encoding
    let mut encoding = dense.to_vec();
    encoding.extend(encode_client(req, &model.packed)?);
    let input = vm.encrypt(&encoding, spec.input_level)?;

    let (dense_ct, sparse_ct) =
        extract_features(vm, &input, spec.model.dense_count, model.packed.total_rows)?;

    // bottom MLP on the dense branch
    vm.set_phase(PHASE_BOTTOM);
    let mut x = Staged {
        ct: dense_ct,
        width: spec.model.dense_count,
        period: None,
    };
    for (i, layer) in model.bottom.iter().enumerate() {
        vm.set_phase(PHASE_BOTTOM);
        x = linear_layer_staged(vm, layer, &x)?;
        if i + 1 < model.bottom.len() || !model.top.is_empty() {
            let activated = model.activation.eval(vm, &x.ct, true)?;
            x = Staged {
                ct: activated,
                width: x.width,
                period: x.period,
            };
        }
    }

    // embedding lookup on the sparse branch
    let period = model.packed.input_period(0);
    let sparse_staged = Staged {
        ct: sparse_ct,
        width: model.packed.total_rows,
        period: None,
    };
    let tiled = prepare_input(vm, &sparse_staged, period)?;
    let ready = vm.ensure_level(&tiled, 1)?;
    let emb = lookup_encrypted(vm, &model.packed, &[ready])?;

    // interaction + top MLP
    let emb_width = model.packed.total_cols;
    let joined = concat_interaction(vm, &x.ct, x.width, &emb, emb_width)?;
    let mut t = Staged {
        ct: joined,
        width: x.width + emb_width,
        period: None,
    };
    for (i, layer) in model.top.iter().enumerate() {
        vm.set_phase(PHASE_TOP);
        t = linear_layer_staged(vm, layer, &t)?;
        if i + 1 < model.top.len() {
            let activated = model.activation.eval(vm, &t.ct, true)?;
            t = Staged {
                ct: activated,
                width: t.width,
                period: t.period,
            };
        }
    }

    let logit = t.ct.slots()[0];
    Ok(Inference {
        logit_ct: t.ct,
        logit,
        probability: 1.0 / (1.0 + (-logit).exp()),
    })
}

/// Seeded sample input for a spec: dense features in [0, 1) and one valid
/// index per table.
pub fn sample_input(model: &DlrmModel, seed: u64) -> (Vec<f64>, LookupRequest) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense: Vec<f64> = (0..model.spec.model.dense_count)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let indices: Vec<(String, usize)> = model
        .packed
        .tables
        .iter()
        .map(|t| (t.id().to_string(), rng.random_range(0..t.index_space())))
        .collect();
    (dense, LookupRequest { indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TableSpec;
    use crate::ledger::OpKind;

    fn tiny_model_spec(activation: ActivationKind) -> NetworkSpec {
        NetworkSpec {
            model: ModelSpec {
                tables: vec![
                    TableSpec {
                        id: "a".into(),
                        k: 4,
                        d: 3,
                        compress: None,
                    },
                    TableSpec {
                        id: "b".into(),
                        k: 6,
                        d: 2,
                        compress: None,
                    },
                ],
                threshold: 0,
                dense_count: 3,
            },
            bottom_dims: vec![3, 8, 4],
            top_dims: vec![9, 8, 1],
            activation,
            activation_domain: None,
            input_level: 10,
            weights: WeightsSource::Seed { seed: 5 },
        }
    }

    fn test_vm() -> Vm {
        Vm::new(VmParams {
            n: 128,
            max_level: 24,
            boot_level: 12,
            min_level: 1,
        })
        .unwrap()
    }

    #[test]
    fn activation_depths_are_ordered() {
        let square = PolyActivation::build(ActivationKind::Square, 4.0);
        let silu = PolyActivation::build(ActivationKind::SiluCheb, 4.0);
        let relu = PolyActivation::build(ActivationKind::ReluCheb, 4.0);
        assert_eq!(square.depth(), 1);
        assert!(square.depth() < silu.depth());
        assert!(silu.depth() < relu.depth());
    }

    #[test]
    fn square_activation_is_exact() {
        let act = PolyActivation::build(ActivationKind::Square, 8.0);
        let mut vm = test_vm();
        let x = vm.encrypt(&[-2.0, 0.0, 3.0], 6).unwrap();
        let y = act.eval(&mut vm, &x, false).unwrap();
        assert_eq!(&y.slots()[..3], &[4.0, 0.0, 9.0]);
        assert_eq!(y.level(), 5);
    }

    #[test]
    fn relu_approximation_close_on_unit_interval() {
        let act = PolyActivation::build(ActivationKind::ReluCheb, 1.0);
        let err = act.approx_error(2001);
        assert!(err <= 1e-2, "relu approximation error {err}");
    }

    #[test]
    fn silu_approximation_tight() {
        let act = PolyActivation::build(ActivationKind::SiluCheb, 4.0);
        let err = act.approx_error(2001);
        assert!(err <= 1e-3, "silu approximation error {err}");
    }

    #[test]
    fn domain_violation_sets_warning() {
        let act = PolyActivation::build(ActivationKind::SiluCheb, 1.0);
        let mut vm = test_vm();
        let x = vm.encrypt(&[5.0], 8).unwrap();
        let _ = act.eval(&mut vm, &x, false).unwrap();
        assert!(!vm.ledger().warnings.is_empty());
    }

    #[test]
    fn linear_layer_matches_dense_oracle() {
        let mut vm = test_vm();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::random_uniform(6, 4, 1.0, &mut rng);
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = Layer::new(w.clone(), b.clone(), vm.params()).unwrap();
        let x_vals: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ct = vm.encrypt(&x_vals, 8).unwrap();
        let staged = Staged {
            ct,
            width: 4,
            period: None,
        };
        let out = linear_layer_staged(&mut vm, &layer, &staged).unwrap();
        let expected = apply_layer_plain(&layer, &x_vals);
        for (i, e) in expected.iter().enumerate() {
            assert!((out.ct.slots()[i] - e).abs() < 1e-6);
        }
        // rotation bound
        let rotations = vm.ledger().count(OpKind::Rotate) as usize;
        let replication = (vm.n() / layer.diag.dim).ilog2() as usize;
        assert!(rotations <= layer.plan.rotation_bound() + replication);
    }

    #[test]
    fn identity_layer_passes_through() {
        let mut vm = test_vm();
        let layer = Layer::new(Matrix::identity(4), vec![0.0; 4], vm.params()).unwrap();
        let ct = vm.encrypt(&[1.0, -2.0, 3.0, 0.5], 8).unwrap();
        let staged = Staged {
            ct: ct.clone(),
            width: 4,
            period: None,
        };
        let out = linear_layer_staged(&mut vm, &layer, &staged).unwrap();
        for i in 0..4 {
            assert!((out.ct.slots()[i] - ct.slots()[i]).abs() < 1e-12);
        }
        assert_eq!(out.ct.level(), 7);
    }

    #[test]
    fn extraction_splits_dense_and_sparse() {
        let mut vm = test_vm();
        let x = vm
            .encrypt(&[0.1, 0.2, 0.3, 1.0, 0.0, 0.0, 1.0, 0.0], 8)
            .unwrap();
        let (dense, sparse) = extract_features(&mut vm, &x, 3, 5).unwrap();
        assert_eq!(&dense.slots()[..3], &[0.1, 0.2, 0.3]);
        assert_eq!(dense.slots()[3], 0.0);
        assert_eq!(&sparse.slots()[..5], &[1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(dense.level(), 7);
        assert_eq!(sparse.level(), 7);
    }

    #[test]
    fn concat_is_contiguous() {
        let mut vm = test_vm();
        let a = vm.encrypt(&[1.0, 2.0, 3.0, 9.0], 8).unwrap();
        let b = vm.encrypt(&[4.0, 5.0, 6.0, 9.0], 8).unwrap();
        let joined = concat_interaction(&mut vm, &a, 3, &b, 3).unwrap();
        assert_eq!(&joined.slots()[..6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(joined.slots()[6], 0.0);
        assert_eq!(joined.level(), 7);
    }

    #[test]
    fn end_to_end_square_matches_plain_forward() {
        let spec = tiny_model_spec(ActivationKind::Square);
        let mut vm = test_vm();
        let model = build_model(&spec, &vm, 42).unwrap();
        let (dense, req) = sample_input(&model, 7);
        let expected = plain_infer(&model, &dense, &req).unwrap();
        let result = infer(&mut vm, &model, &dense, &req).unwrap();
        assert!(
            (result.logit - expected).abs() < 1e-6,
            "encrypted {} vs plain {expected}",
            result.logit
        );
    }

    #[test]
    fn end_to_end_many_random_square_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..10 {
            let h1 = rng.random_range(2..10);
            let h2 = rng.random_range(2..8);
            let tables: Vec<TableSpec> = (0..rng.random_range(1..4))
                .map(|i| TableSpec {
                    id: format!("t{i}"),
                    k: rng.random_range(2..10),
                    d: rng.random_range(1..4),
                    compress: None,
                })
                .collect();
            let emb_width: usize = tables.iter().map(|t| t.d).sum();
            let dense_count = rng.random_range(1..5);
            let spec = NetworkSpec {
                model: ModelSpec {
                    tables,
                    threshold: 0,
                    dense_count,
                },
                bottom_dims: vec![dense_count, h1, h2],
                top_dims: vec![h2 + emb_width, rng.random_range(2..8), 1],
                activation: ActivationKind::Square,
                activation_domain: None,
                input_level: 10,
                weights: WeightsSource::Seed { seed: trial },
            };
            let mut vm = test_vm();
            let model = build_model(&spec, &vm, trial).unwrap();
            let (dense, req) = sample_input(&model, trial + 100);
            let expected = plain_infer(&model, &dense, &req).unwrap();
            let result = infer(&mut vm, &model, &dense, &req).unwrap();
            assert!(
                (result.logit - expected).abs() < 1e-6,
                "trial {trial}: encrypted {} vs plain {expected}",
                result.logit
            );
        }
    }

    #[test]
    fn greedy_bootstraps_keep_levels_legal() {
        let spec = NetworkSpec {
            activation: ActivationKind::ReluCheb,
            activation_domain: Some(6.0),
            ..tiny_model_spec(ActivationKind::ReluCheb)
        };
        let mut vm = test_vm();
        let model = build_model(&spec, &vm, 9).unwrap();
        let (dense, req) = sample_input(&model, 3);
        let result = infer(&mut vm, &model, &dense, &req).unwrap();
        // deep activation forces bootstraps; every op stayed legal
        assert!(vm.ledger().count(OpKind::Bootstrap) > 0);
        let expected = plain_infer(&model, &dense, &req).unwrap();
        // slot equivalence against the polynomial oracle
        assert!(
            (result.logit - expected).abs() < 1e-6,
            "encrypted {} vs poly-plain {expected}",
            result.logit
        );
    }

    #[test]
    fn weight_file_round_trip_and_missing_file_error() {
        let dir = std::env::temp_dir().join(format!("helut-wf-{}", std::process::id()));
        let manifest = dir.join("test.manifest.json");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::random_uniform(3, 4, 1.0, &mut rng);
        write_weight_file(
            &manifest,
            "test.bin",
            &[("bottom.0.weight".into(), w.clone())],
        )
        .unwrap();
        let loaded = WeightFile::load(&manifest).unwrap();
        assert_eq!(loaded.tensor("bottom.0.weight").unwrap(), w);
        assert!(loaded.tensor("nope").is_err());

        let missing = dir.join("absent.manifest.json");
        let err = WeightFile::load(&missing).unwrap_err();
        assert!(err.to_string().contains("absent.manifest.json"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn build_model_from_weight_file_matches_seeded_layers() {
        let dir = std::env::temp_dir().join(format!("helut-bm-{}", std::process::id()));
        let spec_seeded = tiny_model_spec(ActivationKind::Square);
        let vm = test_vm();
        let seeded = build_model(&spec_seeded, &vm, 42).unwrap();

        let mut tensors = Vec::new();
        for (i, layer) in seeded.bottom.iter().enumerate() {
            tensors.push((format!("bottom.{i}.weight"), layer.weights.clone()));
            tensors.push((
                format!("bottom.{i}.bias"),
                Matrix::from_rows(std::slice::from_ref(&layer.bias)),
            ));
        }
        for (i, layer) in seeded.top.iter().enumerate() {
            tensors.push((format!("top.{i}.weight"), layer.weights.clone()));
            tensors.push((
                format!("top.{i}.bias"),
                Matrix::from_rows(std::slice::from_ref(&layer.bias)),
            ));
        }
        let manifest = dir.join("net.manifest.json");
        write_weight_file(&manifest, "net.bin", &tensors).unwrap();

        let spec_file = NetworkSpec {
            weights: WeightsSource::File {
                file: manifest.clone(),
            },
            ..spec_seeded
        };
        let from_file = build_model(&spec_file, &vm, 42).unwrap();
        let (dense, req) = sample_input(&from_file, 7);
        let a = plain_infer(&seeded, &dense, &req).unwrap();
        let b = plain_infer(&from_file, &dense, &req).unwrap();
        assert!((a - b).abs() < 1e-12);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn spec_validation_rejects_bad_widths() {
        let mut spec = tiny_model_spec(ActivationKind::Square);
        spec.top_dims = vec![4, 1]; // should be 9
        assert!(spec.validate().is_err());
        let mut spec2 = tiny_model_spec(ActivationKind::Square);
        spec2.top_dims = vec![9, 8, 2];
        assert!(spec2.validate().is_err());
    }
}
