//! Diagonal-form plaintext-matrix x ciphertext-vector products.
//!
//! A matrix is embedded into a power-of-two square of dimension `dim` and
//! stored as its generalized diagonals. With the input vector tiled across
//! the slots with period `dim`, the rotate-multiply-accumulate identity
//!
//! ```text
//! y = sum_t  d_t (x) rot(x, t),   d_t[i] = M[i, (i + t) mod dim]
//! ```
//!
//! reproduces `M * x` in every `dim`-aligned block. The Halevi-Shoup form
//! rotates the input once per diagonal; the baby-step giant-step form
//! factors each offset as `g * n1 + b` and pre-rotates the plaintext
//! diagonals so only `n1 + n2 - 2` ciphertext rotations remain.

use crate::error::{Error, Result};
use crate::vm::{CipherVec, PlainVec, Vm, VmParams};
use rand::Rng;
use std::collections::BTreeMap;

/// Dense row-major matrix of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        Matrix::from_fn(r, c, |i, j| rows[i][j])
    }

    pub fn identity(dim: usize) -> Self {
        Matrix::from_fn(dim, dim, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn random_uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Dense matrix-vector product; the independent oracle for the
    /// encrypted paths. `x` shorter than `cols` is zero-extended.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x.iter().chain(std::iter::repeat(&0.0)))
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }

    /// Writes `other` into `self` with its top-left corner at (r0, c0).
    pub fn paste(&mut self, other: &Matrix, r0: usize, c0: usize) {
        for r in 0..other.rows {
            for c in 0..other.cols {
                self.set(r0 + r, c0 + c, other.get(r, c));
            }
        }
    }
}

/// Generalized-diagonal form of a matrix, embedded into a `dim x dim`
/// power-of-two square. Only diagonals with a nonzero entry are stored.
#[derive(Debug, Clone)]
pub struct DiagonalizedMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Square embedding dimension; a power of two dividing the slot count.
    pub dim: usize,
    /// offset -> base vector; entry i holds M[i, (i+t) mod dim]. Stored
    /// trimmed to the matrix's rows (all later entries are zero) and padded
    /// back to `dim` when applied.
    diagonals: BTreeMap<usize, Vec<f64>>,
}

impl DiagonalizedMatrix {
    pub fn nonzero_count(&self) -> usize {
        self.diagonals.len()
    }

    pub fn offsets(&self) -> impl Iterator<Item = usize> + '_ {
        self.diagonals.keys().copied()
    }

    pub fn diagonal(&self, offset: usize) -> Option<&[f64]> {
        self.diagonals.get(&offset).map(|v| v.as_slice())
    }

    /// Offsets mapped to (-dim/2, dim/2] so wrap-around clusters plan as a
    /// contiguous signed span.
    pub fn signed_offset(&self, offset: usize) -> i64 {
        signed_offset(offset, self.dim)
    }

    /// Debug dump; diagonal keys stringified for JSON.
    pub fn to_json(&self) -> String {
        let diagonals: BTreeMap<String, &Vec<f64>> = self
            .diagonals
            .iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "rows": self.rows,
            "cols": self.cols,
            "dim": self.dim,
            "nonzero_count": self.nonzero_count(),
            "diagonals": diagonals,
        }))
        .expect("diagonal dump serializes")
    }
}

fn signed_offset(offset: usize, dim: usize) -> i64 {
    if offset > dim / 2 {
        offset as i64 - dim as i64
    } else {
        offset as i64
    }
}

/// Extracts the generalized diagonals of `m` after embedding it in the
/// smallest power-of-two square that covers both dimensions.
pub fn diagonalize(m: &Matrix, params: &VmParams) -> Result<DiagonalizedMatrix> {
    let side = m.rows.max(m.cols).max(1);
    let dim = side.next_power_of_two();
    if dim > params.n {
        return Err(Error::Capacity(format!(
            "{}x{} matrix pads to a {dim}-square exceeding {} slots",
            m.rows, m.cols, params.n
        )));
    }
    let mut diagonals: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in 0..m.rows {
        for c in 0..m.cols {
            let v = m.get(r, c);
            if v == 0.0 {
                continue;
            }
            let offset = (c + dim - r) % dim;
            diagonals.entry(offset).or_insert_with(|| vec![0.0; m.rows])[r] = v;
        }
    }
    Ok(DiagonalizedMatrix {
        rows: m.rows,
        cols: m.cols,
        dim,
        diagonals,
    })
}

/// Baby-step giant-step factorization of a diagonal set: every offset is
/// assigned a pair (g, b) with `signed_offset = g * n1 + b`, 0 <= b < n1.
#[derive(Debug, Clone)]
pub struct BsgsPlan {
    pub n1: usize,
    pub n2: usize,
    /// offset (as stored) -> (giant index, baby index)
    pub assignment: BTreeMap<usize, (i64, usize)>,
}

impl BsgsPlan {
    /// Upper bound on ciphertext rotations this plan can require.
    pub fn rotation_bound(&self) -> usize {
        self.n1 + self.n2 - 2
    }
}

/// Chooses (n1, n2) by exhaustive sweep over power-of-two n1, minimizing
/// n1 + n2 where n2 counts the distinct giant indices (with 0 always
/// counted, so the rotation bound n1 + n2 - 2 is guaranteed). Ties resolve
/// toward the smallest n1 at or above sqrt(span). When no power of two
/// keeps n1 + n2 - 2 within 2 * ceil(sqrt(span)) (spans near twice an even
/// power of two), n1 falls back to ceil(sqrt(span)) itself. Deterministic.
pub fn plan_bsgs(diag: &DiagonalizedMatrix) -> BsgsPlan {
    // Represent each offset by an integer congruent mod dim (rotations by
    // t and t + dim agree on period-dim tiled inputs), cutting the circle
    // at the largest gap so contiguous arcs keep a minimal span.
    let dim = diag.dim as i64;
    let mut sorted: Vec<i64> = diag.offsets().map(|t| t as i64).collect();
    sorted.sort_unstable();
    let reps: Vec<i64> = if sorted.is_empty() {
        Vec::new()
    } else {
        let last = sorted.len() - 1;
        let mut cut = 0usize; // representation starts at sorted[cut]
        let mut widest = sorted[0] + dim - sorted[last];
        for i in 0..last {
            let gap = sorted[i + 1] - sorted[i];
            if gap > widest {
                widest = gap;
                cut = i + 1;
            }
        }
        let start = sorted[cut];
        let shift = if start > dim / 2 { dim } else { 0 };
        diag.offsets()
            .map(|t| {
                let t = t as i64;
                (if t >= start { t } else { t + dim }) - shift
            })
            .collect()
    };
    let span = match (reps.iter().min(), reps.iter().max()) {
        (Some(lo), Some(hi)) => (hi - lo + 1).max(1) as usize,
        _ => 1,
    };

    let giant_count = |n1: i64| -> usize {
        let mut giants: std::collections::BTreeSet<i64> =
            reps.iter().map(|s| (s - s.rem_euclid(n1)) / n1).collect();
        giants.insert(0);
        giants.len()
    };

    let target = (span as f64).sqrt();
    let mut best: Option<(usize, usize, usize)> = None; // (score, n1, n2)
    let mut n1 = 1usize;
    loop {
        let n2 = giant_count(n1 as i64);
        let score = n1 + n2;
        let better = match best {
            None => true,
            Some((s, prev_n1, _)) => {
                score < s || (score == s && (prev_n1 as f64) < target && n1 as f64 >= target)
            }
        };
        if better {
            best = Some((score, n1, n2));
        }
        if n1 >= span {
            break;
        }
        n1 *= 2;
    }
    let (score, mut n1, mut n2) = best.expect("at least one candidate");
    let root = target.ceil() as usize;
    if score > 2 * root + 2 && root >= 1 {
        let root_n2 = giant_count(root as i64);
        if root + root_n2 < score {
            n1 = root;
            n2 = root_n2;
        }
    }

    let mut assignment = BTreeMap::new();
    for (t, &s) in diag.offsets().zip(reps.iter()) {
        let b = s.rem_euclid(n1 as i64) as usize;
        let g = (s - b as i64) / n1 as i64;
        assignment.insert(t, (g, b));
    }
    BsgsPlan { n1, n2, assignment }
}

fn zero_matvec_result(vm: &mut Vm, x: &CipherVec) -> Result<CipherVec> {
    let zero = PlainVec::constant(0.0, vm.n());
    vm.mul_plain(x, &zero)
}

/// Halevi-Shoup product: one input rotation per stored diagonal.
///
/// `x` must be tiled with period `diag.dim`; the result holds `M * x` in the
/// first `diag.rows` slots of every `dim`-aligned block. Consumes one level.
pub fn matvec_hs(vm: &mut Vm, diag: &DiagonalizedMatrix, x: &CipherVec) -> Result<CipherVec> {
    if diag.diagonals.is_empty() {
        return zero_matvec_result(vm, x);
    }
    let n = vm.n();
    let mut acc: Option<CipherVec> = None;
    for (&t, base) in &diag.diagonals {
        let rotated = vm.rotate(x, t as i64);
        let pt = PlainVec::tiled(base, diag.dim, n)?;
        let prod = vm.mul_plain(&rotated, &pt)?;
        acc = Some(match acc {
            None => prod,
            Some(a) => vm.add(&a, &prod),
        });
    }
    Ok(acc.expect("nonempty diagonals"))
}

/// BSGS product: identical slots to [`matvec_hs`], at most n1 + n2 - 2
/// rotations. Consumes one level.
pub fn matvec_bsgs(
    vm: &mut Vm,
    diag: &DiagonalizedMatrix,
    plan: &BsgsPlan,
    x: &CipherVec,
) -> Result<CipherVec> {
    if diag.diagonals.is_empty() {
        return zero_matvec_result(vm, x);
    }
    for t in diag.offsets() {
        if !plan.assignment.contains_key(&t) {
            return Err(Error::Plan(format!(
                "plan does not cover diagonal offset {t}"
            )));
        }
    }
    let n = vm.n();

    // group diagonals by giant index
    let mut groups: BTreeMap<i64, Vec<(usize, usize)>> = BTreeMap::new(); // g -> [(b, t)]
    for (&t, &(g, b)) in &plan.assignment {
        if diag.diagonals.contains_key(&t) {
            groups.entry(g).or_default().push((b, t));
        }
    }

    // hoisted baby rotations of the input, shared across giant groups
    let mut baby: BTreeMap<usize, CipherVec> = BTreeMap::new();
    for items in groups.values() {
        for &(b, _) in items {
            baby.entry(b).or_insert_with(|| vm.rotate(x, b as i64));
        }
    }

    let mut total: Option<CipherVec> = None;
    for (&g, items) in &groups {
        let giant = g * plan.n1 as i64;
        let mut acc: Option<CipherVec> = None;
        for &(b, t) in items {
            let base = &diag.diagonals[&t];
            // pre-rotate the plaintext diagonal right by the giant amount
            let shift = giant.rem_euclid(diag.dim as i64) as usize;
            let mut pre = vec![0.0; diag.dim];
            for (j, &v) in base.iter().enumerate() {
                pre[(j + shift) % diag.dim] = v;
            }
            let pt = PlainVec::tiled(&pre, diag.dim, n)?;
            let prod = vm.mul_plain(&baby[&b], &pt)?;
            acc = Some(match acc {
                None => prod,
                Some(a) => vm.add(&a, &prod),
            });
        }
        let acc = acc.expect("nonempty group");
        let rotated = vm.rotate(&acc, giant);
        total = Some(match total {
            None => rotated,
            Some(t) => vm.add(&t, &rotated),
        });
    }
    Ok(total.expect("nonempty groups"))
}

/// Tiles the block `[0, period)` of `x` across all n slots with
/// log2(n / period) rotate-and-add steps. Slots outside the block must be
/// zero. No level is consumed.
pub fn replicate(vm: &mut Vm, x: &CipherVec, period: usize) -> Result<CipherVec> {
    let n = vm.n();
    if !period.is_power_of_two() || period > n {
        return Err(Error::Parameter(format!(
            "replication period {period} must be a power of two <= n = {n}"
        )));
    }
    let mut out = x.clone();
    let mut span = period;
    while span < n {
        let shifted = vm.rotate(&out, -(span as i64));
        out = vm.add(&out, &shifted);
        span *= 2;
    }
    Ok(out)
}

/// Log-depth rotate-and-sum over `width`-blocks, padded to the next power of
/// two w. Afterwards slot 0 of each w-aligned block holds the sum of the
/// block's first `width` entries; the remaining w - 1 slots hold partial
/// sums (invalid data). Entries in the pad region must be zero. Level is
/// unchanged.
pub fn rot_sum(vm: &mut Vm, x: &CipherVec, width: usize) -> Result<CipherVec> {
    let n = vm.n();
    if width == 0 || width > n {
        return Err(Error::Capacity(format!(
            "rot-sum width {width} outside [1, {n}]"
        )));
    }
    let w = width.next_power_of_two();
    let mut out = x.clone();
    let mut step = 1usize;
    while step < w {
        let rotated = vm.rotate(&out, step as i64);
        out = vm.add(&out, &rotated);
        step *= 2;
    }
    Ok(out)
}

/// [`rot_sum`] followed by an anchor mask: slot 0 of each block keeps its
/// sum, the partial-sum slots are zeroed. Costs one level.
pub fn rot_sum_masked(vm: &mut Vm, x: &CipherVec, width: usize) -> Result<CipherVec> {
    let summed = rot_sum(vm, x, width)?;
    let w = width.next_power_of_two();
    let n = vm.n();
    let anchors: Vec<f64> = (0..n).map(|s| if s % w == 0 { 1.0 } else { 0.0 }).collect();
    let mask = PlainVec::new(&anchors, n)?;
    vm.mul_plain(&summed, &mask)
}
