//! Chebyshev-basis polynomials: fitting on [-1, 1] and log-depth encrypted
//! evaluation.
//!
//! Basis polynomials are built with the doubling recurrences
//! T_2m = 2 T_m^2 - 1 and T_2m+1 = 2 T_m T_m+1 - T_1, so T_i sits at depth
//! ceil(log2(i)); applying the coefficients costs one more level.

use crate::error::Result;
use crate::vm::{CipherVec, PlainVec, Vm};
use std::collections::BTreeMap;

/// A polynomial in the Chebyshev basis on [-1, 1].
#[derive(Debug, Clone)]
pub struct ChebyshevPoly {
    /// Coefficients c_0..c_deg of sum c_i T_i.
    pub coeffs: Vec<f64>,
}

impl ChebyshevPoly {
    /// Interpolates `f` at the deg+1 Chebyshev nodes.
    pub fn fit(f: impl Fn(f64) -> f64, degree: usize) -> Self {
        let n = degree + 1;
        let samples: Vec<f64> = (0..n)
            .map(|j| {
                let theta = std::f64::consts::PI * (j as f64 + 0.5) / n as f64;
                f(theta.cos())
            })
            .collect();
        let mut coeffs = Vec::with_capacity(n);
        for k in 0..n {
            let mut acc = 0.0;
            for (j, s) in samples.iter().enumerate() {
                let theta = std::f64::consts::PI * (j as f64 + 0.5) / n as f64;
                acc += s * (k as f64 * theta).cos();
            }
            let scale = if k == 0 { 1.0 } else { 2.0 };
            coeffs.push(scale * acc / n as f64);
        }
        ChebyshevPoly { coeffs }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    /// Clenshaw evaluation; the plaintext slot oracle.
    pub fn eval(&self, x: f64) -> f64 {
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for &c in self.coeffs.iter().skip(1).rev() {
            let next = 2.0 * x * b1 - b2 + c;
            b2 = b1;
            b1 = next;
        }
        x * b1 - b2 + self.coeffs[0]
    }

    /// Encrypted evaluation. The input must already lie in [-1, 1]. With
    /// `greedy_bootstrap`, operands about to be multiplied below the minimum
    /// level are refreshed first.
    pub fn eval_encrypted(
        &self,
        vm: &mut Vm,
        x: &CipherVec,
        greedy_bootstrap: bool,
    ) -> Result<CipherVec> {
        let n = vm.n();
        let degree = self.degree();
        if degree == 0 {
            // constant polynomial; burn the one level any evaluation costs
            let ready = prepare(vm, x, greedy_bootstrap)?;
            let zeroed = vm.mul_plain(&ready, &PlainVec::constant(0.0, n))?;
            return Ok(vm.add_plain(&zeroed, &PlainVec::constant(self.coeffs[0], n)));
        }

        let mut cache: BTreeMap<usize, CipherVec> = BTreeMap::new();
        cache.insert(1, x.clone());
        let mut acc: Option<CipherVec> = None;
        for (i, &c) in self.coeffs.iter().enumerate().skip(1) {
            if c == 0.0 {
                continue;
            }
            let basis = self.basis(vm, i, &mut cache, greedy_bootstrap)?;
            let ready = prepare(vm, &basis, greedy_bootstrap)?;
            let term = vm.mul_plain(&ready, &PlainVec::constant(c, n))?;
            acc = Some(match acc {
                None => term,
                Some(a) => vm.add(&a, &term),
            });
        }
        let acc = match acc {
            Some(a) => a,
            None => {
                let ready = prepare(vm, x, greedy_bootstrap)?;
                vm.mul_plain(&ready, &PlainVec::constant(0.0, n))?
            }
        };
        Ok(vm.add_plain(&acc, &PlainVec::constant(self.coeffs[0], n)))
    }

    fn basis(
        &self,
        vm: &mut Vm,
        i: usize,
        cache: &mut BTreeMap<usize, CipherVec>,
        greedy: bool,
    ) -> Result<CipherVec> {
        if let Some(t) = cache.get(&i) {
            return Ok(t.clone());
        }
        let n = vm.n();
        let t_i = if i.is_multiple_of(2) {
            let half = self.basis(vm, i / 2, cache, greedy)?;
            let a = prepare(vm, &half, greedy)?;
            let sq = vm.mul(&a, &a)?;
            let doubled = vm.add(&sq, &sq);
            vm.add_plain(&doubled, &PlainVec::constant(-1.0, n))
        } else {
            let low = self.basis(vm, i / 2, cache, greedy)?;
            let high = self.basis(vm, i / 2 + 1, cache, greedy)?;
            let a = prepare(vm, &low, greedy)?;
            let b = prepare(vm, &high, greedy)?;
            let prod = vm.mul(&a, &b)?;
            let doubled = vm.add(&prod, &prod);
            vm.sub(&doubled, &cache[&1])
        };
        cache.insert(i, t_i.clone());
        Ok(t_i)
    }
}

fn prepare(vm: &mut Vm, x: &CipherVec, greedy: bool) -> Result<CipherVec> {
    if greedy {
        vm.ensure_level(x, 1)
    } else {
        Ok(x.clone())
    }
}
