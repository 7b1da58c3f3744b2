//! Hermite polynomial algebra over Gaussian space, correlated Gaussian
//! sampling, the Ornstein–Uhlenbeck operator and Monte Carlo estimation.
//!
//! Polynomials are stored in the orthonormal Hermite basis
//! `H_τ(x) = Π_i H_{τ_i}(x_i)` with `H_0 = 1`, `H_1 = x` and
//! `H_{r+1} = (x H_r − √r H_{r−1}) / √(r+1)`.
//!
//! Random streams come from ChaCha8 keyed by the 64-bit seed; chunk `c` of a
//! Monte Carlo run draws from stream `c`, so estimates do not depend on how
//! chunks are scheduled across threads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::MultiIndex;

/// Samples per Monte Carlo chunk.
pub const MC_CHUNK: usize = 4096;

/// Default Monte Carlo budget.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;

/// Univariate normalized Hermite polynomial `H_r(x)`.
pub fn hermite_1d(r: usize, x: f64) -> f64 {
    match r {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut prev, mut cur) = (1.0, x);
            for k in 1..r {
                let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// `H_τ(x) = Π_i H_{τ_i}(x_i)`.
pub fn hermite_eval(tau: &MultiIndex, x: &[f64]) -> f64 {
    tau.entries()
        .iter()
        .zip(x)
        .map(|(&t, &xi)| hermite_1d(t as usize, xi))
        .product()
}

/// Values `H_r(x_i)` for every variable and `r ≤ max_degree`.
#[derive(Clone, Debug)]
pub struct HermiteTable {
    stride: usize,
    values: Vec<f64>,
}

impl HermiteTable {
    pub fn new(x: &[f64], max_degree: usize) -> Self {
        let stride = max_degree + 1;
        let mut values = vec![0.0; x.len() * stride];
        for (i, &xi) in x.iter().enumerate() {
            let row = &mut values[i * stride..(i + 1) * stride];
            row[0] = 1.0;
            if max_degree >= 1 {
                row[1] = xi;
            }
            for k in 1..max_degree {
                row[k + 1] = (xi * row[k] - (k as f64).sqrt() * row[k - 1]) / ((k + 1) as f64).sqrt();
            }
        }
        Self { stride, values }
    }

    #[inline]
    pub fn get(&self, var: usize, r: usize) -> f64 {
        self.values[var * self.stride + r]
    }
}

/// A real polynomial in the Hermite basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolyRepr", try_from = "PolyRepr")]
pub struct HermitePoly {
    n: usize,
    coeffs: BTreeMap<MultiIndex, f64>,
}

/// Serialized form: variable count and `(τ, coefficient)` pairs.
#[derive(Serialize, Deserialize)]
struct PolyRepr {
    n: usize,
    terms: Vec<(Vec<u16>, f64)>,
}

impl From<HermitePoly> for PolyRepr {
    fn from(p: HermitePoly) -> Self {
        let terms = p.terms().map(|(t, c)| (t.entries().to_vec(), c)).collect();
        Self { n: p.n, terms }
    }
}

impl TryFrom<PolyRepr> for HermitePoly {
    type Error = Error;

    fn try_from(r: PolyRepr) -> Result<Self> {
        HermitePoly::from_terms(r.n, r.terms.into_iter().map(|(t, c)| (MultiIndex::new(t), c)))
    }
}

impl HermitePoly {
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            coeffs: BTreeMap::new(),
        }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self::monomial(n, MultiIndex::zero(n), c)
    }

    /// `c·H_τ`.
    pub fn monomial(n: usize, tau: MultiIndex, c: f64) -> Self {
        assert_eq!(tau.len(), n, "exponent length must equal variable count");
        let mut coeffs = BTreeMap::new();
        if c != 0.0 {
            coeffs.insert(tau, c);
        }
        Self { n, coeffs }
    }

    /// The variable `x_i = H_1(x_i)`.
    pub fn variable(n: usize, i: usize) -> Self {
        let mut tau = vec![0u16; n];
        tau[i] = 1;
        Self::monomial(n, MultiIndex::new(tau), 1.0)
    }

    /// Builds from `(τ, coefficient)` pairs; repeated exponents add.
    pub fn from_terms(n: usize, terms: impl IntoIterator<Item = (MultiIndex, f64)>) -> Result<Self> {
        let mut p = Self::zero(n);
        for (tau, c) in terms {
            if tau.len() != n {
                return Err(Error::DimMismatch {
                    expected: n,
                    found: tau.len(),
                });
            }
            p.add_term(tau, c);
        }
        Ok(p)
    }

    pub(crate) fn add_term(&mut self, tau: MultiIndex, c: f64) {
        if c == 0.0 {
            return;
        }
        let e = self.coeffs.entry(tau).or_insert(0.0);
        *e += c;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Nonzero terms in exponent order.
    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> {
        self.coeffs.iter().filter(|(_, &c)| c != 0.0).map(|(k, &c)| (k, c))
    }

    pub fn num_terms(&self) -> usize {
        self.coeffs.values().filter(|&&c| c != 0.0).count()
    }

    /// `p̂(τ)`.
    pub fn coeff(&self, tau: &MultiIndex) -> f64 {
        self.coeffs.get(tau).copied().unwrap_or(0.0)
    }

    /// `p̂(0)`.
    pub fn mean(&self) -> f64 {
        self.coeff(&MultiIndex::zero(self.n))
    }

    /// `max wt(τ)` over nonzero terms.
    pub fn degree(&self) -> usize {
        self.terms().map(|(t, _)| t.weight()).max().unwrap_or(0)
    }

    /// Largest single-variable exponent.
    pub fn max_exponent(&self) -> usize {
        self.terms()
            .flat_map(|(t, _)| t.entries().iter().map(|&e| e as usize))
            .max()
            .unwrap_or(0)
    }

    /// `‖p‖₂² = Σ_τ p̂(τ)²`.
    pub fn norm_sq(&self) -> f64 {
        self.terms().map(|(_, c)| c * c).sum()
    }

    pub fn is_multilinear(&self) -> bool {
        self.terms().all(|(t, _)| t.entries().iter().all(|&e| e <= 1))
    }

    /// `Inf_i(p) = Σ_{τ_i ≠ 0} p̂(τ)²`.
    pub fn influence(&self, i: usize) -> f64 {
        self.terms().filter(|(t, _)| t.entries()[i] != 0).map(|(_, c)| c * c).sum()
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|_, c| a * c)
    }

    /// Applies `f(τ, p̂(τ))` coefficientwise and drops exact zeros.
    pub fn map(&self, f: impl Fn(&MultiIndex, f64) -> f64) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .map(|(k, &c)| (k.clone(), f(k, c)))
            .filter(|(_, c)| *c != 0.0)
            .collect();
        Self { n: self.n, coeffs }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::DimMismatch {
                expected: self.n,
                found: other.n,
            });
        }
        let mut out = self.scale(a);
        for (t, c) in other.terms() {
            out.add_term(t.clone(), b * c);
        }
        out.coeffs.retain(|_, c| *c != 0.0);
        Ok(out)
    }

    /// Product of polynomials depending on disjoint variable sets, where
    /// `H_τ H_τ' = H_{τ+τ'}` holds exactly.
    pub fn mul_disjoint(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::DimMismatch {
                expected: self.n,
                found: other.n,
            });
        }
        let used = |p: &Self| {
            let mut v = vec![false; p.n];
            for (t, _) in p.terms() {
                for i in t.support() {
                    v[i] = true;
                }
            }
            v
        };
        let (a, b) = (used(self), used(other));
        if a.iter().zip(&b).any(|(x, y)| *x && *y) {
            return Err(Error::Precondition("factors share a variable".into()));
        }
        let mut out = Self::zero(self.n);
        for (t1, c1) in self.terms() {
            for (t2, c2) in other.terms() {
                let tau = MultiIndex::new(t1.entries().iter().zip(t2.entries()).map(|(x, y)| x + y).collect());
                out.add_term(tau, c1 * c2);
            }
        }
        Ok(out)
    }

    /// Relabels variable `i` as `map[i]` in a space of `n_new` variables.
    pub fn relabel(&self, n_new: usize, map: &[usize]) -> Result<Self> {
        if map.len() != self.n || map.iter().any(|&j| j >= n_new) {
            return Err(Error::Argument("invalid variable map".into()));
        }
        let mut out = Self::zero(n_new);
        for (t, c) in self.terms() {
            let mut tau = vec![0u16; n_new];
            for (i, &e) in t.entries().iter().enumerate() {
                if e != 0 {
                    if tau[map[i]] != 0 {
                        return Err(Error::Argument("variable map is not injective on the support".into()));
                    }
                    tau[map[i]] = e;
                }
            }
            out.add_term(MultiIndex::new(tau), c);
        }
        Ok(out)
    }

    /// `p(x)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let table = HermiteTable::new(x, self.max_exponent());
        self.eval_table(&table)
    }

    /// `p(x)` using precomputed Hermite values.
    pub fn eval_table(&self, table: &HermiteTable) -> f64 {
        self.terms()
            .map(|(t, c)| {
                let mut v = c;
                for (i, &e) in t.entries().iter().enumerate() {
                    if e != 0 {
                        v *= table.get(i, e as usize);
                    }
                }
                v
            })
            .sum()
    }

    /// A flattened form for repeated evaluation.
    pub fn compile(&self) -> CompiledPoly {
        let mut offsets = vec![0usize];
        let mut factors = Vec::new();
        let mut coeffs = Vec::new();
        for (t, c) in self.terms() {
            for (i, &e) in t.entries().iter().enumerate() {
                if e != 0 {
                    factors.push((i as u32, e as u32));
                }
            }
            offsets.push(factors.len());
            coeffs.push(c);
        }
        CompiledPoly {
            coeffs,
            offsets,
            factors,
        }
    }
}

/// Flattened polynomial for fast evaluation against a [`HermiteTable`].
#[derive(Clone, Debug)]
pub struct CompiledPoly {
    coeffs: Vec<f64>,
    offsets: Vec<usize>,
    factors: Vec<(u32, u32)>,
}

impl CompiledPoly {
    #[inline]
    pub fn eval(&self, table: &HermiteTable) -> f64 {
        let mut acc = 0.0;
        for (k, &c) in self.coeffs.iter().enumerate() {
            let mut v = c;
            for &(i, e) in &self.factors[self.offsets[k]..self.offsets[k + 1]] {
                v *= table.get(i as usize, e as usize);
            }
            acc += v;
        }
        acc
    }

    /// Evaluation when every exponent is at most 1.
    #[inline]
    pub fn eval_multilinear(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (k, &c) in self.coeffs.iter().enumerate() {
            let mut v = c;
            for &(i, _) in &self.factors[self.offsets[k]..self.offsets[k + 1]] {
                v *= x[i as usize];
            }
            acc += v;
        }
        acc
    }
}

/// Pair correlations `ρ_i` of `𝒢_{ρ_1} ⊗ … ⊗ 𝒢_{ρ_n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedGaussianSpec {
    pub rhos: Vec<f64>,
}

impl CorrelatedGaussianSpec {
    pub fn new(rhos: Vec<f64>) -> Result<Self> {
        if rhos.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Argument("pair correlations must lie in [0,1]".into()));
        }
        Ok(Self { rhos })
    }

    pub fn uniform(n: usize, rho: f64) -> Result<Self> {
        Self::new(vec![rho; n])
    }

    pub fn n(&self) -> usize {
        self.rhos.len()
    }
}

/// `⟨p, q⟩` under `(g, h) ~ spec`: `Σ_τ Π ρ_i^{τ_i} p̂(τ) q̂(τ)`.
pub fn gauss_inner(p: &HermitePoly, q: &HermitePoly, spec: &CorrelatedGaussianSpec) -> Result<f64> {
    if p.n != q.n || p.n != spec.n() {
        return Err(Error::DimMismatch {
            expected: spec.n(),
            found: p.n,
        });
    }
    let (small, large) = if p.coeffs.len() <= q.coeffs.len() { (p, q) } else { (q, p) };
    Ok(small
        .terms()
        .map(|(t, c)| {
            let w: f64 = t
                .entries()
                .iter()
                .zip(&spec.rhos)
                .map(|(&e, &r)| if e == 0 { 1.0 } else { r.powi(e as i32) })
                .product();
            w * c * large.coeff(t)
        })
        .sum())
}

/// `U_ρ p`: scales `p̂(τ)` by `ρ^{wt(τ)}`.
pub fn ou_apply(p: &HermitePoly, rho: f64) -> Result<HermitePoly> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Argument(format!("ρ must lie in [0,1], got {rho}")));
    }
    Ok(p.map(|t, c| c * rho.powi(t.weight() as i32)))
}

/// Keeps the terms with `τ ∈ {0,1}^n`.
pub fn multilinear_truncate(p: &HermitePoly) -> HermitePoly {
    p.map(|t, c| if t.entries().iter().all(|&e| e <= 1) { c } else { 0.0 })
}

/// Keeps the terms with `wt(τ) ≤ d`.
pub fn degree_truncate(p: &HermitePoly, d: usize) -> HermitePoly {
    p.map(|t, c| if t.weight() <= d { c } else { 0.0 })
}

/// A deterministic ChaCha8 generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fills `g` and `h` with one draw from the correlated law `spec`: `h_i = ρ_i g_i + √(1−ρ_i²) z_i`.
pub fn sample_correlated_into<R: Rng + ?Sized>(spec: &CorrelatedGaussianSpec, rng: &mut R, g: &mut [f64], h: &mut [f64]) {
    for (i, &r) in spec.rhos.iter().enumerate() {
        let a: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        g[i] = a;
        h[i] = if r == 1.0 { a } else { r * a + (1.0 - r * r).sqrt() * z };
    }
}

/// One draw `(g, h)` from the correlated law `spec`, determined by `seed`.
pub fn sample_correlated(spec: &CorrelatedGaussianSpec, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng_for(seed, 0);
    let mut g = vec![0.0; spec.n()];
    let mut h = vec![0.0; spec.n()];
    sample_correlated_into(spec, &mut rng, &mut g, &mut h);
    (g, h)
}

/// A Monte Carlo estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(v: f64) -> Self {
        Self { mean: v, std_error: 0.0 }
    }

    /// `|self − target| ≤ k·SE` (with a tiny absolute floor).
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error + 1e-12 * (1.0 + target.abs())
    }
}

#[derive(Clone, Copy, Default)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, other: Self) -> Self {
        if self.count == 0.0 {
            return other;
        }
        if other.count == 0.0 {
            return self;
        }
        let count = self.count + other.count;
        let d = other.mean - self.mean;
        Self {
            count,
            mean: self.mean + d * other.count / count,
            m2: self.m2 + other.m2 + d * d * self.count * other.count / count,
        }
    }

    fn estimate(self) -> Estimate {
        let se = if self.count > 1.0 {
            (self.m2 / (self.count - 1.0) / self.count).sqrt()
        } else {
            0.0
        };
        Estimate {
            mean: self.mean,
            std_error: se,
        }
    }
}

/// Runs `samples` draws of a `k`-output estimator. Each draw receives the
/// chunk's generator and writes `k` values; chunk `c` uses stream `c` of
/// `seed`, and chunk results are merged in chunk order.
pub fn mc_run<F>(samples: usize, seed: u64, k: usize, f: F) -> Vec<Estimate>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let chunks = samples.div_ceil(MC_CHUNK);
    let parts: Vec<Vec<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, c as u64);
            let mut acc = vec![Moments::default(); k];
            let mut out = vec![0.0; k];
            let count = MC_CHUNK.min(samples - c * MC_CHUNK);
            for _ in 0..count {
                f(&mut rng, &mut out);
                for (a, &v) in acc.iter_mut().zip(&out) {
                    a.push(v);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![Moments::default(); k];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            *t = t.merge(p);
        }
    }
    total.into_iter().map(Moments::estimate).collect()
}

/// `E f(g, h)` over `(g, h) ~ spec`.
pub fn mc_expect<F>(f: F, spec: &CorrelatedGaussianSpec, samples: usize, seed: u64) -> Result<Estimate>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    if samples == 0 {
        return Err(Error::Argument("at least one sample is required".into()));
    }
    let n = spec.n();
    let est = mc_run(samples, seed, 1, |rng, out| {
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n];
        sample_correlated_into(spec, rng, &mut g, &mut h);
        out[0] = f(&g, &h);
    });
    Ok(est[0])
}

/// Standard normal vector of length `n`.
pub fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A random polynomial of degree at most `d` in `n` variables with Gaussian
/// coefficients on every exponent of weight `≤ d` (multilinear ones only when
/// `multilinear` is set).
pub fn random_poly<R: Rng + ?Sized>(n: usize, d: usize, multilinear: bool, rng: &mut R) -> HermitePoly {
    let mut p = HermitePoly::zero(n);
    for tau in exponents_up_to(n, d) {
        if multilinear && tau.entries().iter().any(|&e| e > 1) {
            continue;
        }
        let c: f64 = rng.sample(StandardNormal);
        p.add_term(tau, c);
    }
    p
}

/// All `τ ∈ ℤ_{≥0}^n` with `wt(τ) ≤ d`, in graded order.
pub fn exponents_up_to(n: usize, d: usize) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    let mut cur = vec![0u16; n];
    fn rec(i: usize, left: usize, cur: &mut Vec<u16>, out: &mut Vec<MultiIndex>) {
        if i == cur.len() {
            out.push(MultiIndex::new(cur.clone()));
            return;
        }
        for e in 0..=left {
            cur[i] = e as u16;
            rec(i + 1, left - e, cur, out);
        }
        cur[i] = 0;
    }
    rec(0, d, &mut cur, &mut out);
    out.sort_by_key(|t| (t.weight(), std::cmp::Reverse(t.clone())));
    out
}
