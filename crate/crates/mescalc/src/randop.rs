//! Random operators: matrices whose Fourier coefficients are polynomials in
//! Gaussian variables.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::channels::{pair_trace, BipartiteState, CorrelationData};
use crate::error::{Error, Result};
use crate::fourier::{FourierRep, MultiIndex, StandardBasis};
use crate::gaussian::{
    gauss_inner, mc_run, sample_correlated_into, CompiledPoly, CorrelatedGaussianSpec, Estimate, HermitePoly,
    HermiteTable,
};
use crate::matfun::zeta_scalar;
use crate::matspace::{check_dim, checked_pow, frobenius_norm, trace_fourth_power, HermitianOp, MatrixC};

/// A map `σ ↦ p_σ` from multi-indices over `h` registers to polynomials in
/// `n` Gaussian variables, representing `Σ_σ p_σ(g) B_σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomOperator {
    basis: StandardBasis,
    h: usize,
    n: usize,
    coeffs: BTreeMap<MultiIndex, HermitePoly>,
}

impl RandomOperator {
    pub fn new(basis: StandardBasis, h: usize, n: usize, coeffs: BTreeMap<MultiIndex, HermitePoly>) -> Result<Self> {
        let m2 = basis.len();
        for (sigma, p) in &coeffs {
            if sigma.len() != h || sigma.entries().iter().any(|&s| s as usize >= m2) {
                return Err(Error::Argument(format!("invalid multi-index {:?}", sigma.entries())));
            }
            if p.n() != n {
                return Err(Error::DimMismatch {
                    expected: n,
                    found: p.n(),
                });
            }
        }
        let mut op = Self { basis, h, n, coeffs };
        op.prune();
        Ok(op)
    }

    fn prune(&mut self) {
        self.coeffs.retain(|_, p| p.num_terms() > 0);
    }

    pub fn zero(basis: StandardBasis, h: usize, n: usize) -> Self {
        Self {
            basis,
            h,
            n,
            coeffs: BTreeMap::new(),
        }
    }

    /// The deterministic operator with Fourier representation `rep`.
    pub fn constant(rep: &FourierRep, n: usize) -> Self {
        let coeffs = rep
            .iter()
            .map(|(sigma, c)| (sigma, HermitePoly::constant(n, c)))
            .collect();
        let mut op = Self {
            basis: rep.basis().clone(),
            h: rep.registers(),
            n,
            coeffs,
        };
        op.prune();
        op
    }

    pub fn basis(&self) -> &StandardBasis {
        &self.basis
    }

    pub fn m(&self) -> usize {
        self.basis.m()
    }

    /// Quantum registers `h`.
    pub fn registers(&self) -> usize {
        self.h
    }

    /// Gaussian variables `n`.
    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn coeffs(&self) -> &BTreeMap<MultiIndex, HermitePoly> {
        &self.coeffs
    }

    pub fn coeff(&self, sigma: &MultiIndex) -> Option<&HermitePoly> {
        self.coeffs.get(sigma)
    }

    /// `max_σ deg p_σ`.
    pub fn degree(&self) -> usize {
        self.coeffs.values().map(HermitePoly::degree).max().unwrap_or(0)
    }

    /// `max_σ (|σ| + deg p_σ)`.
    pub fn total_degree(&self) -> usize {
        self.coeffs
            .iter()
            .map(|(s, p)| s.size() + p.degree())
            .max()
            .unwrap_or(0)
    }

    pub fn is_multilinear(&self) -> bool {
        self.coeffs.values().all(HermitePoly::is_multilinear)
    }

    /// Applies `f` to every coefficient polynomial.
    pub fn map_polys(&self, f: impl Fn(&MultiIndex, &HermitePoly) -> HermitePoly) -> Self {
        let coeffs = self.coeffs.iter().map(|(s, p)| (s.clone(), f(s, p))).collect();
        let mut op = Self {
            basis: self.basis.clone(),
            h: self.h,
            n: self.n,
            coeffs,
        };
        op.prune();
        op
    }

    /// Same coefficients expressed over `n_new` variables via `map`.
    pub fn relabel(&self, n_new: usize, map: &[usize]) -> Result<Self> {
        let mut coeffs = BTreeMap::new();
        for (s, p) in &self.coeffs {
            coeffs.insert(s.clone(), p.relabel(n_new, map)?);
        }
        Ok(Self {
            basis: self.basis.clone(),
            h: self.h,
            n: n_new,
            coeffs,
        })
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.h != other.h || self.n != other.n || self.basis.distance(&other.basis) > 1e-12 {
            return Err(Error::BasisMismatch("random operators differ in shape or basis".into()));
        }
        let mut coeffs: BTreeMap<MultiIndex, HermitePoly> =
            self.coeffs.iter().map(|(s, p)| (s.clone(), p.scale(a))).collect();
        for (s, q) in &other.coeffs {
            let entry = coeffs.entry(s.clone()).or_insert_with(|| HermitePoly::zero(self.n));
            *entry = entry.combine(1.0, q, b)?;
        }
        let mut op = Self {
            basis: self.basis.clone(),
            h: self.h,
            n: self.n,
            coeffs,
        };
        op.prune();
        Ok(op)
    }

    /// Fourier representation of the realization at `x`.
    pub fn realize(&self, x: &[f64]) -> Result<FourierRep> {
        FourierRep::from_coeffs(
            self.basis.clone(),
            self.h,
            self.coeffs.iter().map(|(s, p)| (s.clone(), p.eval(x))),
        )
    }
}

/// Evaluates all coefficients of a [`MatrixValued`] at one Gaussian input.
pub type CoeffFn<'a> = Box<dyn Fn(&[f64], &mut [f64]) + Sync + 'a>;

/// A matrix-valued function of Gaussian variables with a finite Fourier
/// support over its quantum registers.
pub trait MatrixValued: Sync {
    fn basis(&self) -> &StandardBasis;
    fn registers(&self) -> usize;
    fn num_vars(&self) -> usize;
    /// Multi-indices whose coefficients may be nonzero.
    fn support(&self) -> Vec<MultiIndex>;
    /// Coefficient evaluator writing values in [`MatrixValued::support`] order.
    fn coefficient_fn(&self) -> CoeffFn<'_>;
}

struct CompiledCoeffs {
    polys: Vec<CompiledPoly>,
    max_exp: usize,
    multilinear: bool,
}

impl CompiledCoeffs {
    fn new<'a>(polys: impl Iterator<Item = &'a HermitePoly>) -> Self {
        let polys: Vec<&HermitePoly> = polys.collect();
        Self {
            max_exp: polys.iter().map(|p| p.max_exponent()).max().unwrap_or(0),
            multilinear: polys.iter().all(|p| p.is_multilinear()),
            polys: polys.iter().map(|p| p.compile()).collect(),
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        if self.multilinear {
            for (o, p) in out.iter_mut().zip(&self.polys) {
                *o = p.eval_multilinear(x);
            }
        } else {
            let table = HermiteTable::new(x, self.max_exp);
            for (o, p) in out.iter_mut().zip(&self.polys) {
                *o = p.eval(&table);
            }
        }
    }
}

impl MatrixValued for RandomOperator {
    fn basis(&self) -> &StandardBasis {
        &self.basis
    }

    fn registers(&self) -> usize {
        self.h
    }

    fn num_vars(&self) -> usize {
        self.n
    }

    fn support(&self) -> Vec<MultiIndex> {
        self.coeffs.keys().cloned().collect()
    }

    fn coefficient_fn(&self) -> CoeffFn<'_> {
        let compiled = CompiledCoeffs::new(self.coeffs.values());
        Box::new(move |x, out| compiled.eval(x, out))
    }
}

/// `p_{σ,M}(x) = p_σ(Mx/‖x‖₂)` (or `p_σ(Mx)` without normalization) for a
/// base operator over `n` variables and `M ∈ ℝ^{n×n₀}`.
#[derive(Clone, Debug)]
pub struct ComposedRandomOperator {
    pub base: RandomOperator,
    pub linear_map: DMatrix<f64>,
    pub normalize_input: bool,
}

impl ComposedRandomOperator {
    pub fn new(base: RandomOperator, linear_map: DMatrix<f64>, normalize_input: bool) -> Result<Self> {
        if linear_map.nrows() != base.num_vars() {
            return Err(Error::DimMismatch {
                expected: base.num_vars(),
                found: linear_map.nrows(),
            });
        }
        Ok(Self {
            base,
            linear_map,
            normalize_input,
        })
    }

    /// Input dimension `n₀`.
    pub fn input_dim(&self) -> usize {
        self.linear_map.ncols()
    }

    /// `Mx/‖x‖₂` (or `Mx`).
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.linear_map.nrows()];
        self.transform_into(x, &mut y);
        y
    }

    fn transform_into(&self, x: &[f64], y: &mut [f64]) {
        let scale = if self.normalize_input {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                1.0 / norm
            } else {
                0.0
            }
        } else {
            1.0
        };
        let m = &self.linear_map;
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += m[(i, j)] * xj;
            }
            *yi = acc * scale;
        }
    }
}

impl MatrixValued for ComposedRandomOperator {
    fn basis(&self) -> &StandardBasis {
        &self.base.basis
    }

    fn registers(&self) -> usize {
        self.base.h
    }

    fn num_vars(&self) -> usize {
        self.input_dim()
    }

    fn support(&self) -> Vec<MultiIndex> {
        self.base.support()
    }

    fn coefficient_fn(&self) -> CoeffFn<'_> {
        let compiled = CompiledCoeffs::new(self.base.coeffs.values());
        Box::new(move |x, out| {
            let mut y = vec![0.0; self.linear_map.nrows()];
            self.transform_into(x, &mut y);
            compiled.eval(&y, out)
        })
    }
}

/// Dense basis elements `B_σ` for a support list, used to materialize
/// realizations.
pub struct Synthesizer {
    dim: usize,
    m: usize,
    h: usize,
    mats: Vec<MatrixC>,
}

impl Synthesizer {
    pub fn new(basis: &StandardBasis, h: usize, support: &[MultiIndex]) -> Result<Self> {
        let dim = checked_pow(basis.m(), h).ok_or(Error::DimCap {
            dim: usize::MAX,
            cap: crate::matspace::max_dim(),
        })?;
        check_dim(dim)?;
        Ok(Self {
            dim,
            m: basis.m(),
            h,
            mats: support.iter().map(|s| basis.tensor_element(s)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `Σ_k c_k B_{σ_k}`.
    pub fn matrix(&self, coeffs: &[f64]) -> MatrixC {
        let mut acc = MatrixC::zeros(self.dim, self.dim);
        for (c, b) in coeffs.iter().zip(&self.mats) {
            if *c != 0.0 {
                acc.zip_apply(b, |a, v| *a += v * *c);
            }
        }
        acc
    }

    pub fn op(&self, coeffs: &[f64]) -> HermitianOp {
        HermitianOp::from_parts(self.matrix(coeffs), self.m, self.h)
    }

    pub(crate) fn op_from(&self, mat: MatrixC) -> HermitianOp {
        HermitianOp::from_parts(mat, self.m, self.h)
    }
}

/// Joint random operators `P(g)`, `Q(h)` with `(g, h)` drawn from `spec`.
#[derive(Clone, Debug)]
pub struct JointRandomOperators {
    pub p: RandomOperator,
    pub q: RandomOperator,
    pub spec: CorrelatedGaussianSpec,
}

impl JointRandomOperators {
    pub fn new(p: RandomOperator, q: RandomOperator, spec: CorrelatedGaussianSpec) -> Result<Self> {
        if p.n != q.n || p.n != spec.n() {
            return Err(Error::DimMismatch {
                expected: spec.n(),
                found: p.n,
            });
        }
        if p.h != q.h {
            return Err(Error::DimMismatch {
                expected: p.h,
                found: q.h,
            });
        }
        Ok(Self { p, q, spec })
    }
}

/// `N₂(P) = √(Σ_σ ‖p_σ‖₂²)`.
pub fn n2(p: &RandomOperator) -> f64 {
    p.coeffs.values().map(HermitePoly::norm_sq).sum::<f64>().sqrt()
}

/// Monte Carlo `N_p(P) = (E ‖P‖_p^p)^{1/p}` for `p ∈ {2, 4}` with the
/// normalized Schatten norm; the standard error is propagated by the delta
/// method.
pub fn np_mc<T: MatrixValued + ?Sized>(op: &T, p: u32, samples: usize, seed: u64) -> Result<Estimate> {
    if p != 2 && p != 4 {
        return Err(Error::Argument(format!("p must be 2 or 4, got {p}")));
    }
    if samples == 0 {
        return Err(Error::Argument("at least one sample is required".into()));
    }
    let support = op.support();
    let synth = Synthesizer::new(op.basis(), op.registers(), &support)?;
    let coeff_fn = op.coefficient_fn();
    let n = op.num_vars();
    let dim = synth.dim() as f64;
    let est = mc_run(samples, seed, 1, |rng, out| {
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut c = vec![0.0; support.len()];
        coeff_fn(&x, &mut c);
        let mat = synth.matrix(&c);
        out[0] = if p == 2 {
            frobenius_norm(&mat, false).powi(2) / dim
        } else {
            trace_fourth_power(&mat) / dim
        };
    })[0];
    let pf = p as f64;
    let mean = est.mean.max(0.0);
    let value = mean.powf(1.0 / pf);
    let std_error = if mean > 0.0 {
        est.std_error / (pf * mean.powf((pf - 1.0) / pf))
    } else {
        0.0
    };
    Ok(Estimate { mean: value, std_error })
}

/// `Γ_ρ`: scales the `(σ, τ)` coefficient by `ρ^{|σ| + wt(τ)}`.
pub fn gamma_apply(p: &RandomOperator, rho: f64) -> Result<RandomOperator> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Argument(format!("ρ must lie in [0,1], got {rho}")));
    }
    Ok(p.map_polys(|sigma, poly| {
        let s = sigma.size() as i32;
        poly.map(|tau, c| c * rho.powi(s + tau.weight() as i32))
    }))
}

/// Gaussian variable index of `g_{j,b}` for register `j` and basis label
/// `b ≥ 1`.
pub fn hybrid_variable(m: usize, j: usize, b: usize) -> usize {
    (m * m - 1) * j + (b - 1)
}

/// Replaces the first `k` registers of `M` by Gaussian variables:
/// `B_{σ_1} ⊗ … ⊗ B_{σ_k} ⊗ B_{σ_{>k}} ↦ Π_{j≤k} g_{j,σ_j} · B_{σ_{>k}}`
/// with `g_{j,0} ≡ 1`.
pub fn hybrid_substitute(rep: &FourierRep, k: usize) -> Result<RandomOperator> {
    let n = rep.registers();
    if k > n {
        return Err(Error::Argument(format!("k = {k} exceeds the register count {n}")));
    }
    let m = rep.m();
    let vars = (m * m - 1) * k;
    let mut coeffs: BTreeMap<MultiIndex, HermitePoly> = BTreeMap::new();
    for (sigma, c) in rep.iter() {
        let e = sigma.entries();
        let mut tau = vec![0u16; vars];
        for (j, &s) in e[..k].iter().enumerate() {
            if s != 0 {
                tau[hybrid_variable(m, j, s as usize)] = 1;
            }
        }
        let rest = MultiIndex::new(e[k..].to_vec());
        coeffs
            .entry(rest)
            .or_insert_with(|| HermitePoly::zero(vars))
            .add_term(MultiIndex::new(tau), c);
    }
    RandomOperator::new(rep.basis().clone(), n - k, vars, coeffs)
}

fn check_aligned(j: &JointRandomOperators, corr: &CorrelationData) -> Result<()> {
    if j.p.basis.distance(&corr.basis_a) > 1e-9 || j.q.basis.distance(&corr.basis_b) > 1e-9 {
        return Err(Error::BasisMismatch("operators are not in the aligned bases".into()));
    }
    Ok(())
}

/// `c_σ = Π_i c_{σ_i}`.
pub fn c_sigma(c: &[f64], sigma: &MultiIndex) -> f64 {
    sigma.entries().iter().map(|&s| c[s as usize]).product()
}

/// `E Tr((P ⊗ Q) ψ^{⊗h}) = Σ_σ c_σ ⟨p_σ, q_σ⟩_𝒢` exactly.
pub fn expect_corr(j: &JointRandomOperators, corr: &CorrelationData) -> Result<f64> {
    check_aligned(j, corr)?;
    let c = corr.c();
    let mut acc = 0.0;
    for (sigma, p) in &j.p.coeffs {
        if let Some(q) = j.q.coeffs.get(sigma) {
            acc += c_sigma(&c, sigma) * gauss_inner(p, q, &j.spec)?;
        }
    }
    Ok(acc)
}

/// Monte Carlo `E Tr((P(g) ⊗ Q(h)) ψ^{⊗h})` from dense realizations.
pub fn expect_corr_mc(j: &JointRandomOperators, psi: &BipartiteState, samples: usize, seed: u64) -> Result<Estimate> {
    if samples == 0 {
        return Err(Error::Argument("at least one sample is required".into()));
    }
    if psi.m_a() != j.p.m() || psi.m_b() != j.q.m() {
        return Err(Error::DimMismatch {
            expected: j.p.m(),
            found: psi.m_a(),
        });
    }
    let big = psi.tensor_power(j.p.h)?;
    let (sp, sq) = (j.p.support(), j.q.support());
    let synth_p = Synthesizer::new(&j.p.basis, j.p.h, &sp)?;
    let synth_q = Synthesizer::new(&j.q.basis, j.q.h, &sq)?;
    let (fp, fq) = (j.p.coefficient_fn(), j.q.coefficient_fn());
    let n = j.spec.n();
    Ok(mc_run(samples, seed, 1, |rng, out| {
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n];
        sample_correlated_into(&j.spec, rng, &mut g, &mut h);
        let mut cp = vec![0.0; sp.len()];
        let mut cq = vec![0.0; sq.len()];
        fp(&g, &mut cp);
        fq(&h, &mut cq);
        out[0] = pair_trace(&synth_p.matrix(&cp), &synth_q.matrix(&cq), &big);
    })[0])
}

/// Monte Carlo `E Tr ζ(P)` over standard Gaussian inputs.
pub fn expect_tr_zeta<T: MatrixValued + ?Sized>(op: &T, samples: usize, seed: u64) -> Result<Estimate> {
    if samples == 0 {
        return Err(Error::Argument("at least one sample is required".into()));
    }
    let support = op.support();
    let synth = Synthesizer::new(op.basis(), op.registers(), &support)?;
    let coeff_fn = op.coefficient_fn();
    let n = op.num_vars();
    Ok(mc_run(samples, seed, 1, |rng, out| {
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut c = vec![0.0; support.len()];
        coeff_fn(&x, &mut c);
        out[0] = tr_zeta_matrix(synth.matrix(&c));
    })[0])
}

/// `Tr ζ` of a Hermitian matrix, skipping the eigen-solve for the 1×1 case.
pub(crate) fn tr_zeta_matrix(mat: MatrixC) -> f64 {
    if mat.nrows() == 1 {
        return zeta_scalar(mat[(0, 0)].re);
    }
    mat.symmetric_eigenvalues().iter().map(|&x| zeta_scalar(x)).sum()
}

/// A random multilinear operator with Gaussian coefficients on every
/// `(σ, τ)` with `|σ| + wt(τ) ≤ d`, normalized to `N₂ = 1`.
pub fn random_multilinear<R: Rng + ?Sized>(
    basis: &StandardBasis,
    h: usize,
    n: usize,
    d: usize,
    rng: &mut R,
) -> Result<RandomOperator> {
    let m2 = basis.len();
    let count = checked_pow(m2, h).ok_or(Error::Argument("too many registers".into()))?;
    let taus: Vec<MultiIndex> = crate::gaussian::exponents_up_to(n, d.min(n))
        .into_iter()
        .filter(|t| t.entries().iter().all(|&e| e <= 1))
        .collect();
    let mut coeffs = BTreeMap::new();
    for lin in 0..count {
        let sigma = MultiIndex::from_linear(lin, m2, h);
        if sigma.size() > d {
            continue;
        }
        let mut p = HermitePoly::zero(n);
        for t in &taus {
            if sigma.size() + t.weight() <= d {
                let c: f64 = rng.sample(StandardNormal);
                p.add_term(t.clone(), c);
            }
        }
        coeffs.insert(sigma, p);
    }
    let op = RandomOperator::new(basis.clone(), h, n, coeffs)?;
    let norm = n2(&op);
    Ok(if norm > 0.0 { op.map_polys(|_, p| p.scale(1.0 / norm)) } else { op })
}

/// A random traceless Fourier representation on `n` registers of degree
/// `≤ d`, scaled so that the largest register influence equals `tau`.
pub fn random_traceless_rep<R: Rng + ?Sized>(
    basis: &StandardBasis,
    n: usize,
    d: usize,
    tau: f64,
    rng: &mut R,
) -> Result<FourierRep> {
    let m2 = basis.len();
    let count = checked_pow(m2, n).ok_or(Error::Argument("too many registers".into()))?;
    let mut terms = Vec::new();
    for lin in 1..count {
        let sigma = MultiIndex::from_linear(lin, m2, n);
        if sigma.size() <= d {
            let c: f64 = rng.sample(StandardNormal);
            terms.push((sigma, c));
        }
    }
    let rep = FourierRep::from_coeffs(basis.clone(), n, terms)?;
    let max_inf = crate::fourier::influences(&rep).into_iter().fold(0.0, f64::max);
    if max_inf == 0.0 {
        return Ok(rep);
    }
    let s = (tau / max_inf).sqrt();
    Ok(rep.map(|_, c| c * s))
}

/// One step of the hybrid sweep.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct HybridGap {
    /// Number of registers already replaced by Gaussians before the step.
    pub k: usize,
    /// `E Tr ζ(M^{(k)}) / m^{n−k}`.
    pub level: Estimate,
    /// `E Tr ζ(M^{(k+1)})/m^{n−k−1} − E Tr ζ(M^{(k)})/m^{n−k}` with common
    /// random numbers.
    pub gap: Estimate,
}

/// Normalized `E Tr ζ` of every hybrid `M^{(0)}, …, M^{(n)}` and the gaps
/// between consecutive hybrids. The hybrids share their Gaussian draws on the
/// common variables.
pub fn hybrid_gaps(rep: &FourierRep, samples: usize, seed: u64) -> Result<Vec<HybridGap>> {
    if samples == 0 {
        return Err(Error::Argument("at least one sample is required".into()));
    }
    let n = rep.registers();
    let m = rep.m();
    let hybrids: Vec<RandomOperator> = (0..=n).map(|k| hybrid_substitute(rep, k)).collect::<Result<_>>()?;
    let supports: Vec<Vec<MultiIndex>> = hybrids.iter().map(|h| h.support()).collect();
    let synths: Vec<Synthesizer> = hybrids
        .iter()
        .zip(&supports)
        .map(|(h, s)| Synthesizer::new(&h.basis, h.h, s))
        .collect::<Result<_>>()?;
    let fns: Vec<_> = hybrids.iter().map(|h| h.coefficient_fn()).collect();
    let total_vars = (m * m - 1) * n;
    let scale: Vec<f64> = (0..=n).map(|k| (m as f64).powi((n - k) as i32)).collect();
    let est = mc_run(samples, seed, 2 * n + 1, |rng, out| {
        let x: Vec<f64> = (0..total_vars).map(|_| rng.sample(StandardNormal)).collect();
        let mut levels = vec![0.0; n + 1];
        for k in 0..=n {
            let vars = hybrids[k].num_vars();
            let mut c = vec![0.0; supports[k].len()];
            fns[k](&x[..vars], &mut c);
            levels[k] = tr_zeta_matrix(synths[k].matrix(&c)) / scale[k];
        }
        out[..=n].copy_from_slice(&levels);
        for k in 0..n {
            out[n + 1 + k] = levels[k + 1] - levels[k];
        }
    });
    Ok((0..n)
        .map(|k| HybridGap {
            k,
            level: est[k],
            gap: est[n + 1 + k],
        })
        .collect())
}

/// Dense `Σ_σ p_σ(x) B_σ` at a point, for small register counts.
pub fn materialize<T: MatrixValued + ?Sized>(op: &T, x: &[f64]) -> Result<HermitianOp> {
    if x.len() != op.num_vars() {
        return Err(Error::DimMismatch {
            expected: op.num_vars(),
            found: x.len(),
        });
    }
    let support = op.support();
    let synth = Synthesizer::new(op.basis(), op.registers(), &support)?;
    let mut c = vec![0.0; support.len()];
    op.coefficient_fn()(x, &mut c);
    Ok(synth.op(&c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{aligned_bases, corr_matrix};
    use crate::fourier::{expand, StandardBasis};
    use crate::gaussian::rng_for;

    fn pauli() -> StandardBasis {
        StandardBasis::gell_mann(2).unwrap()
    }

    fn idx(v: &[u16]) -> MultiIndex {
        MultiIndex::new(v.to_vec())
    }

    fn g1_z() -> RandomOperator {
        let mut coeffs = BTreeMap::new();
        coeffs.insert(idx(&[3]), HermitePoly::variable(1, 0));
        RandomOperator::new(pauli(), 1, 1, coeffs).unwrap()
    }

    #[test]
    fn n2_examples() {
        let id = FourierRep::from_coeffs(pauli(), 1, [(idx(&[0]), 1.0)]).unwrap();
        assert_eq!(n2(&RandomOperator::constant(&id, 2)), 1.0);
        assert_eq!(n2(&g1_z()), 1.0);
        let op = random_multilinear(&pauli(), 1, 2, 2, &mut rng_for(1, 0)).unwrap();
        let est = np_mc(&op, 2, 200_000, 3).unwrap();
        assert!(est.within(n2(&op), 4.0), "{est:?} vs {}", n2(&op));
    }

    #[test]
    fn gamma_examples() {
        let p = g1_z();
        assert_eq!(gamma_apply(&p, 1.0).unwrap(), p);
        let g = gamma_apply(&p, 0.5).unwrap();
        assert!((g.coeff(&idx(&[3])).unwrap().coeff(&idx(&[1])) - 0.25).abs() < 1e-15);
        let id = RandomOperator::constant(&FourierRep::from_coeffs(pauli(), 1, [(idx(&[0]), 1.0)]).unwrap(), 1);
        assert_eq!(gamma_apply(&id, 0.3).unwrap(), id);
    }

    #[test]
    fn hybrid_examples() {
        let rep = FourierRep::from_coeffs(pauli(), 2, [(idx(&[3, 3]), 1.0)]).unwrap();
        let h0 = hybrid_substitute(&rep, 0).unwrap();
        assert_eq!(h0, RandomOperator::constant(&rep, 0));
        let h1 = hybrid_substitute(&rep, 1).unwrap();
        assert_eq!(h1.registers(), 1);
        assert_eq!(h1.num_vars(), 3);
        let p = h1.coeff(&idx(&[3])).unwrap();
        assert_eq!(p.coeff(&idx(&[0, 0, 1])), 1.0);
        assert_eq!(n2(&h1), 1.0);

        let c = FourierRep::from_coeffs(pauli(), 2, [(idx(&[0, 0]), -0.5)]).unwrap();
        let base = expect_tr_zeta(&hybrid_substitute(&c, 0).unwrap(), 100, 1).unwrap();
        for k in 0..=2 {
            let hk = hybrid_substitute(&c, k).unwrap();
            assert_eq!(hk.registers(), 2 - k);
            let est = expect_tr_zeta(&hk, 100, 1).unwrap();
            assert_eq!(est.std_error, 0.0);
            assert_eq!(est.mean / 2f64.powi((2 - k) as i32), base.mean / 4.0);
        }
    }

    #[test]
    fn hybrid_preserves_n2() {
        let basis = StandardBasis::gell_mann(3).unwrap();
        let rep = random_traceless_rep(&basis, 2, 2, 0.3, &mut rng_for(2, 0)).unwrap();
        let norm = rep.norm_sq().sqrt();
        for k in 0..=2 {
            assert!((n2(&hybrid_substitute(&rep, k).unwrap()) - norm).abs() < 1e-12);
        }
    }

    #[test]
    fn tr_zeta_examples() {
        let psd = FourierRep::from_coeffs(pauli(), 1, [(idx(&[0]), 1.0), (idx(&[3]), 0.5)]).unwrap();
        let e = expect_tr_zeta(&RandomOperator::constant(&psd, 1), 1000, 1).unwrap();
        assert_eq!((e.mean, e.std_error), (0.0, 0.0));
        let e = expect_tr_zeta(&g1_z(), 400_000, 2).unwrap();
        assert!(e.within(1.0, 4.0), "{e:?}");
        let neg = FourierRep::from_coeffs(pauli(), 2, [(idx(&[0, 0]), -1.0)]).unwrap();
        let e = expect_tr_zeta(&RandomOperator::constant(&neg, 1), 1000, 1).unwrap();
        assert_eq!(e.mean, 4.0);
    }

    #[test]
    fn expect_corr_examples() {
        let psi = BipartiteState::noisy_mes(2, 0.2).unwrap();
        let corr = aligned_bases(&psi).unwrap();
        let spec = CorrelatedGaussianSpec::uniform(1, 0.6).unwrap();
        let mk = |basis: &StandardBasis, sigma: u16, poly: HermitePoly| {
            let mut c = BTreeMap::new();
            c.insert(idx(&[sigma]), poly);
            RandomOperator::new(basis.clone(), 1, 1, c).unwrap()
        };
        let id = JointRandomOperators::new(
            mk(&corr.basis_a, 0, HermitePoly::constant(1, 1.0)),
            mk(&corr.basis_b, 0, HermitePoly::constant(1, 1.0)),
            spec.clone(),
        )
        .unwrap();
        assert!((expect_corr(&id, &corr).unwrap() - 1.0).abs() < 1e-12);
        let j = JointRandomOperators::new(
            mk(&corr.basis_a, 1, HermitePoly::variable(1, 0)),
            mk(&corr.basis_b, 1, HermitePoly::variable(1, 0)),
            spec,
        )
        .unwrap();
        assert!((expect_corr(&j, &corr).unwrap() - 0.6 * corr.c()[1]).abs() < 1e-12);
        let bad = JointRandomOperators::new(
            mk(&pauli().rotated(&crate::fourier::random_orthogonal(3, &mut rng_for(1, 1))).unwrap(), 1, HermitePoly::variable(1, 0)),
            mk(&corr.basis_b, 1, HermitePoly::variable(1, 0)),
            CorrelatedGaussianSpec::uniform(1, 0.6).unwrap(),
        )
        .unwrap();
        assert!(matches!(expect_corr(&bad, &corr), Err(Error::BasisMismatch(_))));
    }

    #[test]
    fn expect_corr_matches_monte_carlo() {
        let psi = BipartiteState::noisy_mes(2, 0.3).unwrap();
        let corr = aligned_bases(&psi).unwrap();
        let mut rng = rng_for(4, 0);
        let p = random_multilinear(&corr.basis_a, 1, 2, 2, &mut rng).unwrap();
        let q = random_multilinear(&corr.basis_b, 1, 2, 2, &mut rng).unwrap();
        let j = JointRandomOperators::new(p, q, CorrelatedGaussianSpec::new(vec![0.5, 0.8]).unwrap()).unwrap();
        let exact = expect_corr(&j, &corr).unwrap();
        let est = expect_corr_mc(&j, &psi, 1_000_000, 5).unwrap();
        assert!(est.within(exact, 4.0), "{est:?} vs {exact}");
        let _ = corr_matrix(&psi, &corr.basis_a, &corr.basis_b).unwrap();
    }

    #[test]
    fn composed_plumbing() {
        let op = random_multilinear(&pauli(), 1, 3, 2, &mut rng_for(6, 0)).unwrap();
        let scale = 5.0;
        let m = DMatrix::<f64>::identity(3, 3) * scale;
        let comp = ComposedRandomOperator::new(op.clone(), m, true).unwrap();
        let x = [0.3, -1.0, 2.0];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y: Vec<f64> = x.iter().map(|v| v / norm * scale).collect();
        let a = materialize(&comp, &x).unwrap();
        let b = materialize(&op, &y).unwrap();
        assert!(crate::matspace::max_abs_entry(&(a.matrix() - b.matrix())) < 1e-12);
    }

    #[test]
    fn hybrid_basis_independence() {
        let basis = pauli();
        let rep = random_traceless_rep(&basis, 2, 2, 0.2, &mut rng_for(7, 0)).unwrap();
        let op = crate::fourier::reconstruct(&rep).unwrap();
        let rotated = basis.rotated(&crate::fourier::random_orthogonal(3, &mut rng_for(8, 0))).unwrap();
        let rep2 = expand(&op, &rotated).unwrap();
        for k in 0..=2 {
            let a = hybrid_substitute(&rep, k).unwrap();
            let b = hybrid_substitute(&rep2, k).unwrap();
            assert!((n2(&a) - n2(&b)).abs() < 1e-12);
            let ea = expect_tr_zeta(&a, 200_000, 9).unwrap();
            let eb = expect_tr_zeta(&b, 200_000, 10).unwrap();
            let se = (ea.std_error.powi(2) + eb.std_error.powi(2)).sqrt();
            assert!((ea.mean - eb.mean).abs() <= 4.0 * se + 1e-12, "k={k} {ea:?} {eb:?}");
        }
    }

    #[test]
    fn hybrid_gap_sweep_runs() {
        let basis = pauli();
        let rep = random_traceless_rep(&basis, 2, 2, 0.1, &mut rng_for(11, 0)).unwrap();
        let gaps = hybrid_gaps(&rep, 20_000, 3).unwrap();
        assert_eq!(gaps.len(), 2);
        assert!(gaps.iter().all(|g| g.gap.mean.is_finite()));
    }
}
