//! Bipartite states with uniform marginals, the depolarizing operator `Δ_ρ`,
//! the Markov super-operator `𝒯`, correlation matrices and maximal
//! correlation.

use nalgebra::{DMatrix, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{apply_all_axes, from_pair_layout, to_pair_layout, FourierRep, StandardBasis};
use crate::matspace::{
    check_dim, checked_pow, eigenvalues, frobenius_norm, max_abs_entry, partial_trace, permute_registers, random_hermitian,
    symmetrize, trace_fourth_power, HermitianOp, MatrixC, C64,
};

/// A density matrix on `A ⊗ B` with `Tr_B ρ = id/m_A` and `Tr_A ρ = id/m_B`.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteState {
    m_a: usize,
    m_b: usize,
    rho: MatrixC,
}

impl BipartiteState {
    /// Validates positivity, unit trace and uniform marginals.
    pub fn new(m_a: usize, m_b: usize, rho: MatrixC) -> Result<Self> {
        let d = m_a * m_b;
        if rho.shape() != (d, d) {
            return Err(Error::DimMismatch {
                expected: d,
                found: rho.nrows(),
            });
        }
        let rho = symmetrize(&rho);
        let h = HermitianOp::from_matrix(rho.clone())?;
        let min = eigenvalues(&h).last().copied().unwrap_or(0.0);
        if min < -1e-10 {
            return Err(Error::Precondition(format!("state is not PSD (eigenvalue {min:.3e})")));
        }
        let tr = rho.trace().re;
        if (tr - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("state trace is {tr}, expected 1")));
        }
        let ra = partial_trace(&rho, &[m_a, m_b], &[1])?;
        let rb = partial_trace(&rho, &[m_a, m_b], &[0])?;
        let dev_a = max_abs_entry(&(ra - MatrixC::identity(m_a, m_a).scale(1.0 / m_a as f64)));
        let dev_b = max_abs_entry(&(rb - MatrixC::identity(m_b, m_b).scale(1.0 / m_b as f64)));
        let dev = dev_a.max(dev_b);
        if dev > 1e-9 {
            return Err(Error::NonUniformMarginals(dev));
        }
        Ok(Self { m_a, m_b, rho })
    }

    /// `(1−ε)|Ψ_m⟩⟨Ψ_m| + ε·id/m ⊗ id/m`.
    pub fn noisy_mes(m: usize, epsilon: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Argument(format!("local dimension must be at least 2, got {m}")));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Argument(format!("noise ε must lie in [0,1], got {epsilon}")));
        }
        let d = m * m;
        check_dim(d)?;
        let mut rho = MatrixC::identity(d, d).scale(epsilon / d as f64);
        let w = (1.0 - epsilon) / m as f64;
        for i in 0..m {
            for j in 0..m {
                rho[(i * m + i, j * m + j)] += C64::new(w, 0.0);
            }
        }
        Ok(Self { m_a: m, m_b: m, rho })
    }

    /// The maximally entangled state `|Ψ_m⟩⟨Ψ_m|`.
    pub fn mes(m: usize) -> Result<Self> {
        Self::noisy_mes(m, 0.0)
    }

    /// `id/m_A ⊗ id/m_B`.
    pub fn product(m_a: usize, m_b: usize) -> Result<Self> {
        if m_a < 2 || m_b < 2 {
            return Err(Error::Argument("local dimensions must be at least 2".into()));
        }
        let d = m_a * m_b;
        check_dim(d)?;
        Ok(Self {
            m_a,
            m_b,
            rho: MatrixC::identity(d, d).scale(1.0 / d as f64),
        })
    }

    pub fn m_a(&self) -> usize {
        self.m_a
    }

    pub fn m_b(&self) -> usize {
        self.m_b
    }

    pub fn density(&self) -> &MatrixC {
        &self.rho
    }

    /// `ψ^{⊗k}` with the `A` factors grouped before the `B` factors, viewed as
    /// a state on `A^k ⊗ B^k`.
    pub fn tensor_power(&self, k: usize) -> Result<Self> {
        let (ma, mb) = (
            checked_pow(self.m_a, k).ok_or(Error::DimCap { dim: usize::MAX, cap: 0 })?,
            checked_pow(self.m_b, k).ok_or(Error::DimCap { dim: usize::MAX, cap: 0 })?,
        );
        check_dim(ma * mb)?;
        let mut acc = MatrixC::identity(1, 1);
        for _ in 0..k {
            acc = acc.kronecker(&self.rho);
        }
        let dims: Vec<usize> = (0..2 * k).map(|i| if i % 2 == 0 { self.m_a } else { self.m_b }).collect();
        let perm: Vec<usize> = (0..k).map(|i| 2 * i).chain((0..k).map(|i| 2 * i + 1)).collect();
        let rho = permute_registers(&acc, &dims, &perm)?;
        Ok(Self { m_a: ma, m_b: mb, rho })
    }

    /// `α·self + (1−α)·other`.
    pub fn mix(&self, other: &Self, alpha: f64) -> Result<Self> {
        if self.m_a != other.m_a || self.m_b != other.m_b {
            return Err(Error::DimMismatch {
                expected: self.m_a,
                found: other.m_a,
            });
        }
        Self::new(self.m_a, self.m_b, self.rho.scale(alpha) + other.rho.scale(1.0 - alpha))
    }
}

fn depolarizing_map(m: usize, rho: f64) -> MatrixC {
    let d = m * m;
    MatrixC::from_fn(d, d, |p, q| {
        let mut v = if p == q { rho } else { 0.0 };
        if p / m == p % m && q / m == q % m {
            v += (1.0 - rho) / m as f64;
        }
        C64::new(v, 0.0)
    })
}

/// `Δ_ρ` on the listed registers (all registers when `None`):
/// `Δ_ρ(P) = ρP + (1−ρ)·Tr_i(P)/m ⊗ id_i` per register.
pub fn depolarize(p: &HermitianOp, rho: f64, registers: Option<&[usize]>) -> Result<HermitianOp> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Argument(format!("noise rate ρ must lie in [0,1], got {rho}")));
    }
    let (m, n) = (p.local_dim(), p.registers());
    let selected: Vec<usize> = match registers {
        Some(r) => {
            if r.iter().any(|&i| i >= n) {
                return Err(Error::Argument("register out of range".into()));
            }
            r.to_vec()
        }
        None => (0..n).collect(),
    };
    let map = depolarizing_map(m, rho);
    let mut data = to_pair_layout(p.matrix(), m, n);
    let dims = vec![m * m; n];
    for &axis in &selected {
        data = crate::fourier::apply_axis(&data, &dims, axis, &map).0;
    }
    Ok(HermitianOp::from_parts(from_pair_layout(&data, m, n), m, n))
}

/// `Δ_ρ^{⊗n}` applied to a Fourier representation: scales `P̂(σ)` by `ρ^{|σ|}`.
pub fn depolarize_rep(rep: &FourierRep, rho: f64) -> FourierRep {
    rep.map(|s, v| v * rho.powi(s.size() as i32))
}

fn markov_kernel(psi: &BipartiteState) -> MatrixC {
    let (ma, mb) = (psi.m_a, psi.m_b);
    MatrixC::from_fn(ma * ma, mb * mb, |row, col| {
        let (a, a2) = (row / ma, row % ma);
        let (b, b2) = (col / mb, col % mb);
        psi.rho[(a * mb + b2, a2 * mb + b)] * C64::new(ma as f64, 0.0)
    })
}

fn markov_adjoint_kernel(psi: &BipartiteState) -> MatrixC {
    let (ma, mb) = (psi.m_a, psi.m_b);
    MatrixC::from_fn(mb * mb, ma * ma, |row, col| {
        let (b, b2) = (row / mb, row % mb);
        let (a, a2) = (col / ma, col % ma);
        psi.rho[(a2 * mb + b, a * mb + b2)] * C64::new(mb as f64, 0.0)
    })
}

/// `𝒯(Q) = m_A Tr_B((id ⊗ Q)ψ)` applied register-wise to `Q` on `B^n`, so that
/// `Tr((M† ⊗ Q)ψ^{⊗n}) = ⟨M, 𝒯(Q)⟩`.
pub fn markov_t(q: &HermitianOp, psi: &BipartiteState, n: usize) -> Result<HermitianOp> {
    if q.local_dim() != psi.m_b || q.registers() != n {
        return Err(Error::DimMismatch {
            expected: checked_pow(psi.m_b, n).unwrap_or(usize::MAX),
            found: q.dim(),
        });
    }
    let data = apply_all_axes(to_pair_layout(q.matrix(), psi.m_b, n), n, psi.m_b * psi.m_b, &markov_kernel(psi));
    Ok(HermitianOp::from_parts(from_pair_layout(&data, psi.m_a, n), psi.m_a, n))
}

/// The Markov operator in the other direction: `𝒯*(P) = m_B Tr_A((P ⊗ id)ψ)`,
/// so that `Tr((P ⊗ Q)ψ^{⊗n}) = Tr(𝒯*(P) Q)/m_B^n`.
pub fn markov_t_adjoint(p: &HermitianOp, psi: &BipartiteState, n: usize) -> Result<HermitianOp> {
    if p.local_dim() != psi.m_a || p.registers() != n {
        return Err(Error::DimMismatch {
            expected: checked_pow(psi.m_a, n).unwrap_or(usize::MAX),
            found: p.dim(),
        });
    }
    let data = apply_all_axes(
        to_pair_layout(p.matrix(), psi.m_a, n),
        n,
        psi.m_a * psi.m_a,
        &markov_adjoint_kernel(psi),
    );
    Ok(HermitianOp::from_parts(from_pair_layout(&data, psi.m_b, n), psi.m_b, n))
}

/// Correlation matrix together with its singular values and the bases it
/// refers to.
#[derive(Clone, Debug)]
pub struct CorrelationData {
    /// `corr[(i, j)] = Tr((A_i ⊗ B_j)ψ)`.
    pub corr: DMatrix<f64>,
    /// Singular values of `corr`, non-increasing; the first is 1.
    pub singular_values: Vec<f64>,
    pub basis_a: StandardBasis,
    pub basis_b: StandardBasis,
}

impl CorrelationData {
    /// Diagonal `c_i = corr[(i,i)]`, padded with zeros to `max(m_A², m_B²)`.
    /// Meaningful when the bases are aligned.
    pub fn c(&self) -> Vec<f64> {
        let k = self.corr.nrows().max(self.corr.ncols());
        (0..k)
            .map(|i| if i < self.corr.nrows() && i < self.corr.ncols() { self.corr[(i, i)] } else { 0.0 })
            .collect()
    }

    /// The maximal correlation `c_1`, i.e. the second singular value.
    pub fn rho(&self) -> f64 {
        self.singular_values.get(1).copied().unwrap_or(0.0)
    }

    /// Largest off-diagonal magnitude.
    pub fn off_diagonal(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.corr.nrows() {
            for j in 0..self.corr.ncols() {
                if i != j {
                    worst = worst.max(self.corr[(i, j)].abs());
                }
            }
        }
        worst
    }
}

pub(crate) fn pair_trace(a: &MatrixC, b: &MatrixC, psi: &BipartiteState) -> f64 {
    let (ma, mb) = (psi.m_a, psi.m_b);
    let mut acc = C64::default();
    for x in 0..ma {
        for x2 in 0..ma {
            let av = a[(x, x2)];
            if av == C64::default() {
                continue;
            }
            for y in 0..mb {
                for y2 in 0..mb {
                    acc += av * b[(y, y2)] * psi.rho[(x2 * mb + y2, x * mb + y)];
                }
            }
        }
    }
    acc.re
}

fn raw_corr(psi: &BipartiteState, a: &StandardBasis, b: &StandardBasis) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| pair_trace(a.element(i), b.element(j), psi))
}

fn check_bases(psi: &BipartiteState, a: &StandardBasis, b: &StandardBasis) -> Result<()> {
    if a.m() != psi.m_a || b.m() != psi.m_b {
        return Err(Error::BasisMismatch(format!(
            "bases of dimensions ({}, {}) for a state on {} ⊗ {}",
            a.m(),
            b.m(),
            psi.m_a,
            psi.m_b
        )));
    }
    Ok(())
}

fn sorted_singular_values(mat: &DMatrix<f64>) -> Vec<f64> {
    if mat.is_empty() {
        return vec![];
    }
    let mut s: Vec<f64> = SVD::new(mat.clone(), false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Correlation matrix of `ψ` in the given bases.
pub fn corr_matrix(psi: &BipartiteState, basis_a: &StandardBasis, basis_b: &StandardBasis) -> Result<CorrelationData> {
    check_bases(psi, basis_a, basis_b)?;
    let corr = raw_corr(psi, basis_a, basis_b);
    let singular_values = sorted_singular_values(&corr);
    Ok(CorrelationData {
        corr,
        singular_values,
        basis_a: basis_a.clone(),
        basis_b: basis_b.clone(),
    })
}

/// Extends orthonormal columns to a full orthonormal basis of `R^k`.
fn complete_orthonormal(cols: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut vecs: Vec<nalgebra::DVector<f64>> = (0..cols.ncols()).map(|j| cols.column(j).into_owned()).collect();
    for e in 0..k {
        if vecs.len() == k {
            break;
        }
        let mut v = nalgebra::DVector::<f64>::zeros(k);
        v[e] = 1.0;
        for u in &vecs {
            let d = u.dot(&v);
            v -= u * d;
        }
        for u in &vecs {
            let d = u.dot(&v);
            v -= u * d;
        }
        let nv = v.norm();
        if nv > 1e-8 {
            vecs.push(v / nv);
        }
    }
    DMatrix::from_columns(&vecs)
}

fn fix_sign(v: &mut nalgebra::DVector<f64>) -> bool {
    let mut best = 0usize;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
        true
    } else {
        false
    }
}

/// Standard bases for `A` and `B` in which the correlation matrix is
/// `diag(1, c_1, c_2, …)` with `c_1 ≥ c_2 ≥ … ≥ 0`.
pub fn aligned_bases(psi: &BipartiteState) -> Result<CorrelationData> {
    let ga = StandardBasis::gell_mann(psi.m_a)?;
    let gb = StandardBasis::gell_mann(psi.m_b)?;
    let corr = raw_corr(psi, &ga, &gb);
    let (ka, kb) = (ga.len() - 1, gb.len() - 1);
    let block = corr.view((1, 1), (ka, kb)).into_owned();
    let svd = SVD::new(block.clone(), true, true);
    let r = svd.singular_values.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let u_full = svd.u.as_ref().ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    let vt_full = svd.v_t.as_ref().ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    let mut ucols = Vec::with_capacity(r);
    let mut vcols = Vec::with_capacity(r);
    for &j in &order {
        let mut u = u_full.column(j).into_owned();
        let mut v = vt_full.row(j).transpose();
        if fix_sign(&mut u) {
            v.neg_mut();
        }
        ucols.push(u);
        vcols.push(v);
    }
    let mut u = complete_orthonormal(&DMatrix::from_columns(&ucols), ka);
    let mut v = complete_orthonormal(&DMatrix::from_columns(&vcols), kb);
    for j in r..ka {
        let mut col = u.column(j).into_owned();
        fix_sign(&mut col);
        u.set_column(j, &col);
    }
    for j in r..kb {
        let mut col = v.column(j).into_owned();
        fix_sign(&mut col);
        v.set_column(j, &col);
    }
    let basis_a = ga.rotated(&u)?;
    let basis_b = gb.rotated(&v)?;
    let corr = raw_corr(psi, &basis_a, &basis_b);
    let singular_values = sorted_singular_values(&corr);
    Ok(CorrelationData {
        corr,
        singular_values,
        basis_a,
        basis_b,
    })
}

/// `ρ(ψ)`: the second singular value of the correlation matrix.
pub fn max_correlation(psi: &BipartiteState) -> Result<f64> {
    let ga = StandardBasis::gell_mann(psi.m_a)?;
    let gb = StandardBasis::gell_mann(psi.m_b)?;
    let corr = raw_corr(psi, &ga, &gb);
    let block = corr.view((1, 1), (ga.len() - 1, gb.len() - 1)).into_owned();
    Ok(sorted_singular_values(&block).first().copied().unwrap_or(0.0))
}

/// `Tr((P ⊗ Q)ψ^{⊗n})` from the dense state.
pub fn correlation_value(p: &HermitianOp, q: &HermitianOp, psi: &BipartiteState, n: usize) -> Result<f64> {
    if p.local_dim() != psi.m_a || q.local_dim() != psi.m_b || p.registers() != n || q.registers() != n {
        return Err(Error::DimMismatch {
            expected: n,
            found: p.registers(),
        });
    }
    let big = psi.tensor_power(n)?;
    Ok(pair_trace(p.matrix(), q.matrix(), &big))
}

/// `Σ_σ c_σ P̂(σ) Q̂(σ)` for representations in the aligned bases of `corr`.
pub fn correlation_value_fourier(p: &FourierRep, q: &FourierRep, corr: &CorrelationData) -> Result<f64> {
    if p.basis().distance(&corr.basis_a) > 1e-9 || q.basis().distance(&corr.basis_b) > 1e-9 {
        return Err(Error::BasisMismatch("representations are not in the aligned bases".into()));
    }
    p.weighted_dot(q, &corr.c())
}

/// Outcome of the randomized search for the `2 → 4` norm of `Δ_ρ^{⊗n}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypercontractivityReport {
    pub m: usize,
    pub n: usize,
    pub rho: f64,
    pub trials: usize,
    /// `1/√(3√m)`.
    pub threshold: f64,
    /// Largest `‖Δ_ρ P‖₄ / ‖P‖₂` among the random samples.
    pub best_sampled: f64,
    /// The same ratio after gradient refinement of the best sample.
    pub best_refined: f64,
}

impl HypercontractivityReport {
    pub fn ratio(&self) -> f64 {
        self.best_sampled.max(self.best_refined)
    }
}

fn ratio(p: &HermitianOp, rho: f64) -> f64 {
    let dp = depolarize(p, rho, None).expect("validated rate");
    let d = p.dim() as f64;
    let n4 = (trace_fourth_power(dp.matrix()) / d).powf(0.25);
    n4 / frobenius_norm(p.matrix(), true)
}

fn sample_candidate(m: usize, n: usize, kind: usize, rng: &mut ChaCha8Rng) -> HermitianOp {
    let dim = checked_pow(m, n).expect("validated");
    let mat = match kind % 4 {
        0 => random_hermitian(dim, rng),
        1 => {
            let t = 10f64.powf(rng.random_range(-3.0..1.0));
            MatrixC::identity(dim, dim) + random_hermitian(dim, rng).scale(t)
        }
        2 => {
            let g = crate::matspace::random_ginibre(dim, rng);
            let v = g.column(0).into_owned();
            &v * v.adjoint()
        }
        _ => {
            let mut acc = MatrixC::identity(1, 1);
            for _ in 0..n {
                let t = 10f64.powf(rng.random_range(-2.0..1.0));
                acc = acc.kronecker(&(MatrixC::identity(m, m) + random_hermitian(m, rng).scale(t)));
            }
            acc
        }
    };
    HermitianOp::from_parts(mat, m, n)
}

fn refine(start: &HermitianOp, rho: f64, steps: usize) -> f64 {
    let mut p = start.scale(1.0 / frobenius_norm(start.matrix(), false));
    let mut best = ratio(&p, rho);
    let mut eta = 0.1;
    for _ in 0..steps {
        let dp = depolarize(&p, rho, None).expect("validated rate");
        let x = dp.matrix();
        let cube = HermitianOp::from_parts(x * x * x, p.local_dim(), p.registers());
        let t4 = trace_fourth_power(x);
        let t2 = frobenius_norm(p.matrix(), false).powi(2);
        let g = &depolarize(&cube, rho, None).expect("validated rate").scale(1.0 / t4) - &p.scale(1.0 / t2);
        let gn = frobenius_norm(g.matrix(), false);
        if gn < 1e-14 {
            break;
        }
        loop {
            let cand = &p + &g.scale(eta / gn);
            let cand = cand.scale(1.0 / frobenius_norm(cand.matrix(), false));
            let r = ratio(&cand, rho);
            if r > best {
                best = r;
                p = cand;
                eta = (eta * 1.5).min(1.0);
                break;
            }
            eta *= 0.5;
            if eta < 1e-12 {
                return best;
            }
        }
    }
    best
}

/// Randomized search for `max ‖Δ_ρ(P)‖₄ / ‖P‖₂` over Hermitian `P` on `n`
/// registers (normalized norms): `trials` random samples from several
/// families, then projected gradient ascent from the best one.
pub fn hypercontractivity_search(
    m: usize,
    n: usize,
    rho: f64,
    trials: usize,
    refine_steps: usize,
    seed: u64,
) -> Result<HypercontractivityReport> {
    if m < 2 {
        return Err(Error::Argument("local dimension must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Argument(format!("noise rate ρ must lie in [0,1], got {rho}")));
    }
    check_dim(checked_pow(m, n).ok_or(Error::DimCap { dim: usize::MAX, cap: 0 })?)?;
    const CHUNK: usize = 256;
    let chunks = trials.div_ceil(CHUNK);
    let results: Vec<(f64, Option<HermitianOp>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut best = (f64::NEG_INFINITY, None);
            for t in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let p = sample_candidate(m, n, t, &mut rng);
                let r = ratio(&p, rho);
                if r > best.0 {
                    best = (r, Some(p));
                }
            }
            best
        })
        .collect();
    let mut best = (f64::NEG_INFINITY, None);
    for r in results {
        if r.0 > best.0 {
            best = r;
        }
    }
    let best_refined = match &best.1 {
        Some(p) => refine(p, rho, refine_steps),
        None => f64::NEG_INFINITY,
    };
    Ok(HypercontractivityReport {
        m,
        n,
        rho,
        trials,
        threshold: 1.0 / (3.0 * (m as f64).sqrt()).sqrt(),
        best_sampled: best.0,
        best_refined,
    })
}

/// A random state with uniform marginals: a mixture of locally rotated
/// noisy MES states and the maximally mixed state.
pub fn random_uniform_marginal_state<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<BipartiteState> {
    let eps = rng.random_range(0.0..1.0);
    let base = BipartiteState::noisy_mes(m, eps)?;
    let ua = crate::matspace::random_unitary(m, rng);
    let ub = crate::matspace::random_unitary(m, rng);
    let u = ua.kronecker(&ub);
    let rho = &u * base.density() * u.adjoint();
    BipartiteState::new(m, m, rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::{efron_stein, expand, reconstruct};
    use crate::matspace::{inner, random_hermitian};

    fn rand_op(m: usize, n: usize, seed: u64) -> HermitianOp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HermitianOp::new(random_hermitian(checked_pow(m, n).unwrap(), &mut rng), m, n).unwrap()
    }

    #[test]
    fn noisy_mes_examples() {
        let s = BipartiteState::noisy_mes(2, 1.0).unwrap();
        assert!((s.density() - MatrixC::identity(4, 4).scale(0.25)).norm() < 1e-15);
        let s = BipartiteState::noisy_mes(2, 0.0).unwrap();
        assert!((s.density()[(0, 3)].re - 0.5).abs() < 1e-15);
        let s = BipartiteState::noisy_mes(3, 0.5).unwrap();
        let ev = eigenvalues(&HermitianOp::from_matrix(s.density().clone()).unwrap());
        assert!((ev[0] - (0.5 + 0.5 / 9.0)).abs() < 1e-12);
        assert!(ev[1..].iter().all(|v| (v - 0.5 / 9.0).abs() < 1e-12));
        assert!(BipartiteState::noisy_mes(2, 1.5).is_err());
    }

    #[test]
    fn non_uniform_rejected() {
        let mut rho = MatrixC::zeros(4, 4);
        rho[(0, 0)] = C64::new(1.0, 0.0);
        assert!(matches!(BipartiteState::new(2, 2, rho), Err(Error::NonUniformMarginals(_))));
    }

    #[test]
    fn depolarize_examples() {
        let z = HermitianOp::from_real_diag(&[1.0, -1.0]);
        let out = depolarize(&z, 0.3, None).unwrap();
        assert!((out.matrix() - z.matrix().scale(0.3)).norm() < 1e-15);
        let id = HermitianOp::identity(3, 2);
        assert!((depolarize(&id, 0.2, None).unwrap().matrix() - id.matrix()).norm() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let g = crate::matspace::random_ginibre(8, &mut rng);
            let p = HermitianOp::new(&g * g.adjoint(), 2, 3).unwrap();
            let dp = depolarize(&p, 0.3, None).unwrap();
            let ev = eigenvalues(&dp);
            assert!(*ev.last().unwrap() >= -1e-10);
            assert!(ev[0] <= eigenvalues(&p)[0] + 1e-10);
        }
    }

    #[test]
    fn depolarize_scales_levels() {
        let b = StandardBasis::gell_mann(3).unwrap();
        let p = rand_op(3, 2, 1);
        let lhs = expand(&depolarize(&p, 0.4, None).unwrap(), &b).unwrap();
        let rhs = depolarize_rep(&expand(&p, &b).unwrap(), 0.4);
        assert!(lhs.combine(1.0, &rhs, -1.0).unwrap().norm_sq() < 1e-20);
    }

    #[test]
    fn markov_examples() {
        let prod = BipartiteState::product(2, 3).unwrap();
        let q = rand_op(3, 1, 2);
        let t = markov_t(&q, &prod, 1).unwrap();
        let expect = MatrixC::identity(2, 2).scale(q.trace() / 3.0);
        assert!((t.matrix() - expect).norm() < 1e-12);

        let mes = BipartiteState::mes(2).unwrap();
        let q = rand_op(2, 1, 3);
        let t = markov_t(&q, &mes, 1).unwrap();
        assert!((t.matrix() - q.matrix().transpose()).norm() < 1e-12);

        let psi = BipartiteState::noisy_mes(3, 0.4).unwrap();
        let t = markov_t(&HermitianOp::identity(3, 2), &psi, 2).unwrap();
        assert!((t.matrix() - MatrixC::identity(9, 9)).norm() < 1e-12);
    }

    #[test]
    fn markov_defining_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let psi = random_uniform_marginal_state(2, &mut rng).unwrap();
        let q = rand_op(2, 2, 10);
        let m = rand_op(2, 2, 11);
        let t = markov_t(&q, &psi, 2).unwrap();
        let lhs = correlation_value(&m, &q, &psi, 2).unwrap();
        let rhs = inner(m.matrix(), t.matrix()).unwrap().re;
        assert!((lhs - rhs).abs() < 1e-9);
        let ts = markov_t_adjoint(&m, &psi, 2).unwrap();
        let rhs2 = inner(ts.matrix(), q.matrix()).unwrap().re;
        assert!((lhs - rhs2).abs() < 1e-9);
    }

    #[test]
    fn correlation_examples() {
        let g = StandardBasis::gell_mann(2).unwrap();
        let psi = BipartiteState::noisy_mes(2, 0.3).unwrap();
        let cd = corr_matrix(&psi, &g, &g).unwrap();
        let expect = [1.0, 0.7, -0.7, 0.7];
        for i in 0..4 {
            for j in 0..4 {
                let t = if i == j { expect[i] } else { 0.0 };
                assert!((cd.corr[(i, j)] - t).abs() < 1e-12);
            }
        }
        assert!(cd.singular_values.iter().zip([1.0, 0.7, 0.7, 0.7]).all(|(a, b)| (a - b).abs() < 1e-12));
        let prod = BipartiteState::product(2, 2).unwrap();
        let cd = aligned_bases(&prod).unwrap();
        assert!((cd.corr[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(cd.c()[1..].iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn aligned_is_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for m in [2, 3] {
            let psi = random_uniform_marginal_state(m, &mut rng).unwrap();
            let cd = aligned_bases(&psi).unwrap();
            assert!(cd.off_diagonal() <= 1e-9);
            let c = cd.c();
            assert!((c[0] - 1.0).abs() < 1e-9);
            assert!(c[1..].windows(2).all(|w| w[0] >= w[1] - 1e-12));
            assert!((c[1] - max_correlation(&psi).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn max_correlation_values() {
        for m in [2, 3] {
            assert!((max_correlation(&BipartiteState::noisy_mes(m, 0.3).unwrap()).unwrap() - 0.7).abs() < 1e-12);
        }
        assert!(max_correlation(&BipartiteState::product(2, 2).unwrap()).unwrap().abs() < 1e-12);
        assert!((max_correlation(&BipartiteState::noisy_mes(2, 0.0).unwrap()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maximal_correlation_supremum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let psi = random_uniform_marginal_state(3, &mut rng).unwrap();
        let g = StandardBasis::gell_mann(3).unwrap();
        let traceless = |h: &HermitianOp| {
            let rep = expand(h, &g).unwrap().map(|s, v| if s.size() == 0 { 0.0 } else { v });
            let op = reconstruct(&rep).unwrap();
            op.scale(1.0 / frobenius_norm(op.matrix(), true))
        };
        let mut q = traceless(&rand_op(3, 1, 22));
        let mut value = 0.0;
        for _ in 0..500 {
            let p = traceless(&markov_t(&q, &psi, 1).unwrap());
            q = traceless(&markov_t_adjoint(&p, &psi, 1).unwrap());
            value = correlation_value(&p, &q, &psi, 1).unwrap();
        }
        assert!((value - max_correlation(&psi).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn dual_path_correlation() {
        let psi = BipartiteState::noisy_mes(2, 0.2).unwrap();
        let cd = aligned_bases(&psi).unwrap();
        let p = rand_op(2, 2, 30);
        let q = rand_op(2, 2, 31);
        let dense = correlation_value(&p, &q, &psi, 2).unwrap();
        let pf = expand(&p, &cd.basis_a).unwrap();
        let qf = expand(&q, &cd.basis_b).unwrap();
        let four = correlation_value_fourier(&pf, &qf, &cd).unwrap();
        assert!((dense - four).abs() < 1e-8);
        let id = HermitianOp::identity(2, 2);
        assert!((correlation_value(&id, &id, &psi, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn markov_commutes_with_efron_stein() {
        let psi = BipartiteState::noisy_mes(2, 0.35).unwrap();
        let cd = aligned_bases(&psi).unwrap();
        let q = rand_op(2, 2, 40);
        let qf = expand(&q, &cd.basis_b).unwrap();
        let tq = expand(&markov_t(&q, &psi, 2).unwrap(), &cd.basis_a).unwrap();
        let rho = cd.rho();
        for s in [vec![], vec![0], vec![1], vec![0, 1]] {
            let qs = reconstruct(&efron_stein(&qf, &s).unwrap()).unwrap();
            let lhs = expand(&markov_t(&qs, &psi, 2).unwrap(), &cd.basis_a).unwrap();
            let rhs = efron_stein(&tq, &s).unwrap();
            assert!(lhs.combine(1.0, &rhs, -1.0).unwrap().norm_sq().sqrt() < 1e-9);
            let bound = rho.powi(s.len() as i32) * frobenius_norm(qs.matrix(), true);
            assert!(lhs.norm_sq().sqrt() <= bound + 1e-9);
        }
    }

    #[test]
    fn hypercontractivity_small() {
        let r = hypercontractivity_search(2, 1, 1.0 / (3.0 * 2f64.sqrt()).sqrt(), 300, 50, 1).unwrap();
        assert!(r.ratio() <= 1.0 + 1e-9);
        let r = hypercontractivity_search(2, 1, 0.95, 300, 50, 1).unwrap();
        assert!(r.ratio() > 1.0);
    }
}
