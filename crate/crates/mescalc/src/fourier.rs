//! Standard orthonormal bases of `m × m` matrices and Fourier analysis over
//! their tensor products.
//!
//! A standard orthonormal basis `B_0 = id, B_1, …, B_{m²−1}` consists of
//! Hermitian matrices orthonormal under the normalized trace inner product.
//! An operator on `n` registers expands as `P = Σ_σ P̂(σ) B_σ` with
//! `B_σ = B_{σ_1} ⊗ … ⊗ B_{σ_n}` and `P̂(σ) = ⟨B_σ, P⟩`.
//!
//! Registers are indexed from 0 in this API.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matspace::{check_dim, checked_pow, inner, is_hermitian, kron_all, max_abs_entry, partial_trace, HermitianOp, MatrixC, C64};

/// Coefficients with magnitude at or below this are treated as zero.
pub const ZERO_TOL: f64 = 1e-13;

/// Largest register count stored densely.
const DENSE_MAX_REGISTERS: usize = 6;

/// A multi-index `σ ∈ [m²]^n`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<u16>);

impl MultiIndex {
    pub fn new(entries: Vec<u16>) -> Self {
        Self(entries)
    }

    pub fn zero(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `|σ|`, the number of nonzero entries.
    pub fn size(&self) -> usize {
        self.0.iter().filter(|&&s| s != 0).count()
    }

    /// `wt(σ)`, the entry sum.
    pub fn weight(&self) -> usize {
        self.0.iter().map(|&s| s as usize).sum()
    }

    /// Registers with a nonzero entry.
    pub fn support(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &s)| s != 0).map(|(i, _)| i).collect()
    }

    pub fn entries(&self) -> &[u16] {
        &self.0
    }

    /// Position in the row-major enumeration with register 0 most significant.
    pub fn to_linear(&self, radix: usize) -> usize {
        self.0.iter().fold(0, |acc, &s| acc * radix + s as usize)
    }

    pub fn from_linear(mut idx: usize, radix: usize, n: usize) -> Self {
        let mut v = vec![0u16; n];
        for k in (0..n).rev() {
            v[k] = (idx % radix) as u16;
            idx /= radix;
        }
        Self(v)
    }
}

/// A standard orthonormal basis of `m × m` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardBasis {
    m: usize,
    elements: Vec<MatrixC>,
}

fn unit(m: usize, j: usize, k: usize) -> MatrixC {
    let mut e = MatrixC::zeros(m, m);
    e[(j, k)] = C64::new(1.0, 0.0);
    e
}

impl StandardBasis {
    /// The generalized Gell-Mann basis: identity, then for each `j < k` the
    /// symmetric element `E_jk + E_kj` followed by `−i(E_jk − E_kj)`, then the
    /// diagonal generators; all non-identity elements scaled by `√(m/2)`.
    /// For `m = 2` this is `{I, X, Y, Z}`.
    pub fn gell_mann(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::Argument(format!("local dimension must be at least 2, got {m}")));
        }
        let s = (m as f64 / 2.0).sqrt();
        let mi = C64::new(0.0, -1.0);
        let mut elements = vec![MatrixC::identity(m, m)];
        for j in 0..m {
            for k in j + 1..m {
                elements.push((unit(m, j, k) + unit(m, k, j)).scale(s));
                elements.push((unit(m, j, k) - unit(m, k, j)) * mi * C64::new(s, 0.0));
            }
        }
        for l in 1..m {
            let norm = (2.0 / (l * (l + 1)) as f64).sqrt() * s;
            let mut d = MatrixC::zeros(m, m);
            for i in 0..l {
                d[(i, i)] = C64::new(norm, 0.0);
            }
            d[(l, l)] = C64::new(-(l as f64) * norm, 0.0);
            elements.push(d);
        }
        Ok(Self { m, elements })
    }

    /// Validates a user-supplied basis.
    pub fn from_elements(m: usize, elements: Vec<MatrixC>) -> Result<Self> {
        if m < 2 || elements.len() != m * m {
            return Err(Error::Argument(format!("a standard basis of M_{m} needs {} elements", m * m)));
        }
        if elements.iter().any(|e| e.shape() != (m, m) || !is_hermitian(e)) {
            return Err(Error::Precondition("basis elements must be Hermitian m × m matrices".into()));
        }
        if (&elements[0] - MatrixC::identity(m, m)).norm() > 1e-10 {
            return Err(Error::Precondition("element 0 must be the identity".into()));
        }
        for a in 0..elements.len() {
            for b in 0..=a {
                let g = inner(&elements[a], &elements[b])?;
                let target = if a == b { 1.0 } else { 0.0 };
                if (g - C64::new(target, 0.0)).norm() > 1e-10 {
                    return Err(Error::Precondition(format!("elements {a} and {b} are not orthonormal")));
                }
            }
        }
        Ok(Self { m, elements })
    }

    /// Rotates the nontrivial elements: `B'_k = Σ_i O_{ik} B_i` for `k ≥ 1`,
    /// where `O` is an orthogonal `(m²−1) × (m²−1)` matrix.
    pub fn rotated(&self, o: &DMatrix<f64>) -> Result<Self> {
        let k = self.len() - 1;
        if o.shape() != (k, k) {
            return Err(Error::DimMismatch {
                expected: k,
                found: o.nrows(),
            });
        }
        let ortho = (o.transpose() * o - DMatrix::<f64>::identity(k, k)).norm();
        if ortho > 1e-9 {
            return Err(Error::Precondition("rotation is not orthogonal".into()));
        }
        let mut elements = vec![self.elements[0].clone()];
        for col in 0..k {
            let mut acc = MatrixC::zeros(self.m, self.m);
            for row in 0..k {
                acc += self.elements[row + 1].scale(o[(row, col)]);
            }
            elements.push(acc);
        }
        Ok(Self { m: self.m, elements })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of elements, `m²`.
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn element(&self, i: usize) -> &MatrixC {
        &self.elements[i]
    }

    pub fn elements(&self) -> &[MatrixC] {
        &self.elements
    }

    /// `B_σ` as a dense matrix.
    pub fn tensor_element(&self, sigma: &MultiIndex) -> MatrixC {
        kron_all(sigma.entries().iter().map(|&s| &self.elements[s as usize]))
    }

    /// Maximum entrywise distance between corresponding elements.
    pub fn distance(&self, other: &Self) -> f64 {
        if self.m != other.m {
            return f64::INFINITY;
        }
        self.elements
            .iter()
            .zip(&other.elements)
            .map(|(a, b)| max_abs_entry(&(a - b)))
            .fold(0.0, f64::max)
    }

    /// Maps pair-layout entries `(i·m + j)` to coefficients.
    pub(crate) fn analysis_matrix(&self) -> MatrixC {
        let m = self.m;
        let inv = 1.0 / m as f64;
        MatrixC::from_fn(m * m, m * m, |b, p| self.elements[b][(p / m, p % m)].conj() * inv)
    }

    /// Maps coefficients to pair-layout entries.
    pub(crate) fn synthesis_matrix(&self) -> MatrixC {
        let m = self.m;
        MatrixC::from_fn(m * m, m * m, |p, b| self.elements[b][(p / m, p % m)])
    }
}

/// Rearranges a `d^n × d^n` matrix into a tensor with one axis of size `d²`
/// per register, axis value `i_k·d + j_k`.
pub(crate) fn to_pair_layout(mat: &MatrixC, d: usize, n: usize) -> Vec<C64> {
    let dim = mat.nrows();
    let mut out = vec![C64::default(); dim * dim];
    let mut ri = vec![0usize; n];
    let mut ci = vec![0usize; n];
    for r in 0..dim {
        let mut x = r;
        for k in (0..n).rev() {
            ri[k] = x % d;
            x /= d;
        }
        for c in 0..dim {
            let mut y = c;
            for k in (0..n).rev() {
                ci[k] = y % d;
                y /= d;
            }
            let mut idx = 0;
            for k in 0..n {
                idx = idx * d * d + ri[k] * d + ci[k];
            }
            out[idx] = mat[(r, c)];
        }
    }
    out
}

/// Inverse of [`to_pair_layout`].
pub(crate) fn from_pair_layout(data: &[C64], d: usize, n: usize) -> MatrixC {
    let dim = checked_pow(d, n).expect("dimension overflow");
    let mut out = MatrixC::zeros(dim, dim);
    let mut p = vec![0usize; n];
    for (idx, v) in data.iter().enumerate() {
        let mut x = idx;
        for k in (0..n).rev() {
            p[k] = x % (d * d);
            x /= d * d;
        }
        let (mut r, mut c) = (0, 0);
        for k in 0..n {
            r = r * d + p[k] / d;
            c = c * d + p[k] % d;
        }
        out[(r, c)] = *v;
    }
    out
}

/// Applies `mat` (`out × in`) along `axis` of a row-major tensor of shape `dims`.
pub(crate) fn apply_axis(data: &[C64], dims: &[usize], axis: usize, mat: &MatrixC) -> (Vec<C64>, Vec<usize>) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let (din, dout) = (dims[axis], mat.nrows());
    debug_assert_eq!(mat.ncols(), din);
    let mut out = vec![C64::default(); outer * dout * inner];
    for o in 0..outer {
        for a in 0..dout {
            let dst = &mut out[(o * dout + a) * inner..(o * dout + a + 1) * inner];
            for b in 0..din {
                let w = mat[(a, b)];
                if w == C64::default() {
                    continue;
                }
                let src = &data[(o * din + b) * inner..(o * din + b + 1) * inner];
                for (x, y) in dst.iter_mut().zip(src) {
                    *x += w * y;
                }
            }
        }
    }
    let mut nd = dims.to_vec();
    nd[axis] = dout;
    (out, nd)
}

/// Applies the same single-register map to every register in pair layout.
pub(crate) fn apply_all_axes(mut data: Vec<C64>, n: usize, din: usize, mat: &MatrixC) -> Vec<C64> {
    let mut dims = vec![din; n];
    for axis in 0..n {
        let (d, nd) = apply_axis(&data, &dims, axis, mat);
        data = d;
        dims = nd;
    }
    data
}

#[derive(Clone, Debug, PartialEq)]
enum Store {
    Dense(Vec<f64>),
    Sparse(BTreeMap<MultiIndex, f64>),
}

/// Real Fourier coefficients of a Hermitian operator relative to a
/// standard basis.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierRep {
    basis: StandardBasis,
    n: usize,
    store: Store,
}

/// Degree filters for [`truncate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Truncation {
    AtMost(usize),
    AtLeast(usize),
    Exactly(usize),
    Above(usize),
}

impl Truncation {
    fn keeps(self, size: usize) -> bool {
        match self {
            Truncation::AtMost(t) => size <= t,
            Truncation::AtLeast(t) => size >= t,
            Truncation::Exactly(t) => size == t,
            Truncation::Above(t) => size > t,
        }
    }
}

impl FourierRep {
    /// The zero operator.
    pub fn zero(basis: StandardBasis, n: usize) -> Self {
        let store = if n <= DENSE_MAX_REGISTERS {
            Store::Dense(vec![0.0; checked_pow(basis.len(), n).expect("dimension overflow")])
        } else {
            Store::Sparse(BTreeMap::new())
        };
        Self { basis, n, store }
    }

    /// Builds a representation from `(σ, P̂(σ))` pairs; repeated indices add.
    pub fn from_coeffs(basis: StandardBasis, n: usize, coeffs: impl IntoIterator<Item = (MultiIndex, f64)>) -> Result<Self> {
        let mut rep = Self::zero(basis, n);
        let radix = rep.basis.len();
        for (sigma, v) in coeffs {
            if sigma.len() != n || sigma.entries().iter().any(|&s| s as usize >= radix) {
                return Err(Error::Argument(format!("multi-index {:?} out of range", sigma.entries())));
            }
            rep.add_to(&sigma, v);
        }
        rep.prune();
        Ok(rep)
    }

    fn add_to(&mut self, sigma: &MultiIndex, v: f64) {
        let radix = self.basis.len();
        match &mut self.store {
            Store::Dense(d) => d[sigma.to_linear(radix)] += v,
            Store::Sparse(s) => *s.entry(sigma.clone()).or_insert(0.0) += v,
        }
    }

    fn prune(&mut self) {
        if let Store::Sparse(s) = &mut self.store {
            s.retain(|_, v| v.abs() > ZERO_TOL);
        }
    }

    pub fn basis(&self) -> &StandardBasis {
        &self.basis
    }

    pub fn registers(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.basis.m()
    }

    /// `P̂(σ)`.
    pub fn get(&self, sigma: &MultiIndex) -> f64 {
        match &self.store {
            Store::Dense(d) => d[sigma.to_linear(self.basis.len())],
            Store::Sparse(s) => s.get(sigma).copied().unwrap_or(0.0),
        }
    }

    /// Coefficients whose magnitude exceeds [`ZERO_TOL`], in index order.
    pub fn iter(&self) -> Box<dyn Iterator<Item = (MultiIndex, f64)> + '_> {
        match &self.store {
            Store::Dense(d) => {
                let radix = self.basis.len();
                let n = self.n;
                Box::new(
                    d.iter()
                        .enumerate()
                        .filter(|(_, v)| v.abs() > ZERO_TOL)
                        .map(move |(i, &v)| (MultiIndex::from_linear(i, radix, n), v)),
                )
            }
            Store::Sparse(s) => Box::new(s.iter().filter(|(_, v)| v.abs() > ZERO_TOL).map(|(k, &v)| (k.clone(), v))),
        }
    }

    /// Applies `f(σ, P̂(σ))` to every stored coefficient.
    pub fn map(&self, f: impl Fn(&MultiIndex, f64) -> f64) -> Self {
        let radix = self.basis.len();
        let store = match &self.store {
            Store::Dense(d) => Store::Dense(
                d.iter()
                    .enumerate()
                    .map(|(i, &v)| if v == 0.0 { 0.0 } else { f(&MultiIndex::from_linear(i, radix, self.n), v) })
                    .collect(),
            ),
            Store::Sparse(s) => Store::Sparse(s.iter().map(|(k, &v)| (k.clone(), f(k, v))).collect()),
        };
        let mut out = Self {
            basis: self.basis.clone(),
            n: self.n,
            store,
        };
        out.prune();
        out
    }

    /// `Σ_σ P̂(σ)²`, the squared normalized 2-norm.
    pub fn norm_sq(&self) -> f64 {
        match &self.store {
            Store::Dense(d) => d.iter().map(|v| v * v).sum(),
            Store::Sparse(s) => s.values().map(|v| v * v).sum(),
        }
    }

    /// `Σ_σ P̂(σ) Q̂(σ)`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self.iter().map(|(s, v)| v * other.get(&s)).sum())
    }

    /// `Σ_σ P̂(σ) Q̂(σ) Π_i w[σ_i]`, e.g. a correlation with weights `c`.
    pub fn weighted_dot(&self, other: &Self, weights: &[f64]) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .iter()
            .map(|(s, v)| {
                let w: f64 = s.entries().iter().map(|&k| weights.get(k as usize).copied().unwrap_or(0.0)).product();
                if w == 0.0 {
                    0.0
                } else {
                    w * v * other.get(&s)
                }
            })
            .sum())
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.n != other.n || self.m() != other.m() {
            return Err(Error::DimMismatch {
                expected: self.n,
                found: other.n,
            });
        }
        Ok(())
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = self.map(|_, v| a * v);
        for (s, v) in other.iter() {
            out.add_to(&s, b * v);
        }
        out.prune();
        Ok(out)
    }
}

/// Fourier coefficients of `p` relative to `basis`.
pub fn expand(p: &HermitianOp, basis: &StandardBasis) -> Result<FourierRep> {
    if p.local_dim() != basis.m() {
        return Err(Error::DimMismatch {
            expected: basis.m(),
            found: p.local_dim(),
        });
    }
    let n = p.registers();
    let m = basis.m();
    let data = to_pair_layout(p.matrix(), m, n);
    let coeffs = apply_all_axes(data, n, m * m, &basis.analysis_matrix());
    let store = if n <= DENSE_MAX_REGISTERS {
        Store::Dense(coeffs.iter().map(|z| z.re).collect())
    } else {
        Store::Sparse(
            coeffs
                .iter()
                .enumerate()
                .filter(|(_, z)| z.re.abs() > ZERO_TOL)
                .map(|(i, z)| (MultiIndex::from_linear(i, m * m, n), z.re))
                .collect(),
        )
    };
    Ok(FourierRep {
        basis: basis.clone(),
        n,
        store,
    })
}

/// `Σ_σ P̂(σ) B_σ`.
pub fn reconstruct(rep: &FourierRep) -> Result<HermitianOp> {
    let m = rep.m();
    let n = rep.n;
    let dim = checked_pow(m, n).ok_or(Error::DimCap {
        dim: usize::MAX,
        cap: crate::matspace::max_dim(),
    })?;
    check_dim(dim)?;
    let radix = m * m;
    let mut data = vec![C64::default(); dim * dim];
    for (s, v) in rep.iter() {
        data[s.to_linear(radix)] = C64::new(v, 0.0);
    }
    let out = apply_all_axes(data, n, radix, &rep.basis.synthesis_matrix());
    Ok(HermitianOp::from_parts(from_pair_layout(&out, m, n), m, n))
}

/// Keeps the coefficients whose `|σ|` passes the filter.
pub fn truncate(rep: &FourierRep, mode: Truncation) -> FourierRep {
    rep.map(|s, v| if mode.keeps(s.size()) { v } else { 0.0 })
}

/// `max |σ|` over nonzero coefficients (0 for the zero operator).
pub fn degree(rep: &FourierRep) -> usize {
    rep.iter().map(|(s, _)| s.size()).max().unwrap_or(0)
}

/// `P[S]`: coefficients with `supp(σ) = S`.
pub fn efron_stein(rep: &FourierRep, subset: &[usize]) -> Result<FourierRep> {
    if subset.iter().any(|&i| i >= rep.n) {
        return Err(Error::Argument("register subset out of range".into()));
    }
    let mut s: Vec<usize> = subset.to_vec();
    s.sort_unstable();
    s.dedup();
    Ok(rep.map(|sigma, v| if sigma.support() == s { v } else { 0.0 }))
}

/// `P_S = Tr_{S^c}(P) / m^{|S^c|}`, an operator on the registers of `S`.
pub fn partial_average(p: &HermitianOp, subset: &[usize]) -> Result<HermitianOp> {
    let n = p.registers();
    if subset.iter().any(|&i| i >= n) {
        return Err(Error::Argument("register subset out of range".into()));
    }
    let m = p.local_dim();
    let traced: Vec<usize> = (0..n).filter(|i| !subset.contains(i)).collect();
    let pt = partial_trace(p.matrix(), &vec![m; n], &traced)?;
    let kept = n - traced.len();
    let scale = 1.0 / checked_pow(m, traced.len()).unwrap_or(usize::MAX) as f64;
    Ok(HermitianOp::from_parts(pt.scale(scale), m, kept))
}

/// `Inf_i(P) = Σ_{σ_i ≠ 0} P̂(σ)²`.
pub fn influence(rep: &FourierRep, i: usize) -> f64 {
    rep.iter().filter(|(s, _)| s.entries()[i] != 0).map(|(_, v)| v * v).sum()
}

/// All register influences.
pub fn influences(rep: &FourierRep) -> Vec<f64> {
    let mut out = vec![0.0; rep.n];
    for (s, v) in rep.iter() {
        for i in s.support() {
            out[i] += v * v;
        }
    }
    out
}

/// `Σ_{σ ≠ 0} P̂(σ)²`.
pub fn variance(rep: &FourierRep) -> f64 {
    rep.iter().filter(|(s, _)| s.size() > 0).map(|(_, v)| v * v).sum()
}

/// `Σ_σ |σ| P̂(σ)²`.
pub fn total_influence(rep: &FourierRep) -> f64 {
    rep.iter().map(|(s, v)| s.size() as f64 * v * v).sum()
}

/// A Haar-random orthogonal `k × k` matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(k, k, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matspace::{frobenius_norm, random_hermitian};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_op(m: usize, n: usize, seed: u64) -> HermitianOp {
        let dim = checked_pow(m, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HermitianOp::new(random_hermitian(dim, &mut rng), m, n).unwrap()
    }

    fn pauli_z() -> HermitianOp {
        HermitianOp::from_real_diag(&[1.0, -1.0])
    }

    #[test]
    fn pauli_basis() {
        let b = StandardBasis::gell_mann(2).unwrap();
        let i = C64::new(0.0, 1.0);
        let z = C64::default();
        let o = C64::new(1.0, 0.0);
        assert_eq!(b.element(1), &MatrixC::from_row_slice(2, 2, &[z, o, o, z]));
        assert_eq!(b.element(2), &MatrixC::from_row_slice(2, 2, &[z, -i, i, z]));
        assert_eq!(b.element(3), &MatrixC::from_row_slice(2, 2, &[o, z, z, -o]));
        assert!(StandardBasis::gell_mann(1).is_err());
    }

    #[test]
    fn gell_mann_gram_identity() {
        for m in 2..=4 {
            let b = StandardBasis::gell_mann(m).unwrap();
            assert_eq!(b.len(), m * m);
            assert_eq!(b.element(0), &MatrixC::identity(m, m));
            for x in 0..b.len() {
                for y in 0..b.len() {
                    let g = inner(b.element(x), b.element(y)).unwrap();
                    let t = if x == y { 1.0 } else { 0.0 };
                    assert!((g - C64::new(t, 0.0)).norm() < 1e-12);
                }
            }
            assert!(StandardBasis::from_elements(m, b.elements().to_vec()).is_ok());
        }
    }

    #[test]
    fn expand_examples() {
        let b = StandardBasis::gell_mann(2).unwrap();
        let rep = expand(&pauli_z(), &b).unwrap();
        let nz: Vec<_> = rep.iter().collect();
        assert_eq!(nz.len(), 1);
        assert_eq!(nz[0].0, MultiIndex::new(vec![3]));
        assert!((nz[0].1 - 1.0).abs() < 1e-15);
        let proj = HermitianOp::from_real_diag(&[1.0, 0.0]);
        let rep = expand(&proj, &b).unwrap();
        assert!((rep.get(&MultiIndex::new(vec![0])) - 0.5).abs() < 1e-15);
        assert!((rep.get(&MultiIndex::new(vec![3])) - 0.5).abs() < 1e-15);
        assert_eq!(rep.iter().count(), 2);
    }

    #[test]
    fn round_trip_and_parseval() {
        let b = StandardBasis::gell_mann(2).unwrap();
        let p = rand_op(2, 3, 11);
        let rep = expand(&p, &b).unwrap();
        let back = reconstruct(&rep).unwrap();
        assert!((back.matrix() - p.matrix()).norm() < 1e-9);
        let n2 = frobenius_norm(p.matrix(), true);
        assert!((rep.norm_sq() - n2 * n2).abs() < 1e-9);
    }

    #[test]
    fn sparse_store_matches_dense() {
        let b = StandardBasis::gell_mann(2).unwrap();
        let p = rand_op(2, 7, 5);
        let rep = expand(&p, &b).unwrap();
        assert!(matches!(rep.store, Store::Sparse(_)));
        let back = reconstruct(&rep).unwrap();
        assert!((back.matrix() - p.matrix()).norm() < 1e-9);
    }

    #[test]
    fn truncation_examples() {
        let b = StandardBasis::gell_mann(2).unwrap();
        let zz = pauli_z().kron(&pauli_z()).unwrap();
        let rep = expand(&zz, &b).unwrap();
        assert_eq!(truncate(&rep, Truncation::AtMost(1)).norm_sq(), 0.0);
        let id = expand(&HermitianOp::identity(2, 2), &b).unwrap();
        assert_eq!(truncate(&id, Truncation::AtMost(0)), id);
        assert_eq!(degree(&rep), 2);
        assert_eq!(degree(&id), 0);
        let p = expand(&rand_op(2, 3, 2), &b).unwrap();
        let lo = truncate(&p, Truncation::AtMost(1));
        let hi = truncate(&p, Truncation::Above(1));
        assert_eq!(lo.combine(1.0, &hi, 1.0).unwrap(), p.map(|_, v| v));
    }

    #[test]
    fn efron_stein_examples() {
        let b = StandardBasis::gell_mann(2).unwrap();
        let p = expand(&rand_op(2, 2, 3), &b).unwrap();
        let empty = efron_stein(&p, &[]).unwrap();
        assert_eq!(empty.iter().count(), 1);
        let subsets: [&[usize]; 4] = [&[], &[0], &[1], &[0, 1]];
        let mut total = FourierRep::zero(b.clone(), 2);
        for s in subsets {
            total = total.combine(1.0, &efron_stein(&p, s).unwrap(), 1.0).unwrap();
        }
        assert!(total.combine(1.0, &p, -1.0).unwrap().norm_sq() < 1e-24);
    }

    #[test]
    fn influence_examples() {
        let b = StandardBasis::gell_mann(2).unwrap();
        let zi = pauli_z().kron(&HermitianOp::identity(2, 1)).unwrap();
        let rep = expand(&zi, &b).unwrap();
        assert!((influence(&rep, 0) - 1.0).abs() < 1e-14);
        assert!(influence(&rep, 1).abs() < 1e-14);
        assert_eq!(variance(&expand(&HermitianOp::identity(2, 2), &b).unwrap()), 0.0);
    }

    #[test]
    fn partial_average_matches_coefficients() {
        let b = StandardBasis::gell_mann(3).unwrap();
        let p = rand_op(3, 2, 8);
        let rep = expand(&p, &b).unwrap();
        let avg = partial_average(&p, &[1]).unwrap();
        let direct = FourierRep::from_coeffs(
            b.clone(),
            1,
            rep.iter().filter(|(s, _)| s.entries()[0] == 0).map(|(s, v)| (MultiIndex::new(vec![s.entries()[1]]), v)),
        )
        .unwrap();
        assert!((reconstruct(&direct).unwrap().matrix() - avg.matrix()).norm() < 1e-10);
    }
}
