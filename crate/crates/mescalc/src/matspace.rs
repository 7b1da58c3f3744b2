//! Dense complex matrices, Hermitian operators on `n` registers of local
//! dimension `m`, spectral calculus and Schatten norms.
//!
//! The trace inner product and the `p`-norms come in the normalized flavour
//! used throughout the crate: `⟨P,Q⟩ = Tr(P†Q)/dim` and
//! `‖M‖_p = (Σ s_i^p / dim)^{1/p}`.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type MatrixC = DMatrix<C64>;

/// Default cap on matrix dimension.
pub const DEFAULT_MAX_DIM: usize = 4096;

/// Environment variable overriding [`DEFAULT_MAX_DIM`].
pub const MAX_DIM_ENV: &str = "MESCALC_MAX_DIM";

/// Relative eigenvalue cutoff used for rank decisions.
pub const RANK_CUTOFF: f64 = 1e-12;

/// The configured dimension cap.
pub fn max_dim() -> usize {
    std::env::var(MAX_DIM_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(DEFAULT_MAX_DIM)
}

/// Fails with [`Error::DimCap`] when `dim` exceeds the cap.
pub fn check_dim(dim: usize) -> Result<()> {
    let cap = max_dim();
    if dim > cap {
        Err(Error::DimCap { dim, cap })
    } else {
        Ok(())
    }
}

/// `m^n`, or `None` on overflow.
pub fn checked_pow(m: usize, n: usize) -> Option<usize> {
    let mut acc = 1usize;
    for _ in 0..n {
        acc = acc.checked_mul(m)?;
    }
    Some(acc)
}

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Hermiticity tolerance for a matrix: `1e-10 × ‖M‖` with floor `1e-12`.
pub fn hermiticity_tol(mat: &MatrixC) -> f64 {
    let scale = (0..mat.ncols())
        .map(|j| mat.column(j).norm())
        .fold(0.0, f64::max);
    (1e-10 * scale).max(1e-12)
}

/// Upper bound on the operator norm of `M − M†`.
fn antihermitian_deviation(mat: &MatrixC) -> f64 {
    let d = mat - mat.adjoint();
    let col = (0..d.ncols())
        .map(|j| d.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let row = (0..d.nrows())
        .map(|i| d.row(i).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    (col * row).sqrt()
}

/// Whether `mat` is square and Hermitian within [`hermiticity_tol`].
pub fn is_hermitian(mat: &MatrixC) -> bool {
    mat.is_square()
        && mat.iter().all(|z| z.re.is_finite() && z.im.is_finite())
        && antihermitian_deviation(mat) <= hermiticity_tol(mat)
}

/// Largest entry magnitude.
pub fn max_abs_entry(mat: &MatrixC) -> f64 {
    mat.iter().fold(0.0, |a, z| a.max(z.norm()))
}

/// `(M + M†)/2`.
pub fn symmetrize(mat: &MatrixC) -> MatrixC {
    (mat + mat.adjoint()).scale(0.5)
}

/// A Hermitian operator on `n` registers of local dimension `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOp {
    mat: MatrixC,
    m: usize,
    n: usize,
}

impl HermitianOp {
    /// Validates hermiticity and the register structure, then symmetrizes.
    pub fn new(mat: MatrixC, m: usize, n: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Argument("local dimension must be positive".into()));
        }
        let dim = checked_pow(m, n).ok_or(Error::DimCap {
            dim: usize::MAX,
            cap: max_dim(),
        })?;
        if !mat.is_square() || mat.nrows() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: mat.nrows(),
            });
        }
        if !is_hermitian(&mat) {
            return Err(Error::Precondition(format!(
                "matrix is not Hermitian (deviation {:.3e})",
                antihermitian_deviation(&mat)
            )));
        }
        Ok(Self {
            mat: symmetrize(&mat),
            m,
            n,
        })
    }

    /// A Hermitian operator viewed as a single register.
    pub fn from_matrix(mat: MatrixC) -> Result<Self> {
        let d = mat.nrows();
        Self::new(mat, d.max(1), if d == 0 { 0 } else { 1 })
    }

    /// Symmetrizes without checking; callers guarantee near-hermiticity.
    pub(crate) fn from_parts(mat: MatrixC, m: usize, n: usize) -> Self {
        debug_assert_eq!(checked_pow(m, n), Some(mat.nrows()));
        Self {
            mat: symmetrize(&mat),
            m,
            n,
        }
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        let d = diag.len();
        let mat = MatrixC::from_fn(d, d, |i, j| if i == j { c(diag[i]) } else { C64::default() });
        Self { mat, m: d, n: 1 }
    }

    pub fn identity(m: usize, n: usize) -> Self {
        let d = checked_pow(m, n).expect("dimension overflow");
        Self {
            mat: MatrixC::identity(d, d),
            m,
            n,
        }
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        let d = checked_pow(m, n).expect("dimension overflow");
        Self {
            mat: MatrixC::zeros(d, d),
            m,
            n,
        }
    }

    pub fn matrix(&self) -> &MatrixC {
        &self.mat
    }

    pub fn into_matrix(self) -> MatrixC {
        self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn local_dim(&self) -> usize {
        self.m
    }

    pub fn registers(&self) -> usize {
        self.n
    }

    /// Same matrix with a different register structure.
    pub fn reshaped(&self, m: usize, n: usize) -> Result<Self> {
        if checked_pow(m, n) != Some(self.dim()) {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: checked_pow(m, n).unwrap_or(usize::MAX),
            });
        }
        Ok(Self {
            mat: self.mat.clone(),
            m,
            n,
        })
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace().re
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            mat: self.mat.scale(a),
            m: self.m,
            n: self.n,
        }
    }

    /// `A²`.
    pub fn square(&self) -> Self {
        Self::from_parts(&self.mat * &self.mat, self.m, self.n)
    }

    /// Tensor product, registers concatenated. Local dimensions must agree.
    pub fn kron(&self, other: &Self) -> Result<Self> {
        if self.m != other.m && self.n > 0 && other.n > 0 {
            return Err(Error::DimMismatch {
                expected: self.m,
                found: other.m,
            });
        }
        let m = if self.n > 0 { self.m } else { other.m };
        Ok(Self {
            mat: self.mat.kronecker(&other.mat),
            m,
            n: self.n + other.n,
        })
    }

    fn same_shape(&self, other: &Self) {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
    }
}

impl Add for &HermitianOp {
    type Output = HermitianOp;
    fn add(self, rhs: Self) -> HermitianOp {
        self.same_shape(rhs);
        HermitianOp {
            mat: &self.mat + &rhs.mat,
            m: self.m,
            n: self.n,
        }
    }
}

impl Sub for &HermitianOp {
    type Output = HermitianOp;
    fn sub(self, rhs: Self) -> HermitianOp {
        self.same_shape(rhs);
        HermitianOp {
            mat: &self.mat - &rhs.mat,
            m: self.m,
            n: self.n,
        }
    }
}

impl Mul<f64> for &HermitianOp {
    type Output = HermitianOp;
    fn mul(self, rhs: f64) -> HermitianOp {
        self.scale(rhs)
    }
}

impl Neg for &HermitianOp {
    type Output = HermitianOp;
    fn neg(self) -> HermitianOp {
        self.scale(-1.0)
    }
}

/// Eigendecomposition `H = U diag(λ) U†` with `λ` non-increasing.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: MatrixC,
}

impl Spectrum {
    /// `U diag(f(λ)) U†`.
    pub fn compose(&self, f: impl Fn(f64) -> f64) -> MatrixC {
        let d = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..d {
            let v = f(self.values[j]);
            scaled.column_mut(j).scale_mut(v);
        }
        scaled * self.vectors.adjoint()
    }

    /// Largest absolute eigenvalue.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// `U† M U`.
    pub fn to_eigenbasis(&self, mat: &MatrixC) -> MatrixC {
        self.vectors.adjoint() * mat * &self.vectors
    }

    /// `U M U†`.
    pub fn from_eigenbasis(&self, mat: &MatrixC) -> MatrixC {
        &self.vectors * mat * self.vectors.adjoint()
    }
}

fn eigh(mat: &MatrixC) -> Spectrum {
    let d = mat.nrows();
    if d == 0 {
        return Spectrum {
            values: vec![],
            vectors: MatrixC::zeros(0, 0),
        };
    }
    let eig = SymmetricEigen::new(mat.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = MatrixC::from_fn(d, d, |i, j| eig.eigenvectors[(i, order[j])]);
    Spectrum { values, vectors }
}

/// Spectral decomposition of a Hermitian operator.
pub fn spectral_decompose(h: &HermitianOp) -> Spectrum {
    eigh(&h.mat)
}

/// Spectral decomposition of a raw matrix, rejecting non-Hermitian input.
pub fn spectral_decompose_matrix(mat: &MatrixC) -> Result<Spectrum> {
    if !is_hermitian(mat) {
        return Err(Error::Precondition("matrix is not Hermitian".into()));
    }
    Ok(eigh(&symmetrize(mat)))
}

/// Eigenvalues, non-increasing.
pub fn eigenvalues(h: &HermitianOp) -> Vec<f64> {
    let d = h.dim();
    if d == 0 {
        return vec![];
    }
    let mut v: Vec<f64> = h.mat.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// `f(H)`; fails when `f` is not finite at an eigenvalue.
pub fn matrix_fn(h: &HermitianOp, f: impl Fn(f64) -> f64) -> Result<HermitianOp> {
    let s = spectral_decompose(h);
    if let Some(bad) = s.values.iter().find(|&&x| !f(x).is_finite()) {
        return Err(Error::Domain(format!("function undefined at eigenvalue {bad}")));
    }
    Ok(HermitianOp::from_parts(s.compose(f), h.m, h.n))
}

/// `f(H)` given a precomputed spectrum.
pub fn matrix_fn_with(s: &Spectrum, like: &HermitianOp, f: impl Fn(f64) -> f64) -> HermitianOp {
    HermitianOp::from_parts(s.compose(f), like.m, like.n)
}

pub fn pos_part(h: &HermitianOp) -> HermitianOp {
    matrix_fn_with(&spectral_decompose(h), h, |x| x.max(0.0))
}

pub fn abs_op(h: &HermitianOp) -> HermitianOp {
    matrix_fn_with(&spectral_decompose(h), h, f64::abs)
}

fn cutoff(s: &Spectrum) -> f64 {
    RANK_CUTOFF * s.max_abs()
}

/// Moore–Penrose pseudo-inverse with relative zero cutoff [`RANK_CUTOFF`].
pub fn pseudo_inverse(h: &HermitianOp) -> HermitianOp {
    let s = spectral_decompose(h);
    let tol = cutoff(&s);
    matrix_fn_with(&s, h, |x| if x.abs() <= tol { 0.0 } else { 1.0 / x })
}

/// `√(H⁺)` for positive semidefinite `H`; negative eigenvalues are treated as
/// rank-deficient directions.
pub fn pinv_sqrt(h: &HermitianOp) -> HermitianOp {
    let s = spectral_decompose(h);
    let tol = cutoff(&s);
    matrix_fn_with(&s, h, |x| if x <= tol { 0.0 } else { 1.0 / x.sqrt() })
}

/// `√H` for `H ⪰ 0`; eigenvalues in `[-1e-10·‖H‖, 0)` are clamped.
pub fn sqrt_psd(h: &HermitianOp) -> Result<HermitianOp> {
    let s = spectral_decompose(h);
    let floor = -1e-10 * s.max_abs().max(1.0);
    if let Some(bad) = s.values.iter().find(|&&x| x < floor) {
        return Err(Error::Domain(format!("square root of negative eigenvalue {bad}")));
    }
    Ok(matrix_fn_with(&s, h, |x| x.max(0.0).sqrt()))
}

/// Singular values, non-increasing.
pub fn singular_values(mat: &MatrixC) -> Vec<f64> {
    if mat.is_empty() {
        return vec![];
    }
    let svd = SVD::new(mat.clone(), false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn power_mean(values: impl Iterator<Item = f64>, p: f64, dim: usize, normalized: bool) -> f64 {
    if p.is_infinite() {
        return values.fold(0.0, |a, v| a.max(v.abs()));
    }
    let sum: f64 = values.map(|v| v.abs().powf(p)).sum();
    let sum = if normalized && dim > 0 { sum / dim as f64 } else { sum };
    sum.powf(1.0 / p)
}

fn check_p(p: f64) -> Result<()> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::Argument(format!("Schatten exponent must be ≥ 1, got {p}")));
    }
    Ok(())
}

/// Schatten `p`-norm (`p = f64::INFINITY` for the operator norm).
pub fn schatten_norm(mat: &MatrixC, p: f64, normalized: bool) -> Result<f64> {
    check_p(p)?;
    if !mat.is_square() {
        return Err(Error::DimMismatch {
            expected: mat.nrows(),
            found: mat.ncols(),
        });
    }
    if p == 2.0 {
        return Ok(frobenius_norm(mat, normalized));
    }
    let sv = singular_values(mat);
    Ok(power_mean(sv.into_iter(), p, mat.nrows(), normalized))
}

/// Schatten `p`-norm of a Hermitian operator via its eigenvalues.
pub fn hermitian_norm(h: &HermitianOp, p: f64, normalized: bool) -> Result<f64> {
    check_p(p)?;
    if p == 2.0 {
        return Ok(frobenius_norm(&h.mat, normalized));
    }
    Ok(power_mean(eigenvalues(h).into_iter(), p, h.dim(), normalized))
}

/// Frobenius norm, optionally normalized by `√dim`.
pub fn frobenius_norm(mat: &MatrixC, normalized: bool) -> f64 {
    let s: f64 = mat.iter().map(|z| z.norm_sqr()).sum();
    if normalized && mat.nrows() > 0 {
        (s / mat.nrows() as f64).sqrt()
    } else {
        s.sqrt()
    }
}

/// `Tr X⁴` for Hermitian `X`, computed as `‖X²‖_F²` without diagonalizing.
pub fn trace_fourth_power(mat: &MatrixC) -> f64 {
    let sq = mat * mat;
    sq.iter().map(|z| z.norm_sqr()).sum()
}

fn check_same(p: &MatrixC, q: &MatrixC) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(Error::DimMismatch {
            expected: p.nrows(),
            found: q.nrows(),
        });
    }
    Ok(())
}

/// Normalized trace inner product `Tr(P†Q)/dim`.
pub fn inner(p: &MatrixC, q: &MatrixC) -> Result<C64> {
    check_same(p, q)?;
    let s: C64 = p.iter().zip(q.iter()).map(|(a, b)| a.conj() * b).sum();
    Ok(s / c(p.nrows() as f64))
}

/// `PQ + QP`.
pub fn anticommutator(p: &MatrixC, q: &MatrixC) -> Result<MatrixC> {
    check_same(p, q)?;
    Ok(p * q + q * p)
}

/// Entrywise product.
pub fn hadamard(p: &MatrixC, q: &MatrixC) -> Result<MatrixC> {
    check_same(p, q)?;
    Ok(p.component_mul(q))
}

/// Kronecker product of a list, left factor most significant.
pub fn kron_all<'a>(factors: impl IntoIterator<Item = &'a MatrixC>) -> MatrixC {
    let mut acc = MatrixC::identity(1, 1);
    for f in factors {
        acc = acc.kronecker(f);
    }
    acc
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * dims[k + 1];
    }
    s
}

fn digits(mut idx: usize, dims: &[usize], out: &mut [usize]) {
    for k in (0..dims.len()).rev() {
        out[k] = idx % dims[k];
        idx /= dims[k];
    }
}

/// Partial trace over the registers listed in `traced`; register `k` has
/// dimension `dims[k]` and register 0 is most significant.
pub fn partial_trace(mat: &MatrixC, dims: &[usize], traced: &[usize]) -> Result<MatrixC> {
    let total: usize = dims.iter().product();
    if mat.nrows() != total || !mat.is_square() {
        return Err(Error::DimMismatch {
            expected: total,
            found: mat.nrows(),
        });
    }
    if traced.iter().any(|&k| k >= dims.len()) {
        return Err(Error::Argument("traced register out of range".into()));
    }
    let kept: Vec<usize> = (0..dims.len()).filter(|k| !traced.contains(k)).collect();
    let kept_dims: Vec<usize> = kept.iter().map(|&k| dims[k]).collect();
    let tr_list: Vec<usize> = (0..dims.len()).filter(|k| traced.contains(k)).collect();
    let tr_dims: Vec<usize> = tr_list.iter().map(|&k| dims[k]).collect();
    let kd: usize = kept_dims.iter().product();
    let td: usize = tr_dims.iter().product();
    let st = strides(dims);
    let mut out = MatrixC::zeros(kd, kd);
    let mut ka = vec![0; kept.len()];
    let mut kb = vec![0; kept.len()];
    let mut tt = vec![0; tr_list.len()];
    for a in 0..kd {
        digits(a, &kept_dims, &mut ka);
        let base_a: usize = kept.iter().zip(&ka).map(|(&k, &v)| st[k] * v).sum();
        for b in 0..kd {
            digits(b, &kept_dims, &mut kb);
            let base_b: usize = kept.iter().zip(&kb).map(|(&k, &v)| st[k] * v).sum();
            let mut acc = C64::default();
            for t in 0..td {
                digits(t, &tr_dims, &mut tt);
                let off: usize = tr_list.iter().zip(&tt).map(|(&k, &v)| st[k] * v).sum();
                acc += mat[(base_a + off, base_b + off)];
            }
            out[(a, b)] = acc;
        }
    }
    Ok(out)
}

/// Reorders tensor factors: output factor `k` is input factor `perm[k]`.
pub fn permute_registers(mat: &MatrixC, dims: &[usize], perm: &[usize]) -> Result<MatrixC> {
    let total: usize = dims.iter().product();
    if mat.nrows() != total || perm.len() != dims.len() {
        return Err(Error::DimMismatch {
            expected: total,
            found: mat.nrows(),
        });
    }
    let new_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let st = strides(dims);
    let map: Vec<usize> = (0..total)
        .map(|idx| {
            let mut dg = vec![0; dims.len()];
            digits(idx, &new_dims, &mut dg);
            perm.iter().zip(&dg).map(|(&p, &v)| st[p] * v).sum()
        })
        .collect();
    Ok(MatrixC::from_fn(total, total, |i, j| mat[(map[i], map[j])]))
}

/// A complex standard normal entry (`E|z|² = 1`).
fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    C64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
}

/// A matrix with i.i.d. complex standard normal entries.
pub fn random_ginibre<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> MatrixC {
    MatrixC::from_fn(dim, dim, |_, _| complex_normal(rng))
}

/// A GUE-distributed Hermitian matrix.
pub fn random_hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> MatrixC {
    symmetrize(&random_ginibre(dim, rng))
}

/// A Haar-random unitary.
pub fn random_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> MatrixC {
    let g = random_ginibre(dim, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { c(1.0) };
        for i in 0..dim {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// Random Hermitian with prescribed spectrum.
pub fn random_with_spectrum<R: Rng + ?Sized>(values: &[f64], rng: &mut R) -> MatrixC {
    let d = values.len();
    let u = random_unitary(d, rng);
    let diag = MatrixC::from_fn(d, d, |i, j| if i == j { c(values[i]) } else { C64::default() });
    symmetrize(&(&u * diag * u.adjoint()))
}

/// Square matrix from row-major `[re, im]` pairs.
pub fn matrix_from_entries(entries: &[[f64; 2]]) -> Result<MatrixC> {
    let d = (entries.len() as f64).sqrt().round() as usize;
    if d == 0 || d * d != entries.len() {
        return Err(Error::Argument(format!("{} entries do not form a square matrix", entries.len())));
    }
    check_dim(d)?;
    Ok(MatrixC::from_fn(d, d, |i, j| {
        let [re, im] = entries[i * d + j];
        C64::new(re, im)
    }))
}

/// Row-major `[re, im]` pairs of `mat`.
pub fn matrix_entries(mat: &MatrixC) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(mat.len());
    for i in 0..mat.nrows() {
        for j in 0..mat.ncols() {
            let z = mat[(i, j)];
            out.push([z.re, z.im]);
        }
    }
    out
}
