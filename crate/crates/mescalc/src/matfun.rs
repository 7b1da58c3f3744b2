//! Spectral functionals and matrix calculus: the ζ and ζ_λ penalties, PSD and
//! sub-POVM rounding, the Lyapunov solver, ℓ_Q and κ_Q, and closed-form
//! Fréchet derivatives.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matspace::{
    abs_op, anticommutator, eigenvalues, frobenius_norm, hermitian_norm, matrix_fn_with, pinv_sqrt, pos_part,
    random_hermitian, spectral_decompose, sqrt_psd, HermitianOp, MatrixC, Spectrum, C64,
};

/// Tolerance for sub-POVM membership.
pub const SUB_POVM_TOL: f64 = 1e-9;

/// Default tolerance for `Σ X_i = id` in [`round_sub_povm`].
pub const POVM_SUM_TOL: f64 = 1e-8;

/// Resonance and invertibility threshold.
pub const SINGULAR_TOL: f64 = 1e-10;

/// Relative eigenvalue gap below which divided differences use `f′`.
pub const COLLISION_TOL: f64 = 1e-9;

/// `ζ(x) = x²` for `x ≤ 0`, else `0`.
pub fn zeta_scalar(x: f64) -> f64 {
    if x <= 0.0 {
        x * x
    } else {
        0.0
    }
}

/// The `𝒞²` smoothing of ζ:
/// `x² + λ²/3` for `x ≤ −λ`, `(λ−x)³/(6λ)` on `[−λ, λ]`, `0` for `x ≥ λ`.
pub fn zeta_lambda_scalar(x: f64, lambda: f64) -> f64 {
    if x <= -lambda {
        x * x + lambda * lambda / 3.0
    } else if x >= lambda {
        0.0
    } else {
        (lambda - x).powi(3) / (6.0 * lambda)
    }
}

/// First derivative of [`zeta_lambda_scalar`].
pub fn zeta_lambda_d1(x: f64, lambda: f64) -> f64 {
    if x <= -lambda {
        2.0 * x
    } else if x >= lambda {
        0.0
    } else {
        -(lambda - x).powi(2) / (2.0 * lambda)
    }
}

/// Second derivative of [`zeta_lambda_scalar`].
pub fn zeta_lambda_d2(x: f64, lambda: f64) -> f64 {
    if x <= -lambda {
        2.0
    } else if x >= lambda {
        0.0
    } else {
        (lambda - x) / lambda
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("λ must be positive, got {lambda}")))
    }
}

/// `(Tr ζ(H), ζ(H))`.
pub fn zeta(h: &HermitianOp) -> (f64, HermitianOp) {
    let s = spectral_decompose(h);
    let tr = s.values.iter().map(|&x| zeta_scalar(x)).sum();
    (tr, matrix_fn_with(&s, h, zeta_scalar))
}

/// `Tr ζ(H)` from eigenvalues only.
pub fn tr_zeta(h: &HermitianOp) -> f64 {
    eigenvalues(h).into_iter().map(zeta_scalar).sum()
}

/// `(Tr ζ_λ(H), ζ_λ(H))`.
pub fn zeta_lambda(h: &HermitianOp, lambda: f64) -> Result<(f64, HermitianOp)> {
    check_lambda(lambda)?;
    let s = spectral_decompose(h);
    let tr = s.values.iter().map(|&x| zeta_lambda_scalar(x, lambda)).sum();
    Ok((tr, matrix_fn_with(&s, h, |x| zeta_lambda_scalar(x, lambda))))
}

/// `Tr ζ_λ(H)` from eigenvalues only.
pub fn tr_zeta_lambda(h: &HermitianOp, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(eigenvalues(h).into_iter().map(|x| zeta_lambda_scalar(x, lambda)).sum())
}

/// Nearest PSD operator in 2-norm.
pub fn round_to_psd(h: &HermitianOp) -> HermitianOp {
    pos_part(h)
}

/// Ordered PSD operators summing to at most the identity.
#[derive(Clone, Debug)]
pub struct SubPovm {
    elements: Vec<HermitianOp>,
}

impl SubPovm {
    pub fn new(elements: Vec<HermitianOp>) -> Result<Self> {
        let Some(first) = elements.first() else {
            return Err(Error::Argument("a sub-POVM needs at least one element".into()));
        };
        let dim = first.dim();
        if let Some(e) = elements.iter().find(|e| e.dim() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                found: e.dim(),
            });
        }
        for (i, e) in elements.iter().enumerate() {
            let low = eigenvalues(e).last().copied().unwrap_or(0.0);
            if low < -SUB_POVM_TOL {
                return Err(Error::Precondition(format!("element {i} has eigenvalue {low:.3e}")));
            }
        }
        let deficit = deficit_of(&elements);
        let low = eigenvalues(&deficit).last().copied().unwrap_or(0.0);
        if low < -SUB_POVM_TOL {
            return Err(Error::Precondition(format!("elements exceed the identity by {:.3e}", -low)));
        }
        Ok(Self { elements })
    }

    pub fn elements(&self) -> &[HermitianOp] {
        &self.elements
    }

    pub fn into_elements(self) -> Vec<HermitianOp> {
        self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.elements[0].dim()
    }

    /// `id − Σ_i P_i`.
    pub fn deficit(&self) -> HermitianOp {
        deficit_of(&self.elements)
    }
}

fn deficit_of(elements: &[HermitianOp]) -> HermitianOp {
    let first = &elements[0];
    let mut acc = HermitianOp::identity(first.local_dim(), first.registers()).into_matrix();
    for e in elements {
        acc -= e.matrix();
    }
    HermitianOp::from_parts(acc, first.local_dim(), first.registers())
}

fn sum_ops(ops: &[HermitianOp]) -> Result<HermitianOp> {
    let first = ops.first().ok_or_else(|| Error::Argument("empty operator list".into()))?;
    let mut acc = first.matrix().clone();
    for o in &ops[1..] {
        if o.dim() != first.dim() {
            return Err(Error::DimMismatch {
                expected: first.dim(),
                found: o.dim(),
            });
        }
        acc += o.matrix();
    }
    Ok(HermitianOp::from_parts(acc, first.local_dim(), first.registers()))
}

/// Rounds a tuple summing to the identity to a sub-POVM by
/// `P_i = Y^{+1/2} pos(X_i) Y^{+1/2}` with `Y = Σ_j pos(X_j)`.
/// With `relax` set the sum condition is not enforced.
pub fn round_sub_povm(xs: &[HermitianOp], relax: bool) -> Result<SubPovm> {
    let total = sum_ops(xs)?;
    if !relax {
        let dev = crate::matspace::max_abs_entry(&(total.matrix() - MatrixC::identity(total.dim(), total.dim())));
        if dev > POVM_SUM_TOL {
            return Err(Error::Precondition(format!("operators sum to the identity only within {dev:.3e}")));
        }
    }
    let pos: Vec<HermitianOp> = xs.iter().map(pos_part).collect();
    let y = sum_ops(&pos)?;
    let w = pinv_sqrt(&y);
    let out = pos
        .iter()
        .map(|p| HermitianOp::from_parts(w.matrix() * p.matrix() * w.matrix(), p.local_dim(), p.registers()))
        .collect();
    SubPovm::new(out)
}

/// `Σ_i ‖P_i − X_i‖₂²` in the normalized 2-norm.
pub fn sub_povm_distance_sq(p: &SubPovm, xs: &[HermitianOp]) -> f64 {
    p.elements
        .iter()
        .zip(xs)
        .map(|(a, b)| frobenius_norm(&(a.matrix() - b.matrix()), true).powi(2))
        .sum()
}

/// Right-hand side `3(t+1)/D·S + 6√(t/D·S)` with `S = Σ Tr ζ(X_i)` and
/// `D` the dimension, bounding [`sub_povm_distance_sq`] after rounding.
pub fn sub_povm_rounding_bound(xs: &[HermitianOp]) -> f64 {
    let t = xs.len() as f64;
    let dim = xs.first().map_or(1, HermitianOp::dim) as f64;
    let s: f64 = xs.iter().map(tr_zeta).sum();
    3.0 * (t + 1.0) / dim * s + 6.0 * (t / dim * s).sqrt()
}

fn same_shape(p: &HermitianOp, q: &HermitianOp) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimMismatch {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    Ok(())
}

/// Applies `Q'_{ij} ↦ w(d_i, d_j)·Q'_{ij}` in the eigenbasis of `s`.
fn eigen_weighted(s: &Spectrum, q: &HermitianOp, w: impl Fn(f64, f64) -> f64) -> HermitianOp {
    let mut qp = s.to_eigenbasis(q.matrix());
    let d = &s.values;
    for i in 0..d.len() {
        for j in 0..d.len() {
            qp[(i, j)] *= w(d[i], d[j]);
        }
    }
    HermitianOp::from_parts(s.from_eigenbasis(&qp), q.local_dim(), q.registers())
}

/// Solves `PX + XP = Q`.
pub fn lyapunov_solve(p: &HermitianOp, q: &HermitianOp) -> Result<HermitianOp> {
    same_shape(p, q)?;
    let s = spectral_decompose(p);
    let d = &s.values;
    for &a in d {
        for &b in d {
            if (a + b).abs() <= SINGULAR_TOL {
                return Err(Error::Singular(format!("eigenvalues {a} and {b} of P cancel")));
            }
        }
    }
    Ok(eigen_weighted(&s, q, |a, b| 1.0 / (a + b)))
}

fn check_invertible(s: &Spectrum) -> Result<()> {
    let min = s.values.iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
    if min <= SINGULAR_TOL {
        return Err(Error::Singular(format!("operator has eigenvalue of magnitude {min:.3e}")));
    }
    Ok(())
}

/// `ℓ_Q(P) = L(|P|, PQ + QP)`, entries `Q'_{ij}(a_i+a_j)/(|a_i|+|a_j|)`.
pub fn ell(p: &HermitianOp, q: &HermitianOp) -> Result<HermitianOp> {
    same_shape(p, q)?;
    let s = spectral_decompose(p);
    check_invertible(&s)?;
    Ok(eigen_weighted(&s, q, |a, b| (a + b) / (a.abs() + b.abs())))
}

/// `κ_Q(P)`, entries `Q'_{ij}(a_i+a_j)²/(|a_i|+|a_j|)` with `0/0 = 0`.
pub fn kappa(p: &HermitianOp, q: &HermitianOp) -> Result<HermitianOp> {
    same_shape(p, q)?;
    let s = spectral_decompose(p);
    Ok(eigen_weighted(&s, q, |a, b| {
        let den = a.abs() + b.abs();
        if den == 0.0 {
            0.0
        } else {
            (a + b).powi(2) / den
        }
    }))
}

/// Matrix functions with closed-form Fréchet derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrechetKind {
    /// `x²`
    Square,
    /// `√x`
    Sqrt,
    /// `|x|`
    Abs,
    /// `x|x|`
    XAbsX,
    /// `pos(x)²`
    PosSquare,
}

impl FrechetKind {
    pub const ALL: [FrechetKind; 5] = [Self::Square, Self::Sqrt, Self::Abs, Self::XAbsX, Self::PosSquare];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::Square => x * x,
            Self::Sqrt => x.sqrt(),
            Self::Abs => x.abs(),
            Self::XAbsX => x * x.abs(),
            Self::PosSquare => x.max(0.0).powi(2),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Square => 2.0 * x,
            Self::Sqrt => 0.5 / x.sqrt(),
            Self::Abs => x.signum(),
            Self::XAbsX => 2.0 * x.abs(),
            Self::PosSquare => 2.0 * x.max(0.0),
        }
    }

    /// `f(P)`.
    pub fn apply(self, p: &HermitianOp) -> Result<HermitianOp> {
        let s = spectral_decompose(p);
        self.check_domain(&s)?;
        Ok(matrix_fn_with(&s, p, |x| self.eval(x)))
    }

    fn check_domain(self, s: &Spectrum) -> Result<()> {
        match self {
            Self::Sqrt => {
                let low = s.values.last().copied().unwrap_or(1.0);
                if low <= SINGULAR_TOL {
                    return Err(Error::Domain(format!("√ needs P ≻ 0, smallest eigenvalue {low:.3e}")));
                }
                Ok(())
            }
            Self::Abs | Self::XAbsX => check_invertible(s).map_err(|e| Error::Domain(e.to_string())),
            Self::Square | Self::PosSquare => Ok(()),
        }
    }
}

/// `Df(P)[Q]` by the kind's closed form:
/// `{P,Q}`, `L(√P, Q)`, `ℓ_Q(P)`, `½{|P|,Q} + ½κ_Q(P)` and
/// `½{P,Q} + ¼{|P|,Q} + ¼κ_Q(P)`.
pub fn frechet(kind: FrechetKind, p: &HermitianOp, q: &HermitianOp) -> Result<HermitianOp> {
    same_shape(p, q)?;
    kind.check_domain(&spectral_decompose(p))?;
    let wrap = |m: MatrixC| HermitianOp::from_parts(m, q.local_dim(), q.registers());
    match kind {
        FrechetKind::Square => Ok(wrap(anticommutator(p.matrix(), q.matrix())?)),
        FrechetKind::Sqrt => lyapunov_solve(&sqrt_psd(p)?, q),
        FrechetKind::Abs => ell(p, q),
        FrechetKind::XAbsX => {
            let a = abs_op(p);
            let k = kappa(p, q)?;
            Ok(wrap(anticommutator(a.matrix(), q.matrix())? * C64::new(0.5, 0.0) + k.matrix() * C64::new(0.5, 0.0)))
        }
        FrechetKind::PosSquare => {
            let a = abs_op(p);
            let k = kappa(p, q)?;
            let m = anticommutator(p.matrix(), q.matrix())? * C64::new(0.5, 0.0)
                + anticommutator(a.matrix(), q.matrix())? * C64::new(0.25, 0.0)
                + k.matrix() * C64::new(0.25, 0.0);
            Ok(wrap(m))
        }
    }
}

/// `Df(P)[Q] = U (f^{[1]}(Λ) ∘ U†QU) U†`, switching to `f′(λ_i)` when
/// `|λ_i − λ_j| ≤ 1e-9·max|λ|`.
pub fn divided_difference(
    p: &HermitianOp,
    q: &HermitianOp,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
) -> Result<HermitianOp> {
    same_shape(p, q)?;
    let s = spectral_decompose(p);
    let tol = COLLISION_TOL * s.max_abs().max(f64::MIN_POSITIVE);
    Ok(eigen_weighted(&s, q, |a, b| if (a - b).abs() <= tol { df(a) } else { (f(a) - f(b)) / (a - b) }))
}

/// `(f′(0), f″(0))` for `f(s) = Tr q(P + sQ)` with `q(x) = pos(x)³`:
/// `f′(0) = 3 Tr(pos(P)² Q)` and
/// `f″(0) = 3 Tr(P Q²) + (3/2) Tr(|P| Q²) + (3/4) Tr(Q κ_Q(P))`.
pub fn tr_cubic_derivatives(p: &HermitianOp, q: &HermitianOp) -> Result<(f64, f64)> {
    same_shape(p, q)?;
    let pp = pos_part(p);
    let first = (pp.matrix() * pp.matrix() * q.matrix()).trace().re * 3.0;
    let q2 = q.matrix() * q.matrix();
    let a = abs_op(p);
    let k = kappa(p, q)?;
    let second = 3.0 * (p.matrix() * &q2).trace().re
        + 1.5 * (a.matrix() * &q2).trace().re
        + 0.75 * (q.matrix() * k.matrix()).trace().re;
    Ok((first, second))
}

/// Residuals of the second-order Taylor expansion of `Tr ζ_λ` and of the
/// additivity bound for `Tr ζ`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TaylorReport {
    /// `|Tr ζ_λ(P+Q) − Tr ζ_λ(P) − D[Q] − ½D²[Q]|`.
    pub taylor_residual: f64,
    /// `‖Q‖₂‖Q‖₄²/λ`.
    pub taylor_scale: f64,
    pub taylor_ratio: f64,
    /// `|Tr ζ(P+Q) − Tr ζ(P)|`.
    pub additivity_residual: f64,
    /// `2(‖P‖₂‖Q‖₂ + ‖Q‖₂²)`.
    pub additivity_bound: f64,
    pub additivity_ratio: f64,
}

/// Step for the finite-difference derivatives of `s ↦ Tr ζ_λ(P + sQ)`.
const TAYLOR_STEP: f64 = 1e-4;

/// Checks the Taylor remainder of `Tr ζ_λ` and the additivity of `Tr ζ`.
/// Derivatives along `Q` are central finite differences; norms are
/// unnormalized Schatten norms.
pub fn tr_zeta_lambda_taylor_check(p: &HermitianOp, q: &HermitianOp, lambda: f64) -> Result<TaylorReport> {
    check_lambda(lambda)?;
    same_shape(p, q)?;
    let along = |s: f64| -> Result<f64> {
        let m = p.matrix() + q.matrix() * C64::new(s, 0.0);
        tr_zeta_lambda(&HermitianOp::from_parts(m, p.local_dim(), p.registers()), lambda)
    };
    let h = TAYLOR_STEP;
    let (g0, gp, gm, g1) = (along(0.0)?, along(h)?, along(-h)?, along(1.0)?);
    let d1 = (gp - gm) / (2.0 * h);
    let d2 = (gp - 2.0 * g0 + gm) / (h * h);
    let taylor_residual = (g1 - g0 - d1 - 0.5 * d2).abs();
    let q2 = hermitian_norm(q, 2.0, false)?;
    let q4 = hermitian_norm(q, 4.0, false)?;
    let taylor_scale = q2 * q4 * q4 / lambda;

    let sum = p + q;
    let additivity_residual = (tr_zeta(&sum) - tr_zeta(p)).abs();
    let p2 = hermitian_norm(p, 2.0, false)?;
    let additivity_bound = 2.0 * (p2 * q2 + q2 * q2);
    let ratio = |a: f64, b: f64| if b == 0.0 { if a == 0.0 { 0.0 } else { f64::INFINITY } } else { a / b };
    Ok(TaylorReport {
        taylor_residual,
        taylor_scale,
        taylor_ratio: ratio(taylor_residual, taylor_scale),
        additivity_residual,
        additivity_bound,
        additivity_ratio: ratio(additivity_residual, additivity_bound),
    })
}

/// `M_{ij} = (a_i+a_j)/(|a_i|+|a_j|)` with `0/0 = 0`.
pub fn sign_average_matrix(a: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), a.len(), |i, j| {
        let den = a[i].abs() + a[j].abs();
        if den == 0.0 {
            0.0
        } else {
            (a[i] + a[j]) / den
        }
    })
}

/// `‖M ∘ A‖₄ / ‖A‖₄` for the sign-average multiplier of `a`.
pub fn schur_multiplier_ratio(a: &[f64], mat: &MatrixC) -> Result<f64> {
    let m = sign_average_matrix(a);
    if mat.nrows() != a.len() || mat.ncols() != a.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            found: mat.nrows(),
        });
    }
    let prod = MatrixC::from_fn(a.len(), a.len(), |i, j| mat[(i, j)] * m[(i, j)]);
    let num = crate::matspace::schatten_norm(&prod, 4.0, false)?;
    let den = crate::matspace::schatten_norm(mat, 4.0, false)?;
    Ok(num / den)
}

/// Largest observed `‖M ∘ A‖₄ / ‖A‖₄` over random Hermitian `A` and random
/// real spectra with mixed signs.
pub fn empirical_schur_constant<R: Rng + ?Sized>(dim: usize, trials: usize, rng: &mut R) -> Result<f64> {
    let mut best: f64 = 0.0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mat = random_hermitian(dim, rng);
        best = best.max(schur_multiplier_ratio(&a, &mat)?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::rng_for;

    fn diag(v: &[f64]) -> HermitianOp {
        HermitianOp::from_real_diag(v)
    }

    fn herm(dim: usize, seed: u64) -> HermitianOp {
        HermitianOp::from_matrix(random_hermitian(dim, &mut rng_for(seed, 0))).unwrap()
    }

    fn close(a: &HermitianOp, b: &HermitianOp, tol: f64) -> bool {
        crate::matspace::max_abs_entry(&(a.matrix() - b.matrix())) <= tol
    }

    #[test]
    fn zeta_examples() {
        let (tr, _) = zeta(&diag(&[1.0, -0.5]));
        assert!((tr - 0.25).abs() < 1e-15);
        let l = 0.3;
        assert!((zeta_lambda_scalar(0.0, l) - l * l / 6.0).abs() < 1e-15);
        let lo = (-l) * (-l) + l * l / 3.0;
        let hi = (2.0 * l).powi(3) / (6.0 * l);
        assert!((lo - 4.0 / 3.0 * l * l).abs() < 1e-15 && (hi - lo).abs() < 1e-15);
        assert!(zeta_lambda(&diag(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn zeta_lambda_derivatives_match_differences() {
        let l = 0.5;
        for k in -20..=20 {
            let x = k as f64 * 0.05 + 0.013;
            let h = 1e-6;
            let fd1 = (zeta_lambda_scalar(x + h, l) - zeta_lambda_scalar(x - h, l)) / (2.0 * h);
            let fd2 = (zeta_lambda_d1(x + h, l) - zeta_lambda_d1(x - h, l)) / (2.0 * h);
            assert!((fd1 - zeta_lambda_d1(x, l)).abs() < 1e-8);
            assert!((fd2 - zeta_lambda_d2(x, l)).abs() < 1e-6);
        }
    }

    #[test]
    fn psd_rounding() {
        let p = diag(&[2.0, 0.5]);
        assert!(close(&round_to_psd(&p), &p, 0.0));
        let h = diag(&[2.0, -3.0]);
        let r = round_to_psd(&h);
        assert!(close(&r, &diag(&[2.0, 0.0]), 1e-15));
        let d = frobenius_norm(&(h.matrix() - r.matrix()), false).powi(2);
        assert!((d - 9.0).abs() < 1e-12 && (d - tr_zeta(&h)).abs() < 1e-12);
    }

    #[test]
    fn psd_rounding_is_local_minimizer() {
        let mut rng = rng_for(21, 0);
        let h = herm(4, 3);
        let r = round_to_psd(&h);
        let best = frobenius_norm(&(h.matrix() - r.matrix()), false);
        assert!((best * best - tr_zeta(&h)).abs() < 1e-9);
        for _ in 0..1000 {
            let g = random_hermitian(4, &mut rng) * C64::new(0.05, 0.0);
            let cand = pos_part(&HermitianOp::from_matrix(r.matrix() + g).unwrap());
            assert!(frobenius_norm(&(h.matrix() - cand.matrix()), false) >= best - 1e-12);
        }
    }

    #[test]
    fn sub_povm_examples() {
        let xs = [diag(&[1.5, -0.5]), diag(&[-0.5, 1.5])];
        let out = round_sub_povm(&xs, false).unwrap();
        assert!(close(&out.elements()[0], &diag(&[1.0, 0.0]), 1e-12));
        assert!(close(&out.elements()[1], &diag(&[0.0, 1.0]), 1e-12));
        let povm = [diag(&[0.3, 1.0]), diag(&[0.7, 0.0])];
        let same = round_sub_povm(&povm, false).unwrap();
        for (a, b) in same.elements().iter().zip(&povm) {
            assert!(close(a, b, 1e-10));
        }
        assert!(round_sub_povm(&[diag(&[0.5, 0.5])], false).is_err());
        assert!(round_sub_povm(&[diag(&[0.5, 0.5])], true).is_ok());
    }

    #[test]
    fn rounding_bound_on_random_triples() {
        let mut rng = rng_for(22, 0);
        for k in 0..200 {
            let dim = 2 + k % 7;
            let scale = [0.1, 0.5, 1.0, 3.0][k % 4];
            let x1 = HermitianOp::from_matrix(random_hermitian(dim, &mut rng) * C64::new(scale, 0.0)).unwrap();
            let x2 = HermitianOp::from_matrix(random_hermitian(dim, &mut rng) * C64::new(scale, 0.0)).unwrap();
            let x3 = &(&HermitianOp::identity(dim, 1) - &x1) - &x2;
            let xs = [x1, x2, x3];
            let out = round_sub_povm(&xs, false).unwrap();
            assert!(sub_povm_distance_sq(&out, &xs) <= sub_povm_rounding_bound(&xs));
        }
    }

    #[test]
    fn lyapunov_examples() {
        let p = diag(&[1.0, 2.0]);
        let q = HermitianOp::from_matrix(MatrixC::from_row_slice(
            2,
            2,
            &[C64::new(0.0, 0.0), C64::new(3.0, 0.0), C64::new(3.0, 0.0), C64::new(0.0, 0.0)],
        ))
        .unwrap();
        let x = lyapunov_solve(&p, &q).unwrap();
        let expect = HermitianOp::from_matrix(MatrixC::from_row_slice(
            2,
            2,
            &[C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
        ))
        .unwrap();
        assert!(close(&x, &expect, 1e-14));
        let q = herm(3, 4);
        let x = lyapunov_solve(&HermitianOp::identity(3, 1), &q).unwrap();
        assert!(close(&x, &q.scale(0.5), 1e-14));
        assert!(matches!(lyapunov_solve(&diag(&[1.0, -1.0]), &diag(&[1.0, 1.0])), Err(Error::Singular(_))));
    }

    #[test]
    fn ell_and_kappa() {
        let q = herm(3, 5);
        let p = diag(&[0.5, 1.0, 2.0]);
        assert!(close(&ell(&p, &q).unwrap(), &q, 1e-13));
        for seed in 0..20 {
            let p = herm(4, 100 + seed);
            let q = herm(4, 200 + seed);
            let k = kappa(&p, &q).unwrap();
            let lhs = k.trace();
            let rhs = 2.0 * (abs_op(&p).matrix() * q.matrix()).trace().re;
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
            let l = ell(&p, &q).unwrap();
            assert!(frobenius_norm(l.matrix(), false) <= frobenius_norm(q.matrix(), false) + 1e-12);
        }
        assert!(ell(&diag(&[0.0, 1.0]), &diag(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn frechet_examples() {
        let p = herm(3, 6);
        let q = herm(3, 7);
        let d = frechet(FrechetKind::Square, &p, &q).unwrap();
        let expect = p.matrix() * q.matrix() + q.matrix() * p.matrix();
        assert!(crate::matspace::max_abs_entry(&(d.matrix() - expect)) < 1e-13);
        let id = HermitianOp::identity(3, 1);
        assert!(close(&frechet(FrechetKind::Sqrt, &id, &q).unwrap(), &q.scale(0.5), 1e-13));
        let pd = diag(&[0.5, 1.0, 3.0]);
        assert!(close(&frechet(FrechetKind::Abs, &pd, &q).unwrap(), &q, 1e-13));
        assert!(frechet(FrechetKind::Sqrt, &diag(&[1.0, -1.0, 1.0]), &q).is_err());
    }

    #[test]
    fn closed_forms_match_divided_differences() {
        for seed in 0..10 {
            let p = herm(4, 300 + seed);
            let q = herm(4, 400 + seed);
            for kind in [FrechetKind::Square, FrechetKind::Abs, FrechetKind::XAbsX, FrechetKind::PosSquare] {
                let a = frechet(kind, &p, &q).unwrap();
                let b = divided_difference(&p, &q, |x| kind.eval(x), |x| kind.derivative(x)).unwrap();
                assert!(close(&a, &b, 1e-10), "{kind:?}");
            }
        }
    }

    #[test]
    fn cubic_trace_derivatives() {
        for seed in 0..10 {
            let p = herm(4, 500 + seed);
            let q = herm(4, 600 + seed);
            let (f1, f2) = tr_cubic_derivatives(&p, &q).unwrap();
            let f = |s: f64| {
                let m = HermitianOp::from_matrix(p.matrix() + q.matrix() * C64::new(s, 0.0)).unwrap();
                eigenvalues(&m).iter().map(|x| x.max(0.0).powi(3)).sum::<f64>()
            };
            let h = 1e-4;
            let fd1 = (f(h) - f(-h)) / (2.0 * h);
            let fd2 = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
            assert!((f1 - fd1).abs() < 1e-6 * (1.0 + f1.abs()));
            assert!((f2 - fd2).abs() < 1e-4 * (1.0 + f2.abs()), "{f2} vs {fd2}");
        }
    }

    #[test]
    fn taylor_check_zero_direction() {
        let p = herm(3, 8);
        let r = tr_zeta_lambda_taylor_check(&p, &HermitianOp::zeros(3, 1), 0.1).unwrap();
        assert_eq!(r.taylor_residual, 0.0);
        assert_eq!(r.additivity_residual, 0.0);
    }

    #[test]
    fn taylor_check_scalar_matches_univariate_remainder() {
        let l = 0.4;
        for (p, q) in [(0.1, 0.05), (-0.5, 0.2), (0.3, -0.6), (-0.1, 0.15)] {
            let r = tr_zeta_lambda_taylor_check(&diag(&[p]), &diag(&[q]), l).unwrap();
            let exact = (zeta_lambda_scalar(p + q, l)
                - zeta_lambda_scalar(p, l)
                - zeta_lambda_d1(p, l) * q
                - 0.5 * zeta_lambda_d2(p, l) * q * q)
                .abs();
            assert!((r.taylor_residual - exact).abs() < 1e-6, "{} vs {exact}", r.taylor_residual);
        }
    }

    #[test]
    fn schur_multiplier_constant_is_finite() {
        let c = empirical_schur_constant(6, 50, &mut rng_for(9, 0)).unwrap();
        assert!(c.is_finite() && c >= 0.0);
        let all_positive = [1.0, 2.0, 3.0];
        let mat = random_hermitian(3, &mut rng_for(10, 0));
        assert!((schur_multiplier_ratio(&all_positive, &mat).unwrap() - 1.0).abs() < 1e-12);
    }
}
