//! Two-player one-round games: the game model, strategy evaluation on
//! copies of a shared state, classical brute force and see-saw search.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{markov_t, markov_t_adjoint, BipartiteState};
use crate::error::{Error, Result};
use crate::gaussian::rng_for;
use crate::matfun::round_sub_povm;
use crate::matspace::{
    checked_pow, eigenvalues, hermitian_norm, matrix_entries, matrix_from_entries, random_unitary, spectral_decompose,
    HermitianOp, MatrixC, C64,
};
use crate::pipeline::CorrWeight;

/// Largest number of deterministic strategy pairs [`classical_value`] enumerates.
pub const ENUMERATION_CAP: u128 = 10_000_000;

/// Tolerance on `Σ μ = 1`.
pub const MU_TOL: f64 = 1e-12;

/// Tolerance on `Σ_a P_a = id` for strategies.
pub const POVM_TOL: f64 = 1e-9;

/// Lowest admissible eigenvalue of a strategy element.
pub const PSD_TOL: f64 = 1e-10;

/// A game `(𝒳, 𝒴, 𝒜, ℬ, μ, V)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GameRepr", into = "GameRepr")]
pub struct Game {
    nx: usize,
    ny: usize,
    na: usize,
    nb: usize,
    mu: Vec<Vec<f64>>,
    v: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GameRepr {
    nx: usize,
    ny: usize,
    na: usize,
    nb: usize,
    mu: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    v: Vec<u8>,
}

impl TryFrom<GameRepr> for Game {
    type Error = Error;

    fn try_from(r: GameRepr) -> Result<Self> {
        Game::new(r.nx, r.ny, r.na, r.nb, r.mu, r.v)
    }
}

impl From<Game> for GameRepr {
    fn from(g: Game) -> Self {
        Self {
            nx: g.nx,
            ny: g.ny,
            na: g.na,
            nb: g.nb,
            mu: g.mu,
            v: g.v,
        }
    }
}

impl Game {
    /// `v` is indexed x-major, then y, a, b.
    pub fn new(nx: usize, ny: usize, na: usize, nb: usize, mu: Vec<Vec<f64>>, v: Vec<u8>) -> Result<Self> {
        if nx == 0 || ny == 0 || na == 0 || nb == 0 {
            return Err(Error::Argument("question and answer sets must be nonempty".into()));
        }
        if mu.len() != nx || mu.iter().any(|r| r.len() != ny) {
            return Err(Error::Argument(format!("mu must be a {nx}×{ny} table")));
        }
        if mu.iter().flatten().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::Argument("mu entries must be nonnegative".into()));
        }
        let total: f64 = mu.iter().flatten().sum();
        if (total - 1.0).abs() > MU_TOL {
            return Err(Error::Argument(format!("mu sums to {total}, expected 1")));
        }
        if v.len() != nx * ny * na * nb {
            return Err(Error::Argument(format!("V must have {} entries, found {}", nx * ny * na * nb, v.len())));
        }
        if v.iter().any(|&b| b > 1) {
            return Err(Error::Argument("V entries must be 0 or 1".into()));
        }
        Ok(Self { nx, ny, na, nb, mu, v })
    }

    /// Uniform questions over `𝒳 × 𝒴` with predicate `pred`.
    pub fn from_predicate(nx: usize, ny: usize, na: usize, nb: usize, pred: impl Fn(usize, usize, usize, usize) -> bool) -> Result<Self> {
        let p = 1.0 / (nx * ny) as f64;
        let mut v = Vec::with_capacity(nx * ny * na * nb);
        for x in 0..nx {
            for y in 0..ny {
                for a in 0..na {
                    for b in 0..nb {
                        v.push(u8::from(pred(x, y, a, b)));
                    }
                }
            }
        }
        Self::new(nx, ny, na, nb, vec![vec![p; ny]; nx], v)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn na(&self) -> usize {
        self.na
    }

    pub fn nb(&self) -> usize {
        self.nb
    }

    pub fn mu(&self, x: usize, y: usize) -> f64 {
        self.mu[x][y]
    }

    pub fn v(&self, x: usize, y: usize, a: usize, b: usize) -> bool {
        self.v[((x * self.ny + y) * self.na + a) * self.nb + b] == 1
    }

    /// `μ(x,y)V(x,y,a,b)`.
    pub fn weight(&self, x: usize, y: usize, a: usize, b: usize) -> f64 {
        if self.v(x, y, a, b) {
            self.mu[x][y]
        } else {
            0.0
        }
    }

    /// The value as a linear form in the correlations `Tr((P^x_a ⊗ Q^y_b)ψ)`,
    /// with families indexed by questions and outcomes by answers.
    pub fn corr_weights(&self) -> Vec<CorrWeight> {
        let mut out = Vec::new();
        for x in 0..self.nx {
            for y in 0..self.ny {
                for a in 0..self.na {
                    for b in 0..self.nb {
                        let w = self.weight(x, y, a, b);
                        if w != 0.0 {
                            out.push(CorrWeight {
                                u: x,
                                v: y,
                                i: a,
                                j: b,
                                weight: w,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// The CHSH game: uniform questions in `{0,1}²`, win iff `a ⊕ b = x ∧ y`.
pub fn chsh() -> Game {
    Game::from_predicate(2, 2, 2, 2, |x, y, a, b| (a ^ b) == (x & y)).expect("CHSH is a valid game")
}

/// Per-question POVMs of both players on `n` copies of their registers.
#[derive(Clone, Debug)]
pub struct Strategy {
    pub alice: Vec<Vec<HermitianOp>>,
    pub bob: Vec<Vec<HermitianOp>>,
    pub copies: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategyRepr {
    copies: usize,
    alice: Vec<Vec<Vec<[f64; 2]>>>,
    bob: Vec<Vec<Vec<[f64; 2]>>>,
}

impl Strategy {
    /// Checks every POVM against the local dimensions `m_a`, `m_b`.
    pub fn validate(&self, m_a: usize, m_b: usize) -> Result<()> {
        for (fams, m) in [(&self.alice, m_a), (&self.bob, m_b)] {
            let dim = checked_pow(m, self.copies).ok_or(Error::DimCap {
                dim: usize::MAX,
                cap: crate::matspace::max_dim(),
            })?;
            for povm in fams {
                let Some(first) = povm.first() else {
                    return Err(Error::Argument("a POVM needs at least one element".into()));
                };
                let mut total = MatrixC::zeros(dim, dim);
                for e in povm {
                    if e.dim() != dim || first.dim() != dim {
                        return Err(Error::DimMismatch {
                            expected: dim,
                            found: e.dim(),
                        });
                    }
                    let low = eigenvalues(e).last().copied().unwrap_or(0.0);
                    if low < -PSD_TOL {
                        return Err(Error::Precondition(format!("POVM element has eigenvalue {low:.3e}")));
                    }
                    total += e.matrix();
                }
                let dev = crate::matspace::max_abs_entry(&(total - MatrixC::identity(dim, dim)));
                if dev > POVM_TOL {
                    return Err(Error::Precondition(format!("POVM sums to the identity only within {dev:.3e}")));
                }
            }
        }
        Ok(())
    }

    /// Parses `{"copies", "alice", "bob"}` with every operator a row-major
    /// list of `[re, im]` pairs.
    pub fn from_json(text: &str, m_a: usize, m_b: usize) -> Result<Self> {
        let r: StrategyRepr = serde_json::from_str(text)?;
        let parse = |fams: Vec<Vec<Vec<[f64; 2]>>>, m: usize| -> Result<Vec<Vec<HermitianOp>>> {
            fams.into_iter()
                .map(|f| {
                    f.into_iter()
                        .map(|e| HermitianOp::new(matrix_from_entries(&e)?, m, r.copies))
                        .collect()
                })
                .collect()
        };
        let s = Self {
            alice: parse(r.alice, m_a)?,
            bob: parse(r.bob, m_b)?,
            copies: r.copies,
        };
        s.validate(m_a, m_b)?;
        Ok(s)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let dump = |fams: &[Vec<HermitianOp>]| -> Vec<Vec<Vec<[f64; 2]>>> {
            fams.iter().map(|f| f.iter().map(|e| matrix_entries(e.matrix())).collect()).collect()
        };
        serde_json::to_value(StrategyRepr {
            copies: self.copies,
            alice: dump(&self.alice),
            bob: dump(&self.bob),
        })
        .expect("strategies serialize")
    }
}

fn check_shape(game: &Game, s: &Strategy) -> Result<()> {
    if s.alice.len() != game.nx || s.bob.len() != game.ny {
        return Err(Error::Argument(format!(
            "strategy answers {} and {} questions, game asks {} and {}",
            s.alice.len(),
            s.bob.len(),
            game.nx,
            game.ny
        )));
    }
    if s.alice.iter().any(|p| p.len() != game.na) || s.bob.iter().any(|p| p.len() != game.nb) {
        return Err(Error::Argument("POVM outcome counts must match the answer sets".into()));
    }
    Ok(())
}

/// `Tr(P 𝒯(Q))/m_A^n = Tr((P ⊗ Q)ψ^{⊗n})`.
fn paired(p: &HermitianOp, tq: &HermitianOp) -> f64 {
    let tr: C64 = p.matrix().component_mul(&tq.matrix().transpose()).sum();
    tr.re / p.dim() as f64
}

/// Winning probability `Σ_{xy} μ(x,y) Σ_{ab} V(x,y,a,b) Tr((P^x_a ⊗ Q^y_b)ψ^{⊗n})`.
pub fn eval_strategy(game: &Game, s: &Strategy, psi: &BipartiteState) -> Result<f64> {
    check_shape(game, s)?;
    s.validate(psi.m_a(), psi.m_b())?;
    let images: Vec<Vec<HermitianOp>> = s
        .bob
        .iter()
        .map(|f| f.iter().map(|q| markov_t(q, psi, s.copies)).collect())
        .collect::<Result<_>>()?;
    Ok(value_with(game, &s.alice, &images))
}

fn value_with(game: &Game, alice: &[Vec<HermitianOp>], bob_images: &[Vec<HermitianOp>]) -> f64 {
    let mut acc = 0.0;
    for x in 0..game.nx {
        for y in 0..game.ny {
            for a in 0..game.na {
                for b in 0..game.nb {
                    let w = game.weight(x, y, a, b);
                    if w != 0.0 {
                        acc += w * paired(&alice[x][a], &bob_images[y][b]);
                    }
                }
            }
        }
    }
    acc
}

/// `ω(G)`: the best deterministic strategy, found by enumerating Alice's
/// answer functions and best-responding per question for Bob.
pub fn classical_value(game: &Game) -> Result<f64> {
    classical_optimum(game).map(|(v, _, _)| v)
}

/// The value of [`classical_value`] with optimal answer functions
/// `h_A: 𝒳 → 𝒜` and `h_B: 𝒴 → ℬ`.
pub fn classical_optimum(game: &Game) -> Result<(f64, Vec<usize>, Vec<usize>)> {
    let count = (game.na as u128)
        .checked_pow(game.nx as u32)
        .and_then(|c| c.checked_mul((game.nb as u128).checked_pow(game.ny as u32)?));
    let cap = ENUMERATION_CAP;
    match count {
        Some(c) if c <= cap => {}
        Some(c) => return Err(Error::EnumerationCap { count: c, cap }),
        None => return Err(Error::EnumerationCap { count: u128::MAX, cap }),
    }
    let alice_count = game.na.pow(game.nx as u32);
    let mut best = (f64::NEG_INFINITY, vec![0; game.nx], vec![0; game.ny]);
    let mut ha = vec![0usize; game.nx];
    for code in 0..alice_count {
        let mut c = code;
        for h in ha.iter_mut() {
            *h = c % game.na;
            c /= game.na;
        }
        let mut total = 0.0;
        let mut hb = vec![0usize; game.ny];
        for (y, slot) in hb.iter_mut().enumerate() {
            let mut top = f64::NEG_INFINITY;
            for b in 0..game.nb {
                let v: f64 = (0..game.nx).map(|x| game.weight(x, y, ha[x], b)).sum();
                if v > top {
                    top = v;
                    *slot = b;
                }
            }
            total += top;
        }
        if total > best.0 {
            best = (total, ha.clone(), hb);
        }
    }
    Ok(best)
}

/// The strategy answering `h_A(x)`, `h_B(y)` regardless of the state.
pub fn deterministic_strategy(ha: &[usize], hb: &[usize], na: usize, nb: usize, m_a: usize, m_b: usize, copies: usize) -> Strategy {
    let povm = |k: usize, t: usize, m: usize| -> Vec<HermitianOp> {
        (0..t)
            .map(|a| {
                if a == k {
                    HermitianOp::identity(m, copies)
                } else {
                    HermitianOp::zeros(m, copies)
                }
            })
            .collect()
    };
    Strategy {
        alice: ha.iter().map(|&k| povm(k, na, m_a)).collect(),
        bob: hb.iter().map(|&k| povm(k, nb, m_b)).collect(),
        copies,
    }
}

/// The rotated-basis measurement `{|θ⟩⟨θ|, id − |θ⟩⟨θ|}` with
/// `|θ⟩ = cos θ|0⟩ + sin θ|1⟩`.
pub fn qubit_measurement(theta: f64) -> Vec<HermitianOp> {
    let (c, s) = (theta.cos(), theta.sin());
    let proj = MatrixC::from_row_slice(2, 2, &[C64::new(c * c, 0.0), C64::new(c * s, 0.0), C64::new(c * s, 0.0), C64::new(s * s, 0.0)]);
    let p0 = HermitianOp::from_parts(proj.clone(), 2, 1);
    let p1 = HermitianOp::from_parts(MatrixC::identity(2, 2) - proj, 2, 1);
    vec![p0, p1]
}

/// Alice measures at angles `0, π/4` and Bob at `π/8, −π/8`; on the
/// maximally entangled qubit pair this wins CHSH with probability `cos²(π/8)`.
pub fn chsh_optimal_strategy() -> Strategy {
    use std::f64::consts::PI;
    Strategy {
        alice: vec![qubit_measurement(0.0), qubit_measurement(PI / 4.0)],
        bob: vec![qubit_measurement(PI / 8.0), qubit_measurement(-PI / 8.0)],
        copies: 1,
    }
}

/// Outcome of [`seesaw_optimize`].
#[derive(Clone, Debug)]
pub struct SeesawResult {
    pub strategy: Strategy,
    /// Value after initialization and after every iteration.
    pub trace: Vec<f64>,
}

impl SeesawResult {
    pub fn value(&self) -> f64 {
        self.trace.last().copied().unwrap_or(0.0)
    }
}

fn random_povm<R: Rng + ?Sized>(m: usize, n: usize, outcomes: usize, rng: &mut R) -> Result<Vec<HermitianOp>> {
    let dim = checked_pow(m, n).ok_or(Error::DimCap {
        dim: usize::MAX,
        cap: crate::matspace::max_dim(),
    })?;
    crate::matspace::check_dim(dim)?;
    let u = random_unitary(dim, rng);
    let mut labels: Vec<usize> = (0..dim).map(|_| rng.random_range(0..outcomes)).collect();
    if outcomes <= dim {
        labels[..outcomes].iter_mut().enumerate().for_each(|(k, l)| *l = k);
    }
    Ok((0..outcomes)
        .map(|a| {
            let mut acc = MatrixC::zeros(dim, dim);
            for (col, &l) in labels.iter().enumerate() {
                if l == a {
                    let v = u.column(col);
                    acc += v * v.adjoint();
                }
            }
            HermitianOp::from_parts(crate::matspace::symmetrize(&acc), m, n)
        })
        .collect())
}

/// The POVM maximizing `Σ_a Tr(P_a W_a)` among candidates built from the
/// payoff operators: the two-outcome projector onto `W₀ > W₁`, and
/// `id/t + s(W_a − W̄)` rounded by [`round_sub_povm`] for several scales,
/// with the rounding deficit given to the outcome it helps most.
fn best_response(w: &[HermitianOp], current: &[HermitianOp]) -> Result<Vec<HermitianOp>> {
    let t = w.len();
    let first = &w[0];
    let (m, n, dim) = (first.local_dim(), first.registers(), first.dim());
    let score = |p: &[HermitianOp]| -> f64 {
        p.iter()
            .zip(w)
            .map(|(a, b)| a.matrix().component_mul(&b.matrix().transpose()).sum().re)
            .sum()
    };
    let mut best = current.to_vec();
    let mut best_score = score(current);
    let mut consider = |cand: Vec<HermitianOp>| {
        let s = score(&cand);
        if s > best_score {
            best_score = s;
            best = cand;
        }
    };
    if t == 1 {
        return Ok(vec![HermitianOp::identity(m, n)]);
    }
    if t == 2 {
        let diff = HermitianOp::from_parts(w[0].matrix() - w[1].matrix(), m, n);
        let s = spectral_decompose(&diff);
        let p0 = s.compose(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let p1 = MatrixC::identity(dim, dim) - &p0;
        consider(vec![HermitianOp::from_parts(p0, m, n), HermitianOp::from_parts(p1, m, n)]);
    }
    let mut mean = MatrixC::zeros(dim, dim);
    for x in w {
        mean += x.matrix();
    }
    mean /= C64::new(t as f64, 0.0);
    let spread = w
        .iter()
        .map(|x| hermitian_norm(&HermitianOp::from_parts(x.matrix() - &mean, m, n), f64::INFINITY, false))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    if spread > 0.0 {
        for k in [0.5, 2.0, 8.0, 32.0, 128.0, 1024.0, 1e6] {
            let s = k / spread;
            let xs: Vec<HermitianOp> = w
                .iter()
                .map(|x| {
                    let mat = MatrixC::identity(dim, dim) / C64::new(t as f64, 0.0) + (x.matrix() - &mean) * C64::new(s, 0.0);
                    HermitianOp::from_parts(mat, m, n)
                })
                .collect();
            let rounded = round_sub_povm(&xs, false)?.into_elements();
            consider(complete(rounded, w));
        }
    }
    Ok(best)
}

/// Adds `id − Σ P_a` to the outcome with the largest payoff on it.
fn complete(mut p: Vec<HermitianOp>, w: &[HermitianOp]) -> Vec<HermitianOp> {
    let first = &p[0];
    let (m, n, dim) = (first.local_dim(), first.registers(), first.dim());
    let mut deficit = MatrixC::identity(dim, dim);
    for e in &p {
        deficit -= e.matrix();
    }
    let gain = |x: &HermitianOp| deficit.component_mul(&x.matrix().transpose()).sum().re;
    let target = (0..w.len())
        .max_by(|&a, &b| gain(&w[a]).total_cmp(&gain(&w[b])).then(b.cmp(&a)))
        .unwrap_or(0);
    let merged = p[target].matrix() + &deficit;
    p[target] = HermitianOp::from_parts(crate::matspace::symmetrize(&merged), m, n);
    p
}

/// Payoff operators `W^x_a = Σ_{y,b} μV · 𝒯(Q^y_b)/m_A^n` for Alice.
fn alice_payoffs(game: &Game, bob_images: &[Vec<HermitianOp>], dim: usize) -> Vec<Vec<HermitianOp>> {
    (0..game.nx)
        .map(|x| {
            (0..game.na)
                .map(|a| {
                    let first = &bob_images[0][0];
                    let mut acc = MatrixC::zeros(dim, dim);
                    for (y, imgs) in bob_images.iter().enumerate() {
                        for (b, img) in imgs.iter().enumerate() {
                            let wgt = game.weight(x, y, a, b);
                            if wgt != 0.0 {
                                acc += img.matrix() * C64::new(wgt / dim as f64, 0.0);
                            }
                        }
                    }
                    HermitianOp::from_parts(crate::matspace::symmetrize(&acc), first.local_dim(), first.registers())
                })
                .collect()
        })
        .collect()
}

fn bob_payoffs(game: &Game, alice_images: &[Vec<HermitianOp>], dim: usize) -> Vec<Vec<HermitianOp>> {
    (0..game.ny)
        .map(|y| {
            (0..game.nb)
                .map(|b| {
                    let first = &alice_images[0][0];
                    let mut acc = MatrixC::zeros(dim, dim);
                    for (x, imgs) in alice_images.iter().enumerate() {
                        for (a, img) in imgs.iter().enumerate() {
                            let wgt = game.weight(x, y, a, b);
                            if wgt != 0.0 {
                                acc += img.matrix() * C64::new(wgt / dim as f64, 0.0);
                            }
                        }
                    }
                    HermitianOp::from_parts(crate::matspace::symmetrize(&acc), first.local_dim(), first.registers())
                })
                .collect()
        })
        .collect()
}

/// Alternating best responses from a random projective start. A step is
/// kept only if it raises the value, so the trace is non-decreasing.
pub fn seesaw_optimize(game: &Game, psi: &BipartiteState, n: usize, iterations: usize, seed: u64) -> Result<SeesawResult> {
    if n == 0 {
        return Err(Error::Argument("copies must be at least 1".into()));
    }
    let (ma, mb) = (psi.m_a(), psi.m_b());
    let mut rng = rng_for(seed, 0);
    let start = Strategy {
        alice: (0..game.nx).map(|_| random_povm(ma, n, game.na, &mut rng)).collect::<Result<_>>()?,
        bob: (0..game.ny).map(|_| random_povm(mb, n, game.nb, &mut rng)).collect::<Result<_>>()?,
        copies: n,
    };
    seesaw_from(game, psi, start, iterations)
}

/// Alternating best responses from `start`.
pub fn seesaw_from(game: &Game, psi: &BipartiteState, start: Strategy, iterations: usize) -> Result<SeesawResult> {
    if iterations == 0 {
        return Err(Error::Argument("iterations must be at least 1".into()));
    }
    check_shape(game, &start)?;
    let (ma, mb) = (psi.m_a(), psi.m_b());
    start.validate(ma, mb)?;
    let n = start.copies;
    let dim_a = checked_pow(ma, n).unwrap_or(usize::MAX);
    let dim_b = checked_pow(mb, n).unwrap_or(usize::MAX);
    let bob_images = |s: &Strategy| -> Result<Vec<Vec<HermitianOp>>> {
        s.bob.iter().map(|f| f.iter().map(|q| markov_t(q, psi, n)).collect()).collect()
    };
    let mut s = start;
    let mut value = value_with(game, &s.alice, &bob_images(&s)?);
    let mut trace = vec![value];
    for _ in 0..iterations {
        let w = alice_payoffs(game, &bob_images(&s)?, dim_a);
        let alice: Vec<Vec<HermitianOp>> = w
            .iter()
            .zip(&s.alice)
            .map(|(wx, cur)| best_response(wx, cur))
            .collect::<Result<_>>()?;
        let images_a: Vec<Vec<HermitianOp>> = alice
            .iter()
            .map(|f| f.iter().map(|p| markov_t_adjoint(p, psi, n)).collect())
            .collect::<Result<_>>()?;
        let w = bob_payoffs(game, &images_a, dim_b);
        let bob: Vec<Vec<HermitianOp>> = w
            .iter()
            .zip(&s.bob)
            .map(|(wy, cur)| best_response(wy, cur))
            .collect::<Result<_>>()?;
        let cand = Strategy {
            alice,
            bob,
            copies: n,
        };
        let v = value_with(game, &cand.alice, &bob_images(&cand)?);
        if v > value && cand.validate(ma, mb).is_ok() {
            value = v;
            s = cand;
        }
        trace.push(value);
    }
    Ok(SeesawResult { strategy: s, trace })
}

/// Independent see-saw restarts run in parallel, plus one run started from
/// an optimal deterministic strategy when the game is small enough to
/// enumerate. The best run wins, ties going to the earliest.
pub fn seesaw_restarts(
    game: &Game,
    psi: &BipartiteState,
    n: usize,
    iterations: usize,
    seed: u64,
    restarts: usize,
) -> Result<SeesawResult> {
    let mut runs: Vec<SeesawResult> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| seesaw_optimize(game, psi, n, iterations, seed.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15))))
        .collect::<Result<_>>()?;
    if let Ok((_, ha, hb)) = classical_optimum(game) {
        let start = deterministic_strategy(&ha, &hb, game.na, game.nb, psi.m_a(), psi.m_b(), n);
        runs.push(seesaw_from(game, psi, start, iterations)?);
    }
    let mut best = 0;
    for (k, r) in runs.iter().enumerate() {
        if r.value() > runs[best].value() {
            best = k;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one run"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::correlation_value;

    fn cos2() -> f64 {
        (std::f64::consts::PI / 8.0).cos().powi(2)
    }

    /// `(1−ε)·cos²(π/8) + ε·½`: the maximally mixed part wins half the time
    /// against any strategy whose outcomes are unbiased.
    fn noisy_linear(eps: f64) -> f64 {
        (1.0 - eps) * cos2() + eps * 0.5
    }

    fn fixed_zero(game: &Game) -> Strategy {
        let det = |t: usize| -> Vec<HermitianOp> {
            (0..t)
                .map(|k| if k == 0 { HermitianOp::identity(2, 1) } else { HermitianOp::zeros(2, 1) })
                .collect()
        };
        Strategy {
            alice: vec![det(game.na()); game.nx()],
            bob: vec![det(game.nb()); game.ny()],
            copies: 1,
        }
    }

    #[test]
    fn chsh_table() {
        let g = chsh();
        for x in 0..2 {
            for y in 0..2 {
                assert_eq!(g.mu(x, y), 0.25);
            }
        }
        assert!(g.v(1, 1, 0, 1));
        assert!(!g.v(1, 1, 0, 0));
        assert!(g.v(0, 1, 1, 1));
        assert_eq!(g.corr_weights().len(), 8);
    }

    #[test]
    fn game_json_round_trip_and_validation() {
        let g = chsh();
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("\"V\":[1,0,0,1,"));
        assert_eq!(serde_json::from_str::<Game>(&text).unwrap(), g);
        assert!(Game::new(1, 1, 1, 1, vec![vec![0.9]], vec![1]).is_err());
        assert!(Game::new(1, 1, 1, 1, vec![vec![1.0]], vec![2]).is_err());
        assert!(Game::new(1, 1, 2, 1, vec![vec![1.0]], vec![1]).is_err());
    }

    #[test]
    fn classical_values() {
        assert_eq!(classical_value(&chsh()).unwrap(), 0.75);
        let zero = Game::from_predicate(2, 2, 2, 2, |_, _, _, _| false).unwrap();
        assert_eq!(classical_value(&zero).unwrap(), 0.0);
        let eq = Game::from_predicate(1, 1, 3, 3, |_, _, a, b| a == b).unwrap();
        assert_eq!(classical_value(&eq).unwrap(), 1.0);
        let big = Game::from_predicate(8, 8, 8, 8, |_, _, a, b| a == b).unwrap();
        assert!(matches!(classical_value(&big), Err(Error::EnumerationCap { .. })));
    }

    /// Brute force over all sixteen deterministic CHSH pairs.
    #[test]
    fn deterministic_optimum_evaluates_to_classical_value() {
        let g = chsh();
        let (v, ha, hb) = classical_optimum(&g).unwrap();
        let s = deterministic_strategy(&ha, &hb, 2, 2, 2, 2, 1);
        let psi = BipartiteState::noisy_mes(2, 0.6).unwrap();
        assert!((eval_strategy(&g, &s, &psi).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn chsh_classical_oracle() {
        let g = chsh();
        let mut best = 0.0f64;
        for code in 0..16usize {
            let (a0, a1, b0, b1) = (code & 1, (code >> 1) & 1, (code >> 2) & 1, (code >> 3) & 1);
            let (ha, hb) = ([a0, a1], [b0, b1]);
            let mut v = 0.0;
            for x in 0..2 {
                for y in 0..2 {
                    if (ha[x] ^ hb[y]) == (x & y) {
                        v += 0.25;
                    }
                }
            }
            best = best.max(v);
        }
        assert_eq!(best, classical_value(&g).unwrap());
    }

    #[test]
    fn fixed_answers_win_three_quarters() {
        let g = chsh();
        let psi = BipartiteState::mes(2).unwrap();
        assert!((eval_strategy(&g, &fixed_zero(&g), &psi).unwrap() - 0.75).abs() < 1e-12);
        let all = Game::from_predicate(2, 2, 2, 2, |_, _, _, _| true).unwrap();
        let s = chsh_optimal_strategy();
        assert!((eval_strategy(&all, &s, &BipartiteState::noisy_mes(2, 0.4).unwrap()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_chsh_values() {
        let g = chsh();
        let s = chsh_optimal_strategy();
        let v = eval_strategy(&g, &s, &BipartiteState::mes(2).unwrap()).unwrap();
        assert!((v - cos2()).abs() < 1e-9);
        assert!((v - 0.853_553_390_593_273_7).abs() < 1e-12);
        for eps in [0.1, 0.5] {
            let v = eval_strategy(&g, &s, &BipartiteState::noisy_mes(2, eps).unwrap()).unwrap();
            assert!((v - noisy_linear(eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn markov_pairing_matches_direct_trace() {
        let psi = BipartiteState::noisy_mes(2, 0.3).unwrap();
        let s = chsh_optimal_strategy();
        for p in &s.alice[1] {
            for q in &s.bob[1] {
                let direct = correlation_value(p, q, &psi, 1).unwrap();
                let via = paired(p, &markov_t(q, &psi, 1).unwrap());
                assert!((direct - via).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn value_is_linear_in_state() {
        let g = chsh();
        let mut rng = rng_for(11, 0);
        let s = Strategy {
            alice: (0..2).map(|_| random_povm(2, 1, 2, &mut rng).unwrap()).collect(),
            bob: (0..2).map(|_| random_povm(2, 1, 2, &mut rng).unwrap()).collect(),
            copies: 1,
        };
        let (p1, p2) = (BipartiteState::mes(2).unwrap(), BipartiteState::product(2, 2).unwrap());
        let alpha = 0.37;
        let mix = p1.mix(&p2, alpha).unwrap();
        let lhs = eval_strategy(&g, &s, &mix).unwrap();
        let rhs = alpha * eval_strategy(&g, &s, &p1).unwrap() + (1.0 - alpha) * eval_strategy(&g, &s, &p2).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn strategy_json_round_trip() {
        let s = chsh_optimal_strategy();
        let text = serde_json::to_string(&s.to_json()).unwrap();
        let back = Strategy::from_json(&text, 2, 2).unwrap();
        let g = chsh();
        let psi = BipartiteState::mes(2).unwrap();
        assert_eq!(eval_strategy(&g, &back, &psi).unwrap(), eval_strategy(&g, &s, &psi).unwrap());
        let bad = text.replace("[1.0,0.0]", "[2.0,0.0]");
        assert!(Strategy::from_json(&bad, 2, 2).is_err());
    }

    #[test]
    fn seesaw_trivial_game() {
        let all = Game::from_predicate(2, 2, 2, 2, |_, _, _, _| true).unwrap();
        let r = seesaw_optimize(&all, &BipartiteState::mes(2).unwrap(), 1, 1, 0).unwrap();
        assert!((r.trace[0] - 1.0).abs() < 1e-12);
        assert!((r.value() - 1.0).abs() < 1e-12);
        assert!(seesaw_optimize(&all, &BipartiteState::mes(2).unwrap(), 1, 0, 0).is_err());
    }

    #[test]
    fn seesaw_reaches_tsirelson() {
        let g = chsh();
        let psi = BipartiteState::mes(2).unwrap();
        let mut good = 0;
        for seed in 0..10 {
            let r = seesaw_optimize(&g, &psi, 1, 50, seed).unwrap();
            for w in r.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
            r.strategy.validate(2, 2).unwrap();
            if r.value() >= 0.85 {
                good += 1;
            }
        }
        assert!(good >= 8, "{good} of 10");
    }

    #[test]
    fn seesaw_on_noisy_state_matches_linear_value() {
        let g = chsh();
        for eps in [0.1, 0.5] {
            let psi = BipartiteState::noisy_mes(2, eps).unwrap();
            // Deterministic answers still win 3/4, whatever the state.
            let target = noisy_linear(eps).max(0.75);
            let r = seesaw_restarts(&g, &psi, 1, 50, 3, 4).unwrap();
            assert!(r.value() >= target - 1e-6, "{} < {target}", r.value());
        }
    }
}
