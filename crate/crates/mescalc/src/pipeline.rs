//! The strategy-transformation pipeline: smoothing, regularization, passage
//! to random operators, dimension reduction, smoothing of random operators,
//! multilinearization, lifting back to matrices and rounding to sub-POVMs.
//!
//! Operators after lifting live on `h + n₀n₁` registers and are never
//! materialized at pipeline scale. A lifted operator only uses `id` and the
//! first basis element on its variable registers, so it is block diagonal in
//! the joint eigenbasis of those elements; each block is an operator on the
//! `h` quantum registers obtained by evaluating the multilinear coefficients
//! at the corresponding eigenvalues. Rounding acts block by block and all
//! statistics of lifted operators are Monte Carlo averages over blocks.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{aligned_bases, depolarize, depolarize_rep, max_correlation, pair_trace, BipartiteState, CorrelationData};
use crate::error::{Error, Result};
use crate::fourier::{expand, influences, reconstruct, truncate, FourierRep, MultiIndex, Truncation};
use crate::gaussian::{
    exponents_up_to, gauss_inner, mc_run, rng_for, sample_correlated_into, CompiledPoly,
    CorrelatedGaussianSpec, Estimate, HermitePoly, HermiteTable, MC_CHUNK,
};
use crate::matfun::{round_sub_povm, tr_zeta, SubPovm};
use crate::matspace::{checked_pow, eigenvalues, HermitianOp, MatrixC};
use crate::randop::{c_sigma, tr_zeta_matrix, ComposedRandomOperator, JointRandomOperators, RandomOperator, Synthesizer};

/// Stage names in execution order.
pub const STAGES: [&str; 9] = [
    "input",
    "smooth",
    "regularize",
    "to_random",
    "dim_reduce",
    "smooth_random",
    "multilinearize",
    "from_random",
    "round",
];

/// Tolerance for exact identities checked along the pipeline.
pub const EXACT_TOL: f64 = 1e-9;

/// Standard errors allowed in stochastic gates.
pub const SE_GATE: f64 = 4.0;

/// Smoothing-parameter rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// `γ = C(1−ρ)(δ/2)/ln(2/δ)`.
    #[default]
    Simplified,
    /// Upper end of the admissible range `1 − (1−ε)^{ln ρ/(ln ε + ln ρ)}`.
    RangeMax,
}

fn default_mc_samples() -> usize {
    crate::gaussian::DEFAULT_MC_SAMPLES
}
fn default_one() -> f64 {
    1.0
}
fn default_retries() -> usize {
    20
}
fn default_corr_gate() -> f64 {
    0.1
}
fn default_norm_gate() -> f64 {
    0.5
}
fn default_block_limit() -> usize {
    4096
}

/// Pipeline configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineParams {
    pub epsilon: f64,
    pub delta: f64,
    pub tau: f64,
    /// Maximal correlation of the shared state.
    pub rho: f64,
    pub m: usize,
    pub t: usize,
    pub a: usize,
    pub b: usize,
    pub s: usize,
    pub d1: usize,
    pub d2: usize,
    /// Largest admissible number of high-influence registers.
    pub h: usize,
    pub n0: usize,
    pub n1: usize,
    pub lambda: f64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_one", rename = "C_smooth", alias = "c_smooth")]
    pub c_smooth: f64,
    #[serde(default)]
    pub gamma_mode: GammaMode,
    /// Fresh projections tried by dimension reduction before giving up.
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    /// Accept a projection when every correlation moves by at most this
    /// multiple of `N₂(P)N₂(Q)`.
    #[serde(default = "default_corr_gate")]
    pub dim_reduce_corr_gate: f64,
    /// Accept a projection when every `N₂` grows by at most this factor minus one.
    #[serde(default = "default_norm_gate")]
    pub dim_reduce_norm_gate: f64,
    /// Lifted operators with at most this many blocks are validated on every
    /// block; larger ones on the sampled blocks.
    #[serde(default = "default_block_limit")]
    pub block_check_limit: usize,
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        let open = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} must lie in (0,1), got {v}")))
            }
        };
        open("epsilon", self.epsilon)?;
        open("delta", self.delta)?;
        open("tau", self.tau)?;
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Argument(format!("rho must lie in [0,1), got {}", self.rho)));
        }
        for (name, v) in [
            ("m", self.m),
            ("t", self.t),
            ("a", self.a),
            ("b", self.b),
            ("s", self.s),
            ("d1", self.d1),
            ("d2", self.d2),
            ("n0", self.n0),
            ("n1", self.n1),
        ] {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        if self.m < 2 {
            return Err(Error::Argument("m must be at least 2".into()));
        }
        if self.mc_samples < 2 {
            return Err(Error::Argument("mc_samples must be at least 2".into()));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("C_smooth", self.c_smooth),
            ("dim_reduce_corr_gate", self.dim_reduce_corr_gate),
            ("dim_reduce_norm_gate", self.dim_reduce_norm_gate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_retries == 0 {
            return Err(Error::Argument("max_retries must be positive".into()));
        }
        Ok(())
    }

    /// The smoothing parameter γ for the configured rule.
    pub fn gamma(&self) -> f64 {
        match self.gamma_mode {
            GammaMode::Simplified => smoothing_gamma(self.rho, self.delta, self.c_smooth),
            GammaMode::RangeMax => smoothing_gamma_range_max(self.epsilon, self.rho),
        }
    }
}

/// `γ = C(1−ρ)(δ/2)/ln(2/δ)`, capped at 1.
pub fn smoothing_gamma(rho: f64, delta: f64, c_smooth: f64) -> f64 {
    (c_smooth * (1.0 - rho) * (delta / 2.0) / (2.0 / delta).ln()).min(1.0)
}

/// `1 − (1−ε)^{ln ρ/(ln ε + ln ρ)}`; the exponent tends to 1 as `ρ → 0`.
pub fn smoothing_gamma_range_max(epsilon: f64, rho: f64) -> f64 {
    let expo = if rho <= 0.0 { 1.0 } else { rho.ln() / (epsilon.ln() + rho.ln()) };
    1.0 - (1.0 - epsilon).powf(expo)
}

/// Degree beyond which `Δ_{1−γ}` leaves at most `δ` of the squared norm:
/// `⌈ln(1/δ)/(2γ)⌉`.
pub fn auto_d1(delta: f64, gamma: f64) -> f64 {
    ((1.0 / delta).ln() / (2.0 * gamma)).ceil()
}

/// Overrides for desk-mode parameters; absent fields fall back to the
/// explicit formulas or to defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskOverrides {
    pub delta: Option<f64>,
    pub tau: Option<f64>,
    pub s: Option<usize>,
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub h: Option<usize>,
    pub n0: Option<usize>,
    pub n1: Option<usize>,
    pub lambda: Option<f64>,
    pub mc_samples: Option<usize>,
    pub seed: Option<u64>,
    #[serde(rename = "C_smooth", alias = "c_smooth")]
    pub c_smooth: Option<f64>,
    pub gamma_mode: Option<GammaMode>,
    pub max_retries: Option<usize>,
    pub dim_reduce_corr_gate: Option<f64>,
    pub dim_reduce_norm_gate: Option<f64>,
    pub block_check_limit: Option<usize>,
}

/// Parameters from the asymptotic formulas. Quantities that overflow `f64` are reported
/// through their logarithms; big-O constants are taken to be 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticParams {
    pub epsilon: f64,
    pub rho: f64,
    pub m: usize,
    pub t: usize,
    pub a: usize,
    pub b: usize,
    pub s: usize,
    pub delta: f64,
    pub log10_delta: f64,
    pub log10_tau: f64,
    pub log10_d1: f64,
    pub log10_d2: f64,
    pub log10_h_bound: f64,
    pub log10_n1: f64,
    pub log10_log10_n0: f64,
    /// `log₁₀ log₁₀ D` with `D = n₀n₁ + h`.
    pub log10_log10_d: f64,
    /// Whether `m^D` fits under the dimension cap.
    pub executable: bool,
}

/// Parameter calculator mode.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamMode {
    Asymptotic,
    Desk(DeskOverrides),
}

/// Output of [`compute_params`].
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ComputedParams {
    Asymptotic(AsymptoticParams),
    Desk(PipelineParams),
}

/// `log₁₀(10^x + 10^y)`.
fn log10_add(x: f64, y: f64) -> f64 {
    let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (1.0 + 10f64.powf(lo - hi)).log10()
}

/// Evaluates `δ = ε⁸/(10¹⁶t²s)`, `τ`, `d₁`, `d₂`, `h ≤ 2std₁/τ`, `n₀`, `n₁`
/// and `D = n₀n₁ + h` with `s = ab`.
pub fn asymptotic_params(epsilon: f64, rho: f64, m: usize, t: usize, a: usize, b: usize) -> Result<AsymptoticParams> {
    if !(epsilon > 0.0 && epsilon < 1.0) || !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Argument("ε and ρ must lie in (0,1)".into()));
    }
    if m < 2 || t == 0 || a == 0 || b == 0 {
        return Err(Error::Argument("m ≥ 2 and t, a, b ≥ 1 are required".into()));
    }
    let s = a * b;
    let (lt, ls, le, lm) = ((t as f64).log10(), (s as f64).log10(), epsilon.log10(), (m as f64).ln());
    let log10_delta = 8.0 * le - 16.0 - 2.0 * lt - ls;
    let delta = 10f64.powf(log10_delta);
    let ln_inv_delta = -log10_delta * std::f64::consts::LN_10;
    // ln m · ln²(1/δ) / ((1−ρ)δ), kept in log10 form.
    let log10_expo = lm.log10() + 2.0 * ln_inv_delta.log10() - (1.0 - rho).log10() - log10_delta;
    let log10_tau = 12.0 * le - 2.0 * ls - 3.0 * lt - 10f64.powf(log10_expo) / std::f64::consts::LN_10;
    let log10_d1 = 2f64.log10() + 2.0 * ln_inv_delta.log10() - (1.0 - rho).log10() - log10_delta;
    let log10_d2 = 2.0 * ln_inv_delta.log10() - (1.0 - rho).log10() - log10_delta;
    let log10_h_bound = (2.0 * (s * t) as f64).log10() + log10_d1 - log10_tau;
    let log10_n1 = 2.0 * log10_d2 - 2.0 * log10_tau;
    // log₁₀ n₀ = h·log₁₀ m + d₁·log₁₀ d₁ + 6log₁₀ s + 12log₁₀ t − 6log₁₀ δ.
    let tower_h = log10_h_bound + (m as f64).log10().log10();
    let tower_d1 = log10_d1 + log10_d1.log10();
    let rest = (6.0 * ls + 12.0 * lt - 6.0 * log10_delta).log10();
    let log10_log10_n0 = log10_add(log10_add(tower_h, tower_d1), rest);
    // log₁₀ D ≈ log₁₀ n₀ + log₁₀ n₁; the h term is negligible.
    let log10_log10_d = log10_add(log10_log10_n0, log10_n1.log10());
    let cap = crate::matspace::max_dim() as f64;
    let executable = log10_log10_d < (cap.log10() / (m as f64).log10()).log10();
    Ok(AsymptoticParams {
        epsilon,
        rho,
        m,
        t,
        a,
        b,
        s,
        delta,
        log10_delta,
        log10_tau,
        log10_d1,
        log10_d2,
        log10_h_bound,
        log10_n1,
        log10_log10_n0,
        log10_log10_d,
        executable,
    })
}

/// Asymptotic mode evaluates the explicit formulas; desk mode fills a runnable
/// [`PipelineParams`] from overrides.
pub fn compute_params(
    epsilon: f64,
    rho: f64,
    m: usize,
    t: usize,
    a: usize,
    b: usize,
    mode: ParamMode,
) -> Result<ComputedParams> {
    match mode {
        ParamMode::Asymptotic => Ok(ComputedParams::Asymptotic(asymptotic_params(epsilon, rho, m, t, a, b)?)),
        ParamMode::Desk(o) => {
            if !(epsilon > 0.0 && epsilon < 1.0) || !(0.0..1.0).contains(&rho) {
                return Err(Error::Argument("ε must lie in (0,1) and ρ in [0,1)".into()));
            }
            let s = o.s.unwrap_or(a * b);
            let delta = o
                .delta
                .unwrap_or_else(|| epsilon.powi(8) / (1e16 * (t * t) as f64 * s as f64));
            let tau = match o.tau {
                Some(v) => v,
                None => {
                    let p = asymptotic_params(epsilon, rho.max(f64::MIN_POSITIVE), m, t, a, b)?;
                    let v = 10f64.powf(p.log10_tau);
                    if v == 0.0 {
                        return Err(Error::Argument("τ from the formula underflows; supply an override".into()));
                    }
                    v
                }
            };
            let c_smooth = o.c_smooth.unwrap_or(1.0);
            let gamma = smoothing_gamma(rho, delta, c_smooth);
            let d1 = match o.d1 {
                Some(v) => v,
                None => {
                    let v = auto_d1(delta, gamma);
                    if v > 1e6 {
                        return Err(Error::Argument(format!("automatic d1 = {v:.3e} is not runnable; supply an override")));
                    }
                    v as usize
                }
            };
            let need = |name: &str, v: Option<usize>| v.ok_or_else(|| Error::Argument(format!("desk mode needs {name}")));
            let params = PipelineParams {
                epsilon,
                delta,
                tau,
                rho,
                m,
                t,
                a,
                b,
                s,
                d1,
                d2: need("d2", o.d2)?,
                h: o.h.unwrap_or(8),
                n0: need("n0", o.n0)?,
                n1: need("n1", o.n1)?,
                lambda: o.lambda.unwrap_or(0.1),
                mc_samples: o.mc_samples.unwrap_or_else(default_mc_samples),
                seed: o.seed.unwrap_or(0),
                c_smooth,
                gamma_mode: o.gamma_mode.unwrap_or_default(),
                max_retries: o.max_retries.unwrap_or_else(default_retries),
                dim_reduce_corr_gate: o.dim_reduce_corr_gate.unwrap_or_else(default_corr_gate),
                dim_reduce_norm_gate: o.dim_reduce_norm_gate.unwrap_or_else(default_norm_gate),
                block_check_limit: o.block_check_limit.unwrap_or_else(default_block_limit),
            };
            params.validate()?;
            Ok(ComputedParams::Desk(params))
        }
    }
}

/// Which player an operator belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Player {
    #[serde(rename = "A")]
    Alice,
    #[serde(rename = "B")]
    Bob,
}

/// A tracked quantity with an optional gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub quantity: String,
    pub value: f64,
    pub std_error: f64,
    pub gate: Option<f64>,
    pub pass: Option<bool>,
}

impl Check {
    /// An ungated measurement.
    pub fn info(quantity: impl Into<String>, e: Estimate) -> Self {
        Self {
            quantity: quantity.into(),
            value: e.mean,
            std_error: e.std_error,
            gate: None,
            pass: None,
        }
    }

    /// Passes when `value ≤ gate + SE_GATE·std_error`.
    pub fn upper(quantity: impl Into<String>, e: Estimate, gate: f64) -> Self {
        Self {
            quantity: quantity.into(),
            value: e.mean,
            std_error: e.std_error,
            gate: Some(gate),
            pass: Some(e.mean <= gate + SE_GATE * e.std_error),
        }
    }
}

/// `Tr((P_{u,i} ⊗ Q_{v,j}) ψ)` for one index tuple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrEntry {
    pub u: usize,
    pub v: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub std_error: f64,
}

/// Weight of one correlation in a linear objective such as a game value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrWeight {
    pub u: usize,
    pub v: usize,
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Per-operator measurements after a stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpEntry {
    pub player: Player,
    pub family: usize,
    pub outcome: usize,
    pub norm_before: f64,
    pub norm_after: Estimate,
    /// `E Tr ζ` normalized by the full dimension.
    pub zeta: Estimate,
}

/// Diagnostic record of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub operators: Vec<OpEntry>,
    pub correlations: Vec<CorrEntry>,
    /// `after − before` for every correlation.
    pub drift: Vec<CorrEntry>,
    pub objective: Option<Estimate>,
    pub checks: Vec<Check>,
    pub notes: BTreeMap<String, f64>,
    pub elapsed_seconds: f64,
}

impl StageReport {
    /// Whether every gated check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass != Some(false))
    }

    /// The same report with the timing zeroed.
    pub fn without_timing(&self) -> Self {
        Self {
            elapsed_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// `Σ_stages drift` per correlation, i.e. final minus input values.
pub fn total_drift(reports: &[StageReport]) -> Vec<CorrEntry> {
    let (Some(first), Some(last)) = (reports.first(), reports.last()) else {
        return vec![];
    };
    first
        .correlations
        .iter()
        .zip(&last.correlations)
        .map(|(a, b)| CorrEntry {
            value: b.value - a.value,
            std_error: (a.std_error.powi(2) + b.std_error.powi(2)).sqrt(),
            ..*a
        })
        .collect()
}

/// Flattens reports into `(quantity, value, std_error, gate, pass)` rows.
pub fn report_rows(reports: &[StageReport]) -> Vec<Check> {
    let mut rows = Vec::new();
    for r in reports {
        for c in &r.correlations {
            rows.push(Check::info(
                format!("{}/corr/u{}/v{}/i{}/j{}", r.stage, c.u, c.v, c.i, c.j),
                Estimate {
                    mean: c.value,
                    std_error: c.std_error,
                },
            ));
        }
        for c in &r.drift {
            rows.push(Check::info(
                format!("{}/drift/u{}/v{}/i{}/j{}", r.stage, c.u, c.v, c.i, c.j),
                Estimate {
                    mean: c.value,
                    std_error: c.std_error,
                },
            ));
        }
        if let Some(o) = r.objective {
            rows.push(Check::info(format!("{}/objective", r.stage), o));
        }
        for op in &r.operators {
            let tag = format!("{}/{:?}/f{}/o{}", r.stage, op.player, op.family, op.outcome);
            rows.push(Check::info(format!("{tag}/norm"), op.norm_after));
            rows.push(Check::info(format!("{tag}/zeta"), op.zeta));
        }
        for (k, v) in &r.notes {
            rows.push(Check::info(format!("{}/{k}", r.stage), Estimate::exact(*v)));
        }
        for c in &r.checks {
            rows.push(Check {
                quantity: format!("{}/{}", r.stage, c.quantity),
                ..c.clone()
            });
        }
    }
    rows
}

/// A float with 17 significant digits, which round-trips every `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        // Adding 0.0 maps -0.0 to 0.0.
        format!("{:.16e}", v + 0.0)
    } else {
        v.to_string()
    }
}

/// Writes rows as RFC-4180 CSV with header `quantity,value,std_error,gate,pass`.
pub fn write_csv<W: std::io::Write>(rows: &[Check], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(out);
    w.write_record(["quantity", "value", "std_error", "gate", "pass"])?;
    for r in rows {
        w.write_record([
            r.quantity.clone(),
            format_float(r.value),
            format_float(r.std_error),
            r.gate.map(format_float).unwrap_or_default(),
            r.pass.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stand-alone stage operations
// ---------------------------------------------------------------------------

fn check_unit_interval(op: &HermitianOp) -> Result<()> {
    let ev = eigenvalues(op);
    let (hi, lo) = (ev.first().copied().unwrap_or(0.0), ev.last().copied().unwrap_or(0.0));
    if lo < -EXACT_TOL || hi > 1.0 + EXACT_TOL {
        return Err(Error::Precondition(format!("operator spectrum [{lo:.3e}, {hi:.3e}] leaves [0, id]")));
    }
    Ok(())
}

/// Applies `Δ_{1−γ}` with `γ = C(1−ρ)(δ/2)/ln(2/δ)` to operators in
/// `[0, id]` and returns them with `γ` and `d₁ = ⌈ln(1/δ)/(2γ)⌉`.
pub fn smooth_operators(
    ops: &[HermitianOp],
    psi: &BipartiteState,
    delta: f64,
    c_smooth: f64,
) -> Result<(Vec<HermitianOp>, f64, usize)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Argument(format!("δ must lie in (0,1), got {delta}")));
    }
    let rho = max_correlation(psi)?;
    let gamma = smoothing_gamma(rho, delta, c_smooth);
    let out = ops
        .iter()
        .map(|p| {
            check_unit_interval(p)?;
            depolarize(p, 1.0 - gamma, None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, gamma, auto_d1(delta, gamma) as usize))
}

/// `H = ⋃_P {i : Inf_i(P^{≤d}) ≥ τ}`, zero-based and sorted.
pub fn regularize(reps: &[FourierRep], d: usize, tau: f64) -> Vec<usize> {
    let mut h = BTreeSet::new();
    for rep in reps {
        let low = truncate(rep, Truncation::AtMost(d));
        for (i, inf) in influences(&low).into_iter().enumerate() {
            if inf >= tau {
                h.insert(i);
            }
        }
    }
    h.into_iter().collect()
}

/// How a player's Gaussian variables realize register labels outside `H`.
enum VarMap {
    /// `g_{(m²−1)i + b − 1}`.
    Alice { m2: usize },
    /// `(c_b/ρ)·h_{(m²−1)i+b−1} + √(1−(c_b/ρ)²)·h_{(m²−1)(n−h+i)+b−1}`.
    Bob { m2: usize, rest: usize, ratio: Vec<f64> },
}

impl VarMap {
    fn total_vars(&self, rest: usize) -> usize {
        match self {
            VarMap::Alice { m2 } | VarMap::Bob { m2, .. } => 2 * (m2 - 1) * rest,
        }
    }

    fn linear_form(&self, i: usize, b: usize) -> Vec<(usize, f64)> {
        match self {
            VarMap::Alice { m2 } => vec![((m2 - 1) * i + b - 1, 1.0)],
            VarMap::Bob { m2, rest, ratio } => {
                let a = ratio[b];
                let c = (1.0 - a * a).max(0.0).sqrt();
                let mut v = Vec::with_capacity(2);
                if a != 0.0 {
                    v.push(((m2 - 1) * i + b - 1, a));
                }
                if c != 0.0 {
                    v.push(((m2 - 1) * (rest + i) + b - 1, c));
                }
                v
            }
        }
    }
}

fn to_random_one(rep: &FourierRep, h_set: &[usize], d: usize, map: &VarMap) -> Result<RandomOperator> {
    let n = rep.registers();
    let in_h: Vec<bool> = (0..n).map(|r| h_set.contains(&r)).collect();
    let rest_regs: Vec<usize> = (0..n).filter(|&r| !in_h[r]).collect();
    let nv = map.total_vars(rest_regs.len());
    let mut coeffs: BTreeMap<MultiIndex, HermitePoly> = BTreeMap::new();
    for (sigma, c) in rep.iter() {
        if sigma.size() > d {
            continue;
        }
        let e = sigma.entries();
        let sh = MultiIndex::new(h_set.iter().map(|&r| e[r]).collect());
        let forms: Vec<Vec<(usize, f64)>> = rest_regs
            .iter()
            .enumerate()
            .filter(|(_, &r)| e[r] != 0)
            .map(|(i, &r)| map.linear_form(i, e[r] as usize))
            .collect();
        let poly = coeffs.entry(sh).or_insert_with(|| HermitePoly::zero(nv));
        let mut choice = vec![0usize; forms.len()];
        loop {
            let mut tau = vec![0u16; nv];
            let mut w = c;
            for (f, &k) in forms.iter().zip(&choice) {
                tau[f[k].0] = 1;
                w *= f[k].1;
            }
            poly.add_term(MultiIndex::new(tau), w);
            let mut pos = 0;
            while pos < forms.len() {
                choice[pos] += 1;
                if choice[pos] < forms[pos].len() {
                    break;
                }
                choice[pos] = 0;
                pos += 1;
            }
            if pos == forms.len() {
                break;
            }
        }
    }
    RandomOperator::new(rep.basis().clone(), h_set.len(), nv, coeffs)
}

fn bob_ratios(corr: &CorrelationData) -> (f64, Vec<f64>) {
    let c = corr.c();
    let rho = corr.rho();
    let ratio = c.iter().map(|&cb| if rho > 0.0 { (cb / rho).clamp(-1.0, 1.0) } else { 0.0 }).collect();
    (rho, ratio)
}

/// Substitutes Gaussian variables for the registers outside `H` in the
/// degree-`≤ d` parts of `P` and `Q`, giving multilinear joint random
/// operators over `2(m²−1)(n−h)` ρ-correlated pairs.
pub fn to_random(
    p: &FourierRep,
    q: &FourierRep,
    h_set: &[usize],
    corr: &CorrelationData,
    d: usize,
) -> Result<JointRandomOperators> {
    if p.basis().distance(&corr.basis_a) > EXACT_TOL || q.basis().distance(&corr.basis_b) > EXACT_TOL {
        return Err(Error::BasisMismatch("operators are not in the aligned bases".into()));
    }
    if p.registers() != q.registers() {
        return Err(Error::DimMismatch {
            expected: p.registers(),
            found: q.registers(),
        });
    }
    let m2 = corr.basis_a.len();
    let rest = p.registers() - h_set.len();
    let (rho, ratio) = bob_ratios(corr);
    let pa = to_random_one(p, h_set, d, &VarMap::Alice { m2 })?;
    let qb = to_random_one(q, h_set, d, &VarMap::Bob { m2, rest, ratio })?;
    let spec = CorrelatedGaussianSpec::uniform(pa.num_vars(), rho)?;
    JointRandomOperators::new(pa, qb, spec)
}

/// Acceptance gates for a random projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimReduceGates {
    pub corr_gate: f64,
    pub norm_gate: f64,
    pub max_retries: usize,
}

impl Default for DimReduceGates {
    fn default() -> Self {
        Self {
            corr_gate: default_corr_gate(),
            norm_gate: default_norm_gate(),
            max_retries: default_retries(),
        }
    }
}

/// Measurements of the accepted projection.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DimReduceReport {
    pub attempts: usize,
    /// `N₂` after projection, per operator.
    pub norms: Vec<Estimate>,
    /// Correlation after minus before, per index tuple.
    pub corr_shift: Vec<Estimate>,
    /// Normalized `E Tr ζ` after projection, per operator.
    pub zeta: Vec<Estimate>,
}

/// Composed pair sharing one projection.
#[derive(Clone, Debug)]
pub struct ComposedPair {
    pub p: ComposedRandomOperator,
    pub q: ComposedRandomOperator,
    pub rho: f64,
}

/// Projects a joint pair to `n₀` variables through `x ↦ Mx/‖x‖₂` with
/// `M ~ γ_{n×n₀}`, retrying with fresh projections until the measured
/// correlation shift and norm inflation pass the gates.
pub fn dim_reduce(
    j: &JointRandomOperators,
    corr: &CorrelationData,
    n0: usize,
    seed: u64,
    gates: &DimReduceGates,
    samples: usize,
) -> Result<(ComposedPair, DimReduceReport)> {
    let fam = Families {
        alice: vec![vec![j.p.clone()]],
        bob: vec![vec![j.q.clone()]],
    };
    let rho = j.spec.rhos.first().copied().unwrap_or(corr.rho());
    let ctx = StageCtx::new(corr, &fam, None, j.p.registers())?;
    let exact = exact_correlations(&fam, &ctx, rho)?;
    let (m, report) = dim_reduce_families(&fam, &ctx, &exact, rho, n0, seed, gates, samples)?;
    let pair = ComposedPair {
        p: ComposedRandomOperator::new(j.p.clone(), m.clone(), true)?,
        q: ComposedRandomOperator::new(j.q.clone(), m, true)?,
        rho,
    };
    Ok((pair, report))
}

/// Least-squares projection of composed operators onto Hermite polynomials
/// of degree `≤ d` in their `n₀` inputs. The design points are shared by all
/// operators, so the map is linear and reproduces constants exactly.
pub fn hermite_reestimate(
    ops: &[&ComposedRandomOperator],
    d: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<RandomOperator>> {
    let Some(first) = ops.first() else {
        return Ok(vec![]);
    };
    let n0 = first.input_dim();
    if ops.iter().any(|o| o.input_dim() != n0) {
        return Err(Error::Argument("composed operators disagree on the input dimension".into()));
    }
    let evals: Vec<(Vec<MultiIndex>, PolyBank)> = ops
        .iter()
        .map(|o| {
            let support: Vec<MultiIndex> = o.base.coeffs().keys().cloned().collect();
            let bank = PolyBank::new(support.iter().map(|s| o.base.coeff(s).expect("support key")));
            (support, bank)
        })
        .collect();
    let widths: Vec<usize> = evals.iter().map(|(s, _)| s.len()).collect();
    let total: usize = widths.iter().sum();
    let coefs = fit_hermite(n0, d, samples, seed, total, |x, out| {
        let mut off = 0;
        for (o, (_, bank)) in ops.iter().zip(&evals) {
            let y = o.transform(x);
            let w = bank.len();
            bank.eval(&y, &mut out[off..off + w]);
            off += w;
        }
    })?;
    let taus = hermite_features(n0, d);
    let mut out = Vec::with_capacity(ops.len());
    let mut col = 0;
    for (o, (support, _)) in ops.iter().zip(&evals) {
        let mut coeffs = BTreeMap::new();
        for s in support {
            let poly = HermitePoly::from_terms(n0, taus.iter().enumerate().map(|(f, t)| (t.clone(), coefs[(f, col)])))?;
            coeffs.insert(s.clone(), poly);
            col += 1;
        }
        out.push(RandomOperator::new(o.base.basis().clone(), o.base.registers(), n0, coeffs)?);
    }
    Ok(out)
}

/// `U_{1−γ}` followed by truncation to degree `d₂`.
pub fn smooth_random(op: &RandomOperator, gamma: f64, d2: usize) -> Result<RandomOperator> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Argument(format!("γ must lie in [0,1], got {gamma}")));
    }
    Ok(op.map_polys(|_, p| {
        let u = p.map(|t, c| c * (1.0 - gamma).powi(t.weight() as i32));
        crate::gaussian::degree_truncate(&u, d2)
    }))
}

/// Replaces every variable `x_i` by `(x_{i,1} + … + x_{i,t})/√t` (new
/// index `i·t + j`) through the exact expansion
/// `H_r((Σ_j y_j)/√t) = Σ_{|α|=r} √(r!/α!) t^{−r/2} H_α(y)`, then keeps the
/// multilinear part.
pub fn multilinearize_poly(p: &HermitePoly, t: usize) -> Result<HermitePoly> {
    if t == 0 {
        return Err(Error::Argument("t must be positive".into()));
    }
    let n = p.n();
    let nt = n * t;
    let mut out = HermitePoly::zero(nt);
    let subsets: Vec<Vec<Vec<usize>>> = (0..=p.max_exponent().min(t)).map(|r| combinations(t, r)).collect();
    for (tau, c) in p.terms() {
        let e = tau.entries();
        if e.iter().any(|&r| r as usize > t) {
            continue;
        }
        let vars: Vec<usize> = (0..n).filter(|&i| e[i] != 0).collect();
        let mut w = c;
        for &i in &vars {
            let r = e[i] as i32;
            w *= (1..=r).map(|k| k as f64).product::<f64>().sqrt() * (t as f64).powf(-r as f64 / 2.0);
        }
        let lists: Vec<&Vec<Vec<usize>>> = vars.iter().map(|&i| &subsets[e[i] as usize]).collect();
        let mut choice = vec![0usize; vars.len()];
        loop {
            let mut idx = vec![0u16; nt];
            for (k, &i) in vars.iter().enumerate() {
                for &j in &lists[k][choice[k]] {
                    idx[i * t + j] = 1;
                }
            }
            out.add_term(MultiIndex::new(idx), w);
            let mut pos = 0;
            while pos < vars.len() {
                choice[pos] += 1;
                if choice[pos] < lists[pos].len() {
                    break;
                }
                choice[pos] = 0;
                pos += 1;
            }
            if pos == vars.len() {
                break;
            }
        }
    }
    Ok(out)
}

fn combinations(t: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(r);
    fn rec(start: usize, t: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for k in start..t {
            cur.push(k);
            rec(k + 1, t, r, cur, out);
            cur.pop();
        }
    }
    rec(0, t, r, &mut cur, &mut out);
    out
}

/// [`multilinearize_poly`] applied to every coefficient.
pub fn multilinearize(op: &RandomOperator, t: usize) -> Result<RandomOperator> {
    let mut coeffs = BTreeMap::new();
    for (s, p) in op.coeffs() {
        coeffs.insert(s.clone(), multilinearize_poly(p, t)?);
    }
    RandomOperator::new(op.basis().clone(), op.registers(), op.num_vars() * t, coeffs)
}

/// Fourier representation of the lifted operator
/// `Σ_σ Σ_S p̂_σ(S) (⊗_{j∈S} A₁ ⊗ id elsewhere) ⊗ A_σ` on `n + h` registers,
/// variable registers first.
pub fn lift_fourier(op: &RandomOperator) -> Result<FourierRep> {
    if !op.is_multilinear() {
        return Err(Error::Precondition("lifting requires multilinear coefficients".into()));
    }
    let n = op.num_vars();
    let mut terms = Vec::new();
    for (sigma, p) in op.coeffs() {
        for (tau, c) in p.terms() {
            let mut idx: Vec<u16> = tau.entries().to_vec();
            idx.extend_from_slice(sigma.entries());
            terms.push((MultiIndex::new(idx), c));
        }
    }
    FourierRep::from_coeffs(op.basis().clone(), n + op.registers(), terms)
}

fn check_lift_spec(spec: &CorrelatedGaussianSpec, corr: &CorrelationData) -> Result<()> {
    let c1 = corr.c().get(1).copied().unwrap_or(0.0);
    if spec.rhos.iter().any(|r| (r - c1).abs() > 1e-12) {
        return Err(Error::Precondition(format!(
            "lifting needs every pair correlation equal to c₁ = {c1}"
        )));
    }
    Ok(())
}

/// Dense lifted operators `(P, Q)` on `n + h` registers.
pub fn from_random(j: &JointRandomOperators, corr: &CorrelationData) -> Result<(HermitianOp, HermitianOp)> {
    if j.p.basis().distance(&corr.basis_a) > EXACT_TOL || j.q.basis().distance(&corr.basis_b) > EXACT_TOL {
        return Err(Error::BasisMismatch("operators are not in the aligned bases".into()));
    }
    check_lift_spec(&j.spec, corr)?;
    let regs = j.p.num_vars() + j.p.registers();
    let dim = checked_pow(j.p.m(), regs).ok_or(Error::DimCap {
        dim: usize::MAX,
        cap: crate::matspace::max_dim(),
    })?;
    crate::matspace::check_dim(dim)?;
    Ok((reconstruct(&lift_fourier(&j.p)?)?, reconstruct(&lift_fourier(&j.q)?)?))
}

/// Distinct eigenvalues of a basis element with their normalized
/// multiplicities and spectral projectors.
#[derive(Clone, Debug, Serialize)]
pub struct EigenPoints {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(skip)]
    projectors: Vec<MatrixC>,
}

impl EigenPoints {
    pub fn of(mat: &MatrixC) -> Result<Self> {
        let s = crate::matspace::spectral_decompose_matrix(mat)?;
        let m = mat.nrows();
        let mut values: Vec<f64> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (k, &v) in s.values.iter().enumerate() {
            match values.last() {
                Some(&last) if (last - v).abs() <= 1e-9 => groups.last_mut().expect("group").push(k),
                _ => {
                    values.push(v);
                    groups.push(vec![k]);
                }
            }
        }
        let projectors = groups
            .iter()
            .map(|g| {
                let mut p = MatrixC::zeros(m, m);
                for &k in g {
                    let col = s.vectors.column(k);
                    p += col * col.adjoint();
                }
                p
            })
            .collect();
        for (g, v) in groups.iter().zip(values.iter_mut()) {
            *v = g.iter().map(|&k| s.values[k]).sum::<f64>() / g.len() as f64;
        }
        Ok(Self {
            weights: groups.iter().map(|g| g.len() as f64 / m as f64).collect(),
            values,
            projectors,
        })
    }

    pub fn projectors(&self) -> &[MatrixC] {
        &self.projectors
    }
}

/// Joint law `J(e, f) = Tr((π_e ⊗ π'_f) ψ)` of eigenvalue labels on one
/// register pair.
#[derive(Clone, Debug, Serialize)]
pub struct BlockLaw {
    pub alice: EigenPoints,
    pub bob: EigenPoints,
    pub joint: Vec<Vec<f64>>,
    #[serde(skip)]
    cumulative: Vec<(f64, usize, usize)>,
}

impl BlockLaw {
    pub fn new(corr: &CorrelationData, psi: &BipartiteState) -> Result<Self> {
        let alice = EigenPoints::of(corr.basis_a.element(1))?;
        let bob = EigenPoints::of(corr.basis_b.element(1))?;
        let joint: Vec<Vec<f64>> = alice
            .projectors
            .iter()
            .map(|pa| bob.projectors.iter().map(|pb| pair_trace(pa, pb, psi).max(0.0)).collect())
            .collect();
        let total: f64 = joint.iter().flatten().sum();
        let mut acc = 0.0;
        let mut cumulative = Vec::new();
        for (e, row) in joint.iter().enumerate() {
            for (f, &p) in row.iter().enumerate() {
                acc += p / total;
                cumulative.push((acc, e, f));
            }
        }
        Ok(Self {
            alice,
            bob,
            joint,
            cumulative,
        })
    }

    /// `Σ_{e,f} J(e,f) λ_e λ'_f`, which equals `c₁`.
    pub fn cross_moment(&self) -> f64 {
        let mut acc = 0.0;
        for (e, row) in self.joint.iter().enumerate() {
            for (f, &p) in row.iter().enumerate() {
                acc += p * self.alice.values[e] * self.bob.values[f];
            }
        }
        acc
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let u: f64 = rng.random();
        for &(c, e, f) in &self.cumulative {
            if u < c {
                return (e, f);
            }
        }
        let &(_, e, f) = self.cumulative.last().expect("nonempty law");
        (e, f)
    }
}

/// One player's family after lifting: multilinear coefficients together with
/// the eigenvalue points of the first basis element.
#[derive(Clone, Debug)]
pub struct LiftedFamily {
    pub outcomes: Vec<RandomOperator>,
    pub points: EigenPoints,
}

impl LiftedFamily {
    /// `h + n₀n₁`.
    pub fn registers(&self) -> usize {
        self.outcomes.first().map_or(0, |o| o.num_vars() + o.registers())
    }

    /// Number of diagonal blocks, if it fits in `u128`.
    pub fn block_count(&self) -> Option<u128> {
        let n = self.outcomes.first().map_or(0, RandomOperator::num_vars);
        (self.points.values.len() as u128).checked_pow(n as u32)
    }

    fn point(&self, k: &[usize]) -> Result<Vec<f64>> {
        let n = self.outcomes.first().map_or(0, RandomOperator::num_vars);
        if k.len() != n || k.iter().any(|&e| e >= self.points.values.len()) {
            return Err(Error::Argument("invalid block label".into()));
        }
        Ok(k.iter().map(|&e| self.points.values[e]).collect())
    }

    /// Unrounded block operators on the `h` quantum registers.
    pub fn block(&self, k: &[usize]) -> Result<Vec<HermitianOp>> {
        let x = self.point(k)?;
        self.outcomes.iter().map(|o| crate::randop::materialize(o, &x)).collect()
    }

    /// The rounded sub-POVM on block `k`.
    pub fn rounded_block(&self, k: &[usize]) -> Result<SubPovm> {
        round_sub_povm(&self.block(k)?, true)
    }

    /// Dense unrounded operators on all registers, when under the cap.
    pub fn dense(&self) -> Result<Vec<HermitianOp>> {
        self.outcomes.iter().map(|o| reconstruct(&lift_fourier(o)?)).collect()
    }

    /// Dense rounded sub-POVM, when under the cap.
    pub fn dense_rounded(&self) -> Result<SubPovm> {
        round_sub_povm(&self.dense()?, true)
    }

    /// Canonical JSON form.
    pub fn to_json(&self) -> serde_json::Value {
        let outcomes: Vec<serde_json::Value> = self
            .outcomes
            .iter()
            .map(|o| {
                let coeffs: Vec<serde_json::Value> = o
                    .coeffs()
                    .iter()
                    .map(|(s, p)| {
                        let terms: Vec<serde_json::Value> = p
                            .terms()
                            .map(|(t, c)| serde_json::json!([t.support(), c]))
                            .collect();
                        serde_json::json!({ "sigma": s.entries(), "terms": terms })
                    })
                    .collect();
                serde_json::json!({
                    "registers": o.registers(),
                    "variables": o.num_vars(),
                    "coefficients": coeffs,
                })
            })
            .collect();
        serde_json::json!({
            "eigenvalues": self.points.values,
            "weights": self.points.weights,
            "outcomes": outcomes,
        })
    }
}

// ---------------------------------------------------------------------------
// Families and evaluation machinery
// ---------------------------------------------------------------------------

/// Per-player lists of families, each a list of outcome operators.
#[derive(Clone, Debug)]
pub struct Families<T> {
    pub alice: Vec<Vec<T>>,
    pub bob: Vec<Vec<T>>,
}

impl<T> Families<T> {
    fn try_map<U>(
        &self,
        mut fa: impl FnMut(&T) -> Result<U>,
        mut fb: impl FnMut(&T) -> Result<U>,
    ) -> Result<Families<U>> {
        Ok(Families {
            alice: self.alice.iter().map(|f| f.iter().map(&mut fa).collect()).collect::<Result<_>>()?,
            bob: self.bob.iter().map(|f| f.iter().map(&mut fb).collect()).collect::<Result<_>>()?,
        })
    }

    fn ops(&self, player: Player) -> impl Iterator<Item = (usize, usize, &T)> {
        let fams = match player {
            Player::Alice => &self.alice,
            Player::Bob => &self.bob,
        };
        fams.iter()
            .enumerate()
            .flat_map(|(u, f)| f.iter().enumerate().map(move |(i, o)| (u, i, o)))
    }
}

fn stage_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shared data for statistics of one stage.
struct StageCtx {
    h: usize,
    m: usize,
    sigmas: Vec<MultiIndex>,
    c_sigma: Vec<f64>,
    entries: Vec<(usize, usize, usize, usize)>,
    weights: Option<Vec<f64>>,
    synth_a: Synthesizer,
    synth_b: Synthesizer,
    /// `ψ^{⊗h}`, present when rounded statistics are needed.
    psi_h: Option<BipartiteState>,
}

impl StageCtx {
    fn new<T>(corr: &CorrelationData, fam: &Families<T>, objective: Option<&[CorrWeight]>, h: usize) -> Result<Self> {
        Self::with_state(corr, fam, objective, h, None)
    }

    fn with_state<T>(
        corr: &CorrelationData,
        fam: &Families<T>,
        objective: Option<&[CorrWeight]>,
        h: usize,
        psi: Option<&BipartiteState>,
    ) -> Result<Self> {
        let m = corr.basis_a.m();
        let m2 = m * m;
        let count = checked_pow(m2, h).ok_or(Error::Argument("too many quantum registers".into()))?;
        let sigmas: Vec<MultiIndex> = (0..count).map(|l| MultiIndex::from_linear(l, m2, h)).collect();
        let c = corr.c();
        let c_sigma = sigmas.iter().map(|s| c_sigma(&c, s)).collect();
        let mut entries = Vec::new();
        for (u, fa) in fam.alice.iter().enumerate() {
            for (v, fb) in fam.bob.iter().enumerate() {
                for i in 0..fa.len() {
                    for j in 0..fb.len() {
                        entries.push((u, v, i, j));
                    }
                }
            }
        }
        let weights = objective.map(|w| {
            let mut out = vec![0.0; entries.len()];
            for cw in w {
                if let Some(pos) = entries.iter().position(|&e| e == (cw.u, cw.v, cw.i, cw.j)) {
                    out[pos] += cw.weight;
                }
            }
            out
        });
        let psi_h = psi.map(|p| p.tensor_power(h)).transpose()?;
        Ok(Self {
            h,
            m,
            synth_a: Synthesizer::new(&corr.basis_a, h, &sigmas)?,
            synth_b: Synthesizer::new(&corr.basis_b, h, &sigmas)?,
            sigmas,
            c_sigma,
            entries,
            weights,
            psi_h,
        })
    }

    fn dim(&self) -> f64 {
        (self.m as f64).powi(self.h as i32)
    }

    fn entry_list(&self, values: &[Estimate]) -> Vec<CorrEntry> {
        self.entries
            .iter()
            .zip(values)
            .map(|(&(u, v, i, j), e)| CorrEntry {
                u,
                v,
                i,
                j,
                value: e.mean,
                std_error: e.std_error,
            })
            .collect()
    }

    fn objective_of(&self, values: &[f64]) -> Option<Estimate> {
        self.weights
            .as_ref()
            .map(|w| Estimate::exact(w.iter().zip(values).map(|(a, b)| a * b).sum()))
    }
}

/// Compiled coefficient polynomials over a fixed σ list.
struct PolyBank {
    polys: Vec<CompiledPoly>,
    max_exp: usize,
    multilinear: bool,
}

impl PolyBank {
    fn new<'a>(polys: impl Iterator<Item = &'a HermitePoly>) -> Self {
        let polys: Vec<&HermitePoly> = polys.collect();
        Self {
            max_exp: polys.iter().map(|p| p.max_exponent()).max().unwrap_or(0),
            multilinear: polys.iter().all(|p| p.is_multilinear()),
            polys: polys.iter().map(|p| p.compile()).collect(),
        }
    }

    fn len(&self) -> usize {
        self.polys.len()
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

/// All operators of one player, each expanded over the full σ list.
struct PlayerEval {
    offsets: Vec<usize>,
    bank: PolyBank,
    n_vars: usize,
}

impl PlayerEval {
    fn new(fams: &[Vec<RandomOperator>], sigmas: &[MultiIndex]) -> Self {
        let mut offsets = vec![0];
        let n_vars = fams.iter().flatten().next().map_or(0, RandomOperator::num_vars);
        let zero = HermitePoly::zero(n_vars);
        let mut polys = Vec::new();
        for f in fams {
            offsets.push(offsets.last().copied().unwrap_or(0) + f.len());
            for op in f {
                for s in sigmas {
                    polys.push(op.coeff(s).unwrap_or(&zero));
                }
            }
        }
        Self {
            offsets,
            bank: PolyBank::new(polys.into_iter()),
            n_vars,
        }
    }

    fn num_ops(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
    }

    fn index(&self, u: usize, i: usize) -> usize {
        self.offsets[u] + i
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bank.len()];
        self.bank.eval(x, &mut out);
        out
    }
}

type Draw<'a> = dyn Fn(&mut ChaCha8Rng, &mut [f64], &mut [f64]) + Sync + 'a;

struct McStats {
    corr: Vec<Estimate>,
    n2sq_a: Vec<Estimate>,
    n2sq_b: Vec<Estimate>,
    zeta_a: Vec<Estimate>,
    zeta_b: Vec<Estimate>,
}

fn dot3(c: &[f64], a: &[f64], b: &[f64]) -> f64 {
    c.iter().zip(a).zip(b).map(|((c, a), b)| c * a * b).sum()
}

/// Monte Carlo correlations, `N₂²` and normalized `Tr ζ` of random-operator
/// families evaluated at the points produced by `draw`.
fn mc_stats(ctx: &StageCtx, a: &PlayerEval, b: &PlayerEval, draw: &Draw, samples: usize, seed: u64) -> McStats {
    let w = ctx.sigmas.len();
    let (na, nb) = (a.num_ops(), b.num_ops());
    let e = ctx.entries.len();
    let base = e;
    let k = base + 2 * (na + nb);
    let dim = ctx.dim();
    let est = mc_run(samples, seed, k, |rng, out| {
        let mut xa = vec![0.0; a.n_vars];
        let mut xb = vec![0.0; b.n_vars];
        draw(rng, &mut xa, &mut xb);
        let ca = a.eval(&xa);
        let cb = b.eval(&xb);
        for (idx, &(u, v, i, j)) in ctx.entries.iter().enumerate() {
            let pa = &ca[a.index(u, i) * w..][..w];
            let pb = &cb[b.index(v, j) * w..][..w];
            out[idx] = dot3(&ctx.c_sigma, pa, pb);
        }
        for op in 0..na {
            let c = &ca[op * w..][..w];
            out[base + op] = c.iter().map(|v| v * v).sum();
            out[base + na + nb + op] = tr_zeta_matrix(ctx.synth_a.matrix(c)) / dim;
        }
        for op in 0..nb {
            let c = &cb[op * w..][..w];
            out[base + na + op] = c.iter().map(|v| v * v).sum();
            out[base + 2 * na + nb + op] = tr_zeta_matrix(ctx.synth_b.matrix(c)) / dim;
        }
    });
    McStats {
        corr: est[..e].to_vec(),
        n2sq_a: est[base..base + na].to_vec(),
        n2sq_b: est[base + na..base + na + nb].to_vec(),
        zeta_a: est[base + na + nb..base + 2 * na + nb].to_vec(),
        zeta_b: est[base + 2 * na + nb..].to_vec(),
    }
}

fn gaussian_draw(spec: &CorrelatedGaussianSpec) -> impl Fn(&mut ChaCha8Rng, &mut [f64], &mut [f64]) + Sync + '_ {
    move |rng, g, h| sample_correlated_into(spec, rng, g, h)
}

fn exact_correlations(fam: &Families<RandomOperator>, ctx: &StageCtx, rho: f64) -> Result<Vec<f64>> {
    let n = fam.alice.iter().flatten().next().map_or(0, RandomOperator::num_vars);
    let spec = CorrelatedGaussianSpec::uniform(n, rho)?;
    let zero = HermitePoly::zero(n);
    ctx.entries
        .par_iter()
        .map(|&(u, v, i, j)| {
            let (p, q) = (&fam.alice[u][i], &fam.bob[v][j]);
            let mut acc = 0.0;
            for (s, cs) in ctx.sigmas.iter().zip(&ctx.c_sigma) {
                if *cs == 0.0 {
                    continue;
                }
                if let (Some(a), Some(b)) = (p.coeff(s), q.coeff(s)) {
                    acc += cs * gauss_inner(a, b, &spec)?;
                }
                let _ = &zero;
            }
            Ok(acc)
        })
        .collect()
}

fn n2_all(fam: &Families<RandomOperator>, player: Player) -> Vec<f64> {
    fam.ops(player).map(|(_, _, o)| crate::randop::n2(o)).collect()
}

fn unital_deviation_random(fam: &Families<RandomOperator>) -> f64 {
    let mut worst: f64 = 0.0;
    for f in fam.alice.iter().chain(&fam.bob) {
        let Some(first) = f.first() else { continue };
        let mut sum = RandomOperator::zero(first.basis().clone(), first.registers(), first.num_vars());
        for o in f {
            sum = sum.combine(1.0, o, 1.0).unwrap_or(sum);
        }
        let zero_sigma = MultiIndex::zero(first.registers());
        let zero_tau = MultiIndex::zero(first.num_vars());
        for (s, p) in sum.coeffs() {
            for (t, c) in p.terms() {
                let target = if *s == zero_sigma && *t == zero_tau { 1.0 } else { 0.0 };
                worst = worst.max((c - target).abs());
            }
        }
        if sum.coeff(&zero_sigma).is_none() {
            worst = worst.max(1.0);
        }
    }
    worst
}

fn unital_deviation_reps(fam: &Families<FourierRep>) -> f64 {
    let mut worst: f64 = 0.0;
    for f in fam.alice.iter().chain(&fam.bob) {
        let Some(first) = f.first() else { continue };
        let mut sum = FourierRep::zero(first.basis().clone(), first.registers());
        for o in f {
            sum = sum.combine(1.0, o, 1.0).unwrap_or(sum);
        }
        let zero = MultiIndex::zero(first.registers());
        worst = worst.max((sum.get(&zero) - 1.0).abs());
        for (s, c) in sum.iter() {
            if s != zero {
                worst = worst.max(c.abs());
            }
        }
    }
    worst
}

fn sqrt_est(e: Estimate) -> Estimate {
    let mean = e.mean.max(0.0).sqrt();
    Estimate {
        mean,
        std_error: if mean > 0.0 { e.std_error / (2.0 * mean) } else { 0.0 },
    }
}

fn op_entries(
    fam_sizes: (&[usize], &[usize]),
    before: (&[f64], &[f64]),
    after: (&[Estimate], &[Estimate]),
    zeta: (&[Estimate], &[Estimate]),
) -> Vec<OpEntry> {
    let mut out = Vec::new();
    for (player, sizes, b, a, z) in [
        (Player::Alice, fam_sizes.0, before.0, after.0, zeta.0),
        (Player::Bob, fam_sizes.1, before.1, after.1, zeta.1),
    ] {
        let mut k = 0;
        for (u, &len) in sizes.iter().enumerate() {
            for i in 0..len {
                out.push(OpEntry {
                    player,
                    family: u,
                    outcome: i,
                    norm_before: b[k],
                    norm_after: a[k],
                    zeta: z[k],
                });
                k += 1;
            }
        }
    }
    out
}

fn drift_entries(ctx: &StageCtx, before: &[Estimate], after: &[Estimate]) -> Vec<CorrEntry> {
    let diff: Vec<Estimate> = before
        .iter()
        .zip(after)
        .map(|(b, a)| Estimate {
            mean: a.mean - b.mean,
            std_error: (a.std_error.powi(2) + b.std_error.powi(2)).sqrt(),
        })
        .collect();
    ctx.entry_list(&diff)
}

fn exact_vec(v: &[f64]) -> Vec<Estimate> {
    v.iter().map(|&x| Estimate::exact(x)).collect()
}

/// Draws `M ~ γ_{n×n₀}` until the projected families pass the gates;
/// returns the accepted matrix.
#[allow(clippy::too_many_arguments)]
fn dim_reduce_families(
    fam: &Families<RandomOperator>,
    ctx: &StageCtx,
    exact_corr: &[f64],
    rho: f64,
    n0: usize,
    seed: u64,
    gates: &DimReduceGates,
    samples: usize,
) -> Result<(DMatrix<f64>, DimReduceReport)> {
    let a = PlayerEval::new(&fam.alice, &ctx.sigmas);
    let b = PlayerEval::new(&fam.bob, &ctx.sigmas);
    let n = a.n_vars;
    let n2a = n2_all(fam, Player::Alice);
    let n2b = n2_all(fam, Player::Bob);
    let spec = CorrelatedGaussianSpec::uniform(n0, rho)?;
    let mut last = String::new();
    for attempt in 0..gates.max_retries {
        let mut rng = rng_for(stage_seed(seed, 11), attempt as u64);
        let m = DMatrix::<f64>::from_fn(n, n0, |_, _| rng.sample(StandardNormal));
        let project = |x: &[f64], out: &mut [f64]| {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            for (r, o) in out.iter_mut().enumerate() {
                *o = (0..n0).map(|c| m[(r, c)] * x[c]).sum::<f64>() * s;
            }
        };
        let draw = |rng: &mut ChaCha8Rng, ga: &mut [f64], gb: &mut [f64]| {
            let mut x = vec![0.0; n0];
            let mut y = vec![0.0; n0];
            sample_correlated_into(&spec, rng, &mut x, &mut y);
            project(&x, ga);
            project(&y, gb);
        };
        let stats = mc_stats(ctx, &a, &b, &draw, samples, stage_seed(seed, 1000 + attempt as u64));
        let shift: Vec<Estimate> = stats
            .corr
            .iter()
            .zip(exact_corr)
            .map(|(e, x)| Estimate {
                mean: e.mean - x,
                std_error: e.std_error,
            })
            .collect();
        let norms: Vec<Estimate> = stats.n2sq_a.iter().chain(&stats.n2sq_b).map(|e| sqrt_est(*e)).collect();
        let before: Vec<f64> = n2a.iter().chain(&n2b).copied().collect();
        let corr_ok = ctx.entries.iter().zip(&shift).all(|(&(u, v, i, j), s)| {
            let gate = gates.corr_gate * n2a[a.index(u, i)] * n2b[b.index(v, j)];
            s.mean.abs() <= gate + SE_GATE * s.std_error
        });
        let norm_ok = norms
            .iter()
            .zip(&before)
            .all(|(e, b)| e.mean <= (1.0 + gates.norm_gate) * b + SE_GATE * e.std_error + EXACT_TOL);
        let zeta: Vec<Estimate> = stats.zeta_a.iter().chain(&stats.zeta_b).copied().collect();
        if corr_ok && norm_ok {
            return Ok((
                m,
                DimReduceReport {
                    attempts: attempt + 1,
                    norms,
                    corr_shift: shift,
                    zeta,
                },
            ));
        }
        let worst = shift.iter().map(|s| s.mean.abs()).fold(0.0, f64::max);
        let worst_norm = norms.iter().zip(&before).map(|(e, b)| e.mean / b.max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
        last = format!("max |corr shift| = {worst:.6e}, max N2 ratio = {worst_norm:.6}");
    }
    Err(Error::Stochastic {
        attempts: gates.max_retries,
        measurements: last,
    })
}

fn hermite_features(n: usize, d: usize) -> Vec<MultiIndex> {
    exponents_up_to(n, d)
}

/// Least-squares coefficients `(XᵀX)⁻¹XᵀY` of `k` responses on the Hermite
/// features of degree `≤ d`, with `x ~ N(0, I_n)`.
fn fit_hermite(
    n: usize,
    d: usize,
    samples: usize,
    seed: u64,
    k: usize,
    response: impl Fn(&[f64], &mut [f64]) + Sync,
) -> Result<DMatrix<f64>> {
    let taus = hermite_features(n, d);
    let f = taus.len();
    let compiled: Vec<Vec<(usize, usize)>> = taus
        .iter()
        .map(|t| t.entries().iter().enumerate().filter(|(_, &e)| e != 0).map(|(i, &e)| (i, e as usize)).collect())
        .collect();
    let chunks = samples.div_ceil(MC_CHUNK);
    let parts: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, c as u64);
            let count = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut xm = DMatrix::<f64>::zeros(count, f);
            let mut ym = DMatrix::<f64>::zeros(count, k);
            let mut resp = vec![0.0; k];
            for r in 0..count {
                let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let table = HermiteTable::new(&x, d);
                for (col, fac) in compiled.iter().enumerate() {
                    xm[(r, col)] = fac.iter().map(|&(i, e)| table.get(i, e)).product();
                }
                response(&x, &mut resp);
                for (col, v) in resp.iter().enumerate() {
                    ym[(r, col)] = *v;
                }
            }
            (xm.tr_mul(&xm), xm.tr_mul(&ym))
        })
        .collect();
    let mut gram = DMatrix::<f64>::zeros(f, f);
    let mut rhs = DMatrix::<f64>::zeros(f, k);
    for (g, r) in parts {
        gram += g;
        rhs += r;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("Hermite design matrix is not positive definite; raise mc_samples".into()))?;
    Ok(chol.solve(&rhs))
}

// ---------------------------------------------------------------------------
// The full run
// ---------------------------------------------------------------------------

/// Result of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub alice: Vec<LiftedFamily>,
    pub bob: Vec<LiftedFamily>,
    pub law: BlockLaw,
    /// Quantum registers kept through the pipeline.
    pub h_set: Vec<usize>,
    pub reports: Vec<StageReport>,
}

impl PipelineOutput {
    /// Canonical JSON of the output families.
    pub fn families_json(&self) -> serde_json::Value {
        serde_json::json!({
            "high_influence_registers": self.h_set,
            "alice": self.alice.iter().map(LiftedFamily::to_json).collect::<Vec<_>>(),
            "bob": self.bob.iter().map(LiftedFamily::to_json).collect::<Vec<_>>(),
        })
    }

    /// Whether every gated check of every stage passed.
    pub fn passed(&self) -> bool {
        self.reports.iter().all(StageReport::passed)
    }
}

/// Statistics of rounded lifted families.
#[derive(Clone, Debug, Serialize)]
pub struct LiftedStats {
    pub correlations: Vec<CorrEntry>,
    pub objective: Option<Estimate>,
    /// Sampled blocks whose rounding failed the sub-POVM invariants.
    pub invalid_blocks: f64,
}

fn validate_families(fams: &[Vec<HermitianOp>], m: usize, t: usize, n: usize) -> Result<()> {
    for f in fams {
        if f.len() != t {
            return Err(Error::Argument(format!("families must have {t} outcomes, found {}", f.len())));
        }
        for op in f {
            if op.local_dim() != m || op.registers() != n {
                return Err(Error::DimMismatch {
                    expected: checked_pow(m, n).unwrap_or(0),
                    found: op.dim(),
                });
            }
        }
        let sub = SubPovm::new(f.clone())?;
        let dev = crate::matspace::max_abs_entry(sub.deficit().matrix());
        if dev > 1e-8 {
            return Err(Error::Precondition(format!("family sums to the identity only within {dev:.3e}")));
        }
    }
    Ok(())
}

struct Timer(Instant);

impl Timer {
    fn start() -> Self {
        Self(Instant::now())
    }
    fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn quantum_report(
    stage: &str,
    fam: &Families<FourierRep>,
    ctx_corr: &CorrelationData,
    ctx: &StageCtx,
    before_norms: (&[f64], &[f64]),
    before_corr: Option<&[f64]>,
) -> Result<(StageReport, Vec<f64>)> {
    let c = ctx_corr.c();
    let corr: Vec<f64> = ctx
        .entries
        .iter()
        .map(|&(u, v, i, j)| fam.alice[u][i].weighted_dot(&fam.bob[v][j], &c))
        .collect::<Result<_>>()?;
    let norms_a: Vec<f64> = fam.ops(Player::Alice).map(|(_, _, r)| r.norm_sq().sqrt()).collect();
    let norms_b: Vec<f64> = fam.ops(Player::Bob).map(|(_, _, r)| r.norm_sq().sqrt()).collect();
    let zeta = |r: &FourierRep| -> Result<Estimate> {
        let op = reconstruct(r)?;
        Ok(Estimate::exact(tr_zeta(&op) / op.dim() as f64))
    };
    let za: Vec<Estimate> = fam.ops(Player::Alice).map(|(_, _, r)| zeta(r)).collect::<Result<_>>()?;
    let zb: Vec<Estimate> = fam.ops(Player::Bob).map(|(_, _, r)| zeta(r)).collect::<Result<_>>()?;
    let sizes_a: Vec<usize> = fam.alice.iter().map(Vec::len).collect();
    let sizes_b: Vec<usize> = fam.bob.iter().map(Vec::len).collect();
    let before_c = before_corr.map_or_else(|| corr.clone(), <[f64]>::to_vec);
    let mut checks = vec![Check::upper(
        "unital_deviation",
        Estimate::exact(unital_deviation_reps(fam)),
        1e-8,
    )];
    for (k, (a, b)) in norms_a.iter().chain(&norms_b).zip(before_norms.0.iter().chain(before_norms.1)).enumerate() {
        checks.push(Check::upper(format!("norm_monotone/op{k}"), Estimate::exact(a - b), 1e-12));
    }
    let report = StageReport {
        stage: stage.into(),
        operators: op_entries(
            (&sizes_a, &sizes_b),
            before_norms,
            (&exact_vec(&norms_a), &exact_vec(&norms_b)),
            (&za, &zb),
        ),
        correlations: ctx.entry_list(&exact_vec(&corr)),
        drift: drift_entries(ctx, &exact_vec(&before_c), &exact_vec(&corr)),
        objective: ctx.objective_of(&corr),
        checks,
        notes: BTreeMap::new(),
        elapsed_seconds: 0.0,
    };
    Ok((report, corr))
}

#[allow(clippy::too_many_arguments)]
fn random_report(
    stage: &str,
    fam: &Families<RandomOperator>,
    ctx: &StageCtx,
    rho: f64,
    before_norms: (&[f64], &[f64]),
    before_corr: &[Estimate],
    samples: usize,
    seed: u64,
) -> Result<(StageReport, Vec<f64>, McStats)> {
    let exact = exact_correlations(fam, ctx, rho)?;
    let a = PlayerEval::new(&fam.alice, &ctx.sigmas);
    let b = PlayerEval::new(&fam.bob, &ctx.sigmas);
    let spec = CorrelatedGaussianSpec::uniform(a.n_vars, rho)?;
    let draw = gaussian_draw(&spec);
    let stats = mc_stats(ctx, &a, &b, &draw, samples, seed);
    let na = n2_all(fam, Player::Alice);
    let nb = n2_all(fam, Player::Bob);
    let sizes_a: Vec<usize> = fam.alice.iter().map(Vec::len).collect();
    let sizes_b: Vec<usize> = fam.bob.iter().map(Vec::len).collect();
    let mut checks = vec![Check::upper(
        "unital_deviation",
        Estimate::exact(unital_deviation_random(fam)),
        1e-8,
    )];
    for (k, (e, x)) in stats.corr.iter().zip(&exact).enumerate() {
        let diff = Estimate {
            mean: (e.mean - x).abs(),
            std_error: e.std_error,
        };
        checks.push(Check::upper(format!("mc_agreement/entry{k}"), diff, 0.0));
    }
    let report = StageReport {
        stage: stage.into(),
        operators: op_entries(
            (&sizes_a, &sizes_b),
            before_norms,
            (&exact_vec(&na), &exact_vec(&nb)),
            (&stats.zeta_a, &stats.zeta_b),
        ),
        correlations: ctx.entry_list(&exact_vec(&exact)),
        drift: drift_entries(ctx, before_corr, &exact_vec(&exact)),
        objective: ctx.objective_of(&exact),
        checks,
        notes: BTreeMap::new(),
        elapsed_seconds: 0.0,
    };
    Ok((report, exact, stats))
}

/// Runs every stage on the players' families of `t`-outcome POVMs on
/// `n` registers. `objective` adds a tracked linear combination of
/// correlations, such as a game value. All random draws are keyed on
/// `params.seed` and the stage, never on a family's position, so identical
/// input families produce identical outputs.
pub fn run_pipeline(
    alice: &[Vec<HermitianOp>],
    bob: &[Vec<HermitianOp>],
    psi: &BipartiteState,
    params: &PipelineParams,
    objective: Option<&[CorrWeight]>,
) -> Result<PipelineOutput> {
    params.validate()?;
    let m = psi.m_a();
    if m != psi.m_b() || m != params.m {
        return Err(Error::Argument(format!("state local dimensions must both equal m = {}", params.m)));
    }
    let n = alice
        .first()
        .and_then(|f| f.first())
        .map(HermitianOp::registers)
        .ok_or_else(|| Error::Argument("at least one family per player is required".into()))?;
    if alice.len() != params.a || bob.len() != params.b {
        return Err(Error::Argument(format!(
            "expected {} and {} families, found {} and {}",
            params.a,
            params.b,
            alice.len(),
            bob.len()
        )));
    }
    validate_families(alice, m, params.t, n)?;
    validate_families(bob, m, params.t, n)?;
    let corr = aligned_bases(psi)?;
    let rho = corr.rho();
    if (rho - params.rho).abs() > 1e-6 {
        return Err(Error::Precondition(format!(
            "params.rho = {} differs from the state's maximal correlation {rho}",
            params.rho
        )));
    }
    let samples = params.mc_samples;
    let mut reports = Vec::new();

    // Input.
    let timer = Timer::start();
    let input = Families {
        alice: alice.to_vec(),
        bob: bob.to_vec(),
    }
    .try_map(|p| expand(p, &corr.basis_a), |q| expand(q, &corr.basis_b))?;
    let ctx_q = StageCtx::new(&corr, &input, objective, 0)?;
    let norms0_a: Vec<f64> = input.ops(Player::Alice).map(|(_, _, r)| r.norm_sq().sqrt()).collect();
    let norms0_b: Vec<f64> = input.ops(Player::Bob).map(|(_, _, r)| r.norm_sq().sqrt()).collect();
    let (mut rep, corr0) = quantum_report("input", &input, &corr, &ctx_q, (&norms0_a, &norms0_b), None)?;
    rep.elapsed_seconds = timer.secs();
    reports.push(rep);

    // Smoothing.
    let timer = Timer::start();
    let gamma = params.gamma();
    let smooth = input.try_map(|r| Ok(depolarize_rep(r, 1.0 - gamma)), |r| Ok(depolarize_rep(r, 1.0 - gamma)))?;
    let (mut rep, corr1) =
        quantum_report("smooth", &smooth, &corr, &ctx_q, (&norms0_a, &norms0_b), Some(&corr0))?;
    let d1_auto = auto_d1(params.delta, gamma);
    rep.notes.insert("gamma".into(), gamma);
    rep.notes.insert("d1_auto".into(), d1_auto);
    let var = |r: &FourierRep| r.norm_sq() - r.get(&MultiIndex::zero(r.registers())).powi(2);
    let vars_a: Vec<f64> = input.ops(Player::Alice).map(|(_, _, r)| var(r)).collect();
    let vars_b: Vec<f64> = input.ops(Player::Bob).map(|(_, _, r)| var(r)).collect();
    for (k, &(u, v, i, j)) in ctx_q.entries.iter().enumerate() {
        let gate = params.delta * (vars_a[ctx_index(&input.alice, u, i)] * vars_b[ctx_index(&input.bob, v, j)]).sqrt();
        rep.checks.push(Check::upper(
            format!("corr_drift/entry{k}"),
            Estimate::exact((corr1[k] - corr0[k]).abs()),
            gate + EXACT_TOL,
        ));
    }
    let tail_at = |d: f64| -> f64 {
        smooth
            .ops(Player::Alice)
            .chain(smooth.ops(Player::Bob))
            .map(|(_, _, r)| {
                r.iter()
                    .filter(|(s, _)| (s.size() as f64) > d)
                    .map(|(_, c)| c * c)
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    };
    rep.checks.push(Check::upper("tail_mass_at_d1_auto", Estimate::exact(tail_at(d1_auto)), params.delta));
    rep.notes.insert("tail_mass_at_d1".into(), tail_at(params.d1 as f64));
    rep.elapsed_seconds = timer.secs();
    reports.push(rep);

    // Regularization.
    let timer = Timer::start();
    let all_reps: Vec<FourierRep> = smooth
        .ops(Player::Alice)
        .chain(smooth.ops(Player::Bob))
        .map(|(_, _, r)| r.clone())
        .collect();
    let h_set = regularize(&all_reps, params.d1, params.tau);
    if h_set.len() > params.h {
        return Err(Error::Precondition(format!(
            "{} high-influence registers exceed the budget h = {}",
            h_set.len(),
            params.h
        )));
    }
    let norms1_a: Vec<f64> = smooth.ops(Player::Alice).map(|(_, _, r)| r.norm_sq().sqrt()).collect();
    let norms1_b: Vec<f64> = smooth.ops(Player::Bob).map(|(_, _, r)| r.norm_sq().sqrt()).collect();
    let (mut rep, _) = quantum_report("regularize", &smooth, &corr, &ctx_q, (&norms1_a, &norms1_b), Some(&corr1))?;
    let max_outside = all_reps
        .iter()
        .flat_map(|r| {
            influences(&truncate(r, Truncation::AtMost(params.d1)))
                .into_iter()
                .enumerate()
                .filter(|(i, _)| !h_set.contains(i))
                .map(|(_, v)| v)
        })
        .fold(0.0, f64::max);
    rep.checks.push(Check {
        quantity: "max_influence_outside_H".into(),
        value: max_outside,
        std_error: 0.0,
        gate: Some(params.tau),
        pass: Some(max_outside < params.tau),
    });
    let size_bound = 2.0 * params.d1 as f64 / params.tau * all_reps.len() as f64;
    rep.checks.push(Check::upper("H_size", Estimate::exact(h_set.len() as f64), size_bound));
    rep.notes.insert("h".into(), h_set.len() as f64);
    rep.elapsed_seconds = timer.secs();
    reports.push(rep);

    // Quantum to Gaussian.
    let timer = Timer::start();
    let h = h_set.len();
    let m2 = m * m;
    let rest = n - h;
    let (_, ratio) = bob_ratios(&corr);
    let bob_map = VarMap::Bob { m2, rest, ratio };
    let alice_map = VarMap::Alice { m2 };
    let stage3 = smooth.try_map(
        |r| to_random_one(r, &h_set, params.d1, &alice_map),
        |r| to_random_one(r, &h_set, params.d1, &bob_map),
    )?;
    let ctx = StageCtx::with_state(&corr, &stage3, objective, h, Some(psi))?;
    let (mut rep, corr3, _) = random_report(
        "to_random",
        &stage3,
        &ctx,
        rho,
        (&norms1_a, &norms1_b),
        &exact_vec(&corr1),
        samples,
        stage_seed(params.seed, 3),
    )?;
    let high = |r: &FourierRep| truncate(r, Truncation::Above(params.d1)).norm_sq().sqrt();
    let high_a: Vec<f64> = smooth.ops(Player::Alice).map(|(_, _, r)| high(r)).collect();
    let high_b: Vec<f64> = smooth.ops(Player::Bob).map(|(_, _, r)| high(r)).collect();
    for (k, &(u, v, i, j)) in ctx.entries.iter().enumerate() {
        let gate = high_a[ctx_index(&smooth.alice, u, i)] * high_b[ctx_index(&smooth.bob, v, j)];
        rep.checks.push(Check::upper(
            format!("corr_drift/entry{k}"),
            Estimate::exact((corr3[k] - corr1[k]).abs()),
            gate + EXACT_TOL,
        ));
    }
    add_norm_checks(&mut rep, &stage3, (&norms1_a, &norms1_b), 1.0, EXACT_TOL);
    let ml = stage3.ops(Player::Alice).chain(stage3.ops(Player::Bob)).all(|(_, _, o)| o.is_multilinear());
    let deg = stage3
        .ops(Player::Alice)
        .chain(stage3.ops(Player::Bob))
        .map(|(_, _, o)| o.degree())
        .max()
        .unwrap_or(0);
    rep.checks.push(Check::upper("degree", Estimate::exact(deg as f64), params.d1 as f64));
    rep.checks.push(Check::upper("non_multilinear", Estimate::exact(f64::from(u8::from(!ml))), 0.0));
    rep.notes.insert("gaussian_variables".into(), stage3.alice[0][0].num_vars() as f64);
    rep.elapsed_seconds = timer.secs();
    reports.push(rep);

    // Dimension reduction.
    let timer = Timer::start();
    let gates = DimReduceGates {
        corr_gate: params.dim_reduce_corr_gate,
        norm_gate: params.dim_reduce_norm_gate,
        max_retries: params.max_retries,
    };
    let norms3_a = n2_all(&stage3, Player::Alice);
    let norms3_b = n2_all(&stage3, Player::Bob);
    let (mmat, dr) = dim_reduce_families(&stage3, &ctx, &corr3, rho, params.n0, params.seed, &gates, samples)?;
    let corr4: Vec<Estimate> = dr
        .corr_shift
        .iter()
        .zip(&corr3)
        .map(|(s, x)| Estimate {
            mean: s.mean + x,
            std_error: s.std_error,
        })
        .collect();
    let na3 = norms3_a.len();
    let sizes_a: Vec<usize> = stage3.alice.iter().map(Vec::len).collect();
    let sizes_b: Vec<usize> = stage3.bob.iter().map(Vec::len).collect();
    let mut checks = Vec::new();
    for (k, &(u, v, i, j)) in ctx.entries.iter().enumerate() {
        let gate = params.dim_reduce_corr_gate * norms3_a[ctx_index(&stage3.alice, u, i)] * norms3_b[ctx_index(&stage3.bob, v, j)];
        let s = dr.corr_shift[k];
        checks.push(Check::upper(
            format!("corr_shift/entry{k}"),
            Estimate {
                mean: s.mean.abs(),
                std_error: s.std_error,
            },
            gate,
        ));
    }
    for (k, (e, b)) in dr.norms.iter().zip(norms3_a.iter().chain(&norms3_b)).enumerate() {
        checks.push(Check::upper(format!("norm_inflation/op{k}"), *e, (1.0 + params.dim_reduce_norm_gate) * b));
    }
    let zeta3: Vec<f64> = reports.last().expect("stage 3").operators.iter().map(|o| o.zeta.mean).collect();
    let zeta_gate = 3.0 * params.t as f64 * (params.s as f64).sqrt();
    for (u, f) in stage3.alice.iter().enumerate() {
        let (lo, hi) = (ctx_index(&stage3.alice, u, 0), ctx_index(&stage3.alice, u, 0) + f.len());
        checks.push(family_zeta_check(format!("zeta_growth/A/f{u}"), &dr.zeta[lo..hi], &zeta3[lo..hi], zeta_gate));
    }
    for (v, f) in stage3.bob.iter().enumerate() {
        let (lo, hi) = (na3 + ctx_index(&stage3.bob, v, 0), na3 + ctx_index(&stage3.bob, v, 0) + f.len());
        checks.push(family_zeta_check(format!("zeta_growth/B/f{v}"), &dr.zeta[lo..hi], &zeta3[lo..hi], zeta_gate));
    }
    let mut notes = BTreeMap::new();
    notes.insert("attempts".into(), dr.attempts as f64);
    let rep = StageReport {
        stage: "dim_reduce".into(),
        operators: op_entries(
            (&sizes_a, &sizes_b),
            (&norms3_a, &norms3_b),
            (&dr.norms[..na3], &dr.norms[na3..]),
            (&dr.zeta[..na3], &dr.zeta[na3..]),
        ),
        correlations: ctx.entry_list(&corr4),
        drift: drift_entries(&ctx, &exact_vec(&corr3), &corr4),
        objective: ctx.weights.as_ref().map(|w| {
            let mean = w.iter().zip(&corr4).map(|(a, b)| a * b.mean).sum();
            // Entries share draws; the weighted sum of their errors bounds the objective's.
            let se = w.iter().zip(&corr4).map(|(a, b)| a.abs() * b.std_error).sum();
            Estimate { mean, std_error: se }
        }),
        checks,
        notes,
        elapsed_seconds: timer.secs(),
    };
    reports.push(rep);
    let composed = stage3.try_map(
        |o| ComposedRandomOperator::new(o.clone(), mmat.clone(), true),
        |o| ComposedRandomOperator::new(o.clone(), mmat.clone(), true),
    )?;

    // Hermite re-estimation and smoothing of random operators.
    let timer = Timer::start();
    let list: Vec<&ComposedRandomOperator> = composed
        .ops(Player::Alice)
        .chain(composed.ops(Player::Bob))
        .map(|(_, _, o)| o)
        .collect();
    let fitted = hermite_reestimate(&list, params.d2, samples, stage_seed(params.seed, 5))?;
    let fitted_fam = regroup(&composed, fitted);
    let stage5 = fitted_fam.try_map(|o| smooth_random(o, gamma, params.d2), |o| smooth_random(o, gamma, params.d2))?;
    let fitted_corr = exact_correlations(&fitted_fam, &ctx, rho)?;
    let norms4: Vec<f64> = dr.norms.iter().map(|e| e.mean).collect();
    let (mut rep, corr5, _) = random_report(
        "smooth_random",
        &stage5,
        &ctx,
        rho,
        (&norms4[..na3], &norms4[na3..]),
        &corr4,
        samples,
        stage_seed(params.seed, 6),
    )?;
    let fitted_a = n2_all(&fitted_fam, Player::Alice);
    let fitted_b = n2_all(&fitted_fam, Player::Bob);
    for (k, &(u, v, i, j)) in ctx.entries.iter().enumerate() {
        let gate = params.delta * fitted_a[ctx_index(&stage5.alice, u, i)] * fitted_b[ctx_index(&stage5.bob, v, j)];
        rep.checks.push(Check::upper(
            format!("corr_drift/entry{k}"),
            Estimate::exact((corr5[k] - fitted_corr[k]).abs()),
            gate + EXACT_TOL,
        ));
    }
    add_norm_checks(&mut rep, &stage5, (&fitted_a, &fitted_b), 1.0, EXACT_TOL);
    let reest = fitted_corr
        .iter()
        .zip(&corr4)
        .map(|(f, e)| (f - e.mean).abs())
        .fold(0.0, f64::max);
    rep.notes.insert("reestimation_max_corr_change".into(), reest);
    rep.notes.insert("hermite_features".into(), hermite_features(params.n0, params.d2).len() as f64);
    rep.elapsed_seconds = timer.secs();
    reports.push(rep);

    // Multilinearization.
    let timer = Timer::start();
    let stage6 = stage5.try_map(|o| multilinearize(o, params.n1), |o| multilinearize(o, params.n1))?;
    let norms5_a = n2_all(&stage5, Player::Alice);
    let norms5_b = n2_all(&stage5, Player::Bob);
    let (mut rep, corr6, stats6) = random_report(
        "multilinearize",
        &stage6,
        &ctx,
        rho,
        (&norms5_a, &norms5_b),
        &exact_vec(&corr5),
        samples,
        stage_seed(params.seed, 7),
    )?;
    let norms6_a = n2_all(&stage6, Player::Alice);
    let norms6_b = n2_all(&stage6, Player::Bob);
    let dropped = |a: f64, b: f64| (a * a - b * b).max(0.0).sqrt();
    let lemma_applies = params.n1 as f64 >= (params.d2 as f64 / params.tau).powi(2);
    rep.notes.insert("lemma_premise_n1".into(), f64::from(u8::from(lemma_applies)));
    for (k, &(u, v, i, j)) in ctx.entries.iter().enumerate() {
        let (ia, ib) = (ctx_index(&stage5.alice, u, i), ctx_index(&stage5.bob, v, j));
        let gate = if lemma_applies {
            params.delta * norms5_a[ia] * norms5_b[ib]
        } else {
            dropped(norms5_a[ia], norms6_a[ia]) * norms5_b[ib] + norms6_a[ia] * dropped(norms5_b[ib], norms6_b[ib])
        };
        rep.checks.push(Check::upper(
            format!("corr_drift/entry{k}"),
            Estimate::exact((corr6[k] - corr5[k]).abs()),
            gate + EXACT_TOL,
        ));
    }
    add_norm_checks(&mut rep, &stage6, (&norms5_a, &norms5_b), 1.0, EXACT_TOL);
    let ratio = influence_ratio(&stage5, &stage6, params.n1);
    rep.checks.push(Check::upper(
        "max_influence_ratio",
        Estimate::exact(ratio),
        (params.d2 as f64 / params.n1 as f64).min(1.0) + EXACT_TOL,
    ));
    let zeta5: Vec<f64> = reports.last().expect("stage 5").operators.iter().map(|o| o.zeta.mean).collect();
    let zeta6: Vec<Estimate> = stats6.zeta_a.iter().chain(&stats6.zeta_b).copied().collect();
    let all5: Vec<f64> = norms5_a.iter().chain(&norms5_b).copied().collect();
    for (label, fams, off) in [("A", &stage6.alice, 0usize), ("B", &stage6.bob, na3)] {
        for (u, f) in fams.iter().enumerate() {
            let lo = off + ctx_index(fams, u, 0);
            let hi = lo + f.len();
            let diff: f64 = zeta6[lo..hi].iter().map(|e| e.mean).sum::<f64>() - zeta5[lo..hi].iter().sum::<f64>();
            let se: f64 = zeta6[lo..hi].iter().map(|e| e.std_error.powi(2)).sum::<f64>().sqrt();
            let gate = 4.0 * params.tau * all5[lo..hi].iter().map(|x| x * x).sum::<f64>();
            rep.checks.push(Check::upper(
                format!("zeta_change/{label}/f{u}"),
                Estimate {
                    mean: diff.abs(),
                    std_error: se,
                },
                gate,
            ));
        }
    }
    rep.elapsed_seconds = timer.secs();
    reports.push(rep);

    // Lifting and rounding.
    let timer = Timer::start();
    let law = BlockLaw::new(&corr, psi)?;
    let lifted_a: Vec<LiftedFamily> = stage6
        .alice
        .iter()
        .map(|f| LiftedFamily {
            outcomes: f.clone(),
            points: law.alice.clone(),
        })
        .collect();
    let lifted_b: Vec<LiftedFamily> = stage6
        .bob
        .iter()
        .map(|f| LiftedFamily {
            outcomes: f.clone(),
            points: law.bob.clone(),
        })
        .collect();
    let ctx7 = StageCtx::with_state(&corr, &stage6, objective, h, Some(psi))?;
    let round = rounding_stats(&ctx7, &stage6, &law, samples, stage_seed(params.seed, 8));
    let mut rep7 = StageReport {
        stage: "from_random".into(),
        operators: op_entries(
            (&sizes_a, &sizes_b),
            (&norms6_a, &norms6_b),
            (&round.n2_a, &round.n2_b),
            (&round.zeta_a, &round.zeta_b),
        ),
        correlations: ctx.entry_list(&exact_vec(&corr6)),
        drift: drift_entries(&ctx, &exact_vec(&corr6), &exact_vec(&corr6)),
        objective: ctx.objective_of(&corr6),
        checks: Vec::new(),
        notes: BTreeMap::new(),
        elapsed_seconds: 0.0,
    };
    rep7.checks.push(Check::upper(
        "cross_moment_vs_rho",
        Estimate::exact((law.cross_moment() - rho).abs()),
        EXACT_TOL,
    ));
    for (k, (e, x)) in round.unrounded.iter().zip(&corr6).enumerate() {
        rep7.checks.push(Check::upper(
            format!("block_average_corr/entry{k}"),
            Estimate {
                mean: (e.mean - x).abs(),
                std_error: e.std_error,
            },
            0.0,
        ));
    }
    for (k, (e, x)) in round.n2_a.iter().chain(&round.n2_b).zip(norms6_a.iter().chain(&norms6_b)).enumerate() {
        rep7.checks.push(Check::upper(
            format!("block_average_norm/op{k}"),
            Estimate {
                mean: (e.mean - x).abs(),
                std_error: e.std_error,
            },
            0.0,
        ));
    }
    rep7.notes.insert("registers".into(), (h + stage6.alice[0][0].num_vars()) as f64);
    rep7.elapsed_seconds = timer.secs();
    reports.push(rep7);

    let timer = Timer::start();
    let rounded: Vec<Estimate> = round.rounded.clone();
    let mut checks = Vec::new();
    let bound = |z: f64| {
        let t = params.t as f64;
        3.0 * (t + 1.0) * z + 6.0 * (t * z).sqrt()
    };
    let fam_z = |zs: &[Estimate], fams: &[Vec<RandomOperator>], u: usize| -> f64 {
        let lo = ctx_index(fams, u, 0);
        zs[lo..lo + fams[u].len()]
            .iter()
            .map(|e| e.mean + SE_GATE * e.std_error)
            .sum()
    };
    let b_a: Vec<f64> = (0..stage6.alice.len()).map(|u| bound(fam_z(&round.zeta_a, &stage6.alice, u))).collect();
    let b_b: Vec<f64> = (0..stage6.bob.len()).map(|v| bound(fam_z(&round.zeta_b, &stage6.bob, v))).collect();
    for (k, &(u, v, i, _)) in ctx.entries.iter().enumerate() {
        let gate = norms6_a[ctx_index(&stage6.alice, u, i)] * b_b[v].sqrt() + b_a[u].sqrt();
        let d = round.diff[k];
        checks.push(Check::upper(
            format!("corr_drift/entry{k}"),
            Estimate {
                mean: d.mean.abs(),
                std_error: d.std_error,
            },
            gate,
        ));
    }
    for (label, dist, fams, bounds) in [
        ("A", &round.dist_a, &stage6.alice, &b_a),
        ("B", &round.dist_b, &stage6.bob, &b_b),
    ] {
        for (u, f) in fams.iter().enumerate() {
            let lo = ctx_index(fams, u, 0);
            let mean: f64 = dist[lo..lo + f.len()].iter().map(|e| e.mean).sum();
            let se: f64 = dist[lo..lo + f.len()].iter().map(|e| e.std_error.powi(2)).sum::<f64>().sqrt();
            checks.push(Check::upper(format!("rounding_distance/{label}/f{u}"), Estimate { mean, std_error: se }, bounds[u]));
        }
    }
    let (checked, invalid) = validate_blocks(&lifted_a, &lifted_b, params.block_check_limit)?;
    checks.push(Check::upper("invalid_blocks_sampled", Estimate::exact(round.invalid), 0.0));
    checks.push(Check::upper("invalid_blocks_enumerated", Estimate::exact(invalid as f64), 0.0));
    let mut notes = BTreeMap::new();
    notes.insert("blocks_enumerated".into(), checked as f64);
    notes.insert("blocks_sampled".into(), samples as f64);
    let zero_norms = vec![0.0; na3];
    let rep8 = StageReport {
        stage: "round".into(),
        operators: op_entries(
            (&sizes_a, &sizes_b),
            (&zero_norms, &vec![0.0; norms6_b.len()]),
            (&round.rounded_n2_a, &round.rounded_n2_b),
            (&vec![Estimate::exact(0.0); na3], &vec![Estimate::exact(0.0); norms6_b.len()]),
        ),
        correlations: ctx.entry_list(&rounded),
        drift: ctx.entry_list(&round.diff),
        objective: round.objective,
        checks,
        notes,
        elapsed_seconds: timer.secs(),
    };
    reports.push(fix_round_norms(rep8, &norms6_a, &norms6_b));

    Ok(PipelineOutput {
        alice: lifted_a,
        bob: lifted_b,
        law,
        h_set,
        reports,
    })
}

fn fix_round_norms(mut rep: StageReport, a: &[f64], b: &[f64]) -> StageReport {
    for (op, nb) in rep.operators.iter_mut().zip(a.iter().chain(b)) {
        op.norm_before = *nb;
    }
    rep
}

fn ctx_index<T>(fams: &[Vec<T>], u: usize, i: usize) -> usize {
    fams[..u].iter().map(Vec::len).sum::<usize>() + i
}

fn regroup<T, U>(shape: &Families<T>, flat: Vec<U>) -> Families<U> {
    let mut it = flat.into_iter();
    let take = |fams: &[Vec<T>], it: &mut std::vec::IntoIter<U>| -> Vec<Vec<U>> {
        fams.iter().map(|f| (0..f.len()).map(|_| it.next().expect("length")).collect()).collect()
    };
    let alice = take(&shape.alice, &mut it);
    let bob = take(&shape.bob, &mut it);
    Families { alice, bob }
}

fn add_norm_checks(rep: &mut StageReport, fam: &Families<RandomOperator>, before: (&[f64], &[f64]), factor: f64, tol: f64) {
    let after: Vec<f64> = n2_all(fam, Player::Alice).into_iter().chain(n2_all(fam, Player::Bob)).collect();
    for (k, (a, b)) in after.iter().zip(before.0.iter().chain(before.1)).enumerate() {
        rep.checks.push(Check::upper(format!("norm_monotone/op{k}"), Estimate::exact(*a), factor * b + tol));
    }
}

fn family_zeta_check(name: String, after: &[Estimate], before: &[f64], factor: f64) -> Check {
    let mean: f64 = after.iter().map(|e| e.mean).sum();
    let se = after.iter().map(|e| e.std_error.powi(2)).sum::<f64>().sqrt();
    let gate = factor * before.iter().sum::<f64>();
    Check::upper(name, Estimate { mean, std_error: se }, gate)
}

/// `max Inf_{(i,k)}(p^{ml}_σ) / Inf_i(p_σ)` over operators, σ and variables.
fn influence_ratio(before: &Families<RandomOperator>, after: &Families<RandomOperator>, t: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let pairs = before
        .ops(Player::Alice)
        .zip(after.ops(Player::Alice))
        .chain(before.ops(Player::Bob).zip(after.ops(Player::Bob)));
    for ((_, _, b), (_, _, a)) in pairs {
        for (s, pb) in b.coeffs() {
            let Some(pa) = a.coeff(s) else { continue };
            for i in 0..pb.n() {
                let base = pb.influence(i);
                for k in 0..t {
                    let new = pa.influence(i * t + k);
                    if new > 0.0 {
                        worst = worst.max(if base > 0.0 { new / base } else { f64::INFINITY });
                    }
                }
            }
        }
    }
    worst
}

struct RoundStats {
    unrounded: Vec<Estimate>,
    rounded: Vec<Estimate>,
    diff: Vec<Estimate>,
    objective: Option<Estimate>,
    n2_a: Vec<Estimate>,
    n2_b: Vec<Estimate>,
    rounded_n2_a: Vec<Estimate>,
    rounded_n2_b: Vec<Estimate>,
    zeta_a: Vec<Estimate>,
    zeta_b: Vec<Estimate>,
    dist_a: Vec<Estimate>,
    dist_b: Vec<Estimate>,
    invalid: f64,
}

fn round_family(synth: &Synthesizer, coeffs: &[f64], width: usize, count: usize) -> (Vec<MatrixC>, Vec<MatrixC>, bool) {
    let raw: Vec<MatrixC> = (0..count).map(|i| synth.matrix(&coeffs[i * width..][..width])).collect();
    let ops: Vec<HermitianOp> = raw.iter().map(|m| synth.op_from(m.clone())).collect();
    match round_sub_povm(&ops, true) {
        Ok(sp) => (raw, sp.into_elements().into_iter().map(HermitianOp::into_matrix).collect(), true),
        Err(_) => {
            let zeros = raw.iter().map(|m| MatrixC::zeros(m.nrows(), m.ncols())).collect();
            (raw, zeros, false)
        }
    }
}

/// Block-sampled statistics of the lifted families before and after
/// rounding, with `(k, l) ~ J^{⊗n}`.
fn rounding_stats(ctx: &StageCtx, fam: &Families<RandomOperator>, law: &BlockLaw, samples: usize, seed: u64) -> RoundStats {
    let a = PlayerEval::new(&fam.alice, &ctx.sigmas);
    let b = PlayerEval::new(&fam.bob, &ctx.sigmas);
    let w = ctx.sigmas.len();
    let (na, nb) = (a.num_ops(), b.num_ops());
    let e = ctx.entries.len();
    let obj = usize::from(ctx.weights.is_some());
    let dim = ctx.dim();
    let psi_h = ctx.psi_h.as_ref().expect("rounding statistics need the shared state");
    // Layout: unrounded, rounded, diff, [objective], n2 (A,B), rounded n2 (A,B), zeta (A,B), dist (A,B), invalid.
    let o_obj = 3 * e;
    let o_n2 = o_obj + obj;
    let o_rn2 = o_n2 + na + nb;
    let o_z = o_rn2 + na + nb;
    let o_d = o_z + na + nb;
    let o_inv = o_d + na + nb;
    let k = o_inv + 1;
    let nvars = a.n_vars;
    let est = mc_run(samples, seed, k, |rng, out| {
        let mut xa = vec![0.0; nvars];
        let mut xb = vec![0.0; nvars];
        for r in 0..nvars {
            let (ea, eb) = law.sample(rng);
            xa[r] = law.alice.values[ea];
            xb[r] = law.bob.values[eb];
        }
        let ca = a.eval(&xa);
        let cb = b.eval(&xb);
        let mut invalid = false;
        let mut raw_a = Vec::with_capacity(na);
        let mut rnd_a = Vec::with_capacity(na);
        for (u, f) in fam.alice.iter().enumerate() {
            let off = a.index(u, 0) * w;
            let (raw, rnd, ok) = round_family(&ctx.synth_a, &ca[off..], w, f.len());
            invalid |= !ok;
            raw_a.extend(raw);
            rnd_a.extend(rnd);
        }
        let mut raw_b = Vec::with_capacity(nb);
        let mut rnd_b = Vec::with_capacity(nb);
        for (v, f) in fam.bob.iter().enumerate() {
            let off = b.index(v, 0) * w;
            let (raw, rnd, ok) = round_family(&ctx.synth_b, &cb[off..], w, f.len());
            invalid |= !ok;
            raw_b.extend(raw);
            rnd_b.extend(rnd);
        }
        let mut obj_val = 0.0;
        for (idx, &(u, v, i, j)) in ctx.entries.iter().enumerate() {
            let (ia, ib) = (a.index(u, i), b.index(v, j));
            let un = dot3(&ctx.c_sigma, &ca[ia * w..][..w], &cb[ib * w..][..w]);
            let ro = pair_trace(&rnd_a[ia], &rnd_b[ib], psi_h);
            out[idx] = un;
            out[e + idx] = ro;
            out[2 * e + idx] = ro - un;
            if let Some(wt) = &ctx.weights {
                obj_val += wt[idx] * ro;
            }
        }
        if obj == 1 {
            out[o_obj] = obj_val;
        }
        let norm_sq = |m: &MatrixC| m.iter().map(|z| z.norm_sqr()).sum::<f64>() / dim;
        for op in 0..na {
            out[o_n2 + op] = ca[op * w..][..w].iter().map(|v| v * v).sum();
            out[o_rn2 + op] = norm_sq(&rnd_a[op]);
            out[o_z + op] = tr_zeta_matrix(raw_a[op].clone()) / dim;
            out[o_d + op] = norm_sq(&(&rnd_a[op] - &raw_a[op]));
        }
        for op in 0..nb {
            out[o_n2 + na + op] = cb[op * w..][..w].iter().map(|v| v * v).sum();
            out[o_rn2 + na + op] = norm_sq(&rnd_b[op]);
            out[o_z + na + op] = tr_zeta_matrix(raw_b[op].clone()) / dim;
            out[o_d + na + op] = norm_sq(&(&rnd_b[op] - &raw_b[op]));
        }
        out[o_inv] = f64::from(u8::from(invalid));
    });
    let sq = |v: &[Estimate]| v.iter().map(|e| sqrt_est(*e)).collect::<Vec<_>>();
    RoundStats {
        unrounded: est[..e].to_vec(),
        rounded: est[e..2 * e].to_vec(),
        diff: est[2 * e..3 * e].to_vec(),
        objective: if obj == 1 { Some(est[o_obj]) } else { None },
        n2_a: sq(&est[o_n2..o_n2 + na]),
        n2_b: sq(&est[o_n2 + na..o_rn2]),
        rounded_n2_a: sq(&est[o_rn2..o_rn2 + na]),
        rounded_n2_b: sq(&est[o_rn2 + na..o_z]),
        zeta_a: est[o_z..o_z + na].to_vec(),
        zeta_b: est[o_z + na..o_d].to_vec(),
        dist_a: est[o_d..o_d + na].to_vec(),
        dist_b: est[o_d + na..o_inv].to_vec(),
        invalid: est[o_inv].mean * samples as f64,
    }
}

/// Validates the rounded sub-POVM on every block when the block count is at
/// most `limit`; returns `(blocks checked, invalid blocks)`.
fn validate_blocks(alice: &[LiftedFamily], bob: &[LiftedFamily], limit: usize) -> Result<(usize, usize)> {
    let mut checked = 0;
    let mut invalid = 0;
    for fam in alice.iter().chain(bob) {
        let Some(count) = fam.block_count() else { continue };
        if count > limit as u128 {
            continue;
        }
        let n = fam.outcomes.first().map_or(0, RandomOperator::num_vars);
        let radix = fam.points.values.len();
        for lin in 0..count as usize {
            let k = MultiIndex::from_linear(lin, radix, n);
            let label: Vec<usize> = k.entries().iter().map(|&e| e as usize).collect();
            checked += 1;
            if fam.rounded_block(&label).is_err() {
                invalid += 1;
            }
        }
    }
    Ok((checked, invalid))
}

/// Correlations and objective of rounded lifted families, averaged over
/// `(k, l) ~ J^{⊗n}` with an independent seed.
pub fn lifted_statistics(
    alice: &[LiftedFamily],
    bob: &[LiftedFamily],
    psi: &BipartiteState,
    objective: Option<&[CorrWeight]>,
    samples: usize,
    seed: u64,
) -> Result<LiftedStats> {
    let corr = aligned_bases(psi)?;
    let fam = Families {
        alice: alice.iter().map(|f| f.outcomes.clone()).collect(),
        bob: bob.iter().map(|f| f.outcomes.clone()).collect(),
    };
    let h = fam
        .alice
        .iter()
        .flatten()
        .next()
        .map_or(0, RandomOperator::registers);
    let ctx = StageCtx::with_state(&corr, &fam, objective, h, Some(psi))?;
    let law = BlockLaw::new(&corr, psi)?;
    let r = rounding_stats(&ctx, &fam, &law, samples, seed);
    Ok(LiftedStats {
        correlations: ctx.entry_list(&r.rounded),
        objective: r.objective,
        invalid_blocks: r.invalid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::correlation_value;
    use crate::fourier::{expand, StandardBasis};
    use crate::gaussian::rng_for;
    use crate::matspace::{frobenius_norm, kron_all, random_hermitian, C64};
    use crate::randop::{expect_corr, n2, random_multilinear};

    fn idx(v: &[u16]) -> MultiIndex {
        MultiIndex::new(v.to_vec())
    }

    fn pauli() -> StandardBasis {
        StandardBasis::gell_mann(2).unwrap()
    }

    fn z() -> MatrixC {
        MatrixC::from_diagonal(&nalgebra::DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)]))
    }

    fn computational() -> Vec<HermitianOp> {
        vec![
            HermitianOp::from_real_diag(&[1.0, 0.0]),
            HermitianOp::from_real_diag(&[0.0, 1.0]),
        ]
    }

    fn desk(a: usize, b: usize, t: usize, samples: usize) -> PipelineParams {
        let o = DeskOverrides {
            delta: Some(0.05),
            tau: Some(0.5),
            d1: Some(2),
            d2: Some(3),
            h: Some(1),
            n0: Some(8),
            n1: Some(4),
            mc_samples: Some(samples),
            seed: Some(7),
            ..Default::default()
        };
        match compute_params(0.1, 0.8, 2, t, a, b, ParamMode::Desk(o)).unwrap() {
            ComputedParams::Desk(p) => p,
            ComputedParams::Asymptotic(_) => unreachable!(),
        }
    }

    /// Random operator with spectrum in `[0, 1]`.
    fn random_effect(m: usize, n: usize, seed: u64) -> HermitianOp {
        let mut rng = rng_for(seed, 0);
        let h = HermitianOp::new(random_hermitian(m.pow(n as u32), &mut rng), m, n).unwrap();
        let s = crate::matspace::spectral_decompose(&h);
        let (lo, hi) = (s.values.iter().copied().fold(f64::MAX, f64::min), s.values.iter().copied().fold(f64::MIN, f64::max));
        crate::matspace::matrix_fn(&h, |x| (x - lo) / (hi - lo)).unwrap()
    }

    #[test]
    fn delta_from_formula() {
        let ComputedParams::Asymptotic(p) = compute_params(0.1, 0.5, 2, 2, 2, 2, ParamMode::Asymptotic).unwrap() else {
            panic!("asymptotic mode");
        };
        assert_eq!(p.s, 4);
        assert!((p.delta - 6.25e-26).abs() <= 1e-12 * 6.25e-26);
        assert!(!p.executable);
        assert!(p.log10_log10_d > 1.0);
    }

    #[test]
    fn desk_overrides_pass_through() {
        let p = desk(2, 3, 2, 5000);
        assert_eq!((p.s, p.d1, p.d2, p.h, p.n0, p.n1), (6, 2, 3, 1, 8, 4));
        assert_eq!((p.delta, p.tau, p.mc_samples, p.seed), (0.05, 0.5, 5000, 7));
        let bad = DeskOverrides {
            d2: Some(3),
            n0: Some(0),
            n1: Some(4),
            d1: Some(2),
            tau: Some(0.5),
            ..Default::default()
        };
        assert!(compute_params(0.1, 0.8, 2, 2, 1, 1, ParamMode::Desk(bad)).is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"C_smooth\":1.0"));
        let back: PipelineParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn smoothing_scales_projector() {
        let psi = BipartiteState::noisy_mes(2, 0.2).unwrap();
        let id = HermitianOp::identity(2, 1);
        let proj = HermitianOp::from_real_diag(&[1.0, 0.0]);
        let (out, gamma, d1) = smooth_operators(&[id.clone(), proj], &psi, 0.1, 1.0).unwrap();
        let expect = 0.2 * 0.05 / 20f64.ln();
        assert!((gamma - expect).abs() < 1e-15);
        assert_eq!(d1, (10f64.ln() / (2.0 * expect)).ceil() as usize);
        assert!(crate::matspace::max_abs_entry(&(out[0].matrix() - id.matrix())) < 1e-14);
        let target = (MatrixC::identity(2, 2) + z() * C64::new(1.0 - gamma, 0.0)) * C64::new(0.5, 0.0);
        assert!(crate::matspace::max_abs_entry(&(out[1].matrix() - target)) < 1e-14);
        let bad = HermitianOp::from_real_diag(&[1.5, 0.0]);
        assert!(smooth_operators(&[bad], &psi, 0.1, 1.0).is_err());
    }

    #[test]
    fn smoothing_moves_correlation_little() {
        let psi = BipartiteState::noisy_mes(2, 0.3).unwrap();
        let delta = 0.2;
        for seed in 0..10 {
            let p = random_effect(2, 2, seed);
            let q = random_effect(2, 2, seed + 100);
            let (out, _, d1) = smooth_operators(&[p.clone(), q.clone()], &psi, delta, 1.0).unwrap();
            let before = correlation_value(&p, &q, &psi, 2).unwrap();
            let after = correlation_value(&out[0], &out[1], &psi, 2).unwrap();
            let basis = pauli();
            let (rp, rq) = (expand(&p, &basis).unwrap(), expand(&q, &basis).unwrap());
            let var = |r: &FourierRep| crate::fourier::variance(r);
            assert!((before - after).abs() <= delta * (var(&rp) * var(&rq)).sqrt() + 1e-9);
            for (o, i) in out.iter().zip([&p, &q]) {
                let ro = expand(o, &basis).unwrap();
                assert!(ro.norm_sq() <= expand(i, &basis).unwrap().norm_sq() + 1e-12);
                assert!(truncate(&ro, Truncation::Above(d1)).norm_sq() <= delta);
                let low = eigenvalues(o).last().copied().unwrap();
                assert!(low >= -1e-12 && eigenvalues(o)[0] <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn regularize_examples() {
        let basis = pauli();
        let zi = FourierRep::from_coeffs(basis.clone(), 2, [(idx(&[3, 0]), 1.0)]).unwrap();
        assert_eq!(regularize(&[zi], 1, 0.5), vec![0]);
        let id = FourierRep::from_coeffs(basis.clone(), 2, [(idx(&[0, 0]), 1.0)]).unwrap();
        assert!(regularize(&[id], 3, 1e-6).is_empty());
        let reps: Vec<FourierRep> = (0..4)
            .map(|s| expand(&random_effect(2, 3, s), &basis).unwrap())
            .collect();
        let (d, tau) = (2, 0.05);
        let h = regularize(&reps, d, tau);
        assert!(h.len() as f64 <= 2.0 * d as f64 / tau * reps.len() as f64);
        for r in &reps {
            let inf = influences(&truncate(r, Truncation::AtMost(d)));
            for (i, v) in inf.iter().enumerate() {
                assert_eq!(h.contains(&i), reps.iter().any(|r2| influences(&truncate(r2, Truncation::AtMost(d)))[i] >= tau));
                if !h.contains(&i) {
                    assert!(*v < tau);
                }
            }
        }
    }

    #[test]
    fn to_random_examples() {
        let psi = BipartiteState::noisy_mes(2, 0.2).unwrap();
        let corr = aligned_bases(&psi).unwrap();
        let id_a = FourierRep::from_coeffs(corr.basis_a.clone(), 1, [(idx(&[0]), 1.0)]).unwrap();
        let id_b = FourierRep::from_coeffs(corr.basis_b.clone(), 1, [(idx(&[0]), 1.0)]).unwrap();
        let j = to_random(&id_a, &id_b, &[], &corr, 1).unwrap();
        assert_eq!(j.p.degree(), 0);
        assert!((expect_corr(&j, &corr).unwrap() - 1.0).abs() < 1e-12);

        let a1 = FourierRep::from_coeffs(corr.basis_a.clone(), 1, [(idx(&[1]), 1.0)]).unwrap();
        let b1 = FourierRep::from_coeffs(corr.basis_b.clone(), 1, [(idx(&[1]), 1.0)]).unwrap();
        let j = to_random(&a1, &b1, &[], &corr, 1).unwrap();
        assert_eq!(j.p.num_vars(), 6);
        assert!((expect_corr(&j, &corr).unwrap() - corr.c()[1]).abs() < 1e-12);

        let wrong = FourierRep::from_coeffs(pauli().rotated(&crate::fourier::random_orthogonal(3, &mut rng_for(3, 0))).unwrap(), 1, [(idx(&[1]), 1.0)]).unwrap();
        assert!(matches!(to_random(&wrong, &b1, &[], &corr, 1), Err(Error::BasisMismatch(_))));
    }

    #[test]
    fn to_random_keeps_low_degree_correlation() {
        let psi = BipartiteState::noisy_mes(2, 0.25).unwrap();
        let corr = aligned_bases(&psi).unwrap();
        for seed in 0..5 {
            let p = expand(&random_effect(2, 3, seed), &corr.basis_a).unwrap();
            let q = expand(&random_effect(2, 3, seed + 50), &corr.basis_b).unwrap();
            for (h, d) in [(vec![], 1), (vec![1], 2), (vec![0, 2], 3)] {
                let j = to_random(&p, &q, &h, &corr, d).unwrap();
                assert!(j.p.is_multilinear() && j.q.is_multilinear());
                assert!(n2(&j.p) <= p.norm_sq().sqrt() + 1e-12);
                let exact = crate::channels::correlation_value_fourier(&p, &q, &corr).unwrap();
                let tail = truncate(&p, Truncation::Above(d)).norm_sq().sqrt()
                    * truncate(&q, Truncation::Above(d)).norm_sq().sqrt();
                assert!((exact - expect_corr(&j, &corr).unwrap()).abs() <= tail + 1e-9);
            }
        }
    }

    fn random_pair(corr: &CorrelationData, n: usize, h: usize, seed: u64) -> JointRandomOperators {
        let mut rng = rng_for(seed, 0);
        let p = random_multilinear(&corr.basis_a, h, n, 2, &mut rng).unwrap();
        let q = random_multilinear(&corr.basis_b, h, n, 2, &mut rng).unwrap();
        JointRandomOperators::new(p, q, CorrelatedGaussianSpec::uniform(n, corr.c()[1]).unwrap()).unwrap()
    }

    #[test]
    fn from_random_exact_equalities() {
        let psi = BipartiteState::noisy_mes(2, 0.3).unwrap();
        let corr = aligned_bases(&psi).unwrap();
        for seed in 0..5 {
            let j = random_pair(&corr, 2, 1, seed);
            let (p, q) = from_random(&j, &corr).unwrap();
            assert_eq!(p.registers(), 3);
            let lifted = correlation_value(&p, &q, &psi, 3).unwrap();
            assert!((lifted - expect_corr(&j, &corr).unwrap()).abs() < 1e-9);
            assert!((frobenius_norm(p.matrix(), true) - n2(&j.p)).abs() < 1e-9);
            assert!((frobenius_norm(q.matrix(), true) - n2(&j.q)).abs() < 1e-9);
        }
    }

    #[test]
    fn from_random_one_term() {
        let psi = BipartiteState::noisy_mes(2, 0.2).unwrap();
        let corr = aligned_bases(&psi).unwrap();
        let one = |basis: &StandardBasis| {
            let mut coeffs = BTreeMap::new();
            coeffs.insert(idx(&[1]), HermitePoly::variable(1, 0));
            RandomOperator::new(basis.clone(), 1, 1, coeffs).unwrap()
        };
        let c1 = corr.c()[1];
        let j = JointRandomOperators::new(one(&corr.basis_a), one(&corr.basis_b), CorrelatedGaussianSpec::uniform(1, c1).unwrap()).unwrap();
        let (p, _) = from_random(&j, &corr).unwrap();
        let a1 = corr.basis_a.element(1);
        assert!(crate::matspace::max_abs_entry(&(p.matrix() - kron_all([a1, a1]))) < 1e-12);
        assert!((expect_corr(&j, &corr).unwrap() - c1 * c1).abs() < 1e-12);
        let bad = JointRandomOperators::new(one(&corr.basis_a), one(&corr.basis_b), CorrelatedGaussianSpec::uniform(1, 0.5).unwrap()).unwrap();
        assert!(from_random(&bad, &corr).is_err());
    }

    #[test]
    fn dim_reduce_constants_are_fixed() {
        let psi = BipartiteState::noisy_mes(2, 0.2).unwrap();
        let corr = aligned_bases(&psi).unwrap();
        let rep_a = FourierRep::from_coeffs(corr.basis_a.clone(), 1, [(idx(&[0]), 0.5), (idx(&[1]), 0.3)]).unwrap();
        let rep_b = FourierRep::from_coeffs(corr.basis_b.clone(), 1, [(idx(&[0]), 0.5), (idx(&[2]), 0.1)]).unwrap();
        let j = JointRandomOperators::new(
            RandomOperator::constant(&rep_a, 4),
            RandomOperator::constant(&rep_b, 4),
            CorrelatedGaussianSpec::uniform(4, 0.8).unwrap(),
        )
        .unwrap();
        let (pair, report) = dim_reduce(&j, &corr, 6, 1, &DimReduceGates::default(), 4096).unwrap();
        assert_eq!(report.attempts, 1);
        assert_eq!(pair.p.input_dim(), 6);
        for s in &report.corr_shift {
            assert!(s.mean.abs() < 1e-12);
        }
        let back = hermite_reestimate(&[&pair.p, &pair.q], 2, 4096, 3).unwrap();
        for (b, r) in back.iter().zip([&rep_a, &rep_b]) {
            for (s, c) in r.iter() {
                let poly = b.coeff(&s).unwrap();
                assert!((poly.mean() - c).abs() < 1e-9);
                assert!(poly.terms().all(|(t, v)| t.weight() == 0 || v.abs() < 1e-9));
            }
        }
    }

    #[test]
    fn composed_identity_projection_plumbing() {
        let psi = BipartiteState::noisy_mes(2, 0.2).unwrap();
        let corr = aligned_bases(&psi).unwrap();
        let j = random_pair(&corr, 3, 1, 4);
        let scale = 1e3;
        let m = nalgebra::DMatrix::<f64>::identity(3, 3) * scale;
        let c = ComposedRandomOperator::new(j.p.clone(), m, true).unwrap();
        let x = [0.3, -1.2, 0.7];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y: Vec<f64> = x.iter().map(|v| v / norm * scale).collect();
        let got = c.transform(&x);
        for (a, b) in got.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn dim_reduce_gate_passes_on_most_seeds() {
        let psi = BipartiteState::noisy_mes(2, 0.2).unwrap();
        let corr = aligned_bases(&psi).unwrap();
        let gates = DimReduceGates {
            max_retries: 1,
            ..Default::default()
        };
        let mut passes = 0;
        for seed in 0..10 {
            let j = random_pair(&corr, 6, 1, 200 + seed);
            match dim_reduce(&j, &corr, 20, seed, &gates, 20_000) {
                Ok(_) => passes += 1,
                Err(Error::Stochastic { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
        assert!(passes >= 7, "{passes} of 10");
    }

    #[test]
    fn smooth_random_examples() {
        let basis = pauli();
        let rep = FourierRep::from_coeffs(basis.clone(), 1, [(idx(&[0]), 0.5), (idx(&[3]), 0.5)]).unwrap();
        let c = RandomOperator::constant(&rep, 3);
        assert_eq!(smooth_random(&c, 0.3, 2).unwrap(), c);
        let mut coeffs = BTreeMap::new();
        coeffs.insert(idx(&[1]), HermitePoly::monomial(3, idx(&[1, 1, 1]), 1.0));
        let high = RandomOperator::new(basis.clone(), 1, 3, coeffs).unwrap();
        assert!(smooth_random(&high, 0.1, 2).unwrap().coeffs().is_empty());
        let r = random_multilinear(&basis, 1, 3, 3, &mut rng_for(5, 0)).unwrap();
        let s = smooth_random(&r, 0.2, 2).unwrap();
        assert!(n2(&s) <= n2(&r) + 1e-12);
        assert!(s.degree() <= 2);
    }

    #[test]
    fn multilinearize_linear_and_quadratic() {
        let g = HermitePoly::variable(1, 0);
        let out = multilinearize_poly(&g, 4).unwrap();
        assert_eq!(out.num_terms(), 4);
        for j in 0..4 {
            assert!((out.coeff(&MultiIndex::new((0..4).map(|k| u16::from(k == j)).collect())) - 0.5).abs() < 1e-15);
        }
        let c = HermitePoly::constant(2, 0.7);
        let out = multilinearize_poly(&c, 3).unwrap();
        assert_eq!(out.num_terms(), 1);
        assert_eq!(out.mean(), 0.7);

        // H₂((Σ x_j)/3) = ((Σx_j)²/9 − 1)/√2 has multilinear part (√2/9)Σ_{j<k} x_j x_k.
        let h2 = HermitePoly::monomial(1, idx(&[2]), 1.0);
        let out = multilinearize_poly(&h2, 9).unwrap();
        assert_eq!(out.num_terms(), 36);
        for (tau, c) in out.terms() {
            assert_eq!(tau.weight(), 2);
            assert!((c - 2f64.sqrt() / 9.0).abs() < 1e-14);
        }
        for j in 0..9 {
            let inf = out.influence(j);
            assert!((inf - 16.0 / 81.0).abs() < 1e-14);
            assert!(inf <= 2.0 / 9.0 * h2.influence(0));
        }
        assert!(out.norm_sq() <= h2.norm_sq());
    }

    fn run_ok(alice: &[Vec<HermitianOp>], bob: &[Vec<HermitianOp>], params: &PipelineParams) -> PipelineOutput {
        let psi = BipartiteState::noisy_mes(2, 0.2).unwrap();
        run_pipeline(alice, bob, &psi, params, None).unwrap()
    }

    fn assert_sub_povms(out: &PipelineOutput) {
        for fam in out.alice.iter().chain(&out.bob) {
            let n = fam.outcomes[0].num_vars();
            let blocks = fam.block_count().unwrap();
            for b in 0..blocks.min(256) {
                let k: Vec<usize> = (0..n).map(|i| ((b >> i) & 1) as usize).collect();
                let sub = fam.rounded_block(&k).unwrap();
                assert_eq!(sub.len(), fam.outcomes.len());
            }
        }
    }

    #[test]
    fn identity_family_is_fixed() {
        let id = vec![vec![HermitianOp::identity(2, 1)]];
        let out = run_ok(&id, &id, &desk(1, 1, 1, 4096));
        assert_eq!(out.reports.len(), STAGES.len());
        for r in &out.reports {
            for d in &r.drift {
                assert!(d.value.abs() <= 1e-6, "{}: {}", r.stage, d.value);
            }
        }
        let fam = &out.alice[0];
        let n = fam.outcomes[0].num_vars();
        let block = fam.rounded_block(&vec![0; n]).unwrap();
        let d = block.dim();
        assert_eq!(d, 2usize.pow(out.h_set.len() as u32));
        let dev = crate::matspace::max_abs_entry(&(block.elements()[0].matrix() - MatrixC::identity(d, d)));
        assert!(dev < 1e-8);
    }

    #[test]
    fn computational_basis_run() {
        let fam = vec![computational()];
        let params = desk(1, 1, 2, 20_000);
        let out = run_ok(&fam, &fam, &params);
        assert_eq!(out.alice[0].registers(), out.h_set.len() + params.n0 * params.n1);
        assert_sub_povms(&out);
        let names: Vec<&str> = out.reports.iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(names, STAGES);
        assert!(!total_drift(&out.reports).is_empty());
        assert!(report_rows(&out.reports).iter().all(|c| c.value.is_finite()));
    }

    #[test]
    fn duplicate_families_and_seed_determinism() {
        let fam = vec![computational(), computational()];
        let bob = vec![computational()];
        let params = desk(2, 1, 2, 8192);
        let one = run_ok(&fam, &bob, &params);
        assert_eq!(
            serde_json::to_string(&one.alice[0].to_json()).unwrap(),
            serde_json::to_string(&one.alice[1].to_json()).unwrap()
        );
        let two = run_ok(&fam, &bob, &params);
        assert_eq!(
            serde_json::to_string(&one.families_json()).unwrap(),
            serde_json::to_string(&two.families_json()).unwrap()
        );
        let strip = |o: &PipelineOutput| -> Vec<StageReport> { o.reports.iter().map(StageReport::without_timing).collect() };
        assert_eq!(strip(&one), strip(&two));
    }

    #[test]
    fn rejects_non_povm_input() {
        let half = vec![vec![HermitianOp::from_real_diag(&[0.5, 0.5])]];
        let psi = BipartiteState::noisy_mes(2, 0.2).unwrap();
        assert!(run_pipeline(&half, &half, &psi, &desk(1, 1, 1, 4096), None).is_err());
    }

    #[test]
    fn csv_rows_round_trip() {
        let rows = vec![
            Check::info("a,b", Estimate { mean: 0.1, std_error: 0.0 }),
            Check::upper("gate", Estimate { mean: 1.0 / 3.0, std_error: 1e-3 }, 0.5),
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("quantity,value,std_error,gate,pass\r\n\"a,b\","));
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let recs: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(recs[1][1].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(&recs[1][4], "true");
        assert_eq!(&recs[0][3], "");
    }

    #[test]
    fn stage_seeds_differ_by_tag() {
        let seeds: BTreeSet<u64> = (0..16).map(|t| stage_seed(42, t)).collect();
        assert_eq!(seeds.len(), 16);
        assert_eq!(stage_seed(42, 3), stage_seed(42, 3));
    }
}
