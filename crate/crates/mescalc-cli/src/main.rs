//! `mescalc`: runs the library's experiments and writes machine-readable
//! results.
//!
//! Exit codes: 0 success, 1 numeric failure, 2 bad flags or input files,
//! 3 a stochastic gate failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use mescalc::channels::{aligned_bases, hypercontractivity_search, max_correlation, BipartiteState};
use mescalc::fourier::{influences, StandardBasis};
use mescalc::games::{chsh, classical_value, eval_strategy, seesaw_restarts, Game, Strategy};
use mescalc::gaussian::{rng_for, Estimate};
use mescalc::matspace::{matrix_from_entries, HermitianOp};
use mescalc::pipeline::{format_float, report_rows, run_pipeline, total_drift, write_csv, Check, PipelineParams, StageReport};
use mescalc::randop::{hybrid_gaps, random_traceless_rep};
use mescalc::Error;

#[derive(Parser)]
#[command(name = "mescalc", version, about = "Noisy-MES invariance and nonlocal game experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Args)]
struct Output {
    /// File to write; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Maximal correlation and singular values of a shared state.
    #[command(group(ArgGroup::new("source").required(true).args(["epsilon", "state_file"])))]
    Maxcorr {
        #[arg(long, default_value_t = 2)]
        m: usize,
        /// Noise of `noisy_mes(m, ε)`.
        #[arg(long)]
        epsilon: Option<f64>,
        /// JSON list of row-major `[re, im]` density matrix entries.
        #[arg(long)]
        state_file: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Searches for violations of `‖Δ_ρ^{⊗n}‖_{2→4} ≤ 1`.
    Hypertest {
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        n: usize,
        /// Noise rate; defaults to the threshold `1/√(3√m)`.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 200)]
        refine_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Hybrid gaps of random operators across a sweep of influence levels.
    InvarianceDemo {
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        degree: usize,
        /// Comma-separated largest-influence levels.
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.25,0.1,0.05")]
        tau_sweep: Vec<f64>,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Runs the strategy transformation pipeline from a JSON config.
    PipelineRun {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: Output,
    },
    /// Evaluates a strategy or searches one by see-saw.
    #[command(group(ArgGroup::new("mode").required(true).args(["strategy", "seesaw"])))]
    GameEval {
        /// `chsh` or a game JSON file.
        #[arg(long, default_value = "chsh")]
        game: String,
        /// Strategy JSON file.
        #[arg(long)]
        strategy: Option<PathBuf>,
        #[arg(long)]
        seesaw: bool,
        /// `mes`, `noisy-mes:<eps>`, `product` or a state JSON file.
        #[arg(long, default_value = "mes")]
        state: String,
        /// Local dimension for named states.
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long, default_value_t = 50)]
        iterations: usize,
        #[arg(long, default_value_t = 4)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Argument(_) | Error::Json(_) | Error::Io(_) => 2,
            Error::Stochastic { .. } => 3,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::usage(e.to_string())
    }
}

/// What a subcommand produced.
struct Outcome {
    /// `key=value` lines for standard output.
    summary: Vec<String>,
    rows: Vec<Check>,
    json: Value,
    gates_passed: bool,
}

fn short(v: f64) -> String {
    let r: f64 = format!("{v:.12e}").parse().unwrap_or(v);
    if r == 0.0 {
        "0".into()
    } else {
        r.to_string()
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn state_from_entries(entries: &[[f64; 2]]) -> Result<BipartiteState, Failure> {
    let mat = matrix_from_entries(entries)?;
    let d = mat.nrows();
    let m = (d as f64).sqrt().round() as usize;
    if m * m != d {
        return Err(Failure::usage(format!("state dimension {d} is not a square")));
    }
    Ok(BipartiteState::new(m, m, mat)?)
}

fn parse_state(spec: &str, m: usize) -> Result<BipartiteState, Failure> {
    match spec {
        "mes" => Ok(BipartiteState::mes(m)?),
        "product" => Ok(BipartiteState::product(m, m)?),
        _ => {
            if let Some(eps) = spec.strip_prefix("noisy-mes:") {
                let eps: f64 = eps
                    .parse()
                    .map_err(|_| Failure::usage(format!("invalid noise level in {spec:?}")))?;
                return Ok(BipartiteState::noisy_mes(m, eps)?);
            }
            let path = Path::new(spec);
            if !path.exists() {
                return Err(Failure::usage(format!("unknown state {spec:?}")));
            }
            let entries: Vec<[f64; 2]> = serde_json::from_str(&read(path)?)?;
            state_from_entries(&entries)
        }
    }
}

fn maxcorr(m: usize, epsilon: Option<f64>, state_file: Option<&Path>) -> Result<Outcome, Failure> {
    let psi = match (epsilon, state_file) {
        (Some(eps), _) => BipartiteState::noisy_mes(m, eps)?,
        (None, Some(p)) => {
            let entries: Vec<[f64; 2]> = serde_json::from_str(&read(p)?)?;
            state_from_entries(&entries)?
        }
        (None, None) => return Err(Failure::usage("either --epsilon or --state-file is required")),
    };
    let rho = max_correlation(&psi)?;
    let c = aligned_bases(&psi)?.c();
    let mut rows = vec![Check::info("rho", Estimate::exact(rho))];
    rows.extend(c.iter().enumerate().map(|(i, v)| Check::info(format!("c_{i}"), Estimate::exact(*v))));
    Ok(Outcome {
        summary: vec![format!("rho={}", short(rho))],
        rows,
        json: json!({ "m_a": psi.m_a(), "m_b": psi.m_b(), "rho": rho, "singular_values": c }),
        gates_passed: true,
    })
}

fn hypertest(m: usize, n: usize, rho: Option<f64>, trials: usize, refine_steps: usize, seed: u64) -> Result<Outcome, Failure> {
    let threshold = 1.0 / (3.0 * (m as f64).sqrt()).sqrt();
    let rho = rho.unwrap_or(threshold);
    let r = hypercontractivity_search(m, n, rho, trials, refine_steps, seed)?;
    let gate = Check::upper("ratio", Estimate::exact(r.ratio()), 1.0 + 1e-9);
    let pass = gate.pass == Some(true);
    let rows = vec![
        Check::info("rho", Estimate::exact(rho)),
        Check::info("threshold", Estimate::exact(threshold)),
        Check::info("below_threshold", Estimate::exact(f64::from(u8::from(rho <= threshold)))),
        Check::info("best_sampled", Estimate::exact(r.best_sampled)),
        Check::info("best_refined", Estimate::exact(r.best_refined)),
        gate,
    ];
    Ok(Outcome {
        summary: vec![format!("ratio={}", short(r.ratio())), format!("pass={pass}")],
        rows,
        json: json!({ "report": r, "pass": pass }),
        gates_passed: pass,
    })
}

fn invariance_demo(m: usize, n: usize, degree: usize, taus: &[f64], samples: usize, seed: u64) -> Result<Outcome, Failure> {
    if taus.is_empty() {
        return Err(Failure::usage("--tau-sweep needs at least one value"));
    }
    let basis = StandardBasis::gell_mann(m)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut sweep = Vec::new();
    for (k, &tau) in taus.iter().enumerate() {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Failure::usage(format!("τ values must be positive, got {tau}")));
        }
        let rep = random_traceless_rep(&basis, n, degree, tau, &mut rng_for(seed, k as u64))?;
        let gaps = hybrid_gaps(&rep, samples, seed.wrapping_add(k as u64 + 1))?;
        let max_inf = influences(&rep).into_iter().fold(0.0, f64::max);
        let total = Estimate {
            mean: gaps.iter().map(|g| g.gap.mean.abs()).sum(),
            std_error: gaps.iter().map(|g| g.gap.std_error.powi(2)).sum::<f64>().sqrt(),
        };
        rows.push(Check::info(format!("tau{k}/tau"), Estimate::exact(tau)));
        rows.push(Check::info(format!("tau{k}/max_influence"), Estimate::exact(max_inf)));
        for g in &gaps {
            rows.push(Check::info(format!("tau{k}/level{}", g.k), g.level));
            rows.push(Check::info(format!("tau{k}/gap{}", g.k), g.gap));
        }
        rows.push(Check::info(format!("tau{k}/total_abs_gap"), total));
        summary.push(format!("tau={} total_abs_gap={}", short(tau), short(total.mean)));
        sweep.push(json!({ "tau": tau, "max_influence": max_inf, "gaps": gaps, "total_abs_gap": total }));
    }
    Ok(Outcome {
        summary,
        rows,
        json: json!({ "m": m, "n": n, "degree": degree, "samples": samples, "sweep": sweep }),
        gates_passed: true,
    })
}

type OperatorList = Vec<Vec<Vec<[f64; 2]>>>;

#[derive(Deserialize)]
#[serde(untagged)]
enum GameSpec {
    Named(String),
    Inline(Game),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineConfig {
    params: PipelineParams,
    /// `mes`, `noisy-mes:<eps>`, `product` or row-major entries.
    state: Value,
    alice: OperatorList,
    bob: OperatorList,
    #[serde(default)]
    game: Option<GameSpec>,
}

fn load_game(spec: &str) -> Result<Game, Failure> {
    if spec == "chsh" {
        return Ok(chsh());
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Failure::usage(format!("unknown game {spec:?}")));
    }
    Ok(serde_json::from_str(&read(path)?)?)
}

fn families(list: OperatorList, m: usize) -> Result<Vec<Vec<HermitianOp>>, Failure> {
    list.into_iter()
        .map(|fam| {
            fam.into_iter()
                .map(|e| {
                    let mat = matrix_from_entries(&e)?;
                    let mut n = 0;
                    let mut d = 1;
                    while d < mat.nrows() {
                        d *= m;
                        n += 1;
                    }
                    if d != mat.nrows() {
                        return Err(Failure::usage(format!("operator dimension {} is not a power of {m}", mat.nrows())));
                    }
                    Ok(HermitianOp::new(mat, m, n)?)
                })
                .collect()
        })
        .collect()
}

fn pipeline_run(config: &Path, seed: Option<u64>) -> Result<Outcome, Failure> {
    let cfg: PipelineConfig = serde_json::from_str(&read(config)?)?;
    let mut params = cfg.params;
    if let Some(s) = seed {
        params.seed = s;
    }
    let psi = match &cfg.state {
        Value::String(s) => parse_state(s, params.m)?,
        other => {
            let entries: Vec<[f64; 2]> = serde_json::from_value(other.clone())?;
            state_from_entries(&entries)?
        }
    };
    let alice = families(cfg.alice, psi.m_a())?;
    let bob = families(cfg.bob, psi.m_b())?;
    let game = match cfg.game {
        None => None,
        Some(GameSpec::Named(name)) => Some(load_game(&name)?),
        Some(GameSpec::Inline(g)) => Some(g),
    };
    let weights = game.as_ref().map(Game::corr_weights);
    let out = match run_pipeline(&alice, &bob, &psi, &params, weights.as_deref()) {
        Ok(o) => o,
        Err(Error::Stochastic { attempts, measurements }) => {
            eprintln!("stochastic gate failed after {attempts} attempts: {measurements}");
            return Err(Failure {
                code: 3,
                message: "stochastic gate failure".into(),
            });
        }
        Err(e) => return Err(e.into()),
    };
    let reports: Vec<StageReport> = out.reports.iter().map(StageReport::without_timing).collect();
    let drift = total_drift(&reports);
    let max_drift = drift.iter().map(|d| d.value.abs()).fold(0.0, f64::max);
    let mut rows = report_rows(&reports);
    for d in &drift {
        rows.push(Check::info(
            format!("total_drift/u{}/v{}/i{}/j{}", d.u, d.v, d.i, d.j),
            Estimate {
                mean: d.value,
                std_error: d.std_error,
            },
        ));
    }
    rows.push(Check::info("max_abs_total_drift", Estimate::exact(max_drift)));
    let passed = out.passed();
    let objective = |r: Option<&StageReport>| r.and_then(|r| r.objective);
    let mut summary = vec![
        format!("stages={}", reports.len()),
        format!("max_abs_total_drift={}", short(max_drift)),
    ];
    if let (Some(a), Some(b)) = (objective(reports.first()), objective(reports.last())) {
        summary.push(format!("objective_before={}", short(a.mean)));
        summary.push(format!("objective_after={}", short(b.mean)));
    }
    summary.push(format!("passed={passed}"));
    Ok(Outcome {
        summary,
        rows,
        json: json!({
            "params": params,
            "reports": reports,
            "total_drift": drift,
            "max_abs_total_drift": max_drift,
            "families": out.families_json(),
            "passed": passed,
        }),
        gates_passed: passed,
    })
}

#[allow(clippy::too_many_arguments)]
fn game_eval(
    game: &str,
    strategy: Option<&Path>,
    seesaw: bool,
    state: &str,
    m: usize,
    copies: usize,
    iterations: usize,
    restarts: usize,
    seed: u64,
) -> Result<Outcome, Failure> {
    let g = load_game(game)?;
    let psi = parse_state(state, m)?;
    let mut rows = Vec::new();
    let (value, extra) = match (strategy, seesaw) {
        (Some(path), false) => {
            let s = Strategy::from_json(&read(path)?, psi.m_a(), psi.m_b())?;
            let v = eval_strategy(&g, &s, &psi)?;
            (v, json!({ "copies": s.copies }))
        }
        (None, true) => {
            let r = seesaw_restarts(&g, &psi, copies, iterations, seed, restarts)?;
            for (k, v) in r.trace.iter().enumerate() {
                rows.push(Check::info(format!("trace/{k}"), Estimate::exact(*v)));
            }
            (r.value(), json!({ "copies": copies, "trace": r.trace, "strategy": r.strategy.to_json() }))
        }
        _ => return Err(Failure::usage("exactly one of --strategy and --seesaw is required")),
    };
    rows.insert(0, Check::info("value", Estimate::exact(value)));
    let classical = classical_value(&g).ok();
    if let Some(c) = classical {
        rows.insert(1, Check::info("classical_value", Estimate::exact(c)));
    }
    Ok(Outcome {
        summary: vec![format!("value={}", short(value))],
        rows,
        json: json!({ "value": value, "classical_value": classical, "details": extra }),
        gates_passed: true,
    })
}

fn render(outcome: &Outcome, format: Format) -> Result<Vec<u8>, Failure> {
    match format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_csv(&outcome.rows, &mut buf)?;
            Ok(buf)
        }
        Format::Json => {
            let mut text = serde_json::to_string_pretty(&outcome.json)?;
            text.push('\n');
            Ok(text.into_bytes())
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let start = Instant::now();
    let (outcome, output) = match cli.command {
        Command::Maxcorr {
            m,
            epsilon,
            state_file,
            output,
        } => (maxcorr(m, epsilon, state_file.as_deref())?, output),
        Command::Hypertest {
            m,
            n,
            rho,
            trials,
            refine_steps,
            seed,
            output,
        } => (hypertest(m, n, rho, trials, refine_steps, seed)?, output),
        Command::InvarianceDemo {
            m,
            n,
            degree,
            tau_sweep,
            samples,
            seed,
            output,
        } => (invariance_demo(m, n, degree, &tau_sweep, samples, seed)?, output),
        Command::PipelineRun { config, seed, output } => (pipeline_run(&config, seed)?, output),
        Command::GameEval {
            game,
            strategy,
            seesaw,
            state,
            m,
            copies,
            iterations,
            restarts,
            seed,
            output,
        } => (
            game_eval(&game, strategy.as_deref(), seesaw, &state, m, copies, iterations, restarts, seed)?,
            output,
        ),
    };
    for line in &outcome.summary {
        println!("{line}");
    }
    let bytes = render(&outcome, output.format)?;
    match &output.out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    eprintln!("elapsed_seconds={}", format_float(start.elapsed().as_secs_f64()));
    Ok(if outcome.gates_passed { 0 } else { 3 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
