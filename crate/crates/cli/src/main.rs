//! `drl`: validate configs, plan, run experiments and check bounds.
//!
//! Exit codes: 0 success, 1 semantic failure (not sane, unstable limits,
//! violated invariant or bound), 2 usage, parse or I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use drl_core::advisor::check_epsilon_sane_at;
use drl_core::agent::AgentParams;
use drl_core::harness::{
    check_regret_identity, estimate_regret, report_csv, resolve_parameters, sweep_with, ExperimentConfig, Harness,
    OutputPaths, PolicyKind, RunManifest, Setting, SweepReport,
};
use drl_core::infogain::{delegation_info_floor, sweep_delegation_information, sweep_thompson};
use drl_core::mdp::{validate_advisor, validate_mdp, HypothesisSet};
use drl_core::planner::{limit_quantities, solve_discounted, LimitSolution, PlanningSolution};
use drl_core::{fixtures, DrlError};

#[derive(Parser, Debug)]
#[command(name = "drl", version, about = "Delegative reinforcement learning laboratory")]
struct Cli {
    /// Worker threads for rollouts (default: available parallelism). Results
    /// do not depend on this.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check that every MDP is well formed and every advisor is ε-sane.
    Validate { config: PathBuf },
    /// Discounted and limit solutions for each hypothesis, as JSON.
    Plan {
        config: PathBuf,
        /// Discount (default: the config's first gamma).
        #[arg(long, value_parser = parse_gamma)]
        gamma: Option<f64>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regret experiment at a single γ.
    Run {
        config: PathBuf,
        /// Discount (default: the config's first gamma).
        #[arg(long, value_parser = parse_gamma)]
        gamma: Option<f64>,
        #[command(flatten)]
        exp: ExperimentFlags,
    },
    /// Regret experiment over a list of γ.
    Sweep {
        config: PathBuf,
        /// Comma-separated discounts (default: the config's list).
        #[arg(long, value_delimiter = ',', value_parser = parse_gamma)]
        gammas: Option<Vec<f64>>,
        #[command(flatten)]
        exp: ExperimentFlags,
    },
    /// Information-inequality sweeps, regret decomposition and the
    /// delegation-count bound.
    CheckBounds {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Admissible random instances per inequality sweep.
        #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
        instances: u64,
        /// Rollouts per hypothesis for the delegation-count check.
        #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(2..))]
        rollouts: u64,
    },
}

#[derive(Args, Debug)]
struct ExperimentFlags {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    rollouts: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for results.csv, summary.json and manifest.json.
    #[arg(long, default_value = "drl-out")]
    out: PathBuf,
    /// Discard threshold (overrides the config; "auto" derives it).
    #[arg(long, value_parser = parse_eta)]
    eta: Option<Setting<f64>>,
    /// Episode length (overrides the config; "auto" derives it).
    #[arg(long = "T", value_parser = parse_episode_len)]
    episode_len: Option<Setting<usize>>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Agent,
    Oracle,
    AlwaysDelegate,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Agent => PolicyKind::Agent,
            PolicyArg::Oracle => PolicyKind::Oracle,
            PolicyArg::AlwaysDelegate => PolicyKind::AlwaysDelegate,
        }
    }
}

fn parse_gamma(s: &str) -> Result<f64, String> {
    let g: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if g > 0.0 && g < 1.0 {
        Ok(g)
    } else {
        Err(format!("gamma = {g} is not in (0,1)"))
    }
}

fn parse_eta(s: &str) -> Result<Setting<f64>, String> {
    if s == "auto" {
        return Ok(Setting::default());
    }
    let eta: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&eta) {
        Ok(Setting::Fixed(eta))
    } else {
        Err(format!("eta = {eta} is not in [0,1)"))
    }
}

fn parse_episode_len(s: &str) -> Result<Setting<usize>, String> {
    if s == "auto" {
        return Ok(Setting::default());
    }
    match s.parse::<usize>() {
        Ok(0) => Err("T must be at least 1".into()),
        Ok(t) => Ok(Setting::Fixed(t)),
        Err(e) => Err(format!("{e}")),
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn semantic(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

impl From<DrlError> for Failure {
    fn from(e: DrlError) -> Self {
        let code = match e {
            DrlError::InvalidArgument(_) | DrlError::Json(_) | DrlError::Io(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(usage)?;
    ExperimentConfig::from_json_str(&text)
        .with_context(|| format!("cannot parse config {}", path.display()))
        .map_err(usage)
}

/// Writes through a sibling temporary file and a rename.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(usage)?;
    let name = path.file_name().ok_or_else(|| usage(anyhow!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents)
        .and_then(|_| fs::rename(&tmp, path))
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(usage)
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text.into_bytes()
}

fn cmd_validate(path: &Path) -> CmdResult {
    let cfg = load_config(path)?;
    let (mdps, advisors) = cfg.hypotheses.parts(cfg.epsilon)?;
    let mut problems = 0;
    if mdps.len() != advisors.len() {
        println!("{} MDPs but {} advisors", mdps.len(), advisors.len());
        problems += 1;
    }
    for (k, (m, ad)) in mdps.iter().zip(&advisors).enumerate() {
        let mut report = validate_mdp(m);
        report.extend(validate_advisor(ad, m.n_states, m.n_actions));
        if !report.is_ok() {
            problems += report.violations.len();
            for v in &report.violations {
                println!("hypothesis {k}: {v}");
            }
            continue;
        }
        match limit_quantities(m) {
            Err(e) => {
                problems += 1;
                println!("hypothesis {k}: {e}");
            }
            Ok(lim) => {
                let cert = check_epsilon_sane_at(m, ad, &lim, cfg.epsilon);
                for v in &cert.violations {
                    println!("hypothesis {k}: not {}-sane: {v}", cfg.epsilon);
                }
                problems += cert.violations.len();
                if cert.is_sane {
                    println!("hypothesis {k}: ok");
                }
            }
        }
    }
    if problems == 0 {
        if let Err(e) = HypothesisSet::from_parts(mdps, advisors) {
            println!("{e}");
            problems += 1;
        }
    }
    if problems == 0 {
        println!("valid: every MDP is well formed and every advisor is {}-sane", cfg.epsilon);
        Ok(())
    } else {
        Err(semantic(anyhow!("{problems} problem(s) found")))
    }
}

#[derive(Serialize)]
struct PlanEntry {
    k: usize,
    planning: PlanningSolution,
    limits: LimitSolution,
}

fn cmd_plan(path: &Path, gamma: Option<f64>, out: Option<&Path>) -> CmdResult {
    let cfg = load_config(path)?;
    let gamma = match gamma.or_else(|| cfg.gammas.first().copied()) {
        Some(g) if g > 0.0 && g < 1.0 => g,
        Some(g) => return Err(usage(anyhow!("gamma = {g} is not in (0,1)"))),
        None => return Err(usage(anyhow!("no gamma given and the config lists none"))),
    };
    let hyps = cfg.hypotheses.resolve(cfg.epsilon)?;
    let mut entries = Vec::with_capacity(hyps.len());
    for k in 0..hyps.len() {
        let m = hyps.mdp(k);
        let planning = solve_discounted(&m, gamma)?;
        let limits = limit_quantities(&m).map_err(|e| semantic(anyhow!("hypothesis {k}: {e}")))?;
        entries.push(PlanEntry { k, planning, limits });
    }
    let json = to_json(&entries);
    match out {
        Some(p) => write_atomic(p, &json),
        None => {
            print!("{}", String::from_utf8(json).expect("utf-8"));
            Ok(())
        }
    }
}

fn apply_flags(cfg: &mut ExperimentConfig, exp: &ExperimentFlags) {
    if let Some(r) = exp.rollouts {
        cfg.rollouts = r as usize;
    }
    if let Some(s) = exp.seed {
        cfg.seed = s;
    }
    if let Some(e) = exp.eta {
        cfg.eta = e;
    }
    if let Some(t) = exp.episode_len {
        cfg.episode_len = t;
    }
    if let Some(p) = exp.policy {
        cfg.policy = p.into();
    }
}

fn cmd_experiment(mut cfg: ExperimentConfig, exp: &ExperimentFlags) -> CmdResult {
    apply_flags(&mut cfg, exp);
    cfg.validate()?;
    let h = Harness::from_config(&cfg)?;
    let report = sweep_with(&h, &cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }

    let csv = report_csv(&report)?;
    let outputs = OutputPaths {
        csv: exp.out.join("results.csv").display().to_string(),
        summary: exp.out.join("summary.json").display().to_string(),
        manifest: exp.out.join("manifest.json").display().to_string(),
    };
    write_atomic(Path::new(&outputs.csv), csv.as_bytes())?;
    write_atomic(Path::new(&outputs.summary), &to_json(&report))?;
    let manifest = RunManifest::new(&cfg, &report, outputs.clone());
    write_atomic(Path::new(&outputs.manifest), &to_json(&manifest))?;
    info!("wrote {}, {}, {}", outputs.csv, outputs.summary, outputs.manifest);

    check_invariants(&h, &cfg, &report)?;
    print_table(&report);
    Ok(())
}

/// Safety counter and a rerun of the first cell.
fn check_invariants(h: &Harness, cfg: &ExperimentConfig, report: &SweepReport) -> CmdResult {
    if cfg.policy == PolicyKind::Agent {
        let unsafe_total: u64 = report.cells.iter().map(|c| c.unsafe_actions).sum();
        if unsafe_total > 0 {
            return Err(semantic(anyhow!(
                "safety invariant violated: {unsafe_total} unsafe direct actions on rollouts where the true hypothesis survived"
            )));
        }
    }
    let first = &report.cells[0];
    let entry = resolve_parameters(cfg, &h.hyps, first.gamma)?;
    let params = AgentParams::new(entry.eta, entry.episode_len, cfg.epsilon, first.gamma)?;
    let again = estimate_regret(h, first.true_k, first.gamma_index, first.gamma, params, cfg.rollouts, cfg.seed)?;
    let mut again = again;
    again.warnings = first.warnings.clone();
    if &again != first {
        return Err(semantic(anyhow!("determinism self-check failed: rerunning the first cell changed it")));
    }
    Ok(())
}

fn print_table(report: &SweepReport) {
    println!(
        "{:>10} {:>6} {:>9} {:>5} {:>10} {:>10} {:>10} {:>8}",
        "gamma", "k", "eta", "T", "regret", "ci", "nd_mean", "unsafe"
    );
    for c in &report.cells {
        println!(
            "{:>10.6} {:>6} {:>9.5} {:>5} {:>10.3e} {:>10.2e} {:>10.3} {:>8}",
            c.gamma, c.true_k, c.eta, c.episode_len, c.regret, c.regret_ci, c.nd_mean, c.unsafe_actions
        );
    }
}

fn cmd_check_bounds(seed: u64, instances: usize, rollouts: usize) -> CmdResult {
    let mut all = true;
    let mut line = |name: &str, pass: bool, detail: String| {
        all &= pass;
        println!("{name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = sweep_delegation_information(&mut rng, instances);
    line(
        "delegation information inequality",
        d.violations == 0,
        format!("{} admissible of {}, {} violations", d.admissible, d.instances, d.violations),
    );
    let t = sweep_thompson(&mut rng, instances);
    line(
        "posterior sampling information inequality",
        t.violations == 0,
        format!("{} admissible of {}, {} violations", t.admissible, t.instances, t.violations),
    );

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = fixtures::random_mdp(&mut rng, 3, 2);
        let pi = fixtures::random_policy(&mut rng, 3, 2);
        let r = check_regret_identity(&m, &pi, 0.9, 200)?;
        worst = worst.max(r.residual / r.tail_bound);
    }
    line(
        "regret decomposition",
        worst <= 1.0,
        format!("worst residual / (2 gamma^H) = {worst:.3} on 20 random MDPs"),
    );

    let eps = 0.2;
    let eta = 0.1;
    let gamma = 0.99;
    let h = Harness::new(fixtures::three_door(eps, 0.5)?, eps, PolicyKind::Agent, 1e-3)?;
    let params = AgentParams::new(eta, 5, eps, gamma)?;
    let mut nd = Vec::new();
    for k in 0..h.hyps.len() {
        nd.extend(estimate_regret(&h, k, 0, gamma, params, rollouts, seed)?.nd);
    }
    let n = nd.len() as f64;
    let mean = nd.iter().sum::<u64>() as f64 / n;
    let sd = (nd.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let bound = (h.hyps.len() as f64).ln() / (eta * delegation_info_floor(eps));
    line(
        "delegation count bound",
        mean <= bound + 4.0 * sd / n.sqrt(),
        format!("three-door, eta = {eta}: mean ND {mean:.3} vs bound {bound:.3}"),
    );

    if all {
        Ok(())
    } else {
        Err(semantic(anyhow!("at least one check failed")))
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Plan { config, gamma, out } => cmd_plan(&config, gamma, out.as_deref()),
        Command::Run { config, gamma, exp } => {
            let mut cfg = load_config(&config)?;
            let gamma = gamma
                .or_else(|| cfg.gammas.first().copied())
                .ok_or_else(|| usage(anyhow!("no gamma given and the config lists none")))?;
            cfg.gammas = vec![gamma];
            cmd_experiment(cfg, &exp)
        }
        Command::Sweep { config, gammas, exp } => {
            let mut cfg = load_config(&config)?;
            if let Some(g) = gammas {
                cfg.gammas = g;
            }
            cmd_experiment(cfg, &exp)
        }
        Command::CheckBounds {
            seed,
            instances,
            rollouts,
        } => cmd_check_bounds(seed, instances as usize, rollouts as usize),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DRL_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j as usize).build_global() {
            warn!("could not size the thread pool: {e}");
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
