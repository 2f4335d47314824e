#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use drmech::audit::{audit, AuditConfig};
use drmech::bounds::{self, PopulationStats};
use drmech::caiso;
use drmech::dist::Dist;
use drmech::harness::{self, ExperimentConfig, Mechanism, DEFAULT_SEED};
use drmech::{MarketParams, MechError};

/// Demand-response mechanism lab.
///
/// Exit codes: 0 ok, 1 audit found a profitable deviation, 2 invalid
/// configuration, 3 infeasible (recruitment shortfall or a structure that
/// cannot be priced). The seed is taken from --seed, then DRMECH_SEED, then
/// the config file, then 42.
#[derive(Parser)]
#[command(name = "drmech", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment or sweep and write one CSV row per point.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the config's replication count.
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Print the closed-form cost bounds.
    Bounds(BoundsArgs),
    /// Check that truth-telling is a grid best response for every agent.
    Audit {
        /// Audit config (JSON); Example-1 defaults when omitted.
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_mechanism)]
        mechanism: Option<Mechanism>,
        /// Agents per population.
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        populations: Option<usize>,
        /// Grid steps.
        #[arg(long)]
        grid: Option<usize>,
        /// Baseline-only selection probability override.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare CAISO 10/10 payment inflation with SRBM on one population.
    Caiso {
        /// Experiment config (JSON); Example-1 defaults when omitted.
        config: Option<PathBuf>,
        /// Adjustment cap of the 10/10 baseline.
        #[arg(long, default_value_t = 0.2)]
        cap: f64,
        #[arg(long, default_value_t = 20)]
        grid: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-agent CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long = "pi-e", default_value_t = 0.15)]
    pi_e: f64,
    #[arg(long = "pi-o", default_value_t = 2.0)]
    pi_o: f64,
    #[arg(long = "pi-max", default_value_t = 1.3)]
    pi_max: f64,
    #[arg(long, default_value_t = 100.0)]
    target: f64,
    #[arg(long, default_value_t = 10)]
    events: u32,
    /// E[b] in kWh.
    #[arg(long = "e-b", default_value_t = 5.0)]
    e_b: f64,
    /// Marginal utilities are uniform on [pi-lo, pi-hi].
    #[arg(long = "pi-lo", default_value_t = 0.3)]
    pi_lo: f64,
    #[arg(long = "pi-hi", default_value_t = 1.3)]
    pi_hi: f64,
    #[arg(long)]
    json: bool,
}

fn parse_mechanism(s: &str) -> Result<Mechanism, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown mechanism `{s}` (expected baseline_only, srbm_pi or srbm_ci)"))
}

fn exit_code(e: &MechError) -> u8 {
    match e {
        MechError::InvalidParam { .. } => 2,
        _ => 3,
    }
}

fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, MechError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var("DRMECH_SEED") {
        return v
            .trim()
            .parse()
            .map_err(|_| MechError::InvalidParam {
                field: "DRMECH_SEED",
                reason: format!("`{v}` is not an unsigned integer"),
            });
    }
    Ok(config.unwrap_or(DEFAULT_SEED))
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, MechError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| MechError::InvalidParam {
            field: "out",
            reason: format!("{}: {e}", p.display()),
        })?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("plain data serializes"));
}

fn simulate(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, replications: Option<usize>) -> Result<u8, MechError> {
    let mut cfg = ExperimentConfig::load(&config)?;
    cfg.population.seed = Some(resolve_seed(seed, cfg.population.seed)?);
    if let Some(r) = replications {
        cfg.replications = r;
        cfg.validate()?;
    }
    log::info!("{} replications of {} (seed {})", cfg.replications, cfg.mechanism.name(), cfg.seed());
    let rows = harness::run_sweep(&cfg)?;
    harness::write_csv(output(&out)?, &rows)?;
    if out.is_some() {
        for r in &rows {
            print_json(&r.summary);
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct BoundsOut {
    params: MarketParams,
    stats: PopulationStats,
    phi_min: f64,
    phi_min_approx: f64,
    phi_bo_upper: f64,
    phi_srbm_upper: f64,
    e_m_upper: f64,
    e_n_upper: f64,
}

fn bounds_cmd(a: BoundsArgs) -> Result<u8, MechError> {
    let params = MarketParams {
        pi_e: a.pi_e,
        pi_o: a.pi_o,
        pi_max: a.pi_max,
        target: a.target,
        events: a.events,
        pi_p: None,
    };
    params.validate()?;
    let pi = Dist::uniform(a.pi_lo, a.pi_hi);
    pi.validate("pi")?;
    if !(a.pi_lo > 0.0) {
        return Err(MechError::InvalidParam {
            field: "pi-lo",
            reason: "must be positive".into(),
        });
    }
    let stats = PopulationStats::from_dists(&Dist::Point { value: a.e_b }, &pi, a.pi_max)?;
    let (e_n_upper, e_m_upper) = bounds::en_em_upper(&stats, &params);
    let out = BoundsOut {
        params,
        stats,
        phi_min: bounds::phi_min(&stats, &params),
        phi_min_approx: bounds::phi_min_approx(&stats, &params),
        phi_bo_upper: bounds::phi_bo_upper(&stats, &params),
        phi_srbm_upper: bounds::phi_srbm_upper(&stats, &params),
        e_m_upper,
        e_n_upper,
    };
    if a.json {
        print_json(&out);
    } else {
        println!(
            "phi_min {:.4}  phi_bo {:.4}  phi_srbm {:.4}  E[M] < {:.4}  E[N] <= {:.4}",
            out.phi_min, out.phi_bo_upper, out.phi_srbm_upper, out.e_m_upper, out.e_n_upper
        );
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn audit_cmd(
    config: Option<PathBuf>,
    mechanism: Option<Mechanism>,
    agents: Option<usize>,
    populations: Option<usize>,
    grid: Option<usize>,
    alpha: Option<f64>,
    seed: Option<u64>,
) -> Result<u8, MechError> {
    let mut cfg = match &config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| MechError::InvalidParam {
                field: "config",
                reason: format!("{}: {e}", p.display()),
            })?;
            serde_json::from_str::<AuditConfig>(&text).map_err(|e| MechError::InvalidParam {
                field: "config",
                reason: e.to_string(),
            })?
        }
        None => AuditConfig::example_one(mechanism.unwrap_or(Mechanism::SrbmPi)),
    };
    if let Some(m) = mechanism {
        cfg.mechanism = m;
    }
    cfg.agents = agents.unwrap_or(cfg.agents);
    cfg.populations = populations.unwrap_or(cfg.populations);
    cfg.grid_steps = grid.unwrap_or(cfg.grid_steps);
    cfg.alpha_override = alpha.or(cfg.alpha_override);
    cfg.population.seed = Some(resolve_seed(seed, cfg.population.seed)?);
    let report = audit(&cfg)?;
    println!(
        "{}: {} populations, {} agents, {} violations",
        cfg.mechanism.name(),
        report.populations,
        report.agents_checked,
        report.violations.len()
    );
    if let Some((checked, bad)) = report.operational {
        println!("operational diagnostic: {checked} agents checked, {bad} profitable deviations");
    }
    match report.worst() {
        None => Ok(0),
        Some(w) => {
            println!(
                "worst: population {} seed {} agent {} (b = {}, pi = {}) reports f = {} mu = {:?}, saving {:.6}",
                w.population, w.seed, w.agent.id, w.agent.b, w.agent.pi, w.best.f_star, w.best.mu_star, w.gain
            );
            Ok(1)
        }
    }
}

fn caiso_cmd(config: Option<PathBuf>, cap: f64, grid: usize, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8, MechError> {
    let mut cfg = match &config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = harness::table_config(20.0, 1);
            c.sweep = None;
            c.population = harness::PopulationSpec::example_one();
            c
        }
    };
    if !(0.0..1.0).contains(&cap) {
        return Err(MechError::InvalidParam {
            field: "cap",
            reason: "must lie in [0, 1)".into(),
        });
    }
    cfg.mechanism = Mechanism::SrbmPi;
    cfg.population.seed = Some(resolve_seed(seed, cfg.population.seed)?);
    let agents = harness::recruit(&cfg, 0)?.agents().to_vec();
    let report = caiso::compare(&agents, &cfg.params, cap, grid)?;
    if out.is_some() {
        let io_err = |e: csv::Error| MechError::InvalidParam {
            field: "out",
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_writer(output(&out)?);
        w.write_record(["agent", "reward_price", "incentive", "caiso_multiplier", "srbm_factor"])
            .map_err(io_err)?;
        for a in &report.agents {
            w.write_record([
                a.agent_id.to_string(),
                harness::sig6(a.reward_price),
                harness::sig6(a.incentive),
                harness::sig6(a.caiso_multiplier),
                harness::sig6(a.srbm_factor),
            ])
            .map_err(io_err)?;
        }
        w.flush().map_err(|e| MechError::InvalidParam {
            field: "out",
            reason: e.to_string(),
        })?;
    }
    println!(
        "caiso inflation factor {:.4}  srbm factor {:.4}  ({} core agents)",
        report.caiso_factor,
        report.srbm_factor,
        report.agents.len()
    );
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            seed,
            out,
            replications,
        } => simulate(config, seed, out, replications),
        Command::Bounds(a) => bounds_cmd(a),
        Command::Audit {
            config,
            mechanism,
            agents,
            populations,
            grid,
            alpha,
            seed,
        } => audit_cmd(config, mechanism, agents, populations, grid, alpha, seed),
        Command::Caiso {
            config,
            cap,
            grid,
            seed,
            out,
        } => caiso_cmd(config, cap, grid, seed, out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
