//! Seeded Monte Carlo engine.
//!
//! Replication r draws its population from substream `(seed, Population, r)`
//! and its event draws from `(seed, Events, r)`, so results do not depend on
//! how replications are scheduled across threads.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline_only;
use crate::bounds::{self, PopulationStats};
use crate::dist::Dist;
use crate::domain::{Agent, MarketParams, PodStructure, Report, SimulationSummary};
use crate::error::{invalid, MechError, Result};
use crate::srbm::{self, SortedProfile, SrbmOptions};
use crate::srbm_ci;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    Population = 1,
    Events = 2,
    Audit = 3,
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, lane, index)`.
pub fn substream(seed: u64, lane: Lane, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ (lane as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    BaselineOnly,
    SrbmPi,
    SrbmCi,
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::BaselineOnly => "baseline_only",
            Mechanism::SrbmPi => "srbm_pi",
            Mechanism::SrbmCi => "srbm_ci",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    /// Marginal utility distribution ($/kWh).
    pub pi: Dist,
    /// True baseline distribution (kWh).
    pub b: Dist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Half-width of uniform noise added to sampled marginal utilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
}

impl PopulationSpec {
    pub fn example_one() -> Self {
        PopulationSpec {
            pi: Dist::uniform(0.3, 1.3),
            b: Dist::uniform_around(5.0),
            seed: None,
            jitter: None,
        }
    }

    pub fn validate(&self, params: &MarketParams) -> Result<()> {
        self.pi.validate("population.pi")?;
        self.b.validate("population.b")?;
        let (lo, hi) = self.pi.support();
        let j = self.jitter.unwrap_or(0.0);
        if !(j >= 0.0 && j.is_finite()) {
            return Err(invalid("population.jitter", "must be a non-negative number"));
        }
        if !(lo - j > params.pi_e) || hi > params.pi_max {
            return Err(invalid(
                "population.pi",
                format!("support [{lo}, {hi}] (jitter {j}) must lie in (pi_e, pi_max] = ({}, {}]", params.pi_e, params.pi_max),
            ));
        }
        if !(self.b.support().0 >= 0.0) || !(self.b.mean() > 0.0) {
            return Err(invalid("population.b", "baselines must be non-negative with a positive mean"));
        }
        Ok(())
    }

    /// Agent number `id` of a population stream.
    pub fn sample_agent<R: Rng + ?Sized>(&self, id: usize, rng: &mut R, pi_max: f64) -> Agent {
        let b = self.b.sample(rng);
        let mut pi = self.pi.sample(rng);
        if let Some(j) = self.jitter.filter(|j| *j > 0.0) {
            pi = (pi + rng.gen_range(-j..=j)).min(pi_max);
        }
        Agent::new(id, b, pi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub e_b_kwh: f64,
    pub target_kwh: f64,
}

fn default_max_agents() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: MarketParams,
    pub population: PopulationSpec,
    pub mechanism: Mechanism,
    pub replications: usize,
    /// Defaults to `params.events_per_contract`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events_per_replication: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepPoint>>,
    #[serde(default)]
    pub srbm: SrbmOptions,
    /// Recruitment gives up after this many agents.
    #[serde(default = "default_max_agents")]
    pub max_agents: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.population.validate(&self.params)?;
        if self.replications < 1 {
            return Err(invalid("replications", "must be >= 1"));
        }
        if self.events_per_replication == Some(0) {
            return Err(invalid("events_per_replication", "must be >= 1"));
        }
        if self.max_agents < 2 {
            return Err(invalid("max_agents", "must be >= 2"));
        }
        for p in self.sweep.iter().flatten() {
            if !(p.e_b_kwh > 0.0 && p.target_kwh > 0.0) {
                return Err(invalid("sweep", format!("point {p:?} must have positive E[b] and D")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn events(&self) -> u32 {
        self.events_per_replication.unwrap_or(self.params.events)
    }

    pub fn seed(&self) -> u64 {
        self.population.seed.unwrap_or(DEFAULT_SEED)
    }

    /// The config restricted to one sweep point.
    pub fn at_point(&self, point: &SweepPoint) -> Self {
        let mut c = self.clone();
        c.params.target = point.target_kwh;
        c.population.b = self.population.b.scaled_to_mean(point.e_b_kwh);
        c.sweep = None;
        c
    }

    pub fn stats(&self) -> Result<PopulationStats> {
        PopulationStats::from_dists(&self.population.b, &self.population.pi, self.params.pi_max)
    }
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub phi: f64,
    pub n: usize,
    pub m: usize,
    pub mean_psi: f64,
    pub min_delivered: f64,
    pub mean_delivered: f64,
    pub penalty_revenue: f64,
}

/// Agents recruited for one replication with their (truthful) structure.
pub enum Recruited {
    BaselineOnly(Vec<Agent>),
    Pods(Vec<Agent>, PodStructure),
}

impl Recruited {
    pub fn agents(&self) -> &[Agent] {
        match self {
            Recruited::BaselineOnly(a) | Recruited::Pods(a, _) => a,
        }
    }
}

fn shortfall_with_context(e: MechError, rep: u64, seed: u64) -> MechError {
    match e {
        MechError::RecruitmentShortfall { missing_kwh, detail } => MechError::RecruitmentShortfall {
            missing_kwh,
            detail: format!("{detail}; replication {rep} (seed {seed})"),
        },
        other => other,
    }
}

/// Recruits truthful agents from the replication's population stream until
/// the mechanism's coverage rule closes.
pub fn recruit(cfg: &ExperimentConfig, rep: u64) -> Result<Recruited> {
    let seed = cfg.seed();
    let mut rng = substream(seed, Lane::Population, rep);
    let p = &cfg.params;
    let stream = (0..cfg.max_agents).map(|id| cfg.population.sample_agent(id, &mut rng, p.pi_max));
    let out = match cfg.mechanism {
        Mechanism::BaselineOnly => {
            let prices = baseline_only::configure(p);
            baseline_only::recruit(stream, prices.alpha, p.target).map(Recruited::BaselineOnly)
        }
        Mechanism::SrbmPi => {
            let rule = cfg.srbm.pod_probability;
            recruit_pods(stream, p.target, |s| srbm::closes(s, p.target, p.pi_e, rule))
                .and_then(|(agents, s)| Ok(Recruited::Pods(agents, srbm::pod_sort_sorted(&s, p.target, p.pi_e, rule)?)))
        }
        Mechanism::SrbmCi => recruit_pods(stream, p.target, |s| srbm_ci::closes(s, p.target, p.pi_e))
            .and_then(|(agents, s)| Ok(Recruited::Pods(agents, srbm_ci::ci_pod_sort_sorted(&s, p.target, p.pi_e)?.pods))),
    };
    out.map_err(|e| shortfall_with_context(e, rep, seed))
}

fn recruit_pods(
    stream: impl Iterator<Item = Agent>,
    target: f64,
    closes: impl Fn(&SortedProfile) -> bool,
) -> Result<(Vec<Agent>, SortedProfile)> {
    let mut agents = Vec::new();
    let mut profile = SortedProfile::default();
    let mut total = 0.0;
    for a in stream {
        profile.insert(&a.truthful())?;
        total += a.b;
        agents.push(a);
        // at least a pod core and its header are needed
        if total >= 2.0 * target && closes(&profile) {
            return Ok((agents, profile));
        }
    }
    Err(MechError::RecruitmentShortfall {
        missing_kwh: target,
        detail: format!("stopping rule still open after {} agents", agents.len()),
    })
}

/// Runs one replication: recruit, then settle `m` events.
pub fn run_replication(cfg: &ExperimentConfig, rep: u64) -> Result<Replication> {
    let p = &cfg.params;
    let m = cfg.events();
    let recruited = recruit(cfg, rep)?;
    let mut rng = substream(cfg.seed(), Lane::Events, rep);
    let mut psi = 0.0;
    let mut delivered = 0.0;
    let mut min_delivered = f64::INFINITY;
    let mut penalty = 0.0;
    let pods_count;
    match &recruited {
        Recruited::BaselineOnly(agents) => {
            pods_count = 0;
            let prices = baseline_only::configure(p);
            let reports: Vec<Report> = agents.iter().map(Agent::truthful_baseline).collect();
            for e in 0..m as usize {
                let ev = baseline_only::run_event(e, agents, &reports, &prices, p.pi_e, &mut rng);
                psi += ev.payout;
                delivered += ev.delivered;
                min_delivered = min_delivered.min(ev.delivered);
                penalty += ev.penalty_revenue;
            }
        }
        Recruited::Pods(agents, pods) => {
            pods_count = pods.pod_count();
            for e in 0..m as usize {
                let u: f64 = rng.gen();
                let ev = srbm::run_event(e, pods, agents, u, p, cfg.srbm.selection)?;
                psi += ev.payout;
                delivered += ev.delivered;
                min_delivered = min_delivered.min(ev.delivered);
                penalty += ev.penalty_revenue;
            }
        }
    }
    let n = recruited.agents().len();
    let mean_psi = psi / m as f64;
    Ok(Replication {
        phi: mean_psi / p.target + p.pi_o * n as f64 / (m as f64 * p.target),
        n,
        m: pods_count,
        mean_psi,
        min_delivered,
        mean_delivered: delivered / m as f64,
        penalty_revenue: penalty,
    })
}

/// Pairwise summation; the split points depend only on the length.
fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0) / n).sqrt())
}

/// Folds replications into a summary. Inputs must be in replication order.
pub fn summarize(cfg: &ExperimentConfig, reps: &[Replication]) -> Result<SimulationSummary> {
    let col = |f: fn(&Replication) -> f64| reps.iter().map(f).collect::<Vec<f64>>();
    let (mean_phi, se_phi) = mean_se(&col(|r| r.phi));
    let (mean_n, se_n) = mean_se(&col(|r| r.n as f64));
    let (mean_m, se_m) = mean_se(&col(|r| r.m as f64));
    let (mean_psi, _) = mean_se(&col(|r| r.mean_psi));
    let (mean_delivered, _) = mean_se(&col(|r| r.mean_delivered));
    let stats = cfg.stats()?;
    let phi_min = bounds::phi_min(&stats, &cfg.params);
    let phi_upper = match cfg.mechanism {
        Mechanism::BaselineOnly => Some(bounds::phi_bo_upper(&stats, &cfg.params)),
        Mechanism::SrbmPi => Some(bounds::phi_srbm_upper(&stats, &cfg.params)),
        Mechanism::SrbmCi => None,
    };
    Ok(SimulationSummary {
        mean_phi,
        mean_n,
        mean_m,
        mean_psi,
        competitive_ratio: mean_phi / phi_min,
        replication_count: reps.len(),
        ci_halfwidth_phi: 3.0 * se_phi,
        se_phi,
        se_n,
        se_m,
        phi_min,
        phi_upper,
        min_delivered: reps.iter().map(|r| r.min_delivered).fold(f64::INFINITY, f64::min),
        mean_delivered,
        total_penalty_revenue: pairwise_sum(&col(|r| r.penalty_revenue)),
    })
}

/// Runs every replication (in parallel) and summarizes them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SimulationSummary> {
    cfg.validate()?;
    let reps: Vec<Replication> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|r| run_replication(cfg, r))
        .collect::<Result<_>>()?;
    summarize(cfg, &reps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mechanism: Mechanism,
    pub target: f64,
    pub e_b: f64,
    pub summary: SimulationSummary,
    /// Bound on E[N].
    pub n_bound: f64,
    /// Bound on E[M].
    pub m_bound: f64,
    pub seed: u64,
}

fn row_for(cfg: &ExperimentConfig) -> Result<SweepRow> {
    let summary = run_experiment(cfg)?;
    let stats = cfg.stats()?;
    let (n_bound, m_bound) = bounds::en_em_upper(&stats, &cfg.params);
    Ok(SweepRow {
        mechanism: cfg.mechanism,
        target: cfg.params.target,
        e_b: stats.e_b,
        summary,
        n_bound,
        m_bound,
        seed: cfg.seed(),
    })
}

/// One row per sweep point, or a single row without a sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    match &cfg.sweep {
        Some(points) => points.iter().map(|p| row_for(&cfg.at_point(p))).collect(),
        None => Ok(vec![row_for(cfg)?]),
    }
}

/// Sweep over E[b] at the config's target.
pub fn sweep_inverse_eb(cfg: &ExperimentConfig, eb_values: &[f64]) -> Result<Vec<SweepRow>> {
    let mut c = cfg.clone();
    c.sweep = Some(
        eb_values
            .iter()
            .map(|&e| SweepPoint {
                e_b_kwh: e,
                target_kwh: cfg.params.target,
            })
            .collect(),
    );
    run_sweep(&c)
}

/// Six significant digits.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding may carry into a new digit, e.g. 9.999999 -> 10.00000
    let mag2 = s.trim_start_matches('-').split('.').next().map_or(0, |i| i.trim_start_matches('0').len() as i32 - 1);
    if mag2 > mag && decimals > 0 {
        format!("{x:.*}", decimals - 1)
    } else {
        s
    }
}

pub const CSV_HEADER: [&str; 13] = [
    "mechanism", "D", "E_b", "phi_mean", "phi_ci", "N_mean", "M_mean", "CR", "phi_min", "phi_upper", "seed", "N_bound", "M_bound",
];

pub fn write_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let io = |e: csv::Error| invalid("out", e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.mechanism.name().to_string(),
            sig6(r.target),
            sig6(r.e_b),
            sig6(s.mean_phi),
            sig6(s.ci_halfwidth_phi),
            sig6(s.mean_n),
            sig6(s.mean_m),
            sig6(s.competitive_ratio),
            sig6(s.phi_min),
            s.phi_upper.map_or_else(|| "NA".to_string(), sig6),
            r.seed.to_string(),
            sig6(r.n_bound),
            sig6(r.m_bound),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| invalid("out", e.to_string()))?;
    Ok(())
}

/// Table II/III configuration: Example-1 constants, E[b] in {5, 4, 3, 2, 1},
/// every agent's baseline equal to E[b].
pub fn table_config(target: f64, replications: usize) -> ExperimentConfig {
    ExperimentConfig {
        params: MarketParams::example_one().with_target(target),
        population: PopulationSpec {
            b: Dist::Point { value: 5.0 },
            ..PopulationSpec::example_one()
        },
        mechanism: Mechanism::SrbmPi,
        replications,
        events_per_replication: None,
        sweep: Some(
            [5.0, 4.0, 3.0, 2.0, 1.0]
                .iter()
                .map(|&e| SweepPoint {
                    e_b_kwh: e,
                    target_kwh: target,
                })
                .collect(),
        ),
        srbm: SrbmOptions::default(),
        max_agents: default_max_agents(),
    }
}
