//! Dominant-strategy audits: for random populations, every agent's grid
//! best response against the others' truthful reports must be its true type,
//! up to one grid step or an exact cost tie.

use serde::{Deserialize, Serialize};

use crate::agent::{best_response, expected_report_cost, BestResponse, ReportGrid};
use crate::baseline_only;
use crate::domain::{Agent, MarketParams, Pricing, Report, TOL};
use crate::error::{invalid, MechError, Result};
use crate::harness::{substream, Lane, Mechanism, PopulationSpec, DEFAULT_SEED};
use crate::srbm::{DeviationScope, SortedProfile, SrbmOptions, UnilateralPricer};
use crate::srbm_ci::{self, CiPricer, OperationalCiPricer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub params: MarketParams,
    pub population: PopulationSpec,
    pub mechanism: Mechanism,
    /// Number of random populations.
    pub populations: usize,
    /// Agents per population.
    pub agents: usize,
    /// Grid steps per unit range (see [`ReportGrid::new`]).
    pub grid_steps: usize,
    #[serde(default)]
    pub srbm: SrbmOptions,
    #[serde(default)]
    pub scope: DeviationScope,
    /// Baseline-only selection probability replacing `pi_e / pi_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_override: Option<f64>,
    /// Also rerun the full CI mechanism, stopping rule included, on every
    /// deviation. Reported separately; never fails the audit.
    #[serde(default)]
    pub operational: bool,
}

impl AuditConfig {
    /// 50 populations of 60 Example-1 agents with a 20 kWh target.
    pub fn example_one(mechanism: Mechanism) -> Self {
        AuditConfig {
            params: MarketParams::example_one().with_target(20.0),
            population: PopulationSpec::example_one(),
            mechanism,
            populations: 50,
            agents: 60,
            grid_steps: 20,
            srbm: SrbmOptions::default(),
            scope: DeviationScope::WithinPod,
            alpha_override: None,
            operational: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.population.validate(&self.params)?;
        if self.populations < 1 {
            return Err(invalid("populations", "must be >= 1"));
        }
        if self.agents < 2 {
            return Err(invalid("agents", "must be >= 2"));
        }
        if self.grid_steps < 1 {
            return Err(invalid("grid_steps", "must be >= 1"));
        }
        if let Some(a) = self.alpha_override {
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid("alpha_override", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.population.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn sample(&self, index: u64) -> Vec<Agent> {
        let mut rng = substream(self.seed(), Lane::Audit, index);
        (0..self.agents)
            .map(|id| self.population.sample_agent(id, &mut rng, self.params.pi_max))
            .collect()
    }
}

/// A profitable deviation further than one grid step from the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub population: u64,
    pub seed: u64,
    pub agent: Agent,
    pub truthful_cost: f64,
    pub best: BestResponse,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub mechanism: Mechanism,
    pub populations: usize,
    pub agents_checked: usize,
    pub violations: Vec<Violation>,
    /// Operational CI diagnostic: `(agents checked, violations)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operational: Option<(usize, usize)>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Largest cost saving over truth-telling among violations.
    pub fn max_gain(&self) -> f64 {
        self.violations.iter().map(|v| v.gain).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Violation> {
        self.violations.iter().max_by(|a, b| a.gain.total_cmp(&b.gain))
    }
}

/// Checks one agent. `None` means truth-telling is a grid best response.
pub fn check_agent<F>(agent: &Agent, params: &MarketParams, price: F, grid: &ReportGrid) -> Result<Option<(f64, BestResponse)>>
where
    F: Fn(&Report) -> Result<Pricing> + Sync,
{
    let with_mu = !grid.mu.is_empty();
    let truth = if with_mu { agent.truthful() } else { agent.truthful_baseline() };
    let truthful_cost = expected_report_cost(agent, &truth, &price(&truth)?, params.pi_e);
    let br = best_response(agent, params.pi_e, &price, grid)?;
    if br.expected_cost >= truthful_cost - TOL {
        return Ok(None);
    }
    let (df, dm) = grid.resolution();
    let near_f = (br.f_star - agent.b).abs() <= df + TOL;
    let near_mu = br.mu_star.is_none_or(|m| (m - agent.pi).abs() <= dm + TOL);
    if near_f && near_mu {
        return Ok(None);
    }
    Ok(Some((truthful_cost, br)))
}

fn grid_for(cfg: &AuditConfig, agents: &[Agent], agent: &Agent) -> ReportGrid {
    let b_max = agents.iter().map(|a| a.b).fold(0.0, f64::max);
    let with_mu = cfg.mechanism != Mechanism::BaselineOnly;
    ReportGrid::new(b_max, cfg.params.pi_e, cfg.params.pi_max, cfg.grid_steps, with_mu).with_truth(agent)
}

fn audit_population(cfg: &AuditConfig, index: u64) -> Result<(Vec<Violation>, usize, usize)> {
    let p = &cfg.params;
    let agents = cfg.sample(index);
    let reports: Vec<Report> = agents.iter().map(Agent::truthful).collect();
    let mut out = Vec::new();
    let mut record = |a: &Agent, found: Option<(f64, BestResponse)>| {
        if let Some((truthful_cost, best)) = found {
            out.push(Violation {
                population: index,
                seed: cfg.seed(),
                agent: *a,
                truthful_cost,
                gain: truthful_cost - best.expected_cost,
                best,
            });
        }
    };
    let (mut op_checked, mut op_bad) = (0, 0);
    // the operational diagnostic needs a truthful profile that closes
    let op_runs = cfg.operational
        && cfg.mechanism == Mechanism::SrbmCi
        && srbm_ci::closes(&SortedProfile::from_reports(&reports)?, p.target, p.pi_e);
    for a in &agents {
        let grid = grid_for(cfg, &agents, a);
        let found = match cfg.mechanism {
            Mechanism::BaselineOnly => {
                let mut prices = baseline_only::configure(p);
                if let Some(alpha) = cfg.alpha_override {
                    prices.alpha = alpha;
                }
                let pricing = prices.pricing();
                check_agent(a, p, |_| Ok(pricing), &grid)?
            }
            Mechanism::SrbmPi => {
                let pricer = UnilateralPricer::new(&reports, a.id, p, cfg.srbm.pod_probability, cfg.scope)?;
                check_agent(a, p, |r| pricer.price(r), &grid)?
            }
            Mechanism::SrbmCi => {
                let pricer = CiPricer::new(&reports, a.id, p)?;
                if op_runs {
                    let op = OperationalCiPricer::new(&reports, a.id, p)?;
                    match check_agent(a, p, |r| op.price(r), &grid) {
                        Ok(v) => {
                            op_checked += 1;
                            op_bad += v.is_some() as usize;
                        }
                        Err(MechError::Structure(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                check_agent(a, p, |r| pricer.price(r), &grid)?
            }
        };
        record(a, found);
    }
    Ok((out, op_checked, op_bad))
}

pub fn audit(cfg: &AuditConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let mut violations = Vec::new();
    let (mut op_checked, mut op_bad) = (0, 0);
    for i in 0..cfg.populations as u64 {
        let (v, c, b) = audit_population(cfg, i).map_err(|e| match e {
            MechError::RecruitmentShortfall { missing_kwh, detail } => MechError::RecruitmentShortfall {
                missing_kwh,
                detail: format!("{detail}; audit population {i} (seed {})", cfg.seed()),
            },
            other => other,
        })?;
        violations.extend(v);
        op_checked += c;
        op_bad += b;
    }
    Ok(AuditReport {
        mechanism: cfg.mechanism,
        populations: cfg.populations,
        agents_checked: cfg.populations * cfg.agents,
        violations,
        operational: cfg.operational.then_some((op_checked, op_bad)),
    })
}
