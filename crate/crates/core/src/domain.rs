//! Value types shared by the mechanisms and the simulation harness.
//!
//! Energies are in kWh, prices in $/kWh, money in $. All of these types are
//! plain data and are freely copied across replications.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Absolute tolerance for monetary and energy comparisons.
pub const TOL: f64 = 1e-9;

pub type AgentId = usize;

/// Private type of one consumer: true baseline and true marginal utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: AgentId,
    /// True baseline consumption (kWh).
    pub b: f64,
    /// True marginal utility ($/kWh).
    pub pi: f64,
}

impl Agent {
    pub fn new(id: AgentId, b: f64, pi: f64) -> Self {
        Agent { id, b, pi }
    }

    /// Checks `b >= 0` and `pi_e < pi <= pi_max`.
    pub fn validate(&self, params: &MarketParams) -> Result<()> {
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(invalid("b", format!("agent {}: baseline {} must be >= 0", self.id, self.b)));
        }
        if !(self.pi > params.pi_e) {
            return Err(invalid(
                "pi",
                format!("agent {}: marginal utility {} must exceed pi_e = {}", self.id, self.pi, params.pi_e),
            ));
        }
        if self.pi > params.pi_max + TOL {
            return Err(invalid(
                "pi",
                format!("agent {}: marginal utility {} exceeds pi_max = {}", self.id, self.pi, params.pi_max),
            ));
        }
        Ok(())
    }

    /// The report this agent submits when it tells the truth.
    pub fn truthful(&self) -> Report {
        Report {
            agent_id: self.id,
            f: self.b,
            mu: Some(self.pi),
        }
    }

    /// Truthful baseline-only report (no marginal utility).
    pub fn truthful_baseline(&self) -> Report {
        Report {
            agent_id: self.id,
            f: self.b,
            mu: None,
        }
    }
}

/// Strategic submission of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub agent_id: AgentId,
    /// Reported baseline (kWh).
    pub f: f64,
    /// Reported marginal utility ($/kWh); `None` under baseline-only reporting.
    pub mu: Option<f64>,
}

impl Report {
    pub fn new(agent_id: AgentId, f: f64, mu: f64) -> Self {
        Report {
            agent_id,
            f,
            mu: Some(mu),
        }
    }

    pub fn validate(&self, params: &MarketParams) -> Result<()> {
        if !(self.f >= 0.0 && self.f.is_finite()) {
            return Err(invalid("f", format!("agent {}: reported baseline {} must be >= 0", self.agent_id, self.f)));
        }
        if let Some(mu) = self.mu {
            if !(0.0..=params.pi_max + TOL).contains(&mu) {
                return Err(invalid(
                    "mu",
                    format!("agent {}: reported utility {} outside [0, {}]", self.agent_id, mu, params.pi_max),
                ));
            }
        }
        Ok(())
    }
}

/// Aggregator-side constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    /// Retail electricity price.
    #[serde(rename = "pi_e_usd_per_kwh")]
    pub pi_e: f64,
    /// Recruitment cost per enrolled agent.
    #[serde(rename = "pi_o_usd_per_agent")]
    pub pi_o: f64,
    /// Payment cap and upper bound on marginal utilities.
    #[serde(rename = "pi_max_usd_per_kwh")]
    pub pi_max: f64,
    /// Load reduction target D.
    #[serde(rename = "target_kwh")]
    pub target: f64,
    /// Contractual number of DR events m.
    #[serde(rename = "events_per_contract")]
    pub events: u32,
    /// Penalty price; defaults to `pi_e`.
    #[serde(rename = "pi_p_usd_per_kwh", default, skip_serializing_if = "Option::is_none")]
    pub pi_p: Option<f64>,
}

impl MarketParams {
    /// The constants used throughout the PG&E residential example.
    pub fn example_one() -> Self {
        MarketParams {
            pi_e: 0.15,
            pi_o: 2.0,
            pi_max: 1.3,
            target: 100.0,
            events: 10,
            pi_p: None,
        }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.target = target;
        self
    }

    pub fn penalty_price(&self) -> f64 {
        self.pi_p.unwrap_or(self.pi_e)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pi_e > 0.0 && self.pi_e.is_finite()) {
            return Err(invalid("pi_e_usd_per_kwh", "must be > 0"));
        }
        if !(self.pi_o >= 0.0 && self.pi_o.is_finite()) {
            return Err(invalid("pi_o_usd_per_agent", "must be >= 0"));
        }
        if !(self.pi_max > self.pi_e && self.pi_max.is_finite()) {
            return Err(invalid("pi_max_usd_per_kwh", "must exceed pi_e"));
        }
        if !(self.target > 0.0 && self.target.is_finite()) {
            return Err(invalid("target_kwh", "must be > 0"));
        }
        if self.events < 1 {
            return Err(invalid("events_per_contract", "must be >= 1"));
        }
        if let Some(p) = self.pi_p {
            if !(p >= self.pi_e - TOL && p.is_finite()) {
                return Err(invalid("pi_p_usd_per_kwh", "penalty price must be >= pi_e"));
            }
        }
        Ok(())
    }
}

/// Prices and selection probability an agent faces for a given report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub selection_prob: f64,
    pub reward_price: f64,
    pub penalty_price: f64,
}

/// Settlement terms of one agent after selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricedSelection {
    pub agent_id: AgentId,
    pub selected: bool,
    /// Present iff selected.
    pub reward_price: Option<f64>,
    /// Present iff not selected.
    pub penalty_price: Option<f64>,
    /// alpha for baseline-only, beta^i_k for SRBM.
    pub selection_prob: f64,
}

/// One pod of the sorted decomposition. Index ranges refer to positions in
/// [`PodStructure::order`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pod {
    pub core: std::ops::Range<usize>,
    pub header: std::ops::Range<usize>,
    /// Highest reported marginal utility in the pod (core and header).
    pub nu: f64,
    /// Pod selection probability.
    pub beta: f64,
}

/// Result of pod sorting. Agents are held in ascending order of reported
/// marginal utility (ties by id); cores are contiguous slices of that order
/// and the header of pod i is the core of pod i + 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodStructure {
    /// Agent ids sorted by (mu, id).
    pub order: Vec<AgentId>,
    /// Reported baselines aligned with `order`.
    pub f: Vec<f64>,
    /// Reported marginal utilities aligned with `order`.
    pub mu: Vec<f64>,
    /// Selectable pods 1..=M.
    pub pods: Vec<Pod>,
    /// Core S^{M+1}: only prices pod M, never selected.
    pub extra_core: std::ops::Range<usize>,
    /// Per sorted position: beta^i_k for core members of pods 1..=M.
    pub member_beta: Vec<Option<f64>>,
    /// Per sorted position: reward price pi^r_k for core members of pods 1..=M.
    pub member_reward: Vec<Option<f64>>,
}

impl PodStructure {
    pub fn pod_count(&self) -> usize {
        self.pods.len()
    }

    /// Number of agents placed in cores S^1..S^{M+1}.
    pub fn placed(&self) -> usize {
        self.extra_core.end
    }

    pub fn position_of(&self, id: AgentId) -> Option<usize> {
        self.order.iter().position(|&a| a == id)
    }

    /// Pod index (0-based) whose core holds the agent at sorted position `pos`.
    pub fn core_pod_of_position(&self, pos: usize) -> Option<usize> {
        self.pods.iter().position(|p| p.core.contains(&pos))
    }

    pub fn cumulative_beta(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.pods
            .iter()
            .map(|p| {
                let start = acc;
                acc += p.beta;
                start
            })
            .collect()
    }
}

/// Aggregate outcome of one DR event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventResult {
    pub event_index: usize,
    pub called_ids: Vec<AgentId>,
    /// Realized reduction below true baselines (kWh).
    pub delivered: f64,
    /// Payout psi for this event ($).
    pub payout: f64,
    pub penalty_revenue: f64,
}

/// Replication-averaged outcome of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub mean_phi: f64,
    pub mean_n: f64,
    /// Mean pod count (SRBM only; zero for baseline-only).
    pub mean_m: f64,
    pub mean_psi: f64,
    pub competitive_ratio: f64,
    pub replication_count: usize,
    /// Three standard errors of the mean of phi.
    pub ci_halfwidth_phi: f64,
    pub se_phi: f64,
    pub se_n: f64,
    pub se_m: f64,
    pub phi_min: f64,
    /// The mechanism's own closed-form upper bound on phi, if it has one.
    pub phi_upper: Option<f64>,
    /// Smallest per-event delivered reduction seen in any replication.
    pub min_delivered: f64,
    /// Mean per-event delivered reduction.
    pub mean_delivered: f64,
    pub total_penalty_revenue: f64,
}

/// Piece-wise linear gross utility: `pi * min(q, b)`.
pub fn utility(agent: &Agent, q: f64) -> f64 {
    agent.pi * q.min(agent.b)
}

/// Net utility `pi * min(q, b) - pi_e * q`.
pub fn net_utility(agent: &Agent, q: f64, pi_e: f64) -> f64 {
    utility(agent, q) - pi_e * q
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn agent() -> Agent {
        Agent::new(0, 5.0, 0.5)
    }

    #[test]
    fn net_utility_examples() {
        assert_abs_diff_eq!(net_utility(&agent(), 5.0, 0.15), 1.75, epsilon = 1e-12);
        assert_abs_diff_eq!(net_utility(&agent(), 0.0, 0.15), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(net_utility(&agent(), 8.0, 0.15), 1.30, epsilon = 1e-12);
    }

    #[test]
    fn net_utility_slopes_around_kink() {
        let a = agent();
        let h = 1e-6;
        let left = (net_utility(&a, a.b - h, 0.15) - net_utility(&a, a.b - 2.0 * h, 0.15)) / h;
        let right = (net_utility(&a, a.b + 2.0 * h, 0.15) - net_utility(&a, a.b + h, 0.15)) / h;
        assert_abs_diff_eq!(left, a.pi - 0.15, epsilon = 1e-6);
        assert_abs_diff_eq!(right, -0.15, epsilon = 1e-6);
        assert!(left > right);
    }

    #[test]
    fn truthful_baseline_maximizes_net_utility() {
        let a = agent();
        let best = (0..=1000)
            .map(|i| i as f64 * 0.01)
            .max_by(|x, y| net_utility(&a, *x, 0.15).total_cmp(&net_utility(&a, *y, 0.15)))
            .unwrap();
        assert_abs_diff_eq!(best, a.b, epsilon = 1e-9);
    }

    #[test]
    fn market_validation() {
        let p = MarketParams::example_one();
        assert!(p.validate().is_ok());
        assert!(MarketParams { pi_max: 0.1, ..p }.validate().is_err());
        assert!(MarketParams { events: 0, ..p }.validate().is_err());
        assert!(MarketParams { pi_p: Some(0.1), ..p }.validate().is_err());
        assert!(MarketParams { target: 0.0, ..p }.validate().is_err());
        assert_eq!(p.penalty_price(), 0.15);
    }

    #[test]
    fn agent_and_report_validation() {
        let p = MarketParams::example_one();
        assert!(Agent::new(0, 5.0, 0.15).validate(&p).is_err());
        assert!(Agent::new(0, 5.0, 1.4).validate(&p).is_err());
        assert!(Agent::new(0, -1.0, 0.5).validate(&p).is_err());
        assert!(Agent::new(0, 5.0, 0.5).validate(&p).is_ok());
        assert!(Report::new(0, 5.0, 1.5).validate(&p).is_err());
        assert!(Report::new(0, -0.1, 0.5).validate(&p).is_err());
    }
}
