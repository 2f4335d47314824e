//! CAISO 10/10 baseline with a capped same-day adjustment, and the payment
//! inflation it invites compared with SRBM.

use serde::{Deserialize, Serialize};

use crate::agent::{best_response, ReportGrid};
use crate::domain::{Agent, AgentId, MarketParams, Report};
use crate::error::{invalid, Result};
use crate::srbm::{pod_sort, DeviationScope, PodProbability, UnilateralPricer};

/// Mean of 10 similar non-event days, adjusted by the ratio of the
/// prior-hour consumption on the event day to its historical mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TenTenBaseline {
    /// Mean event-hour consumption over the reference days (kWh).
    pub raw_baseline: f64,
    /// Mean consumption at the adjustment hour over the reference days (kWh).
    pub prior_avg: f64,
    /// Largest relative adjustment either way.
    pub adjustment_cap: f64,
}

impl TenTenBaseline {
    pub fn new(raw_baseline: f64, prior_avg: f64) -> Self {
        TenTenBaseline {
            raw_baseline,
            prior_avg,
            adjustment_cap: 0.2,
        }
    }

    /// Builds the baseline from reference-day samples.
    pub fn from_days(event_hour: &[f64], prior_hour: &[f64], adjustment_cap: f64) -> Result<Self> {
        if event_hour.is_empty() || prior_hour.is_empty() {
            return Err(invalid("history", "no reference days"));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let b = TenTenBaseline {
            raw_baseline: mean(event_hour),
            prior_avg: mean(prior_hour),
            adjustment_cap,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prior_avg > 0.0) {
            return Err(invalid("prior_avg", "historical prior-hour mean must be positive"));
        }
        if !(self.raw_baseline > 0.0) {
            return Err(invalid("raw_baseline", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adjustment_cap) {
            return Err(invalid("adjustment_cap", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn adjustment(&self, q_p: f64) -> f64 {
        (q_p / self.prior_avg).clamp(1.0 - self.adjustment_cap, 1.0 + self.adjustment_cap)
    }

    pub fn adjusted(&self, q_p: f64) -> f64 {
        self.adjustment(q_p) * self.raw_baseline
    }
}

/// `max(0, pi_r * (r * b_c - q))` with `r` the capped adjustment ratio.
pub fn caiso_payment(baseline: &TenTenBaseline, q_p: f64, q: f64, reward_price: f64) -> Result<f64> {
    baseline.validate()?;
    if q_p < 0.0 || q < 0.0 || reward_price < 0.0 {
        return Err(invalid("consumption", "inputs must be non-negative"));
    }
    Ok((reward_price * (baseline.adjusted(q_p) - q)).max(0.0))
}

/// Prior-hour consumption multiplier (of the historical mean) that
/// maximizes net gain `pi_r (min(r, cap) - 1) b_c - pi_e (q_p - b_p)`.
/// Grid over `[1, 1.5]` in steps of 0.001; ties go to the smaller value.
pub fn inflation_best_response(baseline: &TenTenBaseline, reward_price: f64, pi_e: f64) -> f64 {
    let mut best = (1.0, 0.0);
    for i in 0..=500 {
        let m = (1000 + i) as f64 / 1000.0;
        let gain = reward_price * (baseline.adjustment(m * baseline.prior_avg) - 1.0) * baseline.raw_baseline
            - pi_e * (m - 1.0) * baseline.prior_avg;
        if gain > best.1 + 1e-12 {
            best = (m, gain);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInflation {
    pub agent_id: AgentId,
    pub reward_price: f64,
    /// `pi_r - pi_e`; positive means inflating under CAISO pays.
    pub incentive: f64,
    pub caiso_multiplier: f64,
    /// Best-response baseline report over true baseline under SRBM.
    pub srbm_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflationReport {
    pub agents: Vec<AgentInflation>,
    /// Payment-weighted inflation of CAISO payments.
    pub caiso_factor: f64,
    /// Payment-weighted inflation of SRBM reported baselines.
    pub srbm_factor: f64,
}

/// Side-by-side comparison for every core member of a truthful SRBM pod
/// structure. Each agent's SRBM reward doubles as its CAISO unit reward.
pub fn compare(agents: &[Agent], params: &MarketParams, adjustment_cap: f64, grid_steps: usize) -> Result<InflationReport> {
    let reports: Vec<Report> = agents.iter().map(Agent::truthful).collect();
    let pods = pod_sort(&reports, params.target, params.pi_e, PodProbability::MinMember)?;
    let b_max = agents.iter().map(|a| a.b).fold(0.0, f64::max);
    let base_grid = ReportGrid::new(b_max, params.pi_e, params.pi_max, grid_steps, true);
    let mut out = Vec::new();
    let (mut caiso_num, mut srbm_num, mut den) = (0.0, 0.0, 0.0);
    for pod in &pods.pods {
        for pos in pod.core.clone() {
            let id = pods.order[pos];
            let a = &agents[id];
            let reward = pods.member_reward[pos].expect("core member has a reward");
            let baseline = TenTenBaseline {
                adjustment_cap,
                ..TenTenBaseline::new(a.b, a.b)
            };
            let mult = inflation_best_response(&baseline, reward, params.pi_e);
            let pricer = UnilateralPricer::new(&reports, id, params, PodProbability::MinMember, DeviationScope::WithinPod)?;
            let grid = base_grid.clone().with_truth(a);
            let br = best_response(a, params.pi_e, |r| pricer.price(r), &grid)?;
            let srbm = br.f_star / a.b;
            let pay = reward * a.b;
            caiso_num += mult * pay;
            srbm_num += srbm * pay;
            den += pay;
            out.push(AgentInflation {
                agent_id: id,
                reward_price: reward,
                incentive: reward - params.pi_e,
                caiso_multiplier: mult,
                srbm_factor: srbm,
            });
        }
    }
    Ok(InflationReport {
        agents: out,
        caiso_factor: caiso_num / den,
        srbm_factor: srbm_num / den,
    })
}
