//! Self-reported baseline mechanism (partial-information setting).
//!
//! Agents report `(f, mu)`. The aggregator sorts them by reported marginal
//! utility, cuts the sorted list into minimal cores that each cover the
//! target `D`, and pairs every core with the next one as its header. A core
//! member is paid the highest report of the set that would have been called
//! had it been absent (a VCG-like price) and is called with probability
//! `pi_e / (pi_r + pi_e)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::agent::{optimal_consumption_not_selected, optimal_consumption_selected};
use crate::domain::{Agent, AgentId, EventResult, MarketParams, Pod, PodStructure, Pricing, Report};
use crate::error::{MechError, Result};

/// How the pod-level probability `beta^i` is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PodProbability {
    /// Smallest member probability in the core.
    #[default]
    MinMember,
    /// `pi_e / nu^i` with `nu^i` the highest report in the pod.
    MaxReport,
}

/// Which draws select a core member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Member k of core i answers every draw in `[c_{i-1}, c_{i-1} + beta^i_k)`.
    #[default]
    PerAgent,
    /// Only the pod's own interval `[c_{i-1}, c_i)` selects its core.
    PodOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SrbmOptions {
    #[serde(default)]
    pub pod_probability: PodProbability,
    #[serde(default)]
    pub selection: SelectionRule,
}

/// Reports sorted ascending by `(mu, id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SortedProfile {
    pub order: Vec<AgentId>,
    pub f: Vec<f64>,
    pub mu: Vec<f64>,
}

impl SortedProfile {
    pub fn from_reports(reports: &[Report]) -> Result<Self> {
        let mut p = SortedProfile::default();
        for r in reports {
            p.insert(r)?;
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn total_f(&self) -> f64 {
        self.f.iter().sum()
    }

    /// Position a report with `(mu, id)` would take.
    pub fn insertion_point(&self, mu: f64, id: AgentId) -> usize {
        let mut lo = 0;
        let mut hi = self.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            let before = self.mu[mid] < mu || (self.mu[mid] == mu && self.order[mid] < id);
            if before {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn insert(&mut self, r: &Report) -> Result<usize> {
        let mu = r.mu.ok_or(MechError::InvalidParam {
            field: "mu",
            reason: format!("agent {} did not report a marginal utility", r.agent_id),
        })?;
        let at = self.insertion_point(mu, r.agent_id);
        self.order.insert(at, r.agent_id);
        self.f.insert(at, r.f);
        self.mu.insert(at, mu);
        Ok(at)
    }

    pub fn remove_at(&mut self, pos: usize) {
        self.order.remove(pos);
        self.f.remove(pos);
        self.mu.remove(pos);
    }
}

/// Exclusive end of the minimal prefix of `f[start..]` whose sum reaches
/// `target`, skipping position `skip`.
pub(crate) fn covering_end(f: &[f64], start: usize, limit: usize, skip: Option<usize>, target: f64) -> Option<usize> {
    let mut acc = 0.0;
    for (t, &x) in f.iter().enumerate().take(limit).skip(start) {
        if Some(t) == skip {
            continue;
        }
        acc += x;
        if acc >= target {
            return Some(t + 1);
        }
    }
    None
}

/// Highest report of `S_{-k}` within `[start, limit)` with position `skip`
/// removed.
pub(crate) fn max_mu_without(mu: &[f64], f: &[f64], start: usize, limit: usize, skip: usize, target: f64) -> Option<f64> {
    let end = covering_end(f, start, limit, Some(skip), target)?;
    // sorted ascending: the last kept element carries the maximum
    let last = if end - 1 == skip { end - 2 } else { end - 1 };
    Some(mu[last])
}

/// `max(0, max mu over S_{-k} - pi_e)`.
pub fn reward_from_max(max_mu: f64, pi_e: f64) -> f64 {
    (max_mu - pi_e).max(0.0)
}

/// `pi_e / (pi_r + pi_e)`.
pub fn member_probability(reward: f64, pi_e: f64) -> f64 {
    pi_e / (reward + pi_e)
}

struct Scan {
    cores: Vec<Range<usize>>,
    betas: Vec<f64>,
}

fn pod_beta(p: &SortedProfile, core: &Range<usize>, header: &Range<usize>, target: f64, pi_e: f64, rule: PodProbability) -> Result<f64> {
    match rule {
        PodProbability::MaxReport => Ok((pi_e / p.mu[header.end - 1]).min(1.0)),
        PodProbability::MinMember => {
            // S_{-k} grows with f_k, so the member with the largest report
            // has the highest price and the smallest probability.
            let mut k = core.start;
            for i in core.clone() {
                if p.f[i] > p.f[k] {
                    k = i;
                }
            }
            let m = max_mu_without(&p.mu, &p.f, core.start, header.end, k, target)
                .ok_or_else(|| MechError::Structure(format!("header of core {core:?} cannot price member at {k}")))?;
            Ok(member_probability(reward_from_max(m, pi_e), pi_e))
        }
    }
}

fn scan(p: &SortedProfile, target: f64, pi_e: f64, rule: PodProbability) -> Result<Scan> {
    let mut cores: Vec<Range<usize>> = Vec::new();
    let mut betas = Vec::new();
    let mut sum_beta = 0.0;
    let mut start = 0;
    loop {
        let Some(end) = covering_end(&p.f, start, p.len(), None, target) else {
            let left: f64 = p.f[start..].iter().sum();
            return Err(MechError::RecruitmentShortfall {
                missing_kwh: target - left,
                detail: format!(
                    "{} agents form {} cores; pod probabilities sum to {sum_beta:.4} < 1 and the next core lacks capacity",
                    p.len(),
                    cores.len()
                ),
            });
        };
        cores.push(start..end);
        start = end;
        if cores.len() >= 2 {
            let i = cores.len() - 2;
            let b = pod_beta(p, &cores[i], &cores[i + 1], target, pi_e, rule)?;
            betas.push(b);
            sum_beta += b;
            if sum_beta >= 1.0 {
                return Ok(Scan { cores, betas });
            }
        }
    }
}

/// True when the sorted profile already closes the pod stopping rule.
pub fn closes(p: &SortedProfile, target: f64, pi_e: f64, rule: PodProbability) -> bool {
    scan(p, target, pi_e, rule).is_ok()
}

/// Sorts reports into pods until the pod probabilities sum to at least one,
/// plus the extra core that prices the last pod.
pub fn pod_sort(reports: &[Report], target: f64, pi_e: f64, rule: PodProbability) -> Result<PodStructure> {
    let profile = SortedProfile::from_reports(reports)?;
    pod_sort_sorted(&profile, target, pi_e, rule)
}

pub fn pod_sort_sorted(p: &SortedProfile, target: f64, pi_e: f64, rule: PodProbability) -> Result<PodStructure> {
    let Scan { cores, betas } = scan(p, target, pi_e, rule)?;
    let m = betas.len();
    let mut member_beta = vec![None; p.len()];
    let mut member_reward = vec![None; p.len()];
    let mut pods = Vec::with_capacity(m);
    for i in 0..m {
        let core = cores[i].clone();
        let header = cores[i + 1].clone();
        for k in core.clone() {
            let mx = max_mu_without(&p.mu, &p.f, core.start, header.end, k, target)
                .ok_or_else(|| MechError::Structure(format!("cannot form S_-k for position {k} in pod {}", i + 1)))?;
            let r = reward_from_max(mx, pi_e);
            member_reward[k] = Some(r);
            member_beta[k] = Some(member_probability(r, pi_e));
        }
        pods.push(Pod {
            nu: p.mu[header.end - 1],
            beta: betas[i],
            core,
            header,
        });
    }
    Ok(PodStructure {
        order: p.order.clone(),
        f: p.f.clone(),
        mu: p.mu.clone(),
        pods,
        extra_core: cores[m].clone(),
        member_beta,
        member_reward,
    })
}

/// Reward price of a core member, recomputed from the pod.
pub fn reward_price(pods: &PodStructure, k: AgentId, target: f64, pi_e: f64) -> Result<f64> {
    let pos = pods.position_of(k).ok_or(MechError::UnknownAgent(k))?;
    let i = pods
        .core_pod_of_position(pos)
        .ok_or_else(|| MechError::Structure(format!("agent {k} is not in any selectable core")))?;
    let pod = &pods.pods[i];
    let mx = max_mu_without(&pods.mu, &pods.f, pod.core.start, pod.header.end, pos, target)
        .ok_or_else(|| MechError::Structure(format!("header of pod {} exhausted while pricing agent {k}", i + 1)))?;
    Ok(reward_from_max(mx, pi_e))
}

fn in_interval(u: f64, start: f64, len: f64) -> bool {
    let end = start + len;
    u >= start && (u < end || (u == 1.0 && end >= 1.0))
}

/// Agents called for draw `u`.
pub fn select(pods: &PodStructure, u: f64, rule: SelectionRule) -> Result<Vec<AgentId>> {
    if !(0.0..=1.0).contains(&u) {
        return Err(MechError::DrawOutOfRange(u));
    }
    let starts = pods.cumulative_beta();
    let mut out = Vec::new();
    for (pod, &c) in pods.pods.iter().zip(&starts) {
        for pos in pod.core.clone() {
            let len = match rule {
                SelectionRule::PerAgent => pods.member_beta[pos].unwrap_or(pod.beta),
                SelectionRule::PodOnly => pod.beta,
            };
            if in_interval(u, c, len) {
                out.push(pods.order[pos]);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Probability that the agent at sorted position `pos` is called under a
/// uniform draw.
pub fn call_probability(pods: &PodStructure, pos: usize, rule: SelectionRule) -> f64 {
    let starts = pods.cumulative_beta();
    for (pod, &c) in pods.pods.iter().zip(&starts) {
        if pod.core.contains(&pos) {
            let len = match rule {
                SelectionRule::PerAgent => pods.member_beta[pos].unwrap_or(pod.beta),
                SelectionRule::PodOnly => pod.beta,
            };
            return ((c + len).min(1.0) - c).max(0.0);
        }
    }
    0.0
}

/// Settles one event. `agents` is indexed by agent id; `reports` by sorted
/// position as stored in `pods`. Agents outside `pods.order` are ignored.
pub fn run_event(
    event_index: usize,
    pods: &PodStructure,
    agents: &[Agent],
    u: f64,
    params: &MarketParams,
    rule: SelectionRule,
) -> Result<EventResult> {
    let called = select(pods, u, rule)?;
    let penalty = params.penalty_price();
    let mut out = EventResult {
        event_index,
        called_ids: Vec::with_capacity(called.len()),
        delivered: 0.0,
        payout: 0.0,
        penalty_revenue: 0.0,
    };
    for (pos, &id) in pods.order.iter().enumerate() {
        let a = agents.get(id).filter(|a| a.id == id).ok_or(MechError::UnknownAgent(id))?;
        let f = pods.f[pos];
        if called.binary_search(&id).is_ok() {
            let r = pods.member_reward[pos]
                .ok_or_else(|| MechError::Structure(format!("called agent {id} has no reward price")))?;
            let d = optimal_consumption_selected(a, f, r, params.pi_e);
            out.called_ids.push(id);
            out.payout += r * (f - d.q_star).max(0.0);
            out.delivered += (a.b - d.q_star).max(0.0);
        } else {
            let d = optimal_consumption_not_selected(a, f, penalty, params.pi_e);
            out.penalty_revenue += penalty * (f - d.q_star).max(0.0);
            out.delivered += (a.b - d.q_star).max(0.0);
        }
    }
    Ok(out)
}

/// Scope of a unilateral deviation when auditing the mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationScope {
    /// The agent only knows its own pod: a deviation re-orders that pod and
    /// can move the agent between core and header. This is the
    /// partial-information setting.
    #[default]
    WithinPod,
    /// The whole population is re-sorted with the deviated report.
    Global,
}

/// Pricing of agent `k` as a function of its own report, with every other
/// report held at its value in `reports`.
pub struct UnilateralPricer {
    k: AgentId,
    target: f64,
    pi_e: f64,
    penalty: f64,
    rule: PodProbability,
    scope: DeviationScope,
    /// Other members of k's pod (within-pod scope) or of the population.
    others: SortedProfile,
    in_pod: bool,
}

impl UnilateralPricer {
    pub fn new(
        reports: &[Report],
        k: AgentId,
        params: &MarketParams,
        rule: PodProbability,
        scope: DeviationScope,
    ) -> Result<Self> {
        let target = params.target;
        let mut others = SortedProfile::from_reports(reports)?;
        let pos = others.order.iter().position(|&a| a == k).ok_or(MechError::UnknownAgent(k))?;
        let mut in_pod = true;
        if scope == DeviationScope::WithinPod {
            let pods = pod_sort_sorted(&others, target, params.pi_e, rule)?;
            let range = match pods.core_pod_of_position(pos) {
                Some(i) => pods.pods[i].core.start..pods.pods[i].header.end,
                None if pods.extra_core.contains(&pos) => {
                    let last = pods.pods.last().expect("at least one pod");
                    last.core.start..last.header.end
                }
                None => {
                    in_pod = false;
                    0..0
                }
            };
            let mut members = SortedProfile::default();
            for i in range {
                if i != pos {
                    members.order.push(others.order[i]);
                    members.f.push(others.f[i]);
                    members.mu.push(others.mu[i]);
                }
            }
            others = members;
        } else {
            others.remove_at(pos);
        }
        Ok(UnilateralPricer {
            k,
            target,
            pi_e: params.pi_e,
            penalty: params.penalty_price(),
            rule,
            scope,
            others,
            in_pod,
        })
    }

    fn not_called(&self, reward: f64) -> Pricing {
        Pricing {
            selection_prob: 0.0,
            reward_price: reward,
            penalty_price: self.penalty,
        }
    }

    pub fn price(&self, report: &Report) -> Result<Pricing> {
        let mu = report.mu.ok_or(MechError::InvalidParam {
            field: "mu",
            reason: "deviation without a marginal utility".into(),
        })?;
        if !self.in_pod {
            return Ok(self.not_called(0.0));
        }
        match self.scope {
            DeviationScope::WithinPod => {
                let at = self.others.insertion_point(mu, self.k);
                let before: f64 = self.others.f[..at].iter().sum();
                // S_{-k} depends on the others only
                let end = covering_end(&self.others.f, 0, self.others.len(), None, self.target).ok_or_else(|| {
                    MechError::Structure(format!("pod of agent {} cannot cover the target without it", self.k))
                })?;
                let reward = reward_from_max(self.others.mu[end - 1], self.pi_e);
                if before < self.target {
                    Ok(Pricing {
                        selection_prob: member_probability(reward, self.pi_e),
                        reward_price: reward,
                        penalty_price: self.penalty,
                    })
                } else {
                    Ok(self.not_called(reward))
                }
            }
            DeviationScope::Global => {
                let mut p = self.others.clone();
                let at = p.insert(&Report {
                    agent_id: self.k,
                    f: report.f,
                    mu: Some(mu),
                })?;
                let pods = pod_sort_sorted(&p, self.target, self.pi_e, self.rule)?;
                match (pods.member_beta[at], pods.member_reward[at]) {
                    (Some(b), Some(r)) => Ok(Pricing {
                        selection_prob: b,
                        reward_price: r,
                        penalty_price: self.penalty,
                    }),
                    _ => Ok(self.not_called(0.0)),
                }
            }
        }
    }
}

/// Convenience wrapper returning the pricing closure for `agent::best_response`.
pub fn unilateral_price_fn(
    reports: &[Report],
    k: AgentId,
    params: &MarketParams,
    rule: PodProbability,
    scope: DeviationScope,
) -> Result<impl Fn(&Report) -> Result<Pricing> + Sync> {
    let pricer = UnilateralPricer::new(reports, k, params, rule, scope)?;
    Ok(move |r: &Report| pricer.price(r))
}
