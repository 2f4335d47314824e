//! Self-reported baseline mechanism for the complete-information setting.
//!
//! Every agent k is priced against the cores the other agents would form
//! without it. `nu[j]` is the highest report of pod j in that structure
//! (core j plus its header, so the last report of core j + 1). An agent
//! whose report falls in core i gets reward `nu[i] - pi_e` and probability
//! `c_i * pi_e / nu[i + 1]`, where the jump factor `c_i` makes moving to a
//! higher pod unprofitable.

use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, MarketParams, Pod, PodStructure, Pricing, Report};
use crate::error::{MechError, Result};
use crate::srbm::{self, reward_from_max, SelectionRule, SortedProfile};

const DEGENERATE_GAP: f64 = 1e-12;

/// Jump-factor recursion for one agent. Index 0 of `c` is pod 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpFactors {
    /// Pod allotted to the agent (1-based).
    pub pod: usize,
    /// `nu[j]`, j = 0.. (highest report in pod j without the agent).
    pub nu_minus_k: Vec<f64>,
    /// `mu_plus[j - 1]` for j = 1..
    pub mu_plus: Vec<f64>,
    /// `e[j - 1] = c[j] / c[j - 1]` for j = 1..
    pub e: Vec<f64>,
    /// `c[j - 1]` for j = 1..; `c[0] = 1`.
    pub c: Vec<f64>,
}

impl JumpFactors {
    /// `c^j` (1-based pod index).
    pub fn c_at(&self, j: usize) -> f64 {
        self.c[j - 1]
    }

    pub fn c_own(&self) -> f64 {
        self.c_at(self.pod)
    }

    /// Selection probability and reward in pod `j`, using this recursion.
    pub fn prices_at(&self, j: usize, pi_e: f64) -> (f64, f64) {
        let beta = self.c_at(j) * pi_e / self.nu_minus_k[j + 1];
        let reward = reward_from_max(self.nu_minus_k[j], pi_e);
        (beta, reward)
    }
}

/// Runs the recursion for an agent in pod `i` up to pod `upto >= i`.
/// `nu` must hold `nu[0..=upto + 1]`.
pub fn compute_jump_factors(nu: &[f64], i: usize, upto: usize) -> Result<JumpFactors> {
    if i == 0 || upto < i {
        return Err(MechError::InvalidParam {
            field: "pod",
            reason: format!("pod index {i} (upto {upto}) must be >= 1 and <= upto"),
        });
    }
    if nu.len() < upto + 2 {
        return Err(MechError::InvalidParam {
            field: "nu",
            reason: format!("need {} pod maxima, got {}", upto + 2, nu.len()),
        });
    }
    if nu.iter().any(|&v| !(v > 0.0)) || nu.windows(2).any(|w| w[1] < w[0]) {
        return Err(MechError::InvalidParam {
            field: "nu",
            reason: format!("pod maxima must be positive and non-decreasing: {nu:?}"),
        });
    }
    let mut out = JumpFactors {
        pod: i,
        nu_minus_k: nu[..upto + 2].to_vec(),
        mu_plus: Vec::with_capacity(upto),
        e: Vec::with_capacity(upto),
        c: vec![1.0],
    };
    for j in 1..upto {
        let mu_plus = if j <= i { nu[j - 1] } else { nu[i - 1] };
        let den = mu_plus - nu[j + 1];
        if den.abs() < DEGENERATE_GAP {
            return Err(MechError::Degenerate(format!(
                "jump factor e^{j} is singular: mu_plus = nu^{} = {mu_plus}",
                j + 1
            )));
        }
        let e = nu[j + 2] * (mu_plus - nu[j]) / (nu[j + 1] * den);
        if !(e > 0.0) {
            return Err(MechError::Structure(format!(
                "jump factor e^{j} = {e} is not positive (pod {i}, mu_plus {mu_plus}, nu {:?})",
                &nu[..upto + 2]
            )));
        }
        out.mu_plus.push(mu_plus);
        out.e.push(e);
        let prev = *out.c.last().unwrap();
        out.c.push(prev * e);
    }
    Ok(out)
}

/// `(beta_k, reward)` for the agent's own pod.
pub fn ci_prices(jf: &JumpFactors, pi_e: f64) -> (f64, f64) {
    jf.prices_at(jf.pod, pi_e)
}

/// Cores formed by a profile without one agent.
#[derive(Debug, Clone)]
struct MinusK {
    /// Exclusive end positions (in the reduced order) of complete cores.
    core_ends: Vec<usize>,
    /// Highest report per complete core.
    core_max: Vec<f64>,
    /// Highest report among agents left after the last complete core.
    leftover_max: Option<f64>,
}

impl MinusK {
    fn build(f: &[f64], mu: &[f64], skip: Option<usize>, target: f64) -> Self {
        let mut core_ends = Vec::new();
        let mut core_max = Vec::new();
        let mut acc = 0.0;
        let mut reduced = 0;
        let mut last_mu = None;
        for t in 0..f.len() {
            if Some(t) == skip {
                continue;
            }
            acc += f[t];
            reduced += 1;
            last_mu = Some(mu[t]);
            if acc >= target {
                core_ends.push(reduced);
                core_max.push(mu[t]);
                acc = 0.0;
                last_mu = None;
            }
        }
        MinusK {
            core_ends,
            core_max,
            leftover_max: last_mu,
        }
    }

    /// Pod allotted to an agent inserted before reduced position `at`.
    fn pod_of_insertion(&self, at: usize) -> usize {
        self.core_ends.partition_point(|&end| end <= at) + 1
    }

    /// `nu[0..len]`, clamped past the last complete core. Returns the
    /// first clamped index, if any.
    fn nu(&self, len: usize) -> (Vec<f64>, Option<usize>) {
        let mut out = Vec::with_capacity(len);
        let mut clamped = None;
        for j in 0..len {
            if let Some(&m) = self.core_max.get(j) {
                out.push(m);
            } else {
                clamped.get_or_insert(j);
                let last = out.last().copied();
                let v = match (self.leftover_max, last) {
                    (Some(l), Some(p)) => l.max(p),
                    (Some(l), None) => l,
                    (None, Some(p)) => p,
                    (None, None) => f64::NAN,
                };
                out.push(v);
            }
        }
        (out, clamped)
    }
}

/// Pod structure plus the per-agent recursion behind every price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiStructure {
    pub pods: PodStructure,
    /// Per sorted position, for core members of selectable pods.
    pub factors: Vec<Option<JumpFactors>>,
}

struct CiScan {
    cores: Vec<std::ops::Range<usize>>,
    betas: Vec<f64>,
    factors: Vec<Option<JumpFactors>>,
}

fn scan(p: &SortedProfile, target: f64, pi_e: f64) -> Result<CiScan> {
    let full = MinusK::build(&p.f, &p.mu, None, target);
    let mut cores = Vec::with_capacity(full.core_ends.len());
    let mut start = 0;
    for &end in &full.core_ends {
        cores.push(start..end);
        start = end;
    }
    let mut factors = vec![None; p.len()];
    let mut betas = Vec::new();
    let mut sum_beta = 0.0;
    for (idx, core) in cores.iter().enumerate() {
        let i = idx + 1;
        let mut pod_beta = f64::INFINITY;
        for pos in core.clone() {
            let mk = MinusK::build(&p.f, &p.mu, Some(pos), target);
            let (nu, clamped) = mk.nu(i + 2);
            if clamped.is_some() {
                let left: f64 = p.f[core.end..].iter().sum();
                return Err(MechError::RecruitmentShortfall {
                    missing_kwh: (2.0 * target - left).max(0.0),
                    detail: format!(
                        "{} agents: pod {i} cannot be priced without two complete cores above it (probabilities sum to {sum_beta:.4})",
                        p.len()
                    ),
                });
            }
            let jf = compute_jump_factors(&nu, i, i)?;
            let (b, _) = ci_prices(&jf, pi_e);
            pod_beta = pod_beta.min(b);
            factors[pos] = Some(jf);
        }
        betas.push(pod_beta);
        sum_beta += pod_beta;
        if sum_beta >= 1.0 {
            if cores.len() < i + 1 {
                break;
            }
            cores.truncate(i + 1);
            return Ok(CiScan { cores, betas, factors });
        }
    }
    let left: f64 = p.f[cores.last().map_or(0, |c| c.end)..].iter().sum();
    Err(MechError::RecruitmentShortfall {
        missing_kwh: (target - left).max(0.0),
        detail: format!(
            "{} agents form {} complete cores; pod probabilities sum to {sum_beta:.4}",
            p.len(),
            cores.len()
        ),
    })
}

pub fn ci_pod_sort(reports: &[Report], target: f64, pi_e: f64) -> Result<CiStructure> {
    ci_pod_sort_sorted(&SortedProfile::from_reports(reports)?, target, pi_e)
}

/// Sorts into pods with complete-information prices. The pod probability is
/// the smallest member probability of its core.
pub fn ci_pod_sort_sorted(p: &SortedProfile, target: f64, pi_e: f64) -> Result<CiStructure> {
    let CiScan { cores, betas, mut factors } = scan(p, target, pi_e)?;
    let m = betas.len();
    let mut member_beta = vec![None; p.len()];
    let mut member_reward = vec![None; p.len()];
    let mut pods = Vec::with_capacity(m);
    for i in 0..m {
        for pos in cores[i].clone() {
            let jf = factors[pos].as_ref().expect("core member priced");
            let (b, r) = ci_prices(jf, pi_e);
            member_beta[pos] = Some(b);
            member_reward[pos] = Some(r);
        }
        let header = cores[i + 1].clone();
        pods.push(Pod {
            nu: p.mu[header.end - 1],
            beta: betas[i],
            core: cores[i].clone(),
            header,
        });
    }
    for f in factors.iter_mut().skip(cores[m - 1].end) {
        *f = None;
    }
    Ok(CiStructure {
        pods: PodStructure {
            order: p.order.clone(),
            f: p.f.clone(),
            mu: p.mu.clone(),
            pods,
            extra_core: cores[m].clone(),
            member_beta,
            member_reward,
        },
        factors,
    })
}

pub fn closes(p: &SortedProfile, target: f64, pi_e: f64) -> bool {
    scan(p, target, pi_e).is_ok()
}

/// Pricing of agent k as a function of its own report under the
/// complete-information rule, with every other report fixed. Pods are not
/// cut off by the stopping rule here: this is the object the truthfulness
/// argument is about.
pub struct CiPricer {
    k: AgentId,
    pi_e: f64,
    penalty: f64,
    others: SortedProfile,
    minus_k: MinusK,
}

impl CiPricer {
    pub fn new(reports: &[Report], k: AgentId, params: &MarketParams) -> Result<Self> {
        let mut others = SortedProfile::from_reports(reports)?;
        let pos = others.order.iter().position(|&a| a == k).ok_or(MechError::UnknownAgent(k))?;
        others.remove_at(pos);
        let minus_k = MinusK::build(&others.f, &others.mu, None, params.target);
        Ok(CiPricer {
            k,
            pi_e: params.pi_e,
            penalty: params.penalty_price(),
            others,
            minus_k,
        })
    }

    /// Pod the agent lands in when reporting `mu`.
    pub fn pod_for(&self, mu: f64) -> usize {
        self.minus_k.pod_of_insertion(self.others.insertion_point(mu, self.k))
    }

    /// Jump factors for pod `i`, evaluated up to pod `upto`.
    pub fn factors(&self, i: usize, upto: usize) -> Result<JumpFactors> {
        let (nu, _) = self.minus_k.nu(upto + 2);
        compute_jump_factors(&nu, i, upto)
    }

    pub fn price(&self, report: &Report) -> Result<Pricing> {
        let mu = report.mu.ok_or(MechError::InvalidParam {
            field: "mu",
            reason: "deviation without a marginal utility".into(),
        })?;
        let i = self.pod_for(mu);
        match self.factors(i, i) {
            Ok(jf) => {
                let (beta, reward) = ci_prices(&jf, self.pi_e);
                Ok(Pricing {
                    selection_prob: beta.min(1.0),
                    reward_price: reward,
                    penalty_price: self.penalty,
                })
            }
            // above every complete core of the others: never priced
            Err(MechError::Degenerate(_)) | Err(MechError::InvalidParam { .. }) => Ok(Pricing {
                selection_prob: 0.0,
                reward_price: 0.0,
                penalty_price: self.penalty,
            }),
            Err(e) => Err(e),
        }
    }
}

/// Pricing of agent k when the full mechanism, stopping rule included, is
/// rerun on every deviation. The call probability accounts for intervals
/// cut off at one.
pub struct OperationalCiPricer {
    k: AgentId,
    target: f64,
    pi_e: f64,
    penalty: f64,
    others: SortedProfile,
}

impl OperationalCiPricer {
    pub fn new(reports: &[Report], k: AgentId, params: &MarketParams) -> Result<Self> {
        let mut others = SortedProfile::from_reports(reports)?;
        let pos = others.order.iter().position(|&a| a == k).ok_or(MechError::UnknownAgent(k))?;
        others.remove_at(pos);
        Ok(OperationalCiPricer {
            k,
            target: params.target,
            pi_e: params.pi_e,
            penalty: params.penalty_price(),
            others,
        })
    }

    pub fn price(&self, report: &Report) -> Result<Pricing> {
        let mut p = self.others.clone();
        let at = p.insert(&Report { agent_id: self.k, ..*report })?;
        // a profile that leaves the stopping rule open is never run
        let s = match ci_pod_sort_sorted(&p, self.target, self.pi_e) {
            Err(MechError::RecruitmentShortfall { .. }) => {
                return Ok(Pricing {
                    selection_prob: 0.0,
                    reward_price: 0.0,
                    penalty_price: self.penalty,
                })
            }
            other => other?,
        };
        Ok(Pricing {
            selection_prob: srbm::call_probability(&s.pods, at, SelectionRule::PerAgent),
            reward_price: s.pods.member_reward[at].unwrap_or(0.0),
            penalty_price: self.penalty,
        })
    }
}

/// `U~^j`: expected net utility of a truthful-baseline agent placed in pod
/// `j` with the factors computed for its own pod.
pub fn utility_tilde(jf: &JumpFactors, j: usize, pi: f64, b: f64, pi_e: f64) -> f64 {
    let (beta, _) = jf.prices_at(j, pi_e);
    let reward = jf.nu_minus_k[j] - pi_e;
    beta * reward * b + (1.0 - beta) * (pi - pi_e) * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Agent;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const PE: f64 = 0.15;

    #[test]
    fn toy_recursion() {
        // agent in pod 2 with nu = (0.5, 0.7, 0.9, 1.1):
        // e^1 = 1.1 (0.5 - 0.7) / (0.9 (0.5 - 0.9)) = 11/18
        let jf = compute_jump_factors(&[0.5, 0.7, 0.9, 1.1], 2, 2).unwrap();
        assert_eq!(jf.c[0], 1.0);
        assert_abs_diff_eq!(jf.e[0], 11.0 / 18.0, epsilon = 1e-12);
        assert_abs_diff_eq!(jf.c_own(), 11.0 / 18.0, epsilon = 1e-12);
        assert_eq!(jf.mu_plus, vec![0.5]);
        let (beta, reward) = ci_prices(&jf, PE);
        assert_abs_diff_eq!(beta, 11.0 / 18.0 * PE / 1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(reward, 0.9 - PE, epsilon = 1e-12);
        assert!(beta < PE / (reward + PE));
        assert!(jf.c_own() < 1.1 / 0.9);
    }

    #[test]
    fn first_pod_has_unit_factor() {
        let jf = compute_jump_factors(&[0.4, 0.6, 0.8], 1, 1).unwrap();
        assert_eq!(jf.c_own(), 1.0);
        let (beta, _) = ci_prices(&jf, PE);
        assert_abs_diff_eq!(beta, PE / 0.8, epsilon = 1e-12);
    }

    #[test]
    fn singular_and_invalid_sequences() {
        assert!(matches!(
            compute_jump_factors(&[0.5, 0.7, 0.5, 1.1], 2, 2),
            Err(MechError::InvalidParam { .. })
        ));
        assert!(matches!(
            compute_jump_factors(&[0.7, 0.7, 0.7, 0.9], 2, 2),
            Err(MechError::Degenerate(_))
        ));
        assert!(compute_jump_factors(&[0.5, 0.7], 1, 1).is_err());
        assert!(compute_jump_factors(&[0.5, 0.7, 0.9], 0, 1).is_err());
    }

    fn profile_in(n: usize, seed: u64, pi_lo: f64, pi_hi: f64) -> Vec<Agent> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| Agent::new(i, rng.gen_range(2.5..7.5), rng.gen_range(pi_lo..pi_hi))).collect()
    }

    fn profile(n: usize, seed: u64) -> Vec<Agent> {
        profile_in(n, seed, 0.16, 0.4)
    }

    #[test]
    fn truthful_structure_delivers() {
        let agents = profile(60, 4);
        let params = MarketParams::example_one().with_target(10.0);
        let rs: Vec<Report> = agents.iter().map(Agent::truthful).collect();
        let s = ci_pod_sort(&rs, 10.0, PE).unwrap();
        for j in 0..=100 {
            let u = j as f64 / 100.0;
            let ev = srbm::run_event(j, &s.pods, &agents, u, &params, SelectionRule::PerAgent).unwrap();
            assert!(ev.delivered >= 10.0);
            assert_eq!(ev.penalty_revenue, 0.0);
        }
    }

    #[test]
    fn pricer_matches_structure() {
        let agents = profile(60, 9);
        let params = MarketParams::example_one().with_target(10.0);
        let rs: Vec<Report> = agents.iter().map(Agent::truthful).collect();
        let s = ci_pod_sort(&rs, 10.0, PE).unwrap();
        for pod in &s.pods.pods {
            for pos in pod.core.clone() {
                let k = s.pods.order[pos];
                let pr = CiPricer::new(&rs, k, &params).unwrap();
                let p = pr.price(&rs[k]).unwrap();
                assert_abs_diff_eq!(p.selection_prob, s.pods.member_beta[pos].unwrap(), epsilon = 1e-12);
                assert_abs_diff_eq!(p.reward_price, s.pods.member_reward[pos].unwrap(), epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn recursion_invariants(seed in any::<u64>(), n in 40usize..90) {
            let agents = profile(n, seed);
            let rs: Vec<Report> = agents.iter().map(Agent::truthful).collect();
            let Ok(s) = ci_pod_sort(&rs, 10.0, PE) else { return Ok(()); };
            for pos in 0..s.pods.order.len() {
                let Some(jf) = &s.factors[pos] else { continue };
                let i = jf.pod;
                prop_assert_eq!(jf.c[0], 1.0);
                prop_assert!(jf.e.iter().all(|&e| e > 0.0));
                let nu = &jf.nu_minus_k;
                prop_assert!(jf.c_own() < nu[i + 1] / nu[i]);
                let (beta, reward) = ci_prices(jf, PE);
                prop_assert!(beta < PE / (reward + PE));
                prop_assert!(s.pods.pods[i - 1].beta <= beta);
            }
        }

        #[test]
        fn higher_pods_shrink_factors_and_utility(seed in any::<u64>(), n in 40usize..90) {
            let agents = profile(n, seed);
            let params = MarketParams::example_one().with_target(10.0);
            let rs: Vec<Report> = agents.iter().map(Agent::truthful).collect();
            let Ok(s) = ci_pod_sort(&rs, 10.0, PE) else { return Ok(()); };
            for pod in &s.pods.pods {
                for pos in pod.core.clone() {
                    let k = s.pods.order[pos];
                    let pr = CiPricer::new(&rs, k, &params).unwrap();
                    let i = pr.pod_for(agents[k].pi);
                    let top = pr.minus_k.core_max.len().saturating_sub(2);
                    if top <= i { continue; }
                    let own = pr.factors(i, top).unwrap();
                    for r in i + 1..=top {
                        // factors computed as if allotted pod r never exceed the agent's own
                        let Ok(other) = pr.factors(r, top) else { continue };
                        for j in 1..=top {
                            prop_assert!(other.c_at(j) <= own.c_at(j) * (1.0 + 1e-12));
                        }
                    }
                    for j in i..top {
                        let a = utility_tilde(&own, j, agents[k].pi, agents[k].b, PE);
                        let b = utility_tilde(&own, j + 1, agents[k].pi, agents[k].b, PE);
                        prop_assert!(b <= a + 1e-9, "pod {} -> {}: {} > {}", j, j + 1, b, a);
                    }
                }
            }
        }
    }
}
