//! Baseline-only reporting: uniform prices, independent random selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{optimal_consumption_not_selected, optimal_consumption_selected};
use crate::domain::{Agent, EventResult, MarketParams, Pricing, Report};
use crate::error::{MechError, Result};

/// Uniform prices and selection probability of the mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineOnlyPrices {
    pub reward_price: f64,
    pub penalty_price: f64,
    pub alpha: f64,
}

impl BaselineOnlyPrices {
    pub fn pricing(&self) -> Pricing {
        Pricing {
            selection_prob: self.alpha,
            reward_price: self.reward_price,
            penalty_price: self.penalty_price,
        }
    }

    /// Largest selection probability that keeps truthful baselines optimal.
    pub fn alpha_threshold(&self, pi_e: f64) -> f64 {
        pi_e / (self.reward_price + pi_e)
    }
}

/// Cost-minimizing parameters: `pi_r = pi_max - pi_e`, `pi_p = pi_e`,
/// `alpha = pi_e / pi_max`.
pub fn configure(params: &MarketParams) -> BaselineOnlyPrices {
    BaselineOnlyPrices {
        reward_price: params.pi_max - params.pi_e,
        penalty_price: params.pi_e,
        alpha: params.pi_e / params.pi_max,
    }
}

/// Recruits agents from the stream until `sum(alpha * b) >= target`.
/// Truthful baseline reports are assumed.
pub fn recruit<I>(stream: I, alpha: f64, target: f64) -> Result<Vec<Agent>>
where
    I: IntoIterator<Item = Agent>,
{
    let mut recruited = Vec::new();
    let mut covered = 0.0;
    for a in stream {
        covered += alpha * a.b;
        recruited.push(a);
        if covered >= target {
            return Ok(recruited);
        }
    }
    Err(MechError::RecruitmentShortfall {
        missing_kwh: (target - covered) / alpha.max(f64::MIN_POSITIVE),
        detail: format!(
            "population of {} agents covers only {covered:.3} of {target} kWh in expectation",
            recruited.len()
        ),
    })
}

/// Runs one DR event: every recruited agent is called independently with
/// probability `alpha` and then consumes optimally.
pub fn run_event<R: Rng + ?Sized>(
    event_index: usize,
    agents: &[Agent],
    reports: &[Report],
    prices: &BaselineOnlyPrices,
    pi_e: f64,
    rng: &mut R,
) -> EventResult {
    run_event_with(event_index, agents, reports, prices, pi_e, |_| rng.gen::<f64>() < prices.alpha)
}

/// Same as [`run_event`] with an explicit selection decision per agent.
pub fn run_event_with(
    event_index: usize,
    agents: &[Agent],
    reports: &[Report],
    prices: &BaselineOnlyPrices,
    pi_e: f64,
    mut is_called: impl FnMut(&Agent) -> bool,
) -> EventResult {
    debug_assert_eq!(agents.len(), reports.len());
    let mut out = EventResult {
        event_index,
        called_ids: Vec::new(),
        delivered: 0.0,
        payout: 0.0,
        penalty_revenue: 0.0,
    };
    for (a, r) in agents.iter().zip(reports) {
        if is_called(a) {
            let d = optimal_consumption_selected(a, r.f, prices.reward_price, pi_e);
            out.called_ids.push(a.id);
            out.payout += prices.reward_price * (r.f - d.q_star).max(0.0);
            out.delivered += (a.b - d.q_star).max(0.0);
        } else {
            let d = optimal_consumption_not_selected(a, r.f, prices.penalty_price, pi_e);
            out.penalty_revenue += prices.penalty_price * (r.f - d.q_star).max(0.0);
            out.delivered += (a.b - d.q_star).max(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn configure_example_one() {
        let p = configure(&MarketParams::example_one());
        assert_abs_diff_eq!(p.reward_price, 1.15, epsilon = 1e-12);
        assert_abs_diff_eq!(p.penalty_price, 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(p.alpha, 0.15 / 1.3, epsilon = 1e-12);
        assert_abs_diff_eq!(p.alpha * (p.reward_price + 0.15), 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(p.alpha, p.alpha_threshold(0.15), epsilon = 1e-12);
    }

    #[test]
    fn configure_near_boundary() {
        let eps = 1e-6;
        let params = MarketParams {
            pi_max: 0.15 + eps,
            ..MarketParams::example_one()
        };
        let p = configure(&params);
        assert_abs_diff_eq!(p.reward_price, eps, epsilon = 1e-12);
        assert!(p.alpha < 1.0 && p.alpha > 0.9999);
    }

    fn uniform_stream(b: f64) -> impl Iterator<Item = Agent> {
        (0..).map(move |i| Agent::new(i, b, 0.5))
    }

    #[test]
    fn recruit_counts() {
        assert_eq!(recruit(uniform_stream(5.0), 0.5, 10.0).unwrap().len(), 4);
        assert_eq!(recruit(uniform_stream(5.0), 0.15 / 1.3, 100.0).unwrap().len(), 174);
    }

    #[test]
    fn recruit_shortfall() {
        let err = recruit(uniform_stream(5.0).take(3), 0.5, 10.0).unwrap_err();
        match err {
            MechError::RecruitmentShortfall { missing_kwh, .. } => assert_abs_diff_eq!(missing_kwh, 5.0, epsilon = 1e-9),
            e => panic!("unexpected {e:?}"),
        }
    }

    fn population() -> Vec<Agent> {
        (0..40).map(|i| Agent::new(i, 2.0 + (i % 7) as f64, 0.3 + 0.02 * i as f64)).collect()
    }

    #[test]
    fn truthful_event_has_no_penalty_and_full_curtailment() {
        let agents = population();
        let reports: Vec<Report> = agents.iter().map(Agent::truthful_baseline).collect();
        let prices = configure(&MarketParams::example_one());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for e in 0..50 {
            let ev = run_event(e, &agents, &reports, &prices, 0.15, &mut rng);
            assert_eq!(ev.penalty_revenue, 0.0);
            let called: f64 = agents.iter().filter(|a| ev.called_ids.contains(&a.id)).map(|a| a.b).sum();
            assert_abs_diff_eq!(ev.delivered, called, epsilon = 1e-9);
            assert_abs_diff_eq!(ev.payout, prices.reward_price * called, epsilon = 1e-9);
        }
    }

    #[test]
    fn forced_selection_delivers_everything() {
        let agents = population();
        let reports: Vec<Report> = agents.iter().map(Agent::truthful_baseline).collect();
        let prices = configure(&MarketParams::example_one());
        let ev = run_event_with(0, &agents, &reports, &prices, 0.15, |_| true);
        let total: f64 = agents.iter().map(|a| a.b).sum();
        assert_abs_diff_eq!(ev.delivered, total, epsilon = 1e-9);
        assert_eq!(ev.called_ids.len(), agents.len());
    }

    #[test]
    fn expected_delivery_meets_target() {
        let params = MarketParams::example_one();
        let prices = configure(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stream = (0..).map(|i| Agent::new(i, 4.0 + 2.0 * ((i * 7919) % 100) as f64 / 100.0, 0.8));
        let agents = recruit(stream, prices.alpha, params.target).unwrap();
        let reports: Vec<Report> = agents.iter().map(Agent::truthful_baseline).collect();
        let n = 4000;
        let samples: Vec<f64> = (0..n)
            .map(|e| run_event(e, &agents, &reports, &prices, params.pi_e, &mut rng).delivered)
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let expected: f64 = prices.alpha * agents.iter().map(|a| a.b).sum::<f64>();
        assert!(expected >= params.target);
        assert!((mean - expected).abs() <= 3.0 * se, "mean {mean} expected {expected} se {se}");
    }
}
