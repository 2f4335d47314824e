//! Rational-agent model: second-stage consumption and first-stage reports.
//!
//! Utilities are piece-wise linear, so every second-stage cost is
//! piece-wise linear in consumption `q` with kinks at `b` and `f`; the
//! minimizer is always one of those kinks (or zero).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{utility, Agent, Pricing, Report, TOL};
use crate::error::{MechError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondStageDecision {
    pub q_star: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    pub f_star: f64,
    pub mu_star: Option<f64>,
    pub expected_cost: f64,
    pub grid_resolution: (f64, f64),
}

/// `pi_e q - u(q) - reward (f - q)^+`
pub fn selected_cost(agent: &Agent, q: f64, f: f64, reward_price: f64, pi_e: f64) -> f64 {
    pi_e * q - utility(agent, q) - reward_price * (f - q).max(0.0)
}

/// `pi_e q - u(q) + penalty (f - q)^+`
pub fn not_selected_cost(agent: &Agent, q: f64, f: f64, penalty_price: f64, pi_e: f64) -> f64 {
    pi_e * q - utility(agent, q) + penalty_price * (f - q).max(0.0)
}

/// Picks the first candidate unless a later one is better by more than `TOL`.
fn argmin(candidates: &[f64], cost: impl Fn(f64) -> f64) -> SecondStageDecision {
    let mut best = SecondStageDecision {
        q_star: candidates[0],
        cost: cost(candidates[0]),
    };
    for &q in &candidates[1..] {
        let c = cost(q);
        if c < best.cost - TOL {
            best = SecondStageDecision { q_star: q, cost: c };
        }
    }
    best
}

/// Optimal consumption of a called agent. Ties go to the smallest `q`, so an
/// agent paid exactly its indifference price still curtails.
pub fn optimal_consumption_selected(agent: &Agent, f: f64, reward_price: f64, pi_e: f64) -> SecondStageDecision {
    debug_assert!(f >= 0.0 && reward_price >= 0.0);
    let candidates = [0.0, f.min(agent.b), agent.b];
    argmin(&candidates, |q| selected_cost(agent, q, f, reward_price, pi_e))
}

/// Optimal consumption of an agent that was not called. Ties go to the true
/// baseline `b`.
pub fn optimal_consumption_not_selected(agent: &Agent, f: f64, penalty_price: f64, pi_e: f64) -> SecondStageDecision {
    debug_assert!(f >= 0.0 && penalty_price >= 0.0);
    let candidates = [agent.b, f.min(agent.b), f];
    argmin(&candidates, |q| not_selected_cost(agent, q, f, penalty_price, pi_e))
}

/// First-stage expected cost `a J_s(q*_s, f) + (1 - a) J_ns(q*_ns, f)`.
pub fn expected_report_cost(agent: &Agent, report: &Report, pricing: &Pricing, pi_e: f64) -> f64 {
    let a = pricing.selection_prob;
    debug_assert!((0.0..=1.0).contains(&a));
    let f = report.f;
    let sel = if a > 0.0 {
        optimal_consumption_selected(agent, f, pricing.reward_price, pi_e).cost
    } else {
        0.0
    };
    let not_sel = if a < 1.0 {
        optimal_consumption_not_selected(agent, f, pricing.penalty_price, pi_e).cost
    } else {
        0.0
    };
    a * sel + (1.0 - a) * not_sel
}

/// Report grid used by the dominant-strategy audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportGrid {
    pub f: Vec<f64>,
    /// Empty for baseline-only mechanisms.
    pub mu: Vec<f64>,
}

impl ReportGrid {
    /// `f` over `[0, 2 b_max]` in steps of `b_max / steps`; `mu` over
    /// `[pi_e, pi_max]` in steps of `(pi_max - pi_e) / steps`.
    pub fn new(b_max: f64, pi_e: f64, pi_max: f64, steps: usize, with_mu: bool) -> Self {
        let df = b_max / steps as f64;
        let f = (0..=2 * steps).map(|i| i as f64 * df).collect();
        let mu = if with_mu {
            let dm = (pi_max - pi_e) / steps as f64;
            (0..=steps).map(|i| pi_e + i as f64 * dm).collect()
        } else {
            Vec::new()
        };
        ReportGrid { f, mu }
    }

    pub fn default_for(b_max: f64, pi_e: f64, pi_max: f64, with_mu: bool) -> Self {
        Self::new(b_max, pi_e, pi_max, 50, with_mu)
    }

    /// Adds the agent's true report to the grid.
    pub fn with_truth(mut self, agent: &Agent) -> Self {
        fn insert(v: &mut Vec<f64>, x: f64) {
            if let Err(at) = v.binary_search_by(|p| p.total_cmp(&x)) {
                v.insert(at, x);
            }
        }
        insert(&mut self.f, agent.b);
        if !self.mu.is_empty() {
            insert(&mut self.mu, agent.pi);
        }
        self
    }

    pub fn resolution(&self) -> (f64, f64) {
        let step = |v: &[f64]| if v.len() > 1 { v[1] - v[0] } else { 0.0 };
        (step(&self.f), step(&self.mu))
    }
}

/// Exhaustive best response over the grid. Ties go to the smallest `f`, then
/// the smallest `mu`. Grid points are evaluated in parallel; the reduction is
/// sequential in grid order so the answer does not depend on scheduling.
pub fn best_response<F>(agent: &Agent, pi_e: f64, price_fn: F, grid: &ReportGrid) -> Result<BestResponse>
where
    F: Fn(&Report) -> Result<Pricing> + Sync,
{
    if grid.f.is_empty() {
        return Err(MechError::InvalidParam {
            field: "grid",
            reason: "baseline grid is empty".into(),
        });
    }
    let mus: Vec<Option<f64>> = if grid.mu.is_empty() {
        vec![None]
    } else {
        grid.mu.iter().copied().map(Some).collect()
    };
    let points: Vec<Report> = grid
        .f
        .iter()
        .flat_map(|&f| mus.iter().map(move |&mu| Report { agent_id: agent.id, f, mu }))
        .collect();

    let costs: Vec<Result<f64>> = points
        .par_iter()
        .map(|r| {
            price_fn(r)
                .map(|p| expected_report_cost(agent, r, &p, pi_e))
                .map_err(|e| {
                    MechError::Structure(format!(
                        "could not price deviation (f = {}, mu = {:?}) of agent {}: {e}",
                        r.f, r.mu, agent.id
                    ))
                })
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, c) in costs.into_iter().enumerate() {
        let c = c?;
        match best {
            Some((_, bc)) if c >= bc - TOL => {}
            _ => best = Some((i, c)),
        }
    }
    let (i, c) = best.expect("non-empty grid");
    Ok(BestResponse {
        f_star: points[i].f,
        mu_star: points[i].mu,
        expected_cost: c,
        grid_resolution: grid.resolution(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const PE: f64 = 0.15;

    fn agent() -> Agent {
        Agent::new(0, 5.0, 0.5)
    }

    #[test]
    fn selected_truthful_high_reward() {
        let d = optimal_consumption_selected(&agent(), 5.0, 1.15, PE);
        assert_eq!(d.q_star, 0.0);
        assert_abs_diff_eq!(d.cost, -5.75, epsilon = 1e-12);
    }

    #[test]
    fn selected_low_reward_yields_nothing() {
        let d = optimal_consumption_selected(&agent(), 5.0, 0.10, PE);
        assert_eq!(d.q_star, 5.0);
        assert_abs_diff_eq!(d.cost, -1.75, epsilon = 1e-12);
    }

    #[test]
    fn selected_inflated_report() {
        // candidates {0, 5, 7}: J(0) = -8.05, J(5) = -4.05
        let d = optimal_consumption_selected(&agent(), 7.0, 1.15, PE);
        assert_eq!(d.q_star, 0.0);
        assert_abs_diff_eq!(d.cost, -8.05, epsilon = 1e-12);
    }

    #[test]
    fn selected_indifference_curtails() {
        let d = optimal_consumption_selected(&agent(), 5.0, 0.35, PE);
        assert_eq!(d.q_star, 0.0);
    }

    #[test]
    fn not_selected_examples() {
        let d = optimal_consumption_not_selected(&agent(), 5.0, 0.15, PE);
        assert_eq!(d.q_star, 5.0);
        assert_abs_diff_eq!(d.cost, -1.75, epsilon = 1e-12);

        let d = optimal_consumption_not_selected(&agent(), 8.0, 0.15, PE);
        assert_eq!(d.q_star, 5.0);
        assert_abs_diff_eq!(d.cost, -1.30, epsilon = 1e-12);

        let d = optimal_consumption_not_selected(&agent(), 3.0, 0.15, PE);
        assert_eq!(d.q_star, 5.0);
        assert_abs_diff_eq!(d.cost, -1.75, epsilon = 1e-12);
    }

    #[test]
    fn expected_cost_examples() {
        let a = agent();
        let r = a.truthful_baseline();
        let p = Pricing {
            selection_prob: 0.15 / 1.30,
            reward_price: 1.15,
            penalty_price: 0.15,
        };
        assert_abs_diff_eq!(expected_report_cost(&a, &r, &p, PE), -2.211538, epsilon = 1e-5);

        let p0 = Pricing { selection_prob: 0.0, ..p };
        let r8 = Report { f: 8.0, ..r };
        assert_abs_diff_eq!(
            expected_report_cost(&a, &r8, &p0, PE),
            optimal_consumption_not_selected(&a, 8.0, 0.15, PE).cost,
            epsilon = 1e-12
        );

        // certain selection with a large reward: cost falls linearly in f
        let p1 = Pricing {
            selection_prob: 1.0,
            reward_price: 10.0,
            penalty_price: 0.15,
        };
        for f in [5.0, 50.0, 500.0] {
            let r = Report { f, ..r };
            assert_abs_diff_eq!(expected_report_cost(&a, &r, &p1, PE), -10.0 * f, epsilon = 1e-9);
        }
    }

    #[test]
    fn best_response_truthful_under_threshold() {
        let a = agent();
        let grid = ReportGrid {
            f: (0..=20).map(|i| i as f64 * 0.5).collect(),
            mu: vec![],
        };
        let pricing = Pricing {
            selection_prob: 0.15 / 1.3,
            reward_price: 1.15,
            penalty_price: 0.15,
        };
        let br = best_response(&a, PE, |_| Ok(pricing), &grid).unwrap();
        assert_eq!(br.f_star, 5.0);
        assert_eq!(br.mu_star, None);
    }

    #[test]
    fn best_response_inflates_above_threshold() {
        let a = agent();
        let grid = ReportGrid {
            f: (0..=20).map(|i| i as f64 * 0.5).collect(),
            mu: vec![],
        };
        let pricing = Pricing {
            selection_prob: 0.5,
            reward_price: 1.15,
            penalty_price: 0.15,
        };
        let br = best_response(&a, PE, |_| Ok(pricing), &grid).unwrap();
        assert_eq!(br.f_star, 10.0);
    }

    #[test]
    fn best_response_reports_pricing_failure() {
        let grid = ReportGrid::default_for(5.0, PE, 1.3, false);
        let err = best_response(&agent(), PE, |_| Err(MechError::Structure("boom".into())), &grid).unwrap_err();
        assert!(matches!(err, MechError::Structure(_)));
    }

    #[test]
    fn grid_with_truth() {
        let g = ReportGrid::new(6.0, 0.15, 1.3, 10, true).with_truth(&Agent::new(0, 5.0, 0.5));
        assert!(g.f.contains(&5.0) && g.mu.contains(&0.5));
        assert_eq!(g.f.len(), 22);
        assert!(g.f.windows(2).all(|w| w[0] < w[1]));
        let g2 = g.clone().with_truth(&Agent::new(0, 5.0, 0.5));
        assert_eq!(g, g2);
    }

    #[test]
    fn default_grid_shape() {
        let g = ReportGrid::default_for(6.0, 0.15, 1.3, true);
        assert_eq!(g.f.len(), 101);
        assert_eq!(g.mu.len(), 51);
        assert_abs_diff_eq!(*g.f.last().unwrap(), 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(*g.mu.last().unwrap(), 1.3, epsilon = 1e-12);
        let (df, dm) = g.resolution();
        assert_abs_diff_eq!(df, 0.12, epsilon = 1e-12);
        assert_abs_diff_eq!(dm, 0.023, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn minimizers_lie_on_kinks(
            b in 0.1f64..10.0, pi in 0.16f64..1.3, f in 0.0f64..20.0,
            price in 0.0f64..2.0,
        ) {
            let a = Agent::new(0, b, pi);
            let s = optimal_consumption_selected(&a, f, price, PE);
            let ns = optimal_consumption_not_selected(&a, f, price.max(PE), PE);
            // dense scan never beats the kink candidate
            let hi = 2.0 * b.max(f) + 1.0;
            for i in 0..=2000 {
                let q = hi * i as f64 / 2000.0;
                prop_assert!(selected_cost(&a, q, f, price, PE) >= s.cost - 1e-9);
                prop_assert!(not_selected_cost(&a, q, f, price.max(PE), PE) >= ns.cost - 1e-9);
            }
            let kinks = [0.0, f.min(b), b, f];
            prop_assert!(kinks.iter().any(|k| (k - s.q_star).abs() < 1e-12));
            prop_assert!(kinks.iter().any(|k| (k - ns.q_star).abs() < 1e-12));
            prop_assert!((selected_cost(&a, s.q_star, f, price, PE) - s.cost).abs() < 1e-12);
        }

        #[test]
        fn truthful_is_optimal_below_threshold(
            b in 0.5f64..10.0, pi in 0.16f64..1.3, reward in 0.0f64..2.0,
            penalty_extra in 0.0f64..1.0, shrink in 0.0f64..1.0,
        ) {
            let a = Agent::new(0, b, pi);
            let alpha = shrink * PE / (reward + PE);
            let pricing = Pricing { selection_prob: alpha, reward_price: reward, penalty_price: PE + penalty_extra };
            let cost = |f: f64| expected_report_cost(&a, &Report { agent_id: 0, f, mu: None }, &pricing, PE);
            let truthful = cost(b);
            // finite-difference slopes: >= 0 right of b, <= 0 left of b
            let h = 1e-4 * b;
            prop_assert!(cost(b + h) - truthful >= -1e-9);
            prop_assert!(cost(b - h) - truthful >= -1e-9);
            for i in 0..=200 {
                let f = 3.0 * b * i as f64 / 200.0;
                prop_assert!(cost(f) >= truthful - 1e-9);
            }
        }

        #[test]
        fn selected_cost_monotone_in_reward(
            b in 0.5f64..10.0, pi in 0.16f64..1.3, f in 0.0f64..15.0,
            r1 in 0.0f64..2.0, dr in 0.0f64..1.0,
        ) {
            let a = Agent::new(0, b, pi);
            let lo = optimal_consumption_selected(&a, f, r1, PE).cost;
            let hi = optimal_consumption_selected(&a, f, r1 + dr, PE).cost;
            prop_assert!(hi <= lo + 1e-12);
        }
    }
}
