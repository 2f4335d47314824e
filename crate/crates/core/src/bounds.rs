//! Closed-form cost bounds and the stopping-time check.
//!
//! phi denotes the expected cost per kWh of load reduction, recruitment
//! included.

use serde::{Deserialize, Serialize};

use crate::dist::Dist;
use crate::domain::MarketParams;
use crate::error::{invalid, Result};

/// Population moments entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    /// E[b] (kWh)
    pub e_b: f64,
    /// E[pi] ($/kWh)
    pub e_pi: f64,
    /// E[1/pi] (kWh/$)
    pub e_inv_pi: f64,
    pub pi_max: f64,
}

impl PopulationStats {
    pub fn new(e_b: f64, e_pi: f64, e_inv_pi: f64, pi_max: f64) -> Result<Self> {
        let s = PopulationStats { e_b, e_pi, e_inv_pi, pi_max };
        s.validate()?;
        Ok(s)
    }

    pub fn from_dists(b: &Dist, pi: &Dist, pi_max: f64) -> Result<Self> {
        Self::new(b.mean(), pi.mean(), pi.mean_inverse(), pi_max)
    }

    /// The PG&E example: pi ~ U[0.3, 1.3], E[b] = 5 kWh.
    pub fn example_one() -> Self {
        PopulationStats {
            e_b: 5.0,
            e_pi: 0.8,
            e_inv_pi: (13.0f64 / 3.0).ln(),
            pi_max: 1.3,
        }
    }

    pub fn with_e_b(mut self, e_b: f64) -> Self {
        self.e_b = e_b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("e_b", self.e_b), ("e_pi", self.e_pi), ("e_inv_pi", self.e_inv_pi), ("pi_max", self.pi_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid("stats", format!("{name} = {v} must be positive and finite")));
            }
        }
        // Jensen: E[1/pi] >= 1/E[pi]
        if self.e_inv_pi * self.e_pi < 1.0 - 1e-12 {
            return Err(invalid("stats", "E[1/pi] < 1/E[pi] violates Jensen's inequality"));
        }
        Ok(())
    }
}

/// Lower bound on phi for any truthful mechanism.
pub fn phi_min(s: &PopulationStats, p: &MarketParams) -> f64 {
    1.0 / s.e_inv_pi - p.pi_e + p.pi_o / (p.events as f64 * p.pi_e * s.e_b * s.e_inv_pi)
}

/// `phi_min` with `1/E[1/pi]` replaced by `E[pi]`.
pub fn phi_min_approx(s: &PopulationStats, p: &MarketParams) -> f64 {
    s.e_pi - p.pi_e + p.pi_o * s.e_pi / (p.events as f64 * p.pi_e * s.e_b)
}

/// Upper bound on phi for the baseline-only mechanism.
pub fn phi_bo_upper(s: &PopulationStats, p: &MarketParams) -> f64 {
    let m = p.events as f64;
    (p.pi_max - p.pi_e) * (1.0 + p.pi_e * s.e_b / (p.pi_max * p.target))
        + p.pi_o * p.pi_max / (m * p.pi_e * s.e_b)
        + p.pi_o / (m * p.target)
}

pub fn phi_bo_upper_large_d(s: &PopulationStats, p: &MarketParams) -> f64 {
    p.pi_max - p.pi_e + p.pi_o * p.pi_max / (p.events as f64 * p.pi_e * s.e_b)
}

/// Upper bound on phi for SRBM.
pub fn phi_srbm_upper(s: &PopulationStats, p: &MarketParams) -> f64 {
    let m = p.events as f64;
    s.e_pi + 2.0 * p.pi_e + (p.pi_o / (m * s.e_b) + p.pi_o / (m * p.target)) * (s.e_pi / p.pi_e + 3.0)
}

pub fn phi_srbm_upper_large_d(s: &PopulationStats, p: &MarketParams) -> f64 {
    let eff = s.e_pi + 3.0 * p.pi_e;
    eff - p.pi_e + p.pi_o * eff / (p.events as f64 * p.pi_e * s.e_b)
}

/// `(E[N] bound, E[M] bound)` for SRBM. The pod bound is
/// `E[pi]/pi_e + 3`.
pub fn en_em_upper(s: &PopulationStats, p: &MarketParams) -> (f64, f64) {
    let em = s.e_pi / p.pi_e + 3.0;
    let en = (em + 1.0) * (p.target / s.e_b + 1.0);
    (en, em)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingTimeReport {
    pub mean: f64,
    pub se: f64,
    /// D / chi
    pub lower: f64,
    /// D / chi + 1
    pub upper: f64,
    pub samples: usize,
    pub pass: bool,
}

/// Checks `D/chi <= E[N] < D/chi + 1` on samples of the number of agents
/// needed to first cover `D`, allowing three standard errors either side.
pub fn stopping_time_check(samples: &[f64], chi: f64, target: f64) -> Result<StoppingTimeReport> {
    if samples.len() < 2 {
        return Err(invalid("samples", "need at least two samples"));
    }
    if !(chi > 0.0) {
        return Err(invalid("chi", "must be positive"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let lower = target / chi;
    let upper = lower + 1.0;
    Ok(StoppingTimeReport {
        mean,
        se,
        lower,
        upper,
        samples: samples.len(),
        pass: mean >= lower - 3.0 * se && mean <= upper + 3.0 * se,
    })
}
