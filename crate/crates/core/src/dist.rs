//! Scalar distributions for agent types, with the moments the bounds need.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    Point { value: f64 },
    /// Piece-wise linear inverse CDF through equally spaced probability
    /// levels `0, 1/(n-1), ..., 1`.
    Quantiles { table: Vec<f64> },
    Exponential { mean: f64 },
}

impl Dist {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Dist::Uniform { lo, hi }
    }

    /// Uniform on `[0.5 m, 1.5 m]`.
    pub fn uniform_around(mean: f64) -> Self {
        Dist::Uniform {
            lo: 0.5 * mean,
            hi: 1.5 * mean,
        }
    }

    /// Same shape rescaled to the given mean.
    pub fn scaled_to_mean(&self, mean: f64) -> Self {
        let k = mean / self.mean();
        match self {
            Dist::Uniform { lo, hi } => Dist::Uniform { lo: lo * k, hi: hi * k },
            Dist::Point { .. } => Dist::Point { value: mean },
            Dist::Quantiles { table } => Dist::Quantiles {
                table: table.iter().map(|v| v * k).collect(),
            },
            Dist::Exponential { .. } => Dist::Exponential { mean },
        }
    }

    pub fn validate(&self, field: &'static str) -> Result<()> {
        let ok = match self {
            Dist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Dist::Point { value } => value.is_finite(),
            Dist::Quantiles { table } => table.len() >= 2 && table.windows(2).all(|w| w[0] <= w[1]) && table.iter().all(|v| v.is_finite()),
            Dist::Exponential { mean } => *mean > 0.0 && mean.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(field, format!("malformed distribution {self:?}")))
        }
    }

    /// Smallest and largest value in the support.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Dist::Uniform { lo, hi } => (*lo, *hi),
            Dist::Point { value } => (*value, *value),
            Dist::Quantiles { table } => (table[0], table[table.len() - 1]),
            Dist::Exponential { .. } => (0.0, f64::INFINITY),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Dist::Uniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    rng.gen_range(*lo..*hi)
                }
            }
            Dist::Point { value } => *value,
            Dist::Quantiles { table } => {
                let u: f64 = rng.gen();
                let x = u * (table.len() - 1) as f64;
                let i = (x.floor() as usize).min(table.len() - 2);
                let t = x - i as f64;
                table[i] + t * (table[i + 1] - table[i])
            }
            Dist::Exponential { mean } => Exp::new(1.0 / mean).expect("validated mean").sample(rng),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Dist::Uniform { lo, hi } => 0.5 * (lo + hi),
            Dist::Point { value } => *value,
            Dist::Quantiles { table } => {
                let n = (table.len() - 1) as f64;
                table.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / n
            }
            Dist::Exponential { mean } => *mean,
        }
    }

    /// `E[1/X]`; infinite when the support reaches zero.
    pub fn mean_inverse(&self) -> f64 {
        match self {
            Dist::Uniform { lo, hi } => inverse_on_segment(*lo, *hi),
            Dist::Point { value } => 1.0 / value,
            Dist::Quantiles { table } => {
                let n = (table.len() - 1) as f64;
                table.windows(2).map(|w| inverse_on_segment(w[0], w[1])).sum::<f64>() / n
            }
            Dist::Exponential { .. } => f64::INFINITY,
        }
    }
}

/// Mean of `1/x` for `x` uniform on `[a, b]`.
fn inverse_on_segment(a: f64, b: f64) -> f64 {
    if a <= 0.0 {
        return f64::INFINITY;
    }
    if (b - a).abs() <= 1e-12 * b.abs() {
        return 2.0 / (a + b);
    }
    (b / a).ln() / (b - a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn uniform_moments() {
        let d = Dist::uniform(0.3, 1.3);
        assert_abs_diff_eq!(d.mean(), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(d.mean_inverse(), (13.0f64 / 3.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d.mean_inverse(), 1.466337, epsilon = 1e-6);
    }

    #[test]
    fn quantile_table_matches_uniform() {
        let table: Vec<f64> = (0..=10).map(|i| 0.3 + 0.1 * i as f64).collect();
        let q = Dist::Quantiles { table };
        let u = Dist::uniform(0.3, 1.3);
        assert_abs_diff_eq!(q.mean(), u.mean(), epsilon = 1e-12);
        assert_abs_diff_eq!(q.mean_inverse(), u.mean_inverse(), epsilon = 1e-12);
    }

    #[test]
    fn sample_moments_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for d in [
            Dist::uniform(0.3, 1.3),
            Dist::Quantiles { table: vec![0.2, 0.3, 0.9, 1.0] },
            Dist::Exponential { mean: 5.0 },
        ] {
            let n = 200_000;
            let xs: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!((m - d.mean()).abs() < 4.0 * sd / (n as f64).sqrt(), "{d:?}");
            let (lo, hi) = d.support();
            assert!(xs.iter().all(|x| *x >= lo && *x <= hi));
        }
    }

    #[test]
    fn rescaling_keeps_shape() {
        let d = Dist::uniform_around(5.0).scaled_to_mean(2.0);
        assert_eq!(d, Dist::uniform(1.0, 3.0));
        let q = Dist::Quantiles { table: vec![1.0, 2.0, 6.0] }.scaled_to_mean(1.5);
        approx::assert_abs_diff_eq!(q.mean(), 1.5, epsilon = 1e-12);
        assert_eq!(Dist::Point { value: 5.0 }.scaled_to_mean(3.0), Dist::Point { value: 3.0 });
    }

    #[test]
    fn point_and_validation() {
        let p = Dist::Point { value: 0.5 };
        assert_eq!(p.mean_inverse(), 2.0);
        assert!(Dist::uniform(1.0, 0.5).validate("pi").is_err());
        assert!(Dist::Quantiles { table: vec![1.0] }.validate("b").is_err());
        assert!(Dist::Exponential { mean: 0.0 }.validate("b").is_err());
        let json = r#"{"kind":"uniform","lo":0.3,"hi":1.3}"#;
        assert_eq!(serde_json::from_str::<Dist>(json).unwrap(), Dist::uniform(0.3, 1.3));
    }
}
