//! Wald intervals and p-values from Student's t or the standard normal.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Interval {
        Interval {
            lower: f(self.lower),
            upper: f(self.upper),
        }
    }
}

/// Reference distribution of a Wald statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "df")]
pub enum Reference {
    StudentT(f64),
    Normal,
}

impl Reference {
    fn cdf(self, x: f64) -> f64 {
        match self {
            Reference::StudentT(df) => StudentsT::new(0.0, 1.0, df).expect("positive df").cdf(x),
            Reference::Normal => Normal::standard().cdf(x),
        }
    }

    pub fn quantile(self, p: f64) -> f64 {
        match self {
            Reference::StudentT(df) => StudentsT::new(0.0, 1.0, df)
                .expect("positive df")
                .inverse_cdf(p),
            Reference::Normal => Normal::standard().inverse_cdf(p),
        }
    }
}

/// Two-sided Wald interval at `1 - alpha` and p-value for `point / se`.
///
/// A zero standard error yields a degenerate interval at the point and a
/// p-value of 1 when the point is exactly zero, 0 otherwise.
pub fn wald(point: f64, se: f64, reference: Reference, alpha: f64) -> (Interval, f64) {
    let q = reference.quantile(1.0 - alpha / 2.0);
    let ci = Interval {
        lower: point - q * se,
        upper: point + q * se,
    };
    let p = if se > 0.0 {
        2.0 * (1.0 - reference.cdf((point / se).abs()))
    } else if point == 0.0 {
        1.0
    } else {
        0.0
    };
    (ci, p.clamp(0.0, 1.0))
}

/// Sample variance with the `n - 1` denominator; zero for fewer than two values.
pub fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
