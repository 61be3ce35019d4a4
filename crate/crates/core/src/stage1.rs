//! Stage 1: per-cluster endpoint estimation adjusting for differential outcome
//! measurement.
//!
//! The TMLE fits the outcome regression among measured individuals and the
//! measurement mechanism among everyone, then updates the outcome predictions
//! with an intercept-only logistic fluctuation weighted by the inverse
//! measurement probability. The endpoint is the mean targeted prediction over
//! all individuals in the cluster.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Covariates};
use crate::error::{Error, Result};
use crate::numerics::{expit, fit_glm, logit, DesignSpec, Link, MU_EPS};
use crate::rng;
use crate::superlearner::{sl_fit, sl_predict, LearnerSpec, DEFAULT_FOLDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Estimator {
    CompleteCase,
    Tmle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub estimator: Stage1Estimator,
    /// Individual covariates (W and M names) used by both nuisance regressions.
    pub adjustment: Vec<String>,
    pub g_bounds: (f64, f64),
    pub sl_library: Vec<LearnerSpec>,
    pub sl_folds: usize,
    pub seed: u64,
    /// Outcomes are mapped to [0, 1] by `(y - a) / (b - a)` before targeting.
    pub outcome_range: (f64, f64),
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            estimator: Stage1Estimator::Tmle,
            adjustment: Vec::new(),
            g_bounds: (0.025, 1.0),
            sl_library: LearnerSpec::default_library(),
            sl_folds: DEFAULT_FOLDS,
            seed: 0,
            outcome_range: (0.0, 1.0),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.g_bounds;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "g_bounds ({lo}, {hi}) must satisfy 0 < lower <= upper <= 1"
            )));
        }
        let (a, b) = self.outcome_range;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::InvalidArgument(format!(
                "outcome_range ({a}, {b}) must be increasing"
            )));
        }
        if self.estimator == Stage1Estimator::Tmle && self.sl_library.is_empty() {
            return Err(Error::InvalidArgument("empty learner library".into()));
        }
        Ok(())
    }

    /// Copy of this config with its seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        Stage1Config {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Stage1Diagnostics {
    pub outcome_learner: Option<String>,
    pub measurement_learner: Option<String>,
    pub g_min: Option<f64>,
    pub g_max: Option<f64>,
    /// Individuals whose estimated measurement probability was truncated.
    pub g_bound_hits: usize,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    pub cluster_id: String,
    pub y_hat: f64,
    pub n: usize,
    pub n_measured: usize,
    pub diagnostics: Stage1Diagnostics,
    /// Numerator and denominator results of a ratio endpoint.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub components: Option<Box<(Stage1Result, Stage1Result)>>,
}

/// Output of the fluctuation step for fixed nuisance estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Targeted {
    pub epsilon: f64,
    pub q_star: Vec<f64>,
    pub y_hat: f64,
}

/// Targets initial outcome predictions `q_init` (for every individual) using
/// measurement probabilities `g` (already bounded away from zero).
///
/// `y[j]` is `Some` exactly for measured individuals and must lie in [0, 1].
/// This is also the entry point for externally supplied nuisance estimates.
pub fn target_endpoint(y: &[Option<f64>], q_init: &[f64], g: &[f64]) -> Result<Targeted> {
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptyData("empty cluster".into()));
    }
    if q_init.len() != n || g.len() != n {
        return Err(Error::Dimension(
            "nuisance predictions must cover every individual".into(),
        ));
    }
    if g.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidArgument(
            "measurement probabilities must lie in (0, 1]".into(),
        ));
    }
    let offset: Vec<f64> = q_init
        .iter()
        .map(|&q| logit(q.clamp(MU_EPS, 1.0 - MU_EPS)))
        .collect();
    let response: Vec<f64> = y.iter().map(|v| v.unwrap_or(0.0)).collect();
    let weights: Vec<f64> = y
        .iter()
        .zip(g)
        .map(|(v, &p)| if v.is_some() { 1.0 / p } else { 0.0 })
        .collect();
    let fit = fit_glm(
        &DesignSpec::intercept_only(),
        Link::Logit,
        &Covariates::new(n),
        &response,
        &weights,
        Some(&offset),
    )?;
    let epsilon = fit.coefficients[0];
    let q_star: Vec<f64> = offset.iter().map(|&o| expit(o + epsilon)).collect();
    let y_hat = q_star.iter().sum::<f64>() / n as f64;
    Ok(Targeted {
        epsilon,
        q_star,
        y_hat,
    })
}

/// Endpoint for the cluster's primary outcome.
pub fn estimate_endpoint(cluster: &ClusterData, config: &Stage1Config) -> Result<Stage1Result> {
    estimate_outcome(cluster, 0, config)
}

/// Endpoint for the outcome at `outcome` in the cluster schema.
pub fn estimate_outcome(
    cluster: &ClusterData,
    outcome: usize,
    config: &Stage1Config,
) -> Result<Stage1Result> {
    config.validate()?;
    let n = cluster.size();
    if n == 0 {
        return Err(Error::EmptyData(format!(
            "cluster `{}` has no individuals",
            cluster.id
        )));
    }
    let (a, b) = config.outcome_range;
    let y: Vec<Option<f64>> = cluster
        .measurements(outcome)
        .map(|m| match (m.delta, m.y) {
            (true, Some(v)) => {
                let s = (v - a) / (b - a);
                if (0.0..=1.0).contains(&s) {
                    Ok(Some(s))
                } else {
                    Err(Error::InvalidArgument(format!(
                        "outcome {v} in cluster `{}` outside outcome_range ({a}, {b})",
                        cluster.id
                    )))
                }
            }
            (true, None) => Err(Error::Schema(format!(
                "measured individual without outcome in `{}`",
                cluster.id
            ))),
            (false, _) => Ok(None),
        })
        .collect::<Result<_>>()?;
    let measured: Vec<usize> = (0..n).filter(|&j| y[j].is_some()).collect();
    if measured.is_empty() {
        return Err(Error::NoMeasuredOutcomes(cluster.id.clone()));
    }
    let back = |v: f64| a + (b - a) * v;

    match config.estimator {
        Stage1Estimator::CompleteCase => {
            let mean = measured.iter().map(|&j| y[j].unwrap()).sum::<f64>() / measured.len() as f64;
            Ok(Stage1Result {
                cluster_id: cluster.id.clone(),
                y_hat: back(mean),
                n,
                n_measured: measured.len(),
                diagnostics: Stage1Diagnostics::default(),
                components: None,
            })
        }
        Stage1Estimator::Tmle => {
            let x = cluster
                .individual_covariates()
                .select_columns(&config.adjustment)?;
            let outcome_tag = outcome as u64;

            // Outcome regression among the measured.
            let x_measured = x.select_rows(&measured);
            let y_measured: Vec<f64> = measured.iter().map(|&j| y[j].unwrap()).collect();
            let (q_init, outcome_learner) = if y_measured.len() >= 2 {
                let v = config.sl_folds.min(y_measured.len());
                let seed = rng::derive_seed(config.seed, &[outcome_tag, 1]);
                let fit = sl_fit(&x_measured, &y_measured, &config.sl_library, v, seed)?;
                (sl_predict(&fit, &x)?, fit.selected_label().to_string())
            } else {
                (vec![y_measured[0]; n], "single_measurement".to_string())
            };

            // Measurement mechanism among everyone.
            let delta: Vec<f64> = y.iter().map(|v| f64::from(u8::from(v.is_some()))).collect();
            let (g_raw, measurement_learner) = if n >= 2 {
                let v = config.sl_folds.min(n);
                let seed = rng::derive_seed(config.seed, &[outcome_tag, 2]);
                let fit = sl_fit(&x, &delta, &config.sl_library, v, seed)?;
                (sl_predict(&fit, &x)?, fit.selected_label().to_string())
            } else {
                (vec![1.0; n], "single_individual".to_string())
            };
            let (lo, hi) = config.g_bounds;
            let g_bound_hits = g_raw.iter().filter(|&&p| p < lo || p > hi).count();
            let g: Vec<f64> = g_raw.iter().map(|p| p.clamp(lo, hi)).collect();

            let t = target_endpoint(&y, &q_init, &g)?;
            Ok(Stage1Result {
                cluster_id: cluster.id.clone(),
                y_hat: back(t.y_hat),
                n,
                n_measured: measured.len(),
                diagnostics: Stage1Diagnostics {
                    outcome_learner: Some(outcome_learner),
                    measurement_learner: Some(measurement_learner),
                    g_min: g.iter().cloned().reduce(f64::min),
                    g_max: g.iter().cloned().reduce(f64::max),
                    g_bound_hits,
                    epsilon: Some(t.epsilon),
                },
                components: None,
            })
        }
    }
}

/// Ratio endpoint: separately estimated numerator over denominator (for
/// example, the joint probability of being in a sub-population and having the
/// outcome, over the probability of being in the sub-population).
pub fn estimate_ratio_endpoint(
    cluster: &ClusterData,
    config_num: &Stage1Config,
    config_den: &Stage1Config,
    num_outcome: &str,
    den_outcome: &str,
) -> Result<Stage1Result> {
    let num = estimate_outcome(
        cluster,
        cluster.schema.outcome_index(num_outcome)?,
        config_num,
    )?;
    let den = estimate_outcome(
        cluster,
        cluster.schema.outcome_index(den_outcome)?,
        config_den,
    )?;
    if den.y_hat <= 1e-10 {
        return Err(Error::DegenerateDenominator(cluster.id.clone()));
    }
    Ok(Stage1Result {
        cluster_id: cluster.id.clone(),
        y_hat: num.y_hat / den.y_hat,
        n: cluster.size(),
        n_measured: den.n_measured,
        diagnostics: Stage1Diagnostics::default(),
        components: Some(Box::new((num, den))),
    })
}

/// Primary-outcome endpoints for every cluster of a trial, in order. Cluster
/// `i` uses the seed `derive_seed(config.seed, [i])`.
pub fn estimate_trial(
    clusters: &[ClusterData],
    config: &Stage1Config,
) -> Result<Vec<Stage1Result>> {
    config.validate()?;
    clusters
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            estimate_endpoint(
                c,
                &config.with_seed(rng::derive_seed(config.seed, &[i as u64])),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IndividualRecord, Measurement, Schema};
    use std::sync::Arc;

    fn cluster(rows: &[(f64, Option<f64>)]) -> ClusterData {
        let schema = Arc::new(Schema {
            w_names: vec!["W1".into()],
            m_names: vec![],
            outcome_names: vec!["y".into()],
        });
        ClusterData {
            id: "c".into(),
            pair_id: None,
            arm: 1,
            covariates: vec![],
            schema,
            individuals: rows
                .iter()
                .map(|&(w, y)| IndividualRecord {
                    w: vec![w],
                    m: vec![],
                    outcomes: vec![y.map_or(Measurement::missing(), Measurement::measured)],
                })
                .collect(),
        }
    }

    fn root(y: &[Option<f64>], q: &[f64], g: &[f64]) -> f64 {
        let f = |e: f64| -> f64 {
            (0..y.len())
                .filter_map(|j| y[j].map(|v| (v - expit(logit(q[j]) + e)) / g[j]))
                .sum()
        };
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn worked_micro_cluster_matches_scalar_root() {
        let y = [Some(1.0), None, Some(0.0), Some(1.0), None, Some(1.0)];
        let q = [0.7, 0.4, 0.35, 0.6, 0.8, 0.5];
        let g = [0.9, 0.3, 0.5, 0.75, 0.2, 0.6];
        let t = target_endpoint(&y, &q, &g).unwrap();
        let eps = root(&y, &q, &g);
        assert!((t.epsilon - eps).abs() < 1e-9);
        let expected = q.iter().map(|&v| expit(eps + logit(v))).sum::<f64>() / 6.0;
        assert!((t.y_hat - expected).abs() < 1e-9);
        let score: f64 = (0..6)
            .filter_map(|j| y[j].map(|v| (v - t.q_star[j]) / g[j]))
            .sum();
        assert!(score.abs() < 1e-6);
    }

    #[test]
    fn complete_measurement_equals_mean() {
        let rows: Vec<(f64, Option<f64>)> = (0..25)
            .map(|i| (i as f64 * 0.1 - 1.0, Some(f64::from(i % 3 == 0))))
            .collect();
        let c = cluster(&rows);
        let cfg = Stage1Config {
            adjustment: vec!["W1".into()],
            ..Default::default()
        };
        let r = estimate_endpoint(&c, &cfg).unwrap();
        let mean = rows.iter().filter_map(|r| r.1).sum::<f64>() / 25.0;
        assert!((r.y_hat - mean).abs() < 1e-8, "{} vs {mean}", r.y_hat);
        assert_eq!(r.n_measured, 25);
    }

    #[test]
    fn no_measured_outcomes_is_an_error() {
        let c = cluster(&[(0.0, None), (1.0, None)]);
        let err = estimate_endpoint(&c, &Stage1Config::default()).unwrap_err();
        assert!(matches!(err, Error::NoMeasuredOutcomes(_)));
        assert!(err.to_string().contains("no measured outcomes in cluster"));
    }

    #[test]
    fn identical_outcomes_do_not_fail() {
        let c = cluster(&[
            (0.0, Some(1.0)),
            (1.0, Some(1.0)),
            (2.0, None),
            (3.0, Some(1.0)),
        ]);
        let cfg = Stage1Config {
            adjustment: vec!["W1".into()],
            ..Default::default()
        };
        let r = estimate_endpoint(&c, &cfg).unwrap();
        assert!(r.y_hat > 0.99 && r.y_hat <= 1.0);
    }

    #[test]
    fn complete_case_mean_and_rescaling() {
        let c = cluster(&[(0.0, Some(10.0)), (0.0, Some(20.0)), (0.0, None)]);
        let cfg = Stage1Config {
            estimator: Stage1Estimator::CompleteCase,
            outcome_range: (0.0, 40.0),
            ..Default::default()
        };
        assert!((estimate_endpoint(&c, &cfg).unwrap().y_hat - 15.0).abs() < 1e-12);
        let bad = Stage1Config {
            outcome_range: (0.0, 1.0),
            ..cfg
        };
        assert!(estimate_endpoint(&c, &bad).is_err());
    }

    #[test]
    fn unknown_adjustment_column() {
        let c = cluster(&[(0.0, Some(1.0)), (1.0, Some(0.0))]);
        let cfg = Stage1Config {
            adjustment: vec!["nope".into()],
            ..Default::default()
        };
        assert!(matches!(
            estimate_endpoint(&c, &cfg),
            Err(Error::MissingColumn(_))
        ));
    }

    #[test]
    fn invalid_bounds_rejected() {
        let c = cluster(&[(0.0, Some(1.0)), (1.0, Some(0.0))]);
        let cfg = Stage1Config {
            g_bounds: (0.0, 1.0),
            ..Default::default()
        };
        assert!(estimate_endpoint(&c, &cfg).is_err());
    }
}
