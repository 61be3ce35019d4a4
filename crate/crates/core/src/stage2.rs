//! Stage 2: cluster-level TMLE of the intervention effect.
//!
//! An initial quasi-binomial regression of the Stage-1 endpoints on arm and
//! the outcome-regression covariates is updated by a logistic fluctuation on
//! the two-dimensional clever covariate `(A/g1, (1-A)/g0)`, which targets both
//! treatment-specific means at once. Inference uses the estimated influence
//! curve, pair-averaged for pair-matched designs.

use serde::{Deserialize, Serialize};

use crate::data::{summary_table, ClusterSummary, Covariates};
use crate::error::{Error, Result};
use crate::inference::{mean, sample_variance, wald, Interval, Reference};
use crate::numerics::{expit, fit_glm, predict, DesignSpec, GlmFit, Link, PredictKind};

/// Bounds applied to an estimated (not known) cluster-level propensity score.
pub const PS_BOUNDS: (f64, f64) = (0.05, 0.95);
/// Endpoints of exactly 0 or 1 are moved to these values for the initial fit.
pub const ENDPOINT_NUDGE: (f64, f64) = (0.005, 0.995);
const ARM: &str = "A";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    EqualCluster,
    EqualIndividual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Rd,
    LogRr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub or_terms: Vec<String>,
    pub ps_terms: Vec<String>,
    pub known_ps: f64,
    pub matched: bool,
    pub weights: WeightScheme,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            or_terms: Vec::new(),
            ps_terms: Vec::new(),
            known_ps: 0.5,
            matched: false,
            weights: WeightScheme::EqualCluster,
        }
    }
}

impl Stage2Config {
    pub fn with_adjustment(&self, or_terms: Vec<String>, ps_terms: Vec<String>) -> Self {
        Stage2Config {
            or_terms,
            ps_terms,
            ..self.clone()
        }
    }
}

/// Cluster weights: all 1, or `S_i * N / sum(S)` to weight individuals equally.
pub fn weights_for(summaries: &[ClusterSummary], scheme: WeightScheme) -> Result<Vec<f64>> {
    match scheme {
        WeightScheme::EqualCluster => Ok(vec![1.0; summaries.len()]),
        WeightScheme::EqualIndividual => {
            let sizes = summaries
                .iter()
                .map(|s| {
                    s.size.map(|v| v as f64).ok_or_else(|| {
                        Error::InvalidArgument(format!("cluster `{}` has no size", s.id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let total: f64 = sizes.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidArgument("cluster sizes sum to zero".into()));
            }
            let n = summaries.len() as f64;
            Ok(sizes.iter().map(|s| s * n / total).collect())
        }
    }
}

/// Sets `alpha` on every summary according to `scheme`.
pub fn apply_weights(summaries: &mut [ClusterSummary], scheme: WeightScheme) -> Result<()> {
    let w = weights_for(summaries, scheme)?;
    for (s, a) in summaries.iter_mut().zip(w) {
        s.alpha = a;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentRecord {
    pub or_terms: Vec<String>,
    pub ps_terms: Vec<String>,
    /// `None` when the propensity score was estimated.
    pub known_ps: Option<f64>,
    pub epsilon: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub psi1: f64,
    pub psi0: f64,
    pub rd: f64,
    pub log_rr: Option<f64>,
    /// Influence-curve values per independent unit (cluster, or pair when matched).
    pub ic_rd: Vec<f64>,
    pub ic_log_rr: Option<Vec<f64>>,
    pub se_rd: f64,
    pub se_log_rr: Option<f64>,
    pub df: f64,
    pub ci_rd: Interval,
    pub ci_rr: Option<Interval>,
    pub ci_log_rr: Option<Interval>,
    pub pvalue_rd: f64,
    pub pvalue_rr: Option<f64>,
    pub matched: bool,
    pub adjustment: AdjustmentRecord,
}

impl EffectEstimate {
    pub fn rr(&self) -> Option<f64> {
        self.log_rr.map(f64::exp)
    }
}

/// Propensity model behind the clever covariate.
#[derive(Debug, Clone)]
pub(crate) enum Propensity {
    Known(f64),
    Fitted(GlmFit),
}

/// Targeted nuisance fits that can be evaluated on any set of clusters.
#[derive(Debug, Clone)]
pub(crate) struct Stage2Fit {
    outcome: GlmFit,
    propensity: Propensity,
    pub(crate) epsilon: (f64, f64),
}

/// Targeted predictions for a set of clusters.
#[derive(Debug, Clone)]
pub(crate) struct Targeted {
    pub q1: Vec<f64>,
    pub q0: Vec<f64>,
    pub g1: Vec<f64>,
}

fn arm_table(
    summaries: &[ClusterSummary],
    names: &[String],
    arm: Option<u8>,
) -> Result<Covariates> {
    let mut t = summary_table(summaries, names)?;
    let a = summaries
        .iter()
        .map(|s| f64::from(arm.unwrap_or(s.arm)))
        .collect();
    t.push_column(ARM, a)?;
    Ok(t)
}

fn outcome_design(config: &Stage2Config) -> Result<DesignSpec> {
    if config.or_terms.iter().any(|t| t == ARM) {
        return Err(Error::InvalidArgument(format!(
            "`{ARM}` is reserved for the arm indicator"
        )));
    }
    let mut terms = vec![ARM.to_string()];
    terms.extend(config.or_terms.iter().cloned());
    Ok(DesignSpec::main_terms(&terms))
}

impl Stage2Fit {
    pub(crate) fn fit(summaries: &[ClusterSummary], config: &Stage2Config) -> Result<Self> {
        let y: Vec<f64> = summaries.iter().map(|s| s.y_hat).collect();
        let alpha: Vec<f64> = summaries.iter().map(|s| s.alpha).collect();

        let nudged: Vec<f64> = y
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    ENDPOINT_NUDGE.0
                } else if v == 1.0 {
                    ENDPOINT_NUDGE.1
                } else {
                    v
                }
            })
            .collect();
        let observed = arm_table(summaries, &config.or_terms, None)?;
        let outcome = fit_glm(
            &outcome_design(config)?,
            Link::Logit,
            &observed,
            &nudged,
            &alpha,
            None,
        )?;

        let propensity = if config.ps_terms.is_empty() {
            Propensity::Known(config.known_ps)
        } else {
            let t = summary_table(summaries, &config.ps_terms)?;
            let a: Vec<f64> = summaries.iter().map(|s| f64::from(s.arm)).collect();
            let fit = fit_glm(
                &DesignSpec::main_terms(&config.ps_terms),
                Link::Logit,
                &t,
                &a,
                &vec![1.0; a.len()],
                None,
            )?;
            Propensity::Fitted(fit)
        };

        let mut fit = Stage2Fit {
            outcome,
            propensity,
            epsilon: (0.0, 0.0),
        };
        let initial = fit.targeted(summaries)?;
        let q_obs = predict(&fit.outcome, &observed, PredictKind::Linear)?;
        let (h1, h0): (Vec<f64>, Vec<f64>) = summaries
            .iter()
            .zip(&initial.g1)
            .map(|(s, &g1)| {
                if s.arm == 1 {
                    (1.0 / g1, 0.0)
                } else {
                    (0.0, 1.0 / (1.0 - g1))
                }
            })
            .unzip();
        let clever = Covariates::new(summaries.len())
            .with_column("H1", h1)?
            .with_column("H0", h0)?;
        let fluct = fit_glm(
            &DesignSpec::without_intercept(&["H1", "H0"]),
            Link::Logit,
            &clever,
            &y,
            &alpha,
            Some(&q_obs),
        )?;
        fit.epsilon = (fluct.coefficients[0], fluct.coefficients[1]);
        Ok(fit)
    }

    pub(crate) fn propensity(&self, summaries: &[ClusterSummary]) -> Result<Vec<f64>> {
        match &self.propensity {
            Propensity::Known(p) => Ok(vec![*p; summaries.len()]),
            Propensity::Fitted(fit) => {
                let t = summary_table(summaries, &fit.spec.terms)?;
                Ok(predict(fit, &t, PredictKind::Response)?
                    .into_iter()
                    .map(|p| p.clamp(PS_BOUNDS.0, PS_BOUNDS.1))
                    .collect())
            }
        }
    }

    pub(crate) fn targeted(&self, summaries: &[ClusterSummary]) -> Result<Targeted> {
        let terms = &self.outcome.spec.terms[1..];
        let g1 = self.propensity(summaries)?;
        let l1 = predict(
            &self.outcome,
            &arm_table(summaries, terms, Some(1))?,
            PredictKind::Linear,
        )?;
        let l0 = predict(
            &self.outcome,
            &arm_table(summaries, terms, Some(0))?,
            PredictKind::Linear,
        )?;
        let (e1, e0) = self.epsilon;
        let q1 = l1.iter().zip(&g1).map(|(l, g)| expit(l + e1 / g)).collect();
        let q0 = l0
            .iter()
            .zip(&g1)
            .map(|(l, g)| expit(l + e0 / (1.0 - g)))
            .collect();
        Ok(Targeted { q1, q0, g1 })
    }

    fn record(&self, config: &Stage2Config) -> AdjustmentRecord {
        AdjustmentRecord {
            or_terms: config.or_terms.clone(),
            ps_terms: config.ps_terms.clone(),
            known_ps: match self.propensity {
                Propensity::Known(p) => Some(p),
                Propensity::Fitted(_) => None,
            },
            epsilon: self.epsilon,
        }
    }
}

/// Per-cluster influence-curve components `(IC(1), IC(0))`, scaled by the
/// cluster weight normalized with `alpha_mean`.
pub(crate) fn cluster_ic(
    summaries: &[ClusterSummary],
    t: &Targeted,
    psi: (f64, f64),
    alpha_mean: f64,
) -> Vec<(f64, f64)> {
    summaries
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let w = s.alpha / alpha_mean;
            let (q1, q0, g1) = (t.q1[i], t.q0[i], t.g1[i]);
            let ic1 = if s.arm == 1 { (s.y_hat - q1) / g1 } else { 0.0 } + q1 - psi.0;
            let ic0 = if s.arm == 0 {
                (s.y_hat - q0) / (1.0 - g1)
            } else {
                0.0
            } + q0
                - psi.1;
            (w * ic1, w * ic0)
        })
        .collect()
}

pub(crate) fn scale_ic(ic: (f64, f64), psi: (f64, f64), scale: Scale) -> f64 {
    match scale {
        Scale::Rd => ic.0 - ic.1,
        Scale::LogRr => ic.0 / psi.0 - ic.1 / psi.1,
    }
}

/// Indices of the two clusters in every pair, in order of first appearance.
pub fn pair_units(summaries: &[ClusterSummary]) -> Result<Vec<[usize; 2]>> {
    let mut ids: Vec<&str> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, s) in summaries.iter().enumerate() {
        let pid = s
            .pair_id
            .as_deref()
            .ok_or_else(|| Error::Pairing(format!("cluster `{}` has no pair id", s.id)))?;
        match ids.iter().position(|p| *p == pid) {
            Some(k) => members[k].push(i),
            None => {
                ids.push(pid);
                members.push(vec![i]);
            }
        }
    }
    members
        .into_iter()
        .zip(ids)
        .map(|(m, pid)| match m.as_slice() {
            [a, b] if summaries[*a].arm != summaries[*b].arm => Ok([*a, *b]),
            _ => Err(Error::Pairing(format!(
                "pair `{pid}` must hold exactly two clusters in opposite arms"
            ))),
        })
        .collect()
}

/// Influence-curve values per independent unit.
pub(crate) fn unit_ic(per_cluster: &[f64], pairs: Option<&[[usize; 2]]>) -> Vec<f64> {
    match pairs {
        None => per_cluster.to_vec(),
        Some(p) => p
            .iter()
            .map(|[a, b]| 0.5 * (per_cluster[*a] + per_cluster[*b]))
            .collect(),
    }
}

pub(crate) fn check_inputs(
    summaries: &[ClusterSummary],
    matched: bool,
) -> Result<Option<Vec<[usize; 2]>>> {
    for arm in [1u8, 0] {
        let k = summaries.iter().filter(|s| s.arm == arm).count();
        if k == 0 {
            return Err(Error::EmptyArm(arm));
        }
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "arm {arm} needs at least 2 clusters"
            )));
        }
    }
    for s in summaries {
        if s.arm > 1 {
            return Err(Error::InvalidArgument(format!(
                "cluster `{}` arm {} is not binary",
                s.id, s.arm
            )));
        }
        if !(0.0..=1.0).contains(&s.y_hat) {
            return Err(Error::InvalidArgument(format!(
                "cluster `{}` endpoint {} outside [0, 1]",
                s.id, s.y_hat
            )));
        }
        if !(s.alpha > 0.0 && s.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cluster `{}` weight must be positive",
                s.id
            )));
        }
    }
    if matched {
        pair_units(summaries).map(Some)
    } else {
        Ok(None)
    }
}

/// Two-sided level used for every interval.
pub const ALPHA: f64 = 0.05;

pub fn tmle_effect(summaries: &[ClusterSummary], config: &Stage2Config) -> Result<EffectEstimate> {
    if !(config.known_ps > 0.0 && config.known_ps < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "known_ps {} must lie in (0, 1)",
            config.known_ps
        )));
    }
    let pairs = check_inputs(summaries, config.matched)?;
    let fit = Stage2Fit::fit(summaries, config)?;
    let t = fit.targeted(summaries)?;

    let alpha_total: f64 = summaries.iter().map(|s| s.alpha).sum();
    let alpha_mean = alpha_total / summaries.len() as f64;
    let wmean = |q: &[f64]| {
        summaries
            .iter()
            .zip(q)
            .map(|(s, v)| s.alpha * v)
            .sum::<f64>()
            / alpha_total
    };
    let psi = (wmean(&t.q1), wmean(&t.q0));

    let ic = cluster_ic(summaries, &t, psi, alpha_mean);
    let rr_defined = psi.1 > 1e-10 && psi.0 > 1e-10;

    let n_units = pairs.as_ref().map_or(summaries.len(), Vec::len);
    let df = if config.matched {
        n_units as f64 - 1.0
    } else {
        summaries.len() as f64 - 2.0
    };
    if df < 1.0 {
        return Err(Error::InvalidArgument(format!("{df} degrees of freedom")));
    }
    let reference = Reference::StudentT(df);

    let summarize = |scale: Scale| {
        let per_cluster: Vec<f64> = ic.iter().map(|&c| scale_ic(c, psi, scale)).collect();
        let units = unit_ic(&per_cluster, pairs.as_deref());
        let se = (sample_variance(&units) / n_units as f64).sqrt();
        (units, se)
    };

    let rd = psi.0 - psi.1;
    let (ic_rd, se_rd) = summarize(Scale::Rd);
    let (ci_rd, pvalue_rd) = wald(rd, se_rd, reference, ALPHA);

    let (log_rr, ic_log_rr, se_log_rr, ci_log_rr, ci_rr, pvalue_rr) = if rr_defined {
        let lrr = psi.0.ln() - psi.1.ln();
        let (units, se) = summarize(Scale::LogRr);
        let (ci, p) = wald(lrr, se, reference, ALPHA);
        (
            Some(lrr),
            Some(units),
            Some(se),
            Some(ci),
            Some(ci.map(f64::exp)),
            Some(p),
        )
    } else {
        log::warn!("control-arm mean {} too small for a relative effect", psi.1);
        (None, None, None, None, None, None)
    };

    debug_assert!(mean(&ic_rd).abs() < 1e-6);
    Ok(EffectEstimate {
        psi1: psi.0,
        psi0: psi.1,
        rd,
        log_rr,
        ic_rd,
        ic_log_rr,
        se_rd,
        se_log_rr,
        df,
        ci_rd,
        ci_rr,
        ci_log_rr,
        pvalue_rd,
        pvalue_rr,
        matched: config.matched,
        adjustment: fit.record(config),
    })
}

/// Fluctuation score equations `sum_i alpha_i H_a,i (Y_i - Q*_i(A_i))` for a
/// fitted configuration; both are zero at the targeted solution.
pub fn fluctuation_scores(
    summaries: &[ClusterSummary],
    config: &Stage2Config,
) -> Result<(f64, f64)> {
    let fit = Stage2Fit::fit(summaries, config)?;
    let t = fit.targeted(summaries)?;
    Ok(summaries
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(s1, s0), (i, s)| {
            if s.arm == 1 {
                (s1 + s.alpha / t.g1[i] * (s.y_hat - t.q1[i]), s0)
            } else {
                (s1, s0 + s.alpha / (1.0 - t.g1[i]) * (s.y_hat - t.q0[i]))
            }
        }))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn summary(
        id: &str,
        pair: Option<&str>,
        arm: u8,
        y: f64,
        e1: f64,
    ) -> ClusterSummary {
        ClusterSummary {
            id: id.into(),
            pair_id: pair.map(str::to_string),
            arm,
            covariates: vec![("E1".into(), e1)],
            y_hat: y,
            alpha: 1.0,
            size: Some(100),
        }
    }

    fn four() -> Vec<ClusterSummary> {
        vec![
            summary("a", Some("p1"), 1, 0.6, 0.0),
            summary("b", Some("p2"), 1, 0.4, 1.0),
            summary("c", Some("p1"), 0, 0.3, 0.0),
            summary("d", Some("p2"), 0, 0.5, 1.0),
        ]
    }

    #[test]
    fn unadjusted_collapse_to_arm_means() {
        let est = tmle_effect(&four(), &Stage2Config::default()).unwrap();
        assert!((est.psi1 - 0.5).abs() < 1e-12);
        assert!((est.psi0 - 0.4).abs() < 1e-12);
        assert!((est.rd - 0.1).abs() < 1e-12);
        assert!((est.rr().unwrap() - 1.25).abs() < 1e-12);
        assert_eq!(est.df, 2.0);
        assert!(est.ic_rd.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn identical_endpoints_give_null_degenerate_estimate() {
        let s: Vec<_> = four()
            .into_iter()
            .map(|mut s| {
                s.y_hat = 0.37;
                s
            })
            .collect();
        let est = tmle_effect(&s, &Stage2Config::default()).unwrap();
        assert!(est.rd.abs() < 1e-12);
        assert!(est.log_rr.unwrap().abs() < 1e-12);
        assert!(est.ic_rd.iter().all(|v| v.abs() < 1e-12));
        assert!(est.se_rd < 1e-12);
    }

    #[test]
    fn matched_and_unmatched_share_point_estimates() {
        let un = tmle_effect(&four(), &Stage2Config::default()).unwrap();
        let m = tmle_effect(
            &four(),
            &Stage2Config {
                matched: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((un.rd - m.rd).abs() < 1e-12);
        assert_eq!(m.ic_rd.len(), 2);
        assert_eq!(m.df, 1.0);
        assert!((un.se_rd - m.se_rd).abs() > 1e-6);
    }

    #[test]
    fn weights_for_schemes() {
        let mut s = four();
        assert_eq!(
            weights_for(&s, WeightScheme::EqualCluster).unwrap(),
            vec![1.0; 4]
        );
        assert_eq!(
            weights_for(&s, WeightScheme::EqualIndividual).unwrap(),
            vec![1.0; 4]
        );
        let two = vec![
            ClusterSummary {
                size: Some(100),
                ..s[0].clone()
            },
            ClusterSummary {
                size: Some(300),
                ..s[1].clone()
            },
        ];
        assert_eq!(
            weights_for(&two, WeightScheme::EqualIndividual).unwrap(),
            vec![0.5, 1.5]
        );
        s[0].size = None;
        assert!(weights_for(&s, WeightScheme::EqualIndividual).is_err());
    }

    #[test]
    fn empty_arm_and_bad_pairs() {
        let one_arm: Vec<_> = four().into_iter().filter(|s| s.arm == 1).collect();
        assert!(matches!(
            tmle_effect(&one_arm, &Stage2Config::default()),
            Err(Error::EmptyArm(0))
        ));
        let mut s = four();
        s[2].pair_id = Some("p2".into());
        assert!(matches!(
            tmle_effect(
                &s,
                &Stage2Config {
                    matched: true,
                    ..Default::default()
                }
            ),
            Err(Error::Pairing(_))
        ));
    }

    #[test]
    fn zero_control_mean_leaves_rr_undefined() {
        let mut s = four();
        s[2].y_hat = 0.0;
        s[3].y_hat = 0.0;
        let est = tmle_effect(&s, &Stage2Config::default()).unwrap();
        assert!(est.psi0 < 1e-6);
        assert!((est.rd - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rr_interval_is_exponentiated_log_interval() {
        let est = tmle_effect(&four(), &Stage2Config::default()).unwrap();
        let (l, r) = (est.ci_log_rr.unwrap(), est.ci_rr.unwrap());
        assert!((l.lower.exp() - r.lower).abs() < 1e-14);
        assert!((l.upper.exp() - r.upper).abs() < 1e-14);
    }
}
