//! Complete-case comparison estimators: cluster-level t-test, CARE and a
//! modified-Poisson GEE with independence working correlation.

use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, ClusterSummary, Covariates};
use crate::error::{Error, Result};
use crate::inference::{mean, sample_variance, wald, Interval, Reference};
use crate::numerics::{fit_glm, invert_spd, predict, DesignSpec, Link, PredictKind};
use crate::stage2::{pair_units, Scale, ALPHA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparatorKind {
    TTest,
    Care,
    GeeLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorEstimate {
    pub estimator: ComparatorKind,
    pub scale: Scale,
    pub point: f64,
    pub se: f64,
    pub reference: Reference,
    pub ci: Interval,
    pub pvalue: f64,
    pub converged: bool,
}

/// Two-sample (pooled variance) or paired t-test of `values` by arm.
fn t_test(
    kind: ComparatorKind,
    values: &[f64],
    arms: &[u8],
    pairs: Option<&[[usize; 2]]>,
) -> Result<ComparatorEstimate> {
    let (point, se, df) = match pairs {
        Some(pairs) => {
            let d: Vec<f64> = pairs
                .iter()
                .map(|&[a, b]| {
                    let (t, c) = if arms[a] == 1 { (a, b) } else { (b, a) };
                    values[t] - values[c]
                })
                .collect();
            if d.len() < 2 {
                return Err(Error::InvalidArgument(
                    "paired t-test needs at least 2 pairs".into(),
                ));
            }
            let k = d.len() as f64;
            (mean(&d), (sample_variance(&d) / k).sqrt(), k - 1.0)
        }
        None => {
            let split = |arm: u8| -> Vec<f64> {
                values
                    .iter()
                    .zip(arms)
                    .filter(|(_, a)| **a == arm)
                    .map(|(v, _)| *v)
                    .collect()
            };
            let (x1, x0) = (split(1), split(0));
            for (arm, x) in [(1u8, &x1), (0, &x0)] {
                if x.is_empty() {
                    return Err(Error::EmptyArm(arm));
                }
                if x.len() < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "arm {arm} needs at least 2 clusters"
                    )));
                }
            }
            let (n1, n0) = (x1.len() as f64, x0.len() as f64);
            let pooled = ((n1 - 1.0) * sample_variance(&x1) + (n0 - 1.0) * sample_variance(&x0))
                / (n1 + n0 - 2.0);
            (
                mean(&x1) - mean(&x0),
                (pooled * (1.0 / n1 + 1.0 / n0)).sqrt(),
                n1 + n0 - 2.0,
            )
        }
    };
    let reference = Reference::StudentT(df);
    let (ci, pvalue) = wald(point, se, reference, ALPHA);
    Ok(ComparatorEstimate {
        estimator: kind,
        scale: Scale::Rd,
        point,
        se,
        reference,
        ci,
        pvalue,
        converged: true,
    })
}

fn pairs_for(summaries: &[ClusterSummary], matched: bool) -> Result<Option<Vec<[usize; 2]>>> {
    if matched {
        pair_units(summaries).map(Some)
    } else {
        Ok(None)
    }
}

/// Unadjusted contrast of the cluster endpoints (`y_hat`) by arm.
pub fn t_test_effect(summaries: &[ClusterSummary], matched: bool) -> Result<ComparatorEstimate> {
    let values: Vec<f64> = summaries.iter().map(|s| s.y_hat).collect();
    let arms: Vec<u8> = summaries.iter().map(|s| s.arm).collect();
    t_test(
        ComparatorKind::TTest,
        &values,
        &arms,
        pairs_for(summaries, matched)?.as_deref(),
    )
}

/// Complete-case summaries (endpoint = mean among the measured) of the primary outcome.
pub fn complete_case_summaries(clusters: &[ClusterData]) -> Result<Vec<ClusterSummary>> {
    clusters
        .iter()
        .map(|c| {
            let y = c
                .complete_case_mean(0)
                .ok_or_else(|| Error::NoMeasuredOutcomes(c.id.clone()))?;
            Ok(c.summary(y))
        })
        .collect()
}

/// Measured individuals pooled across clusters, with baseline individual
/// covariates, cluster covariates, the arm (`A`) and the cluster index.
struct Pooled {
    table: Covariates,
    y: Vec<f64>,
    cluster: Vec<usize>,
    covariate_names: Vec<String>,
}

fn pool(clusters: &[ClusterData]) -> Result<Pooled> {
    let first = clusters
        .first()
        .ok_or_else(|| Error::EmptyData("no clusters".into()))?;
    let w_names = first.schema.w_names.clone();
    let e_names: Vec<String> = first.covariates.iter().map(|(n, _)| n.clone()).collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); w_names.len() + e_names.len() + 1];
    let (mut y, mut cluster) = (Vec::new(), Vec::new());
    for (ci, c) in clusters.iter().enumerate() {
        if c.covariates.len() != e_names.len()
            || c.covariates.iter().zip(&e_names).any(|((n, _), e)| n != e)
        {
            return Err(Error::Schema(format!(
                "cluster `{}` has different cluster covariates",
                c.id
            )));
        }
        let mut any = false;
        for r in &c.individuals {
            let Some(v) = r.y() else { continue };
            any = true;
            y.push(v);
            cluster.push(ci);
            for (k, w) in r.w.iter().enumerate() {
                cols[k].push(*w);
            }
            for (k, (_, e)) in c.covariates.iter().enumerate() {
                cols[w_names.len() + k].push(*e);
            }
            cols[w_names.len() + e_names.len()].push(f64::from(c.arm));
        }
        if !any {
            return Err(Error::NoMeasuredOutcomes(c.id.clone()));
        }
    }
    let mut table = Covariates::new(y.len());
    let covariate_names: Vec<String> = w_names.into_iter().chain(e_names).collect();
    for (name, col) in covariate_names
        .iter()
        .cloned()
        .chain(std::iter::once("A".to_string()))
        .zip(cols)
    {
        table.push_column(name, col)?;
    }
    Ok(Pooled {
        table,
        y,
        cluster,
        covariate_names,
    })
}

/// Covariate-adjusted residuals: a pooled logistic regression of the measured
/// outcomes on individual and cluster covariates (no arm term); each cluster's
/// residual is its observed mean minus its mean prediction over the same
/// measured individuals; residuals are then t-tested by arm.
pub fn care_effect(clusters: &[ClusterData], matched: bool) -> Result<ComparatorEstimate> {
    let pooled = pool(clusters)?;
    let design = DesignSpec::main_terms(&pooled.covariate_names);
    let fit = fit_glm(
        &design,
        Link::Logit,
        &pooled.table,
        &pooled.y,
        &vec![1.0; pooled.y.len()],
        None,
    )?;
    let pred = predict(&fit, &pooled.table, PredictKind::Response)?;
    let k = clusters.len();
    let (mut obs, mut fitted, mut count) = (vec![0.0; k], vec![0.0; k], vec![0usize; k]);
    for ((&c, &yv), &p) in pooled.cluster.iter().zip(&pooled.y).zip(&pred) {
        obs[c] += yv;
        fitted[c] += p;
        count[c] += 1;
    }
    let residuals: Vec<f64> = (0..k)
        .map(|c| (obs[c] - fitted[c]) / count[c] as f64)
        .collect();
    let arms: Vec<u8> = clusters.iter().map(|c| c.arm).collect();
    let pairs = if matched {
        Some(cluster_pairs(clusters)?)
    } else {
        None
    };
    let mut est = t_test(ComparatorKind::Care, &residuals, &arms, pairs.as_deref())?;
    est.converged = fit.converged;
    Ok(est)
}

fn cluster_pairs(clusters: &[ClusterData]) -> Result<Vec<[usize; 2]>> {
    let stubs: Vec<ClusterSummary> = clusters
        .iter()
        .map(|c| ClusterSummary {
            id: c.id.clone(),
            pair_id: c.pair_id.clone(),
            arm: c.arm,
            covariates: Vec::new(),
            y_hat: 0.0,
            alpha: 1.0,
            size: None,
        })
        .collect();
    pair_units(&stubs)
}

/// Log relative risk from a modified-Poisson regression of the measured
/// outcomes on arm and covariates, with a sandwich variance clustered on
/// clusters (or on pairs when `matched`) and normal-quantile inference.
pub fn gee_log_rr(clusters: &[ClusterData], matched: bool) -> Result<ComparatorEstimate> {
    for arm in [1u8, 0] {
        if !clusters.iter().any(|c| c.arm == arm) {
            return Err(Error::EmptyArm(arm));
        }
    }
    let pooled = pool(clusters)?;
    let mut terms = vec!["A".to_string()];
    terms.extend(pooled.covariate_names.iter().cloned());
    let design = DesignSpec::main_terms(&terms);
    let fit = fit_glm(
        &design,
        Link::Log,
        &pooled.table,
        &pooled.y,
        &vec![1.0; pooled.y.len()],
        None,
    )?;
    if fit.aliased[1] {
        return Err(Error::InvalidArgument(
            "arm indicator is collinear with covariates".into(),
        ));
    }

    let n = pooled.y.len();
    let x = design.matrix(&pooled.table)?;
    let mu = predict(&fit, &pooled.table, PredictKind::Response)?;
    let keep: Vec<usize> = (0..design.ncols()).filter(|&j| !fit.aliased[j]).collect();
    let p = keep.len();

    let group_of: Vec<usize> = if matched {
        let pairs = cluster_pairs(clusters)?;
        let mut g = vec![0; clusters.len()];
        for (k, [a, b]) in pairs.iter().enumerate() {
            g[*a] = k;
            g[*b] = k;
        }
        pooled.cluster.iter().map(|&c| g[c]).collect()
    } else {
        pooled.cluster.clone()
    };
    let groups = group_of.iter().max().map_or(0, |m| m + 1);

    let mut bread = vec![0.0; p * p];
    let mut scores = vec![0.0; groups * p];
    for i in 0..n {
        let xi: Vec<f64> = keep.iter().map(|&j| x[j * n + i]).collect();
        for a in 0..p {
            for b in 0..p {
                bread[a * p + b] += mu[i] * xi[a] * xi[b];
            }
            scores[group_of[i] * p + a] += xi[a] * (pooled.y[i] - mu[i]);
        }
    }
    let mut meat = vec![0.0; p * p];
    for g in 0..groups {
        let u = &scores[g * p..(g + 1) * p];
        for a in 0..p {
            for b in 0..p {
                meat[a * p + b] += u[a] * u[b];
            }
        }
    }
    let inv = invert_spd(&bread, p)?;
    // Arm coefficient is the second kept column (the intercept is never aliased).
    let a = 1;
    let row: Vec<f64> = (0..p).map(|k| inv[a * p + k]).collect();
    let var: f64 = (0..p)
        .map(|k| {
            (0..p)
                .map(|l| row[k] * meat[k * p + l] * row[l])
                .sum::<f64>()
        })
        .sum();

    let point = fit.coefficients[1];
    let se = var.max(0.0).sqrt();
    let (ci, pvalue) = wald(point, se, Reference::Normal, ALPHA);
    if !fit.converged {
        log::warn!("modified-Poisson fit did not converge");
    }
    Ok(ComparatorEstimate {
        estimator: ComparatorKind::GeeLog,
        scale: Scale::LogRr,
        point,
        se,
        reference: Reference::Normal,
        ci,
        pvalue,
        converged: fit.converged,
    })
}
