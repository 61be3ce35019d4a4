//! Monte Carlo experiments: repeated trials from a data-generating process,
//! every estimator applied with and without the pair matching, and the
//! performance metrics aggregated per estimator, scale and matching mode.
//!
//! Replicate `r` uses the seed `derive_seed(master, [r])`; replicates run in
//! parallel and are merged by index, so results do not depend on scheduling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{adaptive_tmle, Candidate};
use crate::comparators::{
    care_effect, complete_case_summaries, gee_log_rr, t_test_effect, ComparatorEstimate,
};
use crate::data::ClusterSummary;
use crate::dgp::{generate, true_values, DgpKind, DgpSpec, TrueValues};
use crate::error::{Error, Result};
use crate::inference::{mean, sample_variance};
use crate::rng::derive_seed;
use crate::stage1::{estimate_trial, Stage1Config};
use crate::stage2::{Scale, Stage2Config};

pub const TRUTH_POPULATION: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    TTest,
    Care,
    Tmle,
    Gee,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::TTest,
        EstimatorKind::Care,
        EstimatorKind::Tmle,
        EstimatorKind::Gee,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::TTest => "t_test",
            EstimatorKind::Care => "care",
            EstimatorKind::Tmle => "tmle",
            EstimatorKind::Gee => "gee",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        EstimatorKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

fn scale_name(scale: Scale) -> &'static str {
    match scale {
        Scale::Rd => "rd",
        Scale::LogRr => "rr",
    }
}

/// Estimator rows in table order.
const ROWS: [(EstimatorKind, Scale); 5] = [
    (EstimatorKind::TTest, Scale::Rd),
    (EstimatorKind::Care, Scale::Rd),
    (EstimatorKind::Tmle, Scale::Rd),
    (EstimatorKind::Gee, Scale::LogRr),
    (EstimatorKind::Tmle, Scale::LogRr),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Design of every replicate; `dgp.seed` is the master seed.
    pub dgp: DgpSpec,
    pub replicates: usize,
    pub estimators: Vec<EstimatorKind>,
    pub stage1: Stage1Config,
    pub candidates: Vec<Candidate>,
    pub alpha_level: f64,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
    pub truth_population: usize,
}

impl ExperimentConfig {
    /// Defaults for a data-generating process: all estimators, Stage-1
    /// adjustment for every individual covariate, `E1`/`E2` as candidates.
    pub fn new(dgp: DgpSpec, replicates: usize) -> Self {
        let mut adjustment = vec!["W1".to_string(), "W2".to_string()];
        if dgp.kind == DgpKind::Main {
            adjustment.push("M".into());
        }
        ExperimentConfig {
            dgp,
            replicates,
            estimators: EstimatorKind::ALL.to_vec(),
            stage1: Stage1Config {
                adjustment,
                ..Stage1Config::default()
            },
            candidates: vec!["E1".into(), "E2".into()],
            alpha_level: 0.05,
            jobs: 0,
            truth_population: TRUTH_POPULATION,
        }
    }
}

/// One estimate in the raw per-replicate output. `point`, `lower` and `upper`
/// are on the estimation scale (log scale for relative risks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEstimate {
    pub estimator: EstimatorKind,
    pub scale: String,
    pub matched: bool,
    pub point: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub pvalue: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjustment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFailure {
    pub estimator: EstimatorKind,
    pub scale: String,
    pub matched: bool,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub estimates: Vec<RawEstimate>,
    pub failures: Vec<RawFailure>,
}

/// Table row. Risk differences are in percentage points; for relative risks
/// `pt` and `bias` are on the ratio scale, `sigma` and `sigma_hat` on the log
/// scale. Coverage and power are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: String,
    pub scale: String,
    pub matched: bool,
    pub pt: f64,
    pub bias: f64,
    pub sigma: f64,
    pub sigma_hat: f64,
    pub coverage: f64,
    pub power: f64,
    #[serde(skip)]
    pub n_ok: usize,
    #[serde(skip)]
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub truth: TrueValues,
    pub rows: Vec<MetricsRow>,
    pub replicates: Vec<ReplicateRecord>,
}

impl ExperimentResult {
    pub fn row(&self, estimator: &str, scale: &str, matched: bool) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.scale == scale && r.matched == matched)
    }

    pub fn total_failures(&self) -> usize {
        self.rows.iter().map(|r| r.n_failed).sum()
    }
}

fn from_comparator(kind: EstimatorKind, matched: bool, e: ComparatorEstimate) -> RawEstimate {
    RawEstimate {
        estimator: kind,
        scale: scale_name(e.scale).into(),
        matched,
        point: e.point,
        se: e.se,
        lower: e.ci.lower,
        upper: e.ci.upper,
        pvalue: e.pvalue,
        adjustment: None,
    }
}

fn tmle_estimate(
    summaries: &[ClusterSummary],
    candidates: &[Candidate],
    matched: bool,
    scale: Scale,
) -> Result<RawEstimate> {
    let cfg = Stage2Config {
        matched,
        ..Stage2Config::default()
    };
    let (report, est) = adaptive_tmle(summaries, candidates, &cfg, scale)?;
    let (point, se, ci, pvalue) = match scale {
        Scale::Rd => (est.rd, est.se_rd, est.ci_rd, est.pvalue_rd),
        Scale::LogRr => match (est.log_rr, est.se_log_rr, est.ci_log_rr, est.pvalue_rr) {
            (Some(p), Some(s), Some(c), Some(v)) => (p, s, c, v),
            _ => return Err(Error::InvalidArgument("relative risk undefined".into())),
        },
    };
    let label = |c: &Option<Candidate>| {
        c.as_ref()
            .map_or_else(|| "none".to_string(), Candidate::label)
    };
    Ok(RawEstimate {
        estimator: EstimatorKind::Tmle,
        scale: scale_name(scale).into(),
        matched,
        point,
        se,
        lower: ci.lower,
        upper: ci.upper,
        pvalue,
        adjustment: Some(format!(
            "or={};ps={}",
            label(&report.chosen_or),
            label(&report.chosen_ps)
        )),
    })
}

/// Runs every configured estimator on replicate `r`.
pub fn run_replicate(config: &ExperimentConfig, r: usize) -> ReplicateRecord {
    let seed = derive_seed(config.dgp.seed, &[r as u64]);
    let mut record = ReplicateRecord {
        replicate: r,
        seed,
        estimates: Vec::new(),
        failures: Vec::new(),
    };
    let rows: Vec<(EstimatorKind, Scale)> = ROWS
        .into_iter()
        .filter(|(k, _)| config.estimators.contains(k))
        .collect();

    let msg = |e: Error| e.to_string();
    let trial = generate(&DgpSpec { seed, ..config.dgp }).map_err(msg);
    let complete_case = trial
        .as_ref()
        .map_err(Clone::clone)
        .and_then(|t| complete_case_summaries(&t.clusters).map_err(msg));
    let needs_stage1 = rows.iter().any(|(k, _)| *k == EstimatorKind::Tmle);
    let stage1 = match (&trial, needs_stage1) {
        (_, false) => Err("not requested".to_string()),
        (Err(e), true) => Err(e.clone()),
        (Ok(t), true) => estimate_trial(
            &t.clusters,
            &config.stage1.with_seed(derive_seed(seed, &[1])),
        )
        .map(|res| {
            t.clusters
                .iter()
                .zip(&res)
                .map(|(c, s)| c.summary(s.y_hat))
                .collect::<Vec<_>>()
        })
        .map_err(msg),
    };

    for (kind, scale) in rows {
        for matched in [false, true] {
            let outcome: std::result::Result<RawEstimate, String> = match (kind, &trial) {
                (_, Err(e)) => Err(e.clone()),
                (EstimatorKind::TTest, Ok(_)) => {
                    complete_case.as_ref().map_err(Clone::clone).and_then(|s| {
                        t_test_effect(s, matched)
                            .map(|e| from_comparator(kind, matched, e))
                            .map_err(msg)
                    })
                }
                (EstimatorKind::Care, Ok(t)) => care_effect(&t.clusters, matched)
                    .map(|e| from_comparator(kind, matched, e))
                    .map_err(msg),
                (EstimatorKind::Gee, Ok(t)) => gee_log_rr(&t.clusters, matched)
                    .map(|e| from_comparator(kind, matched, e))
                    .map_err(msg),
                (EstimatorKind::Tmle, Ok(_)) => {
                    stage1.as_ref().map_err(Clone::clone).and_then(|s| {
                        tmle_estimate(s, &config.candidates, matched, scale).map_err(msg)
                    })
                }
            };
            match outcome {
                Ok(e) => record.estimates.push(e),
                Err(e) => record.failures.push(RawFailure {
                    estimator: kind,
                    scale: scale_name(scale).into(),
                    matched,
                    error: e,
                }),
            }
        }
    }
    record
}

fn aggregate(
    config: &ExperimentConfig,
    truth: &TrueValues,
    records: &[ReplicateRecord],
) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for (kind, scale) in ROWS
        .into_iter()
        .filter(|(k, _)| config.estimators.contains(k))
    {
        for matched in [false, true] {
            let name = scale_name(scale);
            let hits: Vec<&RawEstimate> = records
                .iter()
                .flat_map(|r| &r.estimates)
                .filter(|e| e.estimator == kind && e.scale == name && e.matched == matched)
                .collect();
            let n_failed = records.len() - hits.len();
            let pct = |count: usize| 100.0 * count as f64 / hits.len() as f64;
            let points: Vec<f64> = hits.iter().map(|e| e.point).collect();
            let ses: Vec<f64> = hits.iter().map(|e| e.se).collect();
            let target = match scale {
                Scale::Rd => truth.rd,
                Scale::LogRr => truth.rr.ln(),
            };
            let coverage = pct(hits
                .iter()
                .filter(|e| e.lower <= target && target <= e.upper)
                .count());
            let power = pct(hits
                .iter()
                .filter(|e| e.pvalue < config.alpha_level)
                .count());
            let (pt, bias, sigma, sigma_hat) = match scale {
                Scale::Rd => (
                    100.0 * mean(&points),
                    100.0 * (mean(&points) - truth.rd),
                    100.0 * sample_variance(&points).sqrt(),
                    100.0 * mean(&ses),
                ),
                Scale::LogRr => {
                    let ratios: Vec<f64> = points.iter().map(|p| p.exp()).collect();
                    (
                        mean(&ratios),
                        mean(&ratios) - truth.rr,
                        sample_variance(&points).sqrt(),
                        mean(&ses),
                    )
                }
            };
            rows.push(MetricsRow {
                estimator: kind.name().into(),
                scale: name.into(),
                matched,
                pt,
                bias,
                sigma,
                sigma_hat,
                coverage,
                power,
                n_ok: hits.len(),
                n_failed,
            });
        }
    }
    rows
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    if config.replicates == 0 {
        return Err(Error::InvalidArgument(
            "at least one replicate is required".into(),
        ));
    }
    if config.dgp.n_clusters % 2 != 0 {
        return Err(Error::Pairing(format!(
            "cluster count {} is odd",
            config.dgp.n_clusters
        )));
    }
    config.stage1.validate()?;
    let work = || -> Result<ExperimentResult> {
        let truth = true_values(&config.dgp, config.truth_population)?;
        let replicates: Vec<ReplicateRecord> = (0..config.replicates)
            .into_par_iter()
            .map(|r| run_replicate(config, r))
            .collect();
        let rows = aggregate(config, &truth, &replicates);
        for row in rows.iter().filter(|r| r.n_failed > 0) {
            log::warn!(
                "{} {} matched={}: {} of {} replicates failed",
                row.estimator,
                row.scale,
                row.matched,
                row.n_failed,
                config.replicates
            );
        }
        Ok(ExperimentResult {
            truth,
            rows,
            replicates,
        })
    };
    if config.jobs == 0 {
        work()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work)
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_raw_ndjson<W: Write>(records: &[ReplicateRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
