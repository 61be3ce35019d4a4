//! Two-stage analysis of a trial dataset: Stage 1 per cluster, adaptive
//! selection and Stage 2 per requested scale, plus an audit trail.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{adaptive_tmle, SelectionReport};
use crate::config::{AnalysisConfig, EndpointConfig};
use crate::data::{ClusterData, ClusterSummary};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::stage1::{estimate_outcome, estimate_ratio_endpoint, Stage1Result};
use crate::stage2::{apply_weights, EffectEstimate, Scale};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleResult {
    pub scale: Scale,
    pub selection: SelectionReport,
    pub estimate: EffectEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAudit {
    pub cluster_id: String,
    pub seed: u64,
    pub g_bound_hits: usize,
    pub outcome_learners: Vec<String>,
    pub measurement_learners: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub seed: u64,
    pub clusters: Vec<ClusterAudit>,
    pub g_bound_hits: usize,
    /// Learner label → number of Stage-1 fits that selected it.
    pub outcome_learner_counts: BTreeMap<String, usize>,
    pub measurement_learner_counts: BTreeMap<String, usize>,
    pub config: AnalysisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub effects: Vec<ScaleResult>,
    pub stage1: Vec<Stage1Result>,
    pub summaries: Vec<ClusterSummary>,
    pub audit: Audit,
}

fn leaves(r: &Stage1Result) -> Vec<&Stage1Result> {
    match &r.components {
        Some(parts) => vec![&parts.0, &parts.1],
        None => vec![r],
    }
}

/// Stage-1 endpoints for every cluster; cluster `i` is seeded with
/// `derive_seed(config.seed, [i])`.
pub fn stage1_endpoints(
    clusters: &[ClusterData],
    config: &AnalysisConfig,
) -> Result<Vec<Stage1Result>> {
    let base = config.stage1_config()?;
    clusters
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let cfg = base.with_seed(derive_seed(config.seed, &[i as u64]));
            match &config.endpoint {
                EndpointConfig::Mean { outcome } => {
                    estimate_outcome(c, c.schema.outcome_index(outcome)?, &cfg)
                }
                EndpointConfig::Ratio { num, den } => {
                    estimate_ratio_endpoint(c, &cfg, &cfg, num, den)
                }
            }
        })
        .collect()
}

pub fn analyze(clusters: &[ClusterData], config: &AnalysisConfig) -> Result<AnalysisOutput> {
    if clusters.is_empty() {
        return Err(Error::EmptyData("no clusters".into()));
    }
    let stage2 = config.stage2_config()?;
    let stage1 = stage1_endpoints(clusters, config)?;
    let mut summaries: Vec<ClusterSummary> = clusters
        .iter()
        .zip(&stage1)
        .map(|(c, r)| c.summary(r.y_hat))
        .collect();
    apply_weights(&mut summaries, stage2.weights)?;

    let effects = config
        .scale
        .scales()
        .into_iter()
        .map(|scale| {
            let (selection, estimate) =
                adaptive_tmle(&summaries, &config.stage2.candidates, &stage2, scale)?;
            Ok(ScaleResult {
                scale,
                selection,
                estimate,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut outcome_learner_counts = BTreeMap::new();
    let mut measurement_learner_counts = BTreeMap::new();
    let audits: Vec<ClusterAudit> = stage1
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let parts = leaves(r);
            let outcome_learners: Vec<String> = parts
                .iter()
                .filter_map(|p| p.diagnostics.outcome_learner.clone())
                .collect();
            let measurement_learners: Vec<String> = parts
                .iter()
                .filter_map(|p| p.diagnostics.measurement_learner.clone())
                .collect();
            for l in &outcome_learners {
                *outcome_learner_counts.entry(l.clone()).or_insert(0) += 1;
            }
            for l in &measurement_learners {
                *measurement_learner_counts.entry(l.clone()).or_insert(0) += 1;
            }
            ClusterAudit {
                cluster_id: r.cluster_id.clone(),
                seed: derive_seed(config.seed, &[i as u64]),
                g_bound_hits: parts.iter().map(|p| p.diagnostics.g_bound_hits).sum(),
                outcome_learners,
                measurement_learners,
            }
        })
        .collect();

    Ok(AnalysisOutput {
        effects,
        audit: Audit {
            seed: config.seed,
            g_bound_hits: audits.iter().map(|a| a.g_bound_hits).sum(),
            clusters: audits,
            outcome_learner_counts,
            measurement_learner_counts,
            config: config.clone(),
        },
        stage1,
        summaries,
    })
}
