//! Fixtures shared by the benchmarks.

use twostage_core::stage1::Stage1Config;
use twostage_core::{generate, ClusterData, ClusterSummary, DgpKind, DgpSpec};

/// One realization of the main design with `n` clusters.
pub fn trial(n: usize, seed: u64) -> Vec<ClusterData> {
    generate(&DgpSpec::new(DgpKind::Main, n, seed))
        .expect("valid design")
        .clusters
}

pub fn stage1_config() -> Stage1Config {
    Stage1Config {
        adjustment: vec!["W1".into(), "W2".into(), "M".into()],
        ..Stage1Config::default()
    }
}

/// Complete-case summaries; adequate input for Stage-2 timing.
pub fn summaries(clusters: &[ClusterData]) -> Vec<ClusterSummary> {
    clusters
        .iter()
        .map(|c| c.summary(c.complete_case_mean(0).unwrap_or(0.0)))
        .collect()
}
