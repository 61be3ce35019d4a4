//! Adaptive pre-specification of the Stage-2 adjustment set.
//!
//! Every pair (outcome-regression candidate, propensity candidate) drawn from
//! `{none} ∪ candidates` is scored by the leave-one-unit-out estimate of the
//! influence-curve variance; the smallest score wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{summary_table, ClusterSummary};
use crate::error::{Error, Result};
use crate::stage2::{
    check_inputs, cluster_ic, scale_ic, tmle_effect, unit_ic, EffectEstimate, Scale, Stage2Config,
    Stage2Fit,
};

/// Relative tolerance under which two CV variances count as tied.
pub const TIE_TOL: f64 = 1e-12;

/// One adjustment candidate: a single covariate or a set of covariates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Candidate {
    Single(String),
    Set(Vec<String>),
}

impl Candidate {
    pub fn names(&self) -> Vec<String> {
        match self {
            Candidate::Single(n) => vec![n.clone()],
            Candidate::Set(v) => v.clone(),
        }
    }

    pub fn label(&self) -> String {
        self.names().join("+")
    }
}

impl From<&str> for Candidate {
    fn from(s: &str) -> Self {
        Candidate::Single(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvScheme {
    LooCluster,
    LooPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub or: Option<Candidate>,
    pub ps: Option<Candidate>,
    /// `None` when some training split lacked an arm or a fit failed.
    pub variance: Option<f64>,
}

impl CvCell {
    fn value(&self) -> f64 {
        self.variance.unwrap_or(f64::INFINITY)
    }

    fn adjusted(&self) -> usize {
        usize::from(self.or.is_some()) + usize::from(self.ps.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub candidates: Vec<Candidate>,
    pub chosen_or: Option<Candidate>,
    pub chosen_ps: Option<Candidate>,
    /// Grid cells in tie-break order: `(none, none)` first, then by the number
    /// of adjusted components, then by candidate order.
    pub cv_variances: Vec<CvCell>,
    pub scheme: CvScheme,
    pub scale: Scale,
}

impl SelectionReport {
    pub fn chosen_variance(&self) -> Option<f64> {
        self.cv_variances
            .iter()
            .find(|c| c.or == self.chosen_or && c.ps == self.chosen_ps)
            .and_then(|c| c.variance)
    }

    /// Stage-2 configuration implied by the chosen cell.
    pub fn apply(&self, base: &Stage2Config) -> Stage2Config {
        let names = |c: &Option<Candidate>| c.as_ref().map(Candidate::names).unwrap_or_default();
        base.with_adjustment(names(&self.chosen_or), names(&self.chosen_ps))
    }
}

fn grid(candidates: &[Candidate]) -> Vec<(Option<usize>, Option<usize>)> {
    let opts: Vec<Option<usize>> = std::iter::once(None)
        .chain((0..candidates.len()).map(Some))
        .collect();
    let mut cells: Vec<_> = opts
        .iter()
        .flat_map(|&o| opts.iter().map(move |&p| (o, p)))
        .collect();
    cells.sort_by_key(|&(o, p)| (usize::from(o.is_some()) + usize::from(p.is_some()), o, p));
    cells
}

fn cv_variance(
    summaries: &[ClusterSummary],
    units: &[Vec<usize>],
    config: &Stage2Config,
    scale: Scale,
) -> Result<Option<f64>> {
    let full = tmle_effect(summaries, config)?;
    let psi = (full.psi1, full.psi0);
    if scale == Scale::LogRr && full.log_rr.is_none() {
        return Ok(None);
    }
    let alpha_mean = summaries.iter().map(|s| s.alpha).sum::<f64>() / summaries.len() as f64;

    let mut total = 0.0;
    for held in units {
        let train: Vec<ClusterSummary> = summaries
            .iter()
            .enumerate()
            .filter(|(i, _)| !held.contains(i))
            .map(|(_, s)| s.clone())
            .collect();
        if !(train.iter().any(|s| s.arm == 1) && train.iter().any(|s| s.arm == 0)) {
            return Ok(None);
        }
        let fit = Stage2Fit::fit(&train, config)?;
        let test: Vec<ClusterSummary> = held.iter().map(|&i| summaries[i].clone()).collect();
        let t = fit.targeted(&test)?;
        let per_cluster: Vec<f64> = cluster_ic(&test, &t, psi, alpha_mean)
            .into_iter()
            .map(|c| scale_ic(c, psi, scale))
            .collect();
        let pair = [[0, 1]];
        let ic = unit_ic(&per_cluster, (held.len() == 2).then_some(&pair[..]));
        total += ic[0] * ic[0];
    }
    let n = units.len() as f64;
    let v = total / n / n;
    Ok(v.is_finite().then_some(v))
}

/// Scores the full candidate grid and returns the selection.
pub fn select_adjustment(
    summaries: &[ClusterSummary],
    candidates: &[Candidate],
    config: &Stage2Config,
    scale: Scale,
) -> Result<SelectionReport> {
    let pairs = check_inputs(summaries, config.matched)?;
    let units: Vec<Vec<usize>> = match &pairs {
        Some(p) => p.iter().map(|u| u.to_vec()).collect(),
        None => (0..summaries.len()).map(|i| vec![i]).collect(),
    };
    if summaries.len() < 4 || units.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "adaptive selection needs at least 4 clusters (2 pairs when matched), got {}",
            summaries.len()
        )));
    }
    for c in candidates {
        let names = c.names();
        if names.is_empty() {
            return Err(Error::InvalidArgument("empty candidate set".into()));
        }
        summary_table(summaries, &names)?;
    }

    let cells = grid(candidates);
    let pick = |i: Option<usize>| i.map(|k| candidates[k].clone());
    let scored: Vec<CvCell> = cells
        .par_iter()
        .map(|&(o, p)| {
            let cell_config = config.with_adjustment(
                pick(o).map_or_else(Vec::new, |c| c.names()),
                pick(p).map_or_else(Vec::new, |c| c.names()),
            );
            let variance =
                cv_variance(summaries, &units, &cell_config, scale).unwrap_or_else(|e| {
                    log::debug!("candidate cell ({o:?}, {p:?}) failed: {e}");
                    None
                });
            CvCell {
                or: pick(o),
                ps: pick(p),
                variance,
            }
        })
        .collect();

    let min = scored
        .iter()
        .map(CvCell::value)
        .fold(f64::INFINITY, f64::min);
    let chosen = scored
        .iter()
        .find(|c| c.value() <= min + TIE_TOL * min.abs())
        .unwrap_or(&scored[0]);
    debug_assert!(chosen.adjusted() <= 2);

    Ok(SelectionReport {
        candidates: candidates.to_vec(),
        chosen_or: chosen.or.clone(),
        chosen_ps: chosen.ps.clone(),
        cv_variances: scored.clone(),
        scheme: if config.matched {
            CvScheme::LooPair
        } else {
            CvScheme::LooCluster
        },
        scale,
    })
}

/// Selection followed by the Stage-2 estimate for the chosen cell.
pub fn adaptive_tmle(
    summaries: &[ClusterSummary],
    candidates: &[Candidate],
    config: &Stage2Config,
    scale: Scale,
) -> Result<(SelectionReport, EffectEstimate)> {
    let report = select_adjustment(summaries, candidates, config, scale)?;
    let estimate = tmle_effect(summaries, &report.apply(config))?;
    Ok((report, estimate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(u8, f64, f64, f64)]) -> Vec<ClusterSummary> {
        rows.iter()
            .enumerate()
            .map(|(i, &(arm, y, e1, e2))| ClusterSummary {
                id: format!("c{i}"),
                pair_id: Some(format!("p{}", i / 2)),
                arm,
                covariates: vec![("E1".into(), e1), ("E2".into(), e2)],
                y_hat: y,
                alpha: 1.0,
                size: Some(100),
            })
            .collect()
    }

    fn sample() -> Vec<ClusterSummary> {
        table(&[
            (1, 0.62, 0.1, 0.5),
            (0, 0.41, 0.2, -0.3),
            (1, 0.55, -0.4, 0.9),
            (0, 0.30, -0.5, 0.1),
            (1, 0.71, 0.6, -0.7),
            (0, 0.48, 0.7, 0.4),
            (1, 0.50, -0.1, -0.2),
            (0, 0.36, -0.2, 0.8),
        ])
    }

    #[test]
    fn grid_order_starts_unadjusted() {
        let g = grid(&["E1".into(), "E2".into()]);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], (None, None));
        assert_eq!(g[1], (None, Some(0)));
        assert_eq!(g[3], (Some(0), None));
        assert_eq!(g[8], (Some(1), Some(1)));
    }

    #[test]
    fn chosen_cell_is_minimal() {
        let s = sample();
        for matched in [false, true] {
            let cfg = Stage2Config {
                matched,
                ..Default::default()
            };
            let r = select_adjustment(&s, &["E1".into(), "E2".into()], &cfg, Scale::Rd).unwrap();
            let best = r.chosen_variance().unwrap();
            assert!(r.cv_variances.iter().all(|c| c.value() >= best));
            assert!(best <= r.cv_variances[0].value());
            assert_eq!(
                r.scheme,
                if matched {
                    CvScheme::LooPair
                } else {
                    CvScheme::LooCluster
                }
            );
        }
    }

    #[test]
    fn empty_candidate_list_selects_unadjusted() {
        let r = select_adjustment(&sample(), &[], &Stage2Config::default(), Scale::Rd).unwrap();
        assert_eq!(r.cv_variances.len(), 1);
        assert_eq!((r.chosen_or.clone(), r.chosen_ps.clone()), (None, None));
    }

    #[test]
    fn unknown_candidate_rejected() {
        let e = select_adjustment(
            &sample(),
            &["E9".into()],
            &Stage2Config::default(),
            Scale::Rd,
        );
        assert!(matches!(e, Err(Error::MissingColumn(c)) if c == "E9"));
    }

    #[test]
    fn too_few_clusters() {
        let s = sample()[..2].to_vec();
        assert!(select_adjustment(&s, &[], &Stage2Config::default(), Scale::Rd).is_err());
    }

    #[test]
    fn candidate_sets_deserialize() {
        let c: Vec<Candidate> = serde_json::from_str(r#"["E1", ["E1", "E2"]]"#).unwrap();
        assert_eq!(c[0], Candidate::Single("E1".into()));
        assert_eq!(c[1].label(), "E1+E2");
    }
}
