//! Individual- and cluster-level data containers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-oriented table of named numeric covariates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Covariates {
    nrows: usize,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Covariates {
    pub fn new(nrows: usize) -> Self {
        Covariates {
            nrows,
            names: Vec::new(),
            columns: Vec::new(),
        }
    }

    pub fn with_column(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        self.push_column(name, values)?;
        Ok(self)
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.nrows {
            return Err(Error::Dimension(format!(
                "column `{name}` has {} rows, table has {}",
                values.len(),
                self.nrows
            )));
        }
        if self.names.contains(&name) {
            return Err(Error::InvalidArgument(format!("duplicate column `{name}`")));
        }
        self.names.push(name);
        self.columns.push(values);
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.column(name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Table restricted to `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Covariates {
        Covariates {
            nrows: rows.len(),
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
        }
    }

    /// Table restricted to the named columns.
    pub fn select_columns(&self, names: &[String]) -> Result<Covariates> {
        let mut out = Covariates::new(self.nrows);
        for n in names {
            out.push_column(n.clone(), self.require(n)?.to_vec())?;
        }
        Ok(out)
    }
}

/// Column names shared by every individual in a trial.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Schema {
    /// Baseline individual covariates (W).
    pub w_names: Vec<String>,
    /// Post-baseline individual covariates (M).
    pub m_names: Vec<String>,
    /// Outcome names; the first is the primary outcome.
    pub outcome_names: Vec<String>,
}

impl Schema {
    pub fn outcome_index(&self, name: &str) -> Result<usize> {
        self.outcome_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema(format!("unknown outcome `{name}`")))
    }
}

/// Measurement indicator and (when measured) value of one outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub delta: bool,
    pub y: Option<f64>,
}

impl Measurement {
    pub fn measured(y: f64) -> Self {
        Measurement {
            delta: true,
            y: Some(y),
        }
    }

    pub fn missing() -> Self {
        Measurement {
            delta: false,
            y: None,
        }
    }
}

/// One participant: baseline covariates, post-baseline covariates and outcomes,
/// aligned with the cluster's [`Schema`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub w: Vec<f64>,
    pub m: Vec<f64>,
    pub outcomes: Vec<Measurement>,
}

impl IndividualRecord {
    pub fn delta(&self) -> bool {
        self.outcomes[0].delta
    }

    pub fn y(&self) -> Option<f64> {
        self.outcomes[0].y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterData {
    pub id: String,
    pub pair_id: Option<String>,
    pub arm: u8,
    /// Cluster-level covariates (E^c).
    pub covariates: Vec<(String, f64)>,
    pub schema: Arc<Schema>,
    pub individuals: Vec<IndividualRecord>,
}

impl ClusterData {
    pub fn size(&self) -> usize {
        self.individuals.len()
    }

    /// Individual covariates (W and M) as a table.
    pub fn individual_covariates(&self) -> Covariates {
        let n = self.individuals.len();
        let mut t = Covariates::new(n);
        for (k, name) in self.schema.w_names.iter().enumerate() {
            let col = self.individuals.iter().map(|r| r.w[k]).collect();
            t.push_column(name.clone(), col)
                .expect("schema names are unique");
        }
        for (k, name) in self.schema.m_names.iter().enumerate() {
            let col = self.individuals.iter().map(|r| r.m[k]).collect();
            t.push_column(name.clone(), col)
                .expect("schema names are unique");
        }
        t
    }

    pub fn measurements(&self, outcome: usize) -> impl Iterator<Item = Measurement> + '_ {
        self.individuals.iter().map(move |r| r.outcomes[outcome])
    }

    /// Mean outcome among measured individuals.
    pub fn complete_case_mean(&self, outcome: usize) -> Option<f64> {
        let (sum, count) = self
            .measurements(outcome)
            .filter_map(|m| m.y)
            .fold((0.0, 0usize), |(s, c), y| (s + y, c + 1));
        (count > 0).then(|| sum / count as f64)
    }

    /// Stage-2 row with endpoint `y_hat`: cluster covariates followed by the
    /// baseline means, unit weight.
    pub fn summary(&self, y_hat: f64) -> ClusterSummary {
        let mut covariates = self.covariates.clone();
        covariates.extend(self.baseline_means());
        ClusterSummary {
            id: self.id.clone(),
            pair_id: self.pair_id.clone(),
            arm: self.arm,
            covariates,
            y_hat,
            alpha: 1.0,
            size: Some(self.size()),
        }
    }

    /// Within-cluster means of the baseline covariates, named `mean_<w>`.
    pub fn baseline_means(&self) -> Vec<(String, f64)> {
        let n = self.individuals.len().max(1) as f64;
        self.schema
            .w_names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let mean = self.individuals.iter().map(|r| r.w[k]).sum::<f64>() / n;
                (format!("mean_{name}"), mean)
            })
            .collect()
    }
}

/// Stage-2 analysis row for one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: String,
    pub pair_id: Option<String>,
    pub arm: u8,
    /// E^c and aggregated W^c.
    pub covariates: Vec<(String, f64)>,
    pub y_hat: f64,
    pub alpha: f64,
    pub size: Option<usize>,
}

impl ClusterSummary {
    pub fn covariate(&self, name: &str) -> Result<f64> {
        self.covariates
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }
}

/// Cluster-level covariates of `summaries` as a table (columns taken from the first row).
pub fn summary_table(summaries: &[ClusterSummary], names: &[String]) -> Result<Covariates> {
    let mut t = Covariates::new(summaries.len());
    for name in names {
        let col = summaries
            .iter()
            .map(|s| s.covariate(name))
            .collect::<Result<Vec<_>>>()?;
        t.push_column(name.clone(), col)?;
    }
    Ok(t)
}
