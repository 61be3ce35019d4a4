//! JSON analysis configuration. Unknown keys are rejected; omitted sections
//! take their defaults.

use serde::{Deserialize, Serialize};

use crate::adaptive::Candidate;
use crate::error::{Error, Result};
use crate::io::PRIMARY_OUTCOME;
use crate::stage1::{Stage1Config, Stage1Estimator};
use crate::stage2::{Scale, Stage2Config, WeightScheme};
use crate::superlearner::{LearnerSpec, DEFAULT_FOLDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EndpointConfig {
    Mean {
        #[serde(default = "primary")]
        outcome: String,
    },
    Ratio {
        num: String,
        den: String,
    },
}

fn primary() -> String {
    PRIMARY_OUTCOME.to_string()
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig::Mean { outcome: primary() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub estimator: Stage1Estimator,
    pub adjustment: Vec<String>,
    pub g_bounds: (f64, f64),
    pub sl_library: Vec<String>,
    pub sl_folds: usize,
    pub outcome_range: (f64, f64),
}

impl Default for Stage1Section {
    fn default() -> Self {
        Stage1Section {
            estimator: Stage1Estimator::Tmle,
            adjustment: Vec::new(),
            g_bounds: (0.025, 1.0),
            sl_library: vec!["mean".into(), "glm".into(), "glm_sq".into()],
            sl_folds: DEFAULT_FOLDS,
            outcome_range: (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub candidates: Vec<Candidate>,
    pub matched: bool,
    pub weights: WeightScheme,
    pub known_ps: f64,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Stage2Section {
            candidates: Vec::new(),
            matched: false,
            weights: WeightScheme::EqualCluster,
            known_ps: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleChoice {
    Rd,
    Rr,
    #[default]
    Both,
}

impl ScaleChoice {
    pub fn scales(self) -> Vec<Scale> {
        match self {
            ScaleChoice::Rd => vec![Scale::Rd],
            ScaleChoice::Rr => vec![Scale::LogRr],
            ScaleChoice::Both => vec![Scale::Rd, Scale::LogRr],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub endpoint: EndpointConfig,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub scale: ScaleChoice,
    pub seed: u64,
}

impl AnalysisConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: AnalysisConfig =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("config: {e}")))?;
        cfg.stage1_config()?;
        cfg.stage2_config()?;
        Ok(cfg)
    }

    pub fn stage1_config(&self) -> Result<Stage1Config> {
        let s = &self.stage1;
        let sl_library = s
            .sl_library
            .iter()
            .map(|n| LearnerSpec::from_name(n))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Schema(format!("config: {e}")))?;
        if s.sl_folds < 2 {
            return Err(Error::Schema("config: sl_folds must be at least 2".into()));
        }
        let cfg = Stage1Config {
            estimator: s.estimator,
            adjustment: s.adjustment.clone(),
            g_bounds: s.g_bounds,
            sl_library,
            sl_folds: s.sl_folds,
            seed: self.seed,
            outcome_range: s.outcome_range,
        };
        cfg.validate()
            .map_err(|e| Error::Schema(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn stage2_config(&self) -> Result<Stage2Config> {
        let s = &self.stage2;
        if !(s.known_ps > 0.0 && s.known_ps < 1.0) {
            return Err(Error::Schema(format!(
                "config: known_ps {} must lie in (0, 1)",
                s.known_ps
            )));
        }
        Ok(Stage2Config {
            or_terms: Vec::new(),
            ps_terms: Vec::new(),
            known_ps: s.known_ps,
            matched: s.matched,
            weights: s.weights,
        })
    }
}
