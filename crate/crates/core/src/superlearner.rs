//! Discrete Super Learner: V-fold cross-validated selection among a small
//! library of binary-outcome learners, scored by negative Bernoulli
//! log-likelihood.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{Error, Result};
use crate::numerics::{fit_glm, predict, DesignSpec, GlmFit, Link, PredictKind};
use crate::rng;

/// Predictions leaving the ensemble are held inside `[PRED_EPS, 1 - PRED_EPS]`.
pub const PRED_EPS: f64 = 1e-6;
pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    EmpiricalMean,
    GlmMainTerms,
    /// Main terms plus squares of every covariate taking more than two values.
    GlmMainPlusSquares,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub label: String,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind, label: impl Into<String>) -> Self {
        LearnerSpec {
            kind,
            label: label.into(),
        }
    }

    /// Learner by its configuration name: `mean`, `glm` or `glm_sq`.
    pub fn from_name(name: &str) -> Result<Self> {
        let kind = match name {
            "mean" => LearnerKind::EmpiricalMean,
            "glm" => LearnerKind::GlmMainTerms,
            "glm_sq" => LearnerKind::GlmMainPlusSquares,
            other => return Err(Error::InvalidArgument(format!("unknown learner `{other}`"))),
        };
        Ok(LearnerSpec::new(kind, name))
    }

    pub fn default_library() -> Vec<LearnerSpec> {
        ["mean", "glm", "glm_sq"]
            .iter()
            .map(|n| LearnerSpec::from_name(n).unwrap())
            .collect()
    }

    fn design(&self, x: &Covariates) -> Option<DesignSpec> {
        match self.kind {
            LearnerKind::EmpiricalMean => None,
            LearnerKind::GlmMainTerms => Some(DesignSpec::main_terms(x.names())),
            LearnerKind::GlmMainPlusSquares => {
                let mut d = DesignSpec::main_terms(x.names());
                d.interactions = x
                    .names()
                    .iter()
                    .filter(|n| is_continuous(x.column(n).unwrap()))
                    .map(|n| (n.clone(), n.clone()))
                    .collect();
                Some(d)
            }
        }
    }
}

fn is_continuous(col: &[f64]) -> bool {
    let mut seen: Vec<f64> = Vec::with_capacity(3);
    for &v in col {
        if !seen.contains(&v) {
            seen.push(v);
            if seen.len() > 2 {
                return true;
            }
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LearnerFit {
    Constant(f64),
    Glm(GlmFit),
}

impl LearnerFit {
    fn predict(&self, x: &Covariates) -> Result<Vec<f64>> {
        match self {
            LearnerFit::Constant(c) => Ok(vec![*c; x.nrows()]),
            LearnerFit::Glm(fit) => predict(fit, x, PredictKind::Response),
        }
    }
}

fn fit_learner(
    spec: &LearnerSpec,
    design: Option<&DesignSpec>,
    x: &Covariates,
    y: &[f64],
) -> Result<LearnerFit> {
    match design {
        None => {
            if y.is_empty() {
                return Err(Error::EmptyData("no rows for empirical mean".into()));
            }
            Ok(LearnerFit::Constant(y.iter().sum::<f64>() / y.len() as f64))
        }
        Some(d) => {
            let fit = fit_glm(d, Link::Logit, x, y, &vec![1.0; y.len()], None)?;
            if !fit.converged {
                log::debug!("learner `{}` did not converge", spec.label);
            }
            Ok(LearnerFit::Glm(fit))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlFit {
    pub library: Vec<LearnerSpec>,
    pub cv_risks: Vec<f64>,
    pub selected: usize,
    /// Full-data fit of every learner; `None` where the full-data fit failed.
    pub fits: Vec<Option<LearnerFit>>,
    pub folds: Vec<usize>,
}

impl SlFit {
    pub fn selected_label(&self) -> &str {
        &self.library[self.selected].label
    }
}

/// Fold index for each row. Rows are stratified on `y == 1` when both classes
/// are present, shuffled within stratum and dealt round-robin.
pub fn fold_assignment(y: &[f64], v: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, &[0x5f]);
    let ones: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1.0).collect();
    let rest: Vec<usize> = (0..y.len()).filter(|&i| y[i] != 1.0).collect();
    let strata = if ones.is_empty() || rest.is_empty() {
        vec![(0..y.len()).collect::<Vec<_>>()]
    } else {
        vec![ones, rest]
    };
    let mut folds = vec![0; y.len()];
    let mut counter = 0;
    for mut stratum in strata {
        stratum.shuffle(&mut r);
        for i in stratum {
            folds[i] = counter % v;
            counter += 1;
        }
    }
    folds
}

fn neg_loglik(y: f64, p: f64) -> f64 {
    let p = p.clamp(PRED_EPS, 1.0 - PRED_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn sl_fit(
    x: &Covariates,
    y: &[f64],
    library: &[LearnerSpec],
    v: usize,
    seed: u64,
) -> Result<SlFit> {
    let n = y.len();
    if n < 2 {
        return Err(Error::EmptyData(format!(
            "super learner needs at least 2 rows, got {n}"
        )));
    }
    if x.nrows() != n {
        return Err(Error::Dimension(format!(
            "{} covariate rows for {n} responses",
            x.nrows()
        )));
    }
    if v < 2 || v > n {
        return Err(Error::InvalidArgument(format!(
            "fold count {v} invalid for {n} rows"
        )));
    }
    if library.is_empty() {
        return Err(Error::InvalidArgument("empty learner library".into()));
    }
    for (i, l) in library.iter().enumerate() {
        if library[..i].iter().any(|o| o.label == l.label) {
            return Err(Error::InvalidArgument(format!(
                "duplicate learner label `{}`",
                l.label
            )));
        }
    }

    let folds = fold_assignment(y, v, seed);
    let designs: Vec<Option<DesignSpec>> = library.iter().map(|l| l.design(x)).collect();

    let mut losses = vec![0.0f64; library.len()];
    for k in 0..v {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != k).collect();
        let valid: Vec<usize> = (0..n).filter(|&i| folds[i] == k).collect();
        if valid.is_empty() {
            continue;
        }
        let x_train = x.select_rows(&train);
        let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let x_valid = x.select_rows(&valid);
        for (l, spec) in library.iter().enumerate() {
            if !losses[l].is_finite() {
                continue;
            }
            let preds = fit_learner(spec, designs[l].as_ref(), &x_train, &y_train)
                .and_then(|f| f.predict(&x_valid));
            losses[l] = match preds {
                Ok(p) => {
                    losses[l]
                        + valid
                            .iter()
                            .zip(&p)
                            .map(|(&i, &p)| neg_loglik(y[i], p))
                            .sum::<f64>()
                }
                Err(e) => {
                    log::debug!("learner `{}` failed on fold {k}: {e}", spec.label);
                    f64::INFINITY
                }
            };
        }
    }
    let cv_risks: Vec<f64> = losses
        .iter()
        .map(|&l| {
            if l.is_finite() {
                l / n as f64
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let selected = cv_risks
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (i, &r)| match best {
            Some((_, b)) if r >= b => best,
            _ if r.is_finite() => Some((i, r)),
            _ => best,
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidArgument("every learner failed cross-validation".into()))?;

    let fits: Vec<Option<LearnerFit>> = library
        .iter()
        .zip(&designs)
        .map(|(spec, d)| fit_learner(spec, d.as_ref(), x, y).ok())
        .collect();
    if fits[selected].is_none() {
        return Err(Error::InvalidArgument(format!(
            "selected learner `{}` failed on the full data",
            library[selected].label
        )));
    }
    Ok(SlFit {
        library: library.to_vec(),
        cv_risks,
        selected,
        fits,
        folds,
    })
}

/// Predictions of the selected learner, clamped to `[PRED_EPS, 1 - PRED_EPS]`.
pub fn sl_predict(fit: &SlFit, x: &Covariates) -> Result<Vec<f64>> {
    let learner = fit.fits[fit.selected]
        .as_ref()
        .expect("selected learner has a full-data fit");
    Ok(learner
        .predict(x)?
        .into_iter()
        .map(|p| p.clamp(PRED_EPS, 1.0 - PRED_EPS))
        .collect())
}
