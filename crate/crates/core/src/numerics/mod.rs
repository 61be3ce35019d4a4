//! Working generalized linear models fitted by iteratively reweighted least squares.
//!
//! Two links are supported: logit (binomial variance, accepting fractional
//! responses in [0, 1]) and log (Poisson variance, used as a modified-Poisson
//! working model for binary outcomes). Fits accept prior weights and a fixed
//! offset, which is how every fluctuation step in the crate is expressed.

mod chol;
mod qr;

pub use chol::invert_spd;

use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{Error, Result};

pub const MAX_ITER: usize = 50;
pub const DEVIANCE_TOL: f64 = 1e-8;
/// Fitted probabilities are held inside `[MU_EPS, 1 - MU_EPS]` under the logit link.
pub const MU_EPS: f64 = 1e-8;
const ALIAS_TOL: f64 = 1e-9;
const MAX_HALVINGS: usize = 30;
const POLISH_STEPS: usize = 3;

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Log,
}

impl Link {
    fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => expit(eta).clamp(MU_EPS, 1.0 - MU_EPS),
            Link::Log => eta.min(700.0).exp().max(1e-300),
        }
    }

    fn apply(self, mu: f64) -> f64 {
        match self {
            Link::Logit => logit(mu),
            Link::Log => mu.ln(),
        }
    }

    /// d mu / d eta, which for both canonical links equals the variance function.
    fn derivative(self, mu: f64) -> f64 {
        match self {
            Link::Logit => mu * (1.0 - mu),
            Link::Log => mu,
        }
    }

    fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            Link::Logit => 2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu))),
            Link::Log => 2.0 * (xlogy(y, y / mu) - (y - mu)),
        }
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Columns of a working regression: optional intercept, main terms, then
/// pairwise products (a pair with equal names is a squared term).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DesignSpec {
    pub intercept: bool,
    pub terms: Vec<String>,
    #[serde(default)]
    pub interactions: Vec<(String, String)>,
}

impl DesignSpec {
    pub fn intercept_only() -> Self {
        DesignSpec {
            intercept: true,
            terms: Vec::new(),
            interactions: Vec::new(),
        }
    }

    pub fn main_terms<S: AsRef<str>>(terms: &[S]) -> Self {
        DesignSpec {
            intercept: true,
            terms: terms.iter().map(|s| s.as_ref().to_string()).collect(),
            interactions: Vec::new(),
        }
    }

    pub fn without_intercept<S: AsRef<str>>(terms: &[S]) -> Self {
        DesignSpec {
            intercept: false,
            ..DesignSpec::main_terms(terms)
        }
    }

    pub fn ncols(&self) -> usize {
        usize::from(self.intercept) + self.terms.len() + self.interactions.len()
    }

    pub fn column_labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.ncols());
        if self.intercept {
            out.push("(Intercept)".to_string());
        }
        out.extend(self.terms.iter().cloned());
        out.extend(self.interactions.iter().map(|(a, b)| format!("{a}:{b}")));
        out
    }

    fn validate(&self) -> Result<()> {
        for (i, t) in self.terms.iter().enumerate() {
            if self.terms[..i].contains(t) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate design term `{t}`"
                )));
            }
        }
        Ok(())
    }

    /// Column-major design matrix.
    pub fn matrix(&self, x: &Covariates) -> Result<Vec<f64>> {
        self.validate()?;
        let n = x.nrows();
        let mut m = Vec::with_capacity(n * self.ncols());
        if self.intercept {
            m.extend(std::iter::repeat_n(1.0, n));
        }
        for t in &self.terms {
            m.extend_from_slice(x.require(t)?);
        }
        for (a, b) in &self.interactions {
            let (ca, cb) = (x.require(a)?, x.require(b)?);
            m.extend(ca.iter().zip(cb).map(|(u, v)| u * v));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub spec: DesignSpec,
    pub link: Link,
    /// Aligned with [`DesignSpec::column_labels`]; aliased columns carry 0.
    pub coefficients: Vec<f64>,
    pub aliased: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    /// Deviance after every accepted IRLS step (non-increasing up to round-off
    /// during the final polishing steps).
    pub deviance_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictKind {
    Response,
    Linear,
}

struct Problem<'a> {
    link: Link,
    n: usize,
    p: usize,
    x: &'a [f64],
    y: &'a [f64],
    w: &'a [f64],
    offset: Option<&'a [f64]>,
}

impl Problem<'_> {
    fn eta(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = match self.offset {
            Some(o) => o.to_vec(),
            None => vec![0.0; self.n],
        };
        for (j, b) in beta.iter().enumerate() {
            if *b != 0.0 {
                let col = &self.x[j * self.n..(j + 1) * self.n];
                for (e, v) in eta.iter_mut().zip(col) {
                    *e += b * v;
                }
            }
        }
        eta
    }

    fn deviance(&self, mu: &[f64]) -> f64 {
        (0..self.n)
            .filter(|&i| self.w[i] > 0.0)
            .map(|i| self.w[i] * self.link.unit_deviance(self.y[i], mu[i]))
            .sum()
    }

    /// One Newton (IRLS) step from the current linear predictor.
    fn step(&self, eta: &[f64], mu: &[f64]) -> qr::LeastSquares {
        let mut z = Vec::with_capacity(self.n);
        let mut sw = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let d = self.link.derivative(mu[i]);
            let off = self.offset.map_or(0.0, |o| o[i]);
            z.push(eta[i] - off + (self.y[i] - mu[i]) / d);
            sw.push((self.w[i] * d).sqrt());
        }
        qr::weighted_least_squares(self.x, self.n, self.p, &sw, &z, ALIAS_TOL)
    }

    fn max_score(&self, mu: &[f64]) -> f64 {
        (0..self.p)
            .map(|j| {
                let col = &self.x[j * self.n..(j + 1) * self.n];
                (0..self.n)
                    .map(|i| self.w[i] * col[i] * (self.y[i] - mu[i]))
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }

    fn evaluate(&self, beta: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let eta = self.eta(beta);
        let mu: Vec<f64> = eta.iter().map(|&e| self.link.inverse(e)).collect();
        let dev = self.deviance(&mu);
        (eta, mu, dev)
    }
}

/// Maximum-likelihood fit of a weighted GLM.
///
/// Non-convergence is not an error: the last iterate is returned with
/// `converged = false`.
pub fn fit_glm(
    design: &DesignSpec,
    link: Link,
    x: &Covariates,
    y: &[f64],
    weights: &[f64],
    offset: Option<&[f64]>,
) -> Result<GlmFit> {
    let n = x.nrows();
    if n == 0 || y.is_empty() {
        return Err(Error::EmptyData("no rows to fit".into()));
    }
    if y.len() != n || weights.len() != n || offset.is_some_and(|o| o.len() != n) {
        return Err(Error::Dimension(format!(
            "covariates have {n} rows but responses/weights/offset disagree"
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument(
            "weights must be finite and non-negative".into(),
        ));
    }
    if !weights.iter().any(|w| *w > 0.0) {
        return Err(Error::EmptyData("all weights are zero".into()));
    }
    let valid = |v: f64| match link {
        Link::Logit => (0.0..=1.0).contains(&v),
        Link::Log => v >= 0.0 && v.is_finite(),
    };
    if let Some(bad) = y
        .iter()
        .zip(weights)
        .find(|(v, w)| **w > 0.0 && !valid(**v))
    {
        return Err(Error::InvalidArgument(format!(
            "response {} outside the {link:?} support",
            bad.0
        )));
    }
    if offset.is_some_and(|o| o.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("offset must be finite".into()));
    }

    let matrix = design.matrix(x)?;
    let p = design.ncols();
    let prob = Problem {
        link,
        n,
        p,
        x: &matrix,
        y,
        w: weights,
        offset,
    };

    if p == 0 {
        let (_, _, dev) = prob.evaluate(&[]);
        return Ok(GlmFit {
            spec: design.clone(),
            link,
            coefficients: Vec::new(),
            aliased: Vec::new(),
            converged: true,
            iterations: 0,
            deviance: dev,
            deviance_history: Vec::new(),
        });
    }

    // Starting values follow the usual binomial / Poisson conventions.
    let mut mu: Vec<f64> = (0..n)
        .map(|i| match link {
            Link::Logit => (weights[i] * y[i] + 0.5) / (weights[i] + 1.0),
            Link::Log => y[i] + 0.1,
        })
        .collect();
    let mut eta: Vec<f64> = mu.iter().map(|&m| link.apply(m)).collect();
    let mut dev_old = prob.deviance(&mu);
    let mut beta: Option<Vec<f64>> = None;
    let mut aliased = vec![false; p];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITER {
        iterations += 1;
        let ls = prob.step(&eta, &mu);
        let mut candidate = ls.coefficients;
        let (mut eta_new, mut mu_new, mut dev_new) = prob.evaluate(&candidate);
        if let Some(old) = &beta {
            let mut halvings = 0;
            while !(dev_new.is_finite() && dev_new <= dev_old) && halvings < MAX_HALVINGS {
                for (c, o) in candidate.iter_mut().zip(old) {
                    *c = 0.5 * (*c + o);
                }
                (eta_new, mu_new, dev_new) = prob.evaluate(&candidate);
                halvings += 1;
            }
            if !(dev_new.is_finite() && dev_new <= dev_old) {
                // No step improves the deviance; keep the previous iterate.
                break;
            }
        }
        aliased = ls.aliased;
        let rel = (dev_new - dev_old).abs() / (dev_new.abs() + 0.1);
        beta = Some(candidate);
        eta = eta_new;
        mu = mu_new;
        dev_old = dev_new;
        history.push(dev_new);
        if rel < DEVIANCE_TOL {
            converged = true;
            break;
        }
    }

    let mut beta = beta.unwrap_or_else(|| vec![0.0; p]);

    // A few extra Newton steps drive the score equations to round-off.
    if converged {
        for _ in 0..POLISH_STEPS {
            if iterations >= MAX_ITER {
                break;
            }
            let ls = prob.step(&eta, &mu);
            let scale = 1.0 + beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
            let change = ls
                .coefficients
                .iter()
                .zip(&beta)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if change <= 1e-13 * scale {
                break;
            }
            let (eta_new, mu_new, dev_new) = prob.evaluate(&ls.coefficients);
            // At the optimum the deviance is flat to round-off, so polishing is
            // judged by the score instead.
            let flat = dev_new <= dev_old + 1e-12 * (dev_old.abs() + 0.1);
            if !(dev_new.is_finite() && flat && prob.max_score(&mu_new) < prob.max_score(&mu)) {
                break;
            }
            iterations += 1;
            beta = ls.coefficients;
            aliased = ls.aliased;
            eta = eta_new;
            mu = mu_new;
            dev_old = dev_new;
            history.push(dev_new);
        }
    }

    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidArgument(
            "IRLS produced non-finite coefficients".into(),
        ));
    }
    if aliased.iter().any(|&a| a) {
        let labels = design.column_labels();
        let dropped: Vec<&str> = labels
            .iter()
            .zip(&aliased)
            .filter(|(_, a)| **a)
            .map(|(l, _)| l.as_str())
            .collect();
        log::debug!("dropping collinear design columns {dropped:?}");
    }

    Ok(GlmFit {
        spec: design.clone(),
        link,
        coefficients: beta,
        aliased,
        converged,
        iterations,
        deviance: dev_old,
        deviance_history: history,
    })
}

/// Predictions of `fit` on new data (no offset).
pub fn predict(fit: &GlmFit, x: &Covariates, kind: PredictKind) -> Result<Vec<f64>> {
    predict_with_offset(fit, x, None, kind)
}

pub fn predict_with_offset(
    fit: &GlmFit,
    x: &Covariates,
    offset: Option<&[f64]>,
    kind: PredictKind,
) -> Result<Vec<f64>> {
    let n = x.nrows();
    if offset.is_some_and(|o| o.len() != n) {
        return Err(Error::Dimension("offset length differs from rows".into()));
    }
    let matrix = fit.spec.matrix(x)?;
    let mut eta = offset.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    for (j, b) in fit.coefficients.iter().enumerate() {
        for (e, v) in eta.iter_mut().zip(&matrix[j * n..(j + 1) * n]) {
            *e += b * v;
        }
    }
    Ok(match kind {
        PredictKind::Linear => eta,
        PredictKind::Response => eta.into_iter().map(|e| fit.link.inverse(e)).collect(),
    })
}

/// Score vector `sum_i w_i x_i (y_i - mu_i)` of a fit; zero at the MLE for both canonical links.
pub fn score(
    fit: &GlmFit,
    x: &Covariates,
    y: &[f64],
    weights: &[f64],
    offset: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = x.nrows();
    let mu = predict_with_offset(fit, x, offset, PredictKind::Response)?;
    let matrix = fit.spec.matrix(x)?;
    Ok((0..fit.spec.ncols())
        .map(|j| {
            (0..n)
                .map(|i| weights[i] * matrix[j * n + i] * (y[i] - mu[i]))
                .sum()
        })
        .collect())
}
