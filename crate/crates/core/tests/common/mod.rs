//! Test oracles and shared simulation studies. The oracles (`logistic`,
//! `fit`, `estimate`, `cv_variance`) are independent of the library.

#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use twostage_core::data::{ClusterData, ClusterSummary, IndividualRecord, Measurement, Schema};
use twostage_core::stage1::target_endpoint;
use twostage_core::{adaptive_tmle, tmle_effect, Candidate, Scale, Stage2Config};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let p = b.len();
    for k in 0..p {
        let piv = (k..p)
            .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
            .unwrap();
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..p {
            let f = a[i][k] / a[k][k];
            for j in k..p {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; p];
    for k in (0..p).rev() {
        let s: f64 = (k + 1..p).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

/// Weighted logistic regression (fractional responses allowed) by Newton's
/// method. `None` if the iteration does not settle.
pub fn logistic(x: &[Vec<f64>], y: &[f64], w: &[f64], offset: &[f64]) -> Option<Vec<f64>> {
    let p = x[0].len();
    let mut beta = vec![0.0; p];
    for _ in 0..200 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for i in 0..y.len() {
            let eta = offset[i] + (0..p).map(|j| x[i][j] * beta[j]).sum::<f64>();
            let mu = expit(eta);
            for j in 0..p {
                grad[j] += w[i] * (y[i] - mu) * x[i][j];
                for k in 0..p {
                    hess[j][k] += w[i] * mu * (1.0 - mu) * x[i][j] * x[i][k];
                }
            }
        }
        let step = solve(hess, grad);
        let size = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        for j in 0..p {
            beta[j] += step[j];
        }
        if !size.is_finite() || beta.iter().any(|b| b.abs() > 30.0) {
            return None;
        }
        if size < 1e-13 {
            return Some(beta);
        }
    }
    None
}

/// One row of a cluster-level table: arm, candidate covariates, endpoint, weight.
#[derive(Debug, Clone)]
pub struct Row {
    pub arm: u8,
    pub e: Vec<f64>,
    pub y: f64,
    pub alpha: f64,
}

pub const NAMES: [&str; 2] = ["E1", "E2"];

pub fn summaries(rows: &[Row], pairs: Option<&[[usize; 2]]>) -> Vec<ClusterSummary> {
    let mut pair_of = vec![None; rows.len()];
    if let Some(p) = pairs {
        for (k, [a, b]) in p.iter().enumerate() {
            pair_of[*a] = Some(format!("p{k}"));
            pair_of[*b] = Some(format!("p{k}"));
        }
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| ClusterSummary {
            id: format!("c{i}"),
            pair_id: pair_of[i].clone(),
            arm: r.arm,
            covariates: r
                .e
                .iter()
                .enumerate()
                .map(|(k, &v)| (NAMES[k].to_string(), v))
                .collect(),
            y_hat: r.y,
            alpha: r.alpha,
            size: None,
        })
        .collect()
}

/// `n` clusters, first half treated; cluster `k` is paired with `k + n/2`.
pub fn random_table(
    r: &mut ChaCha8Rng,
    n: usize,
    binary_e1: bool,
    random_alpha: bool,
) -> (Vec<Row>, Vec<[usize; 2]>) {
    let half = n / 2;
    let rows = (0..n)
        .map(|i| {
            let arm = u8::from(i < half);
            let e1 = if binary_e1 {
                f64::from(u8::from(r.random::<bool>()))
            } else {
                normal(r)
            };
            let e2 = r.random::<f64>();
            let y = expit(-0.4 + 0.5 * f64::from(arm) + 0.6 * e1 - 0.5 * e2 + 0.4 * normal(r));
            let alpha = if random_alpha {
                0.5 + r.random::<f64>()
            } else {
                1.0
            };
            Row {
                arm,
                e: vec![e1, e2],
                y,
                alpha,
            }
        })
        .collect();
    (rows, (0..half).map(|k| [k, k + half]).collect())
}

pub struct Fit {
    beta_q: Vec<f64>,
    or: Option<usize>,
    ps: Option<(usize, Vec<f64>)>,
    eps: (f64, f64),
}

fn q_row(r: &Row, a: f64, or: Option<usize>) -> Vec<f64> {
    let mut x = vec![1.0, a];
    if let Some(k) = or {
        x.push(r.e[k]);
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Fit {
    fn g1(&self, r: &Row) -> f64 {
        match &self.ps {
            None => 0.5,
            Some((k, b)) => expit(b[0] + b[1] * r.e[*k]).clamp(0.05, 0.95),
        }
    }

    /// Targeted `(Q*(1), Q*(0), g1)` for one row.
    pub fn targeted(&self, r: &Row) -> (f64, f64, f64) {
        let g1 = self.g1(r);
        let q1 = expit(dot(&q_row(r, 1.0, self.or), &self.beta_q) + self.eps.0 / g1);
        let q0 = expit(dot(&q_row(r, 0.0, self.or), &self.beta_q) + self.eps.1 / (1.0 - g1));
        (q1, q0, g1)
    }
}

/// Initial regression, propensity score and two-dimensional fluctuation.
pub fn fit(rows: &[Row], or: Option<usize>, ps: Option<usize>) -> Option<Fit> {
    let n = rows.len();
    let alpha: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let xq: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| q_row(r, f64::from(r.arm), or))
        .collect();
    let beta_q = logistic(&xq, &y, &alpha, &vec![0.0; n])?;
    let ps = match ps {
        None => None,
        Some(k) => {
            let xg: Vec<Vec<f64>> = rows.iter().map(|r| vec![1.0, r.e[k]]).collect();
            let a: Vec<f64> = rows.iter().map(|r| f64::from(r.arm)).collect();
            Some((k, logistic(&xg, &a, &vec![1.0; n], &vec![0.0; n])?))
        }
    };
    let mut f = Fit {
        beta_q,
        or,
        ps,
        eps: (0.0, 0.0),
    };
    let clever: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let g1 = f.g1(r);
            if r.arm == 1 {
                vec![1.0 / g1, 0.0]
            } else {
                vec![0.0, 1.0 / (1.0 - g1)]
            }
        })
        .collect();
    let off: Vec<f64> = xq.iter().map(|x| dot(x, &f.beta_q)).collect();
    let e = logistic(&clever, &y, &alpha, &off)?;
    f.eps = (e[0], e[1]);
    Some(f)
}

/// Per-cluster influence-curve contributions `(IC1, IC0)`.
fn cluster_ic(f: &Fit, rows: &[Row], psi: (f64, f64), alpha_mean: f64) -> Vec<(f64, f64)> {
    rows.iter()
        .map(|r| {
            let (q1, q0, g1) = f.targeted(r);
            let w = r.alpha / alpha_mean;
            let (i1, i0) = if r.arm == 1 {
                ((r.y - q1) / g1, 0.0)
            } else {
                (0.0, (r.y - q0) / (1.0 - g1))
            };
            (w * (i1 + q1 - psi.0), w * (i0 + q0 - psi.1))
        })
        .collect()
}

fn on_scale(ic: (f64, f64), psi: (f64, f64), log_rr: bool) -> f64 {
    if log_rr {
        ic.0 / psi.0 - ic.1 / psi.1
    } else {
        ic.0 - ic.1
    }
}

fn units(values: &[f64], pairs: Option<&[[usize; 2]]>) -> Vec<f64> {
    match pairs {
        None => values.to_vec(),
        Some(p) => p
            .iter()
            .map(|[a, b]| 0.5 * (values[*a] + values[*b]))
            .collect(),
    }
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

#[derive(Debug)]
pub struct Estimate {
    pub psi1: f64,
    pub psi0: f64,
    pub se_rd: f64,
    pub se_log_rr: f64,
}

pub fn estimate(
    rows: &[Row],
    or: Option<usize>,
    ps: Option<usize>,
    pairs: Option<&[[usize; 2]]>,
) -> Option<Estimate> {
    let f = fit(rows, or, ps)?;
    let total: f64 = rows.iter().map(|r| r.alpha).sum();
    let (mut psi1, mut psi0) = (0.0, 0.0);
    for r in rows {
        let (q1, q0, _) = f.targeted(r);
        psi1 += r.alpha * q1 / total;
        psi0 += r.alpha * q0 / total;
    }
    let psi = (psi1, psi0);
    let ic = cluster_ic(&f, rows, psi, total / rows.len() as f64);
    let se = |log_rr: bool| {
        let u = units(
            &ic.iter()
                .map(|&c| on_scale(c, psi, log_rr))
                .collect::<Vec<_>>(),
            pairs,
        );
        (variance(&u) / u.len() as f64).sqrt()
    };
    Some(Estimate {
        psi1,
        psi0,
        se_rd: se(false),
        se_log_rr: se(true),
    })
}

/// Leave-one-unit-out cross-validated variance of one adjustment cell, by
/// enumerating every training split.
pub fn cv_variance(
    rows: &[Row],
    or: Option<usize>,
    ps: Option<usize>,
    pairs: Option<&[[usize; 2]]>,
    log_rr: bool,
) -> Option<f64> {
    let full = estimate(rows, or, ps, pairs)?;
    let psi = (full.psi1, full.psi0);
    let alpha_mean = rows.iter().map(|r| r.alpha).sum::<f64>() / rows.len() as f64;
    let held_sets: Vec<Vec<usize>> = match pairs {
        Some(p) => p.iter().map(|u| u.to_vec()).collect(),
        None => (0..rows.len()).map(|i| vec![i]).collect(),
    };
    let mut total = 0.0;
    for held in &held_sets {
        let train: Vec<Row> = rows
            .iter()
            .enumerate()
            .filter(|(i, _)| !held.contains(i))
            .map(|(_, r)| r.clone())
            .collect();
        let f = fit(&train, or, ps)?;
        let test: Vec<Row> = held.iter().map(|&i| rows[i].clone()).collect();
        let ic: Vec<f64> = cluster_ic(&f, &test, psi, alpha_mean)
            .into_iter()
            .map(|c| on_scale(c, psi, log_rr))
            .collect();
        let u = ic.iter().sum::<f64>() / ic.len() as f64;
        total += u * u;
    }
    let n = held_sets.len() as f64;
    Some(total / (n * n))
}

pub fn schema(w: &[&str], m: &[&str], outcomes: &[&str]) -> Arc<Schema> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
    Arc::new(Schema {
        w_names: s(w),
        m_names: s(m),
        outcome_names: s(outcomes),
    })
}

/// Cluster with one baseline covariate per row and a single outcome.
pub fn cluster(id: &str, arm: u8, rows: &[(f64, Option<f64>)]) -> ClusterData {
    ClusterData {
        id: id.into(),
        pair_id: None,
        arm,
        covariates: Vec::new(),
        schema: schema(&["W1"], &[], &["y"]),
        individuals: rows
            .iter()
            .map(|&(w, y)| IndividualRecord {
                w: vec![w],
                m: Vec::new(),
                outcomes: vec![y.map_or(Measurement::missing(), Measurement::measured)],
            })
            .collect(),
    }
}

/// Thirty clusters, half treated, endpoints on the logit scale linear in E1
/// with the given slope; E2 is always noise.
pub fn cluster_table(r: &mut ChaCha8Rng, slope: f64) -> Vec<Row> {
    (0..30)
        .map(|i| {
            let arm = u8::from(i < 15);
            let e = vec![normal(r), r.random::<f64>()];
            let y = expit(-0.6 + 0.2 * f64::from(arm) + slope * e[0] + 0.25 * normal(r));
            Row {
                arm,
                e,
                y,
                alpha: 1.0,
            }
        })
        .collect()
}

pub struct NoiseStudy {
    /// Repetitions in which neither regression was adjusted.
    pub unadjusted: usize,
    /// Empirical variance of the adaptive estimator over the unadjusted one.
    pub variance_ratio: f64,
}

/// 200 trials whose endpoints are independent of both candidates.
pub fn noise_study(seed: u64) -> NoiseStudy {
    let mut r = rng(seed);
    let candidates: Vec<Candidate> = NAMES
        .iter()
        .map(|n| Candidate::Single(n.to_string()))
        .collect();
    let config = Stage2Config::default();
    let (mut unadjusted, mut adaptive, mut plain) = (0, Vec::new(), Vec::new());
    for _ in 0..200 {
        let s = summaries(&cluster_table(&mut r, 0.0), None);
        let (report, est) = adaptive_tmle(&s, &candidates, &config, Scale::Rd).unwrap();
        unadjusted += usize::from(report.chosen_or.is_none() && report.chosen_ps.is_none());
        adaptive.push(est.rd);
        plain.push(tmle_effect(&s, &config).unwrap().rd);
    }
    NoiseStudy {
        unadjusted,
        variance_ratio: variance(&adaptive) / variance(&plain),
    }
}

/// E[Y] for Y ~ Bernoulli(expit(b0 + b1 W)), W ~ N(0, 1), by quadrature.
pub fn population_mean(b0: f64, b1: f64) -> f64 {
    let h = 1e-3;
    (-8000..=8000)
        .map(|k| {
            let w = k as f64 * h;
            expit(b0 + b1 * w) * (-0.5 * w * w).exp() / (2.0 * std::f64::consts::PI).sqrt() * h
        })
        .sum()
}

/// Mean bias of the targeted cluster endpoint at n = 2000 with one nuisance
/// model correct and the other constant, next to the complete-case bias.
pub struct DoubleRobustness {
    pub naive: f64,
    pub outcome_correct: f64,
    pub measurement_correct: f64,
}

pub fn double_robustness(seed: u64, reps: usize) -> DoubleRobustness {
    let (b0, b1) = (-0.3, 1.2);
    let truth = population_mean(b0, b1);
    let mut r = rng(seed);
    let (mut q_right, mut g_right, mut naive) = (0.0, 0.0, 0.0);
    for _ in 0..reps {
        let w: Vec<f64> = (0..2000).map(|_| normal(&mut r)).collect();
        let q_true: Vec<f64> = w.iter().map(|&x| expit(b0 + b1 * x)).collect();
        let g_true: Vec<f64> = w.iter().map(|&x| expit(0.6 + 1.5 * x).max(0.025)).collect();
        let y: Vec<Option<f64>> = q_true
            .iter()
            .zip(&g_true)
            .map(|(&q, &g)| {
                let v = f64::from(u8::from(r.random::<f64>() < q));
                (r.random::<f64>() < g).then_some(v)
            })
            .collect();
        let observed: Vec<f64> = y.iter().flatten().copied().collect();
        let cc = observed.iter().sum::<f64>() / observed.len() as f64;
        let marginal = observed.len() as f64 / 2000.0;
        q_right += target_endpoint(&y, &q_true, &vec![marginal; 2000])
            .unwrap()
            .y_hat
            - truth;
        g_right += target_endpoint(&y, &vec![cc; 2000], &g_true).unwrap().y_hat - truth;
        naive += cc - truth;
    }
    let k = reps as f64;
    DoubleRobustness {
        naive: naive / k,
        outcome_correct: q_right / k,
        measurement_correct: g_right / k,
    }
}
