//! Simulation data-generating processes with pair-matched randomization and
//! counterfactual truth.
//!
//! Each individual's uniforms for mediator, outcome and measurement are drawn
//! once and reused under both arms, so factual and counterfactual outcomes
//! share random numbers. Streams are addressed as
//! `seed → [0, cluster]` for cluster latents and size,
//! `seed → [1, cluster, individual]` for individual draws, and
//! `seed → [2]` for the within-pair coin flips. The truth population uses the
//! same layout under the derived master `derive_seed(seed, [3])`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, IndividualRecord, Measurement, Schema};
use crate::error::{Error, Result};
use crate::numerics::expit;
use crate::rng::{derive_seed, stream};

pub const CLUSTER_SIZES: [usize; 3] = [100, 150, 200];
pub const MIN_POPULATION: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    Main,
    #[serde(rename = "supp", alias = "supplementary")]
    Supplementary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n_clusters: usize,
    pub null_effect: bool,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n_clusters: usize, seed: u64) -> Self {
        DgpSpec {
            kind,
            n_clusters,
            null_effect: false,
            seed,
        }
    }

    pub fn null(self) -> Self {
        DgpSpec {
            null_effect: true,
            ..self
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            w_names: vec!["W1".into(), "W2".into()],
            m_names: match self.kind {
                DgpKind::Main => vec!["M".into()],
                DgpKind::Supplementary => Vec::new(),
            },
            outcome_names: vec!["Y".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRealization {
    pub spec: DgpSpec,
    pub clusters: Vec<ClusterData>,
    /// Per-cluster counterfactual means `(Y^c(1), Y^c(0))` under full measurement.
    pub counterfactual_means: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueValues {
    pub psi1: f64,
    pub psi0: f64,
    pub rd: f64,
    pub rr: f64,
}

struct Individual {
    w1: f64,
    w2: f64,
    u_m: f64,
    u_y: f64,
    u_d: f64,
}

struct Latent {
    u3: f64,
    e1: f64,
    e2: f64,
    people: Vec<Individual>,
}

/// Individual outcome under arm `a`: `(M, Y, Δ)`.
struct Draw {
    m: Option<f64>,
    y: f64,
    delta: bool,
}

fn latent(kind: DgpKind, master: u64, c: usize) -> Latent {
    let mut rng = stream(master, &[0, c as u64]);
    let (u1, u2, u3, sd) = match kind {
        DgpKind::Main => (
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.sample(StandardNormal),
            0.5,
        ),
        DgpKind::Supplementary => (
            rng.random_range(1.75..2.25),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            1.0,
        ),
    };
    let size = CLUSTER_SIZES[rng.random_range(0..CLUSTER_SIZES.len())];
    let d1 = Normal::new(u1, sd).expect("finite parameters");
    let d2 = Normal::new(u2, sd).expect("finite parameters");
    let people: Vec<Individual> = (0..size)
        .map(|j| {
            let mut r = stream(master, &[1, c as u64, j as u64]);
            Individual {
                w1: d1.sample(&mut r),
                w2: d2.sample(&mut r),
                u_m: r.random(),
                u_y: r.random(),
                u_d: r.random(),
            }
        })
        .collect();
    let n = size as f64;
    let e1 = people.iter().map(|p| p.w1).sum::<f64>() / n;
    let e2 = people.iter().map(|p| p.w2).sum::<f64>() / n;
    Latent { u3, e1, e2, people }
}

fn draw(kind: DgpKind, a: f64, l: &Latent, p: &Individual) -> Draw {
    let (w1, w2, e1, e2, u3) = (p.w1, p.w2, l.e1, l.e2, l.u3);
    let bern = |u: f64, lp: f64| u < expit(lp);
    match kind {
        DgpKind::Main => {
            let m = f64::from(u8::from(bern(
                p.u_m,
                -1.0 + 2.0 * a + w1 + w2 + 0.2 * (1.0 - a) * (e1 + e2) + 0.25 * u3,
            )));
            let y = bern(
                p.u_y,
                1.0 - 2.5 * a + 4.0 * m + 0.5 * w1 + 0.5 * w2 + 0.2 * e1 + 0.2 * e2 + 0.25 * u3,
            );
            let pd = a * expit(3.0 - 3.0 * m - 0.5 * w1 - 0.5 * w2)
                + (1.0 - a) * expit(-2.0 + 3.0 * m + 0.5 * w1 + 0.5 * w2);
            Draw {
                m: Some(m),
                y: f64::from(u8::from(y)),
                delta: p.u_d < pd,
            }
        }
        DgpKind::Supplementary => {
            let y = bern(
                p.u_y,
                -4.0 + 0.15 * a
                    + 0.15 * a * w1
                    + 0.4 * w1
                    + 0.2 * w2
                    + 0.5 * e1 * w1
                    + 0.3 * (e1 + e2 + u3),
            );
            let delta = bern(
                p.u_d,
                4.0 - 0.25 * a - 0.75 * a * w1 - 0.75 * w1 - 0.1 * w2 - 0.5 * e1 - 0.1 * e2,
            );
            Draw {
                m: None,
                y: f64::from(u8::from(y)),
                delta,
            }
        }
    }
}

fn arm_value(null_effect: bool, a: u8) -> f64 {
    if null_effect {
        0.0
    } else {
        f64::from(a)
    }
}

fn counterfactual_means(spec: &DgpSpec, l: &Latent) -> (f64, f64) {
    let n = l.people.len() as f64;
    let mean = |a: u8| {
        l.people
            .iter()
            .map(|p| draw(spec.kind, arm_value(spec.null_effect, a), l, p).y)
            .sum::<f64>()
            / n
    };
    (mean(1), mean(0))
}

/// Pairs of indices matched on a scalar: sort, then pair neighbours.
pub fn pair_match(u3: &[f64]) -> Result<Vec<[usize; 2]>> {
    if u3.len() % 2 != 0 {
        return Err(Error::Pairing(format!(
            "cannot pair an odd number ({}) of clusters",
            u3.len()
        )));
    }
    let mut order: Vec<usize> = (0..u3.len()).collect();
    order.sort_by(|&a, &b| u3[a].total_cmp(&u3[b]));
    Ok(order.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

pub fn generate(spec: &DgpSpec) -> Result<TrialRealization> {
    if spec.n_clusters < 2 {
        return Err(Error::InvalidArgument(
            "at least one pair of clusters is required".into(),
        ));
    }
    let latents: Vec<Latent> = (0..spec.n_clusters)
        .into_par_iter()
        .map(|c| latent(spec.kind, spec.seed, c))
        .collect();
    let u3: Vec<f64> = latents.iter().map(|l| l.u3).collect();
    let pairs = pair_match(&u3)?;

    let mut arms = vec![0u8; spec.n_clusters];
    let mut pair_of = vec![0usize; spec.n_clusters];
    let mut coin = stream(spec.seed, &[2]);
    for (k, [a, b]) in pairs.iter().enumerate() {
        let treated = if coin.random::<bool>() { *a } else { *b };
        arms[treated] = 1;
        pair_of[*a] = k;
        pair_of[*b] = k;
    }

    let schema = Arc::new(spec.schema());
    let clusters = latents
        .iter()
        .enumerate()
        .map(|(c, l)| {
            let a = arm_value(spec.null_effect, arms[c]);
            let individuals = l
                .people
                .iter()
                .map(|p| {
                    let d = draw(spec.kind, a, l, p);
                    IndividualRecord {
                        w: vec![p.w1, p.w2],
                        m: d.m.into_iter().collect(),
                        outcomes: vec![if d.delta {
                            Measurement::measured(d.y)
                        } else {
                            Measurement::missing()
                        }],
                    }
                })
                .collect();
            ClusterData {
                id: format!("c{c}"),
                pair_id: Some(format!("p{}", pair_of[c])),
                arm: arms[c],
                covariates: vec![("E1".into(), l.e1), ("E2".into(), l.e2)],
                schema: Arc::clone(&schema),
                individuals,
            }
        })
        .collect();
    let counterfactual_means = latents
        .iter()
        .map(|l| counterfactual_means(spec, l))
        .collect();
    Ok(TrialRealization {
        spec: *spec,
        clusters,
        counterfactual_means,
    })
}

/// Treatment-specific population means over `population` clusters, each
/// cluster weighted equally.
pub fn true_values(spec: &DgpSpec, population: usize) -> Result<TrueValues> {
    if population < MIN_POPULATION {
        return Err(Error::InvalidArgument(format!(
            "population must be at least {MIN_POPULATION}"
        )));
    }
    let master = derive_seed(spec.seed, &[3]);
    let sums = (0..population)
        .into_par_iter()
        .map(|c| counterfactual_means(spec, &latent(spec.kind, master, c)))
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |(s1, s0), (m1, m0)| (s1 + m1, s0 + m0));
    let psi1 = sums.0 / population as f64;
    let psi0 = sums.1 / population as f64;
    Ok(TrueValues {
        psi1,
        psi0,
        rd: psi1 - psi0,
        rr: psi1 / psi0,
    })
}
