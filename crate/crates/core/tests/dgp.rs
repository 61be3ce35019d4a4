mod common;

use common::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use twostage_core::{generate, pair_match, true_values, DgpKind, DgpSpec};

/// Per-arm coefficient of variation of the counterfactual cluster means
/// (treated clusters under treatment, control clusters under control).
fn arm_cvs(kind: DgpKind) -> (f64, f64) {
    let (mut treated, mut control) = (Vec::new(), Vec::new());
    for seed in 0..100 {
        let t = generate(&DgpSpec::new(kind, 30, seed)).unwrap();
        for (c, &(m1, m0)) in t.clusters.iter().zip(&t.counterfactual_means) {
            if c.arm == 1 {
                treated.push(m1)
            } else {
                control.push(m0)
            }
        }
    }
    let cv = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt() / m
    };
    (cv(&treated), cv(&control))
}

#[test]
fn main_design_cluster_heterogeneity() {
    let (t, c) = arm_cvs(DgpKind::Main);
    assert!((t - 0.24).abs() <= 0.05, "{t}");
    assert!((c - 0.17).abs() <= 0.05, "{c}");
}

#[test]
fn supplementary_design_cluster_heterogeneity() {
    let (t, c) = arm_cvs(DgpKind::Supplementary);
    assert!((t - 0.27).abs() <= 0.05, "{t}");
    assert!((c - 0.33).abs() <= 0.05, "{c}");
}

#[test]
#[ignore = "the printed structural equations give measured fractions of about 0.62 and 0.33, not the published 0.70 and 0.43"]
fn main_design_measurement_fractions() {
    let (mut m, mut n) = ([0usize; 2], [0usize; 2]);
    for seed in 0..100 {
        for c in generate(&DgpSpec::new(DgpKind::Main, 30, seed))
            .unwrap()
            .clusters
        {
            let a = usize::from(c.arm);
            m[a] += c.individuals.iter().filter(|r| r.delta()).count();
            n[a] += c.size();
        }
    }
    let frac = |a: usize| m[a] as f64 / n[a] as f64;
    assert!((frac(1) - 0.70).abs() <= 0.03, "treated {}", frac(1));
    assert!((frac(0) - 0.43).abs() <= 0.03, "control {}", frac(0));
}

#[test]
fn matching_beats_random_pairings() {
    let mut r = rng(50);
    let u3: Vec<f64> = (0..30).map(|_| common::normal(&mut r)).collect();
    let cost = |pairs: &[[usize; 2]]| {
        pairs
            .iter()
            .map(|[a, b]| (u3[*a] - u3[*b]).abs())
            .sum::<f64>()
    };
    let matched = cost(&pair_match(&u3).unwrap());
    let mut order: Vec<usize> = (0..30).collect();
    for _ in 0..1000 {
        order.shuffle(&mut r);
        let random: Vec<[usize; 2]> = order.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        assert!(matched <= cost(&random));
    }
    let flat_u3 = [0.7; 6];
    let flat = pair_match(&flat_u3).unwrap();
    assert_eq!(flat.len(), 3);
    assert_eq!(
        flat.iter()
            .map(|[a, b]| (flat_u3[*a] - flat_u3[*b]).abs())
            .sum::<f64>(),
        0.0
    );
}

#[test]
fn population_values() {
    let main = true_values(&DgpSpec::new(DgpKind::Main, 2, 1), 5000).unwrap();
    assert!((main.rd + 0.091).abs() <= 0.005, "{main:?}");
    assert!((main.rr - 0.88).abs() <= 0.02, "{main:?}");

    let supp = true_values(&DgpSpec::new(DgpKind::Supplementary, 2, 1), 5000).unwrap();
    assert!((supp.psi1 - 0.474).abs() <= 0.01, "{supp:?}");
    assert!((supp.psi0 - 0.396).abs() <= 0.01, "{supp:?}");
    assert!((supp.rd - 0.077).abs() <= 0.005, "{supp:?}");
    assert!((supp.rr - 1.20).abs() <= 0.02, "{supp:?}");

    let null = true_values(&DgpSpec::new(DgpKind::Main, 2, 1).null(), 5000).unwrap();
    assert_eq!(null.rd, 0.0);
    assert_eq!(null.rr, 1.0);
}

#[test]
fn seeds_are_reproducible_across_calls() {
    let mut r = rng(51);
    for _ in 0..5 {
        let spec = DgpSpec::new(DgpKind::Supplementary, 8, r.random());
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }
}
