use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use twostage_bench::{stage1_config, summaries, trial};
use twostage_core::stage1::estimate_endpoint;
use twostage_core::superlearner::{sl_fit, LearnerSpec, DEFAULT_FOLDS};
use twostage_core::{
    adaptive_tmle, fit_glm, generate, Candidate, DesignSpec, DgpKind, DgpSpec, Link, Scale,
    Stage2Config,
};

fn glm(c: &mut Criterion) {
    let cluster = &trial(2, 3)[0];
    let x = cluster.individual_covariates();
    let y: Vec<f64> = cluster
        .individuals
        .iter()
        .map(|r| r.delta() as u8 as f64)
        .collect();
    let w = vec![1.0; y.len()];
    let design = DesignSpec::main_terms(&["W1", "W2", "M"]);
    c.bench_function("fit_glm_logit", |b| {
        b.iter(|| fit_glm(&design, Link::Logit, black_box(&x), &y, &w, None).unwrap())
    });
    let library = LearnerSpec::default_library();
    c.bench_function("super_learner", |b| {
        b.iter(|| sl_fit(black_box(&x), &y, &library, DEFAULT_FOLDS, 1).unwrap())
    });
}

fn stage1(c: &mut Criterion) {
    let cluster = &trial(2, 5)[0];
    let config = stage1_config();
    c.bench_function("stage1_endpoint", |b| {
        b.iter(|| estimate_endpoint(black_box(cluster), &config).unwrap())
    });
}

fn stage2(c: &mut Criterion) {
    let clusters = trial(30, 7);
    let s = summaries(&clusters);
    let candidates = [
        Candidate::Single("E1".into()),
        Candidate::Single("E2".into()),
    ];
    for matched in [false, true] {
        let config = Stage2Config {
            matched,
            ..Stage2Config::default()
        };
        let name = if matched {
            "adaptive_tmle_matched"
        } else {
            "adaptive_tmle"
        };
        c.bench_function(name, |b| {
            b.iter(|| adaptive_tmle(black_box(&s), &candidates, &config, Scale::Rd).unwrap())
        });
    }
}

fn dgp(c: &mut Criterion) {
    let spec = DgpSpec::new(DgpKind::Main, 30, 11);
    c.bench_function("generate_main_30", |b| {
        b.iter(|| generate(black_box(&spec)).unwrap())
    });
}

criterion_group!(benches, glm, stage1, stage2, dgp);
criterion_main!(benches);
