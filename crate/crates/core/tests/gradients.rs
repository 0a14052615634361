mod common;

use common::{primitive_errors, rng, toy_labels, toy_model_config, uniform, FD_EPS};
use eend::model::{AttractorKind, Model};
use eend::numerics::{grad_check, grad_check_filtered};
use eend::training::{mixture_loss, PitSearch};

const TOL: f64 = 1e-4;

#[test]
fn primitives_over_twenty_seeds() {
    for seed in 0..20 {
        for (name, err) in primitive_errors(seed).unwrap() {
            assert!(err <= TOL, "seed {seed}: {name} rel error {err:.3e}");
        }
    }
}

fn check_model(kind: AttractorKind, seed: u64) {
    let cfg = toy_model_config(kind);
    let (mut store, model) = Model::build::<f64>(&cfg, seed).unwrap();
    let mut r = rng(seed + 100);
    let x = uniform(&mut r, 5, 6, -1.0, 1.0);
    let y = toy_labels(&mut r, 6, 2);
    let diar = grad_check(
        &mut store,
        |g| Ok(mixture_loss(&model, g, &x, &y, 0.0, PitSearch::Exhaustive, seed)?.0.total),
        FD_EPS,
    )
    .unwrap();
    assert!(diar.max_rel_error <= TOL, "{} seed {seed}: {diar:?}", kind.name());
    // the existence term is cut at the encoder output, so only parameters
    // after the cut see its exact derivative
    let full = grad_check_filtered(
        &mut store,
        |g| Ok(mixture_loss(&model, g, &x, &y, 1.0, PitSearch::Hungarian, seed)?.0.total),
        FD_EPS,
        |n| !n.starts_with("encoder."),
    )
    .unwrap();
    assert!(full.max_rel_error <= TOL, "{} seed {seed}: {full:?}", kind.name());
}

#[test]
fn toy_eda_model() {
    for seed in 0..3 {
        check_model(AttractorKind::Eda, seed);
    }
}

#[test]
fn toy_eda_csv_model() {
    for seed in 0..3 {
        check_model(AttractorKind::EdaCsv, seed);
    }
}

#[test]
fn toy_ta_model() {
    for seed in 0..3 {
        check_model(AttractorKind::Ta, seed);
    }
}
