mod common;

use sparsecast::autodiff::{grad_check, ParamStore};

use common::{gradient_suite, project, random_matrix, rng, GRAD_STEP, GRAD_TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..5 {
        for (name, err) in gradient_suite(seed) {
            assert!(err < GRAD_TOL, "seed {seed}: {name} relative error {err:.3e}");
        }
    }
}

#[test]
fn wrong_derivative_is_caught() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let x = store.add("x", random_matrix(&mut r, 3, 4));
    let report = grad_check(
        &mut store,
        |tape| {
            let p = tape.param(x);
            // tanh with the derivative of sin
            let y = tape.map(p, f64::tanh, f64::cos);
            project(tape, y, &mut rng(3))
        },
        GRAD_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error > 1e-2, "{report:?}");
    assert!(report.worst_param.as_deref() == Some("x"));
}

#[test]
fn correct_custom_derivative_passes() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let x = store.add("x", random_matrix(&mut r, 3, 4));
    let report = grad_check(
        &mut store,
        |tape| {
            let p = tape.param(x);
            let y = tape.map(p, f64::tanh, |v| 1.0 - v.tanh().powi(2));
            project(tape, y, &mut rng(3))
        },
        GRAD_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < GRAD_TOL);
}
