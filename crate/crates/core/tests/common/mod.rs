//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod attention;
pub mod experiments;
pub mod metrics;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsecast::attention::{AttentionConfig, DecoderStack};
use sparsecast::autodiff::{grad_check, uniform, NodeId, ParamStore, Tape, Tensor};
use sparsecast::datagen::Window;
use sparsecast::forecaster::{Forecaster, LikelihoodRange, ModelConfig};
use sparsecast::sparsity::{build_mask, PatternSpec};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, &[rows, cols], 1.0)
}

/// Contracts `x` with a fixed random tensor so every output coordinate matters.
pub fn project(tape: &mut Tape, x: NodeId, rng: &mut ChaCha8Rng) -> sparsecast::autodiff::Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let r = tape.constant(r);
    let prod = tape.mul(x, r)?;
    Ok(tape.sum(prod))
}

/// Maximum relative gradient error of every primitive and composite, by name.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut results = Vec::new();
    let mut r = rng(seed);

    let mut check = |name: &'static str,
                     shapes: &[&[usize]],
                     build: &dyn Fn(&mut Tape, &[NodeId], &mut ChaCha8Rng) -> sparsecast::autodiff::Result<NodeId>,
                     r: &mut ChaCha8Rng| {
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| store.add(format!("p{i}"), uniform(r, shape, 1.0)))
            .collect();
        let proj_seed: u64 = r.random();
        let report = grad_check(
            &mut store,
            |tape| {
                let nodes: Vec<_> = ids.iter().map(|&id| tape.param(id)).collect();
                let mut pr = rng(proj_seed);
                build(tape, &nodes, &mut pr)
            },
            GRAD_STEP,
        )
        .unwrap();
        results.push((name, report.max_rel_error));
    };

    check("matmul", &[&[4, 3], &[3, 5]], &|t, p, r| {
        let y = t.matmul(p[0], p[1])?;
        project(t, y, r)
    }, &mut r);
    check("affine", &[&[4, 3], &[3, 5], &[5]], &|t, p, r| {
        let y = t.affine(p[0], p[1], p[2])?;
        project(t, y, r)
    }, &mut r);
    check("causal_conv1d", &[&[6, 3], &[3, 3, 2], &[2]], &|t, p, r| {
        let y = t.causal_conv1d(p[0], p[1], p[2])?;
        project(t, y, r)
    }, &mut r);
    check("causal_conv1d_seq", &[&[8, 3], &[2, 3, 4], &[4]], &|t, p, r| {
        let y = t.causal_conv1d_seq(p[0], p[1], p[2], 4)?;
        project(t, y, r)
    }, &mut r);
    check("block_matmul_nt", &[&[6, 2], &[6, 2]], &|t, p, r| {
        let y = t.block_matmul_nt(p[0], p[1], 3)?;
        project(t, y, r)
    }, &mut r);
    check("block_matmul", &[&[6, 3], &[6, 2]], &|t, p, r| {
        let y = t.block_matmul(p[0], p[1], 3)?;
        project(t, y, r)
    }, &mut r);
    check("masked_softmax", &[&[12, 6]], &|t, p, r| {
        let mask = Arc::new(build_mask(&PatternSpec::log_sparse().without_densify(), 6).unwrap());
        let y = t.masked_softmax(p[0], &mask)?;
        project(t, y, r)
    }, &mut r);
    check("layer_norm", &[&[4, 5], &[5], &[5]], &|t, p, r| {
        let y = t.layer_norm(p[0], p[1], p[2])?;
        project(t, y, r)
    }, &mut r);
    check("add", &[&[3, 4], &[3, 4]], &|t, p, r| {
        let y = t.add(p[0], p[1])?;
        project(t, y, r)
    }, &mut r);
    check("mul", &[&[3, 4], &[3, 4]], &|t, p, r| {
        let y = t.mul(p[0], p[1])?;
        project(t, y, r)
    }, &mut r);
    check("scale", &[&[3, 4]], &|t, p, r| {
        let y = t.scale(p[0], -1.7);
        project(t, y, r)
    }, &mut r);
    check("add_const", &[&[3, 4]], &|t, p, r| {
        let y = t.add_const(p[0], 0.3);
        let y = t.mul(y, y)?;
        project(t, y, r)
    }, &mut r);
    check("relu", &[&[4, 5]], &|t, p, r| {
        let y = t.relu(p[0]);
        project(t, y, r)
    }, &mut r);
    check("softplus", &[&[4, 5]], &|t, p, r| {
        let y = t.softplus(p[0]);
        project(t, y, r)
    }, &mut r);
    check("sum", &[&[3, 4]], &|t, p, _| {
        let y = t.mul(p[0], p[0])?;
        Ok(t.sum(y))
    }, &mut r);
    check("concat_cols", &[&[3, 2], &[3, 4]], &|t, p, r| {
        let y = t.concat_cols(&[p[0], p[1]])?;
        project(t, y, r)
    }, &mut r);
    check("slice_cols", &[&[3, 5]], &|t, p, r| {
        let y = t.slice_cols(p[0], 1, 4)?;
        project(t, y, r)
    }, &mut r);
    check("embedding", &[&[5, 3]], &|t, p, r| {
        let y = t.embedding(p[0], &[4, 0, 4, 2])?;
        project(t, y, r)
    }, &mut r);
    check("gaussian_nll", &[&[6, 1], &[6, 1]], &|t, p, _| {
        let sigma = t.softplus(p[1]);
        let targets = [0.3, -1.0, 2.0, 0.0, 0.7, -0.2];
        t.gaussian_nll(p[0], sigma, &targets, &[1.0, 1.0, 0.0, 1.0, 2.0, 1.0])
    }, &mut r);

    results.push(("decoder_stack_2_layers", stack_gradient_error(seed)));
    results.push(("forecaster_nll", forecaster_gradient_error(seed)));
    results
}

fn stack_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed ^ 0x5eed);
    let mut store = ParamStore::new();
    let config = AttentionConfig::new(6, 2, 3, PatternSpec::log_sparse());
    let stack = DecoderStack::init(&mut store, "s", config, 2, &mut r).unwrap();
    let input = store.add("input", random_matrix(&mut r, 2 * 7, 6));
    let mask = Arc::new(build_mask(&PatternSpec::log_sparse(), 7).unwrap());
    let proj_seed: u64 = r.random();
    grad_check(
        &mut store,
        |tape| {
            let y = tape.param(input);
            let out = stack.forward(tape, y, &mask).map_err(to_autodiff)?;
            project(tape, out.output, &mut rng(proj_seed))
        },
        GRAD_STEP,
    )
    .unwrap()
    .max_rel_error
}

fn to_autodiff(e: sparsecast::Error) -> sparsecast::autodiff::AutodiffError {
    match e {
        sparsecast::Error::Autodiff(a) => a,
        other => sparsecast::autodiff::AutodiffError::Argument(other.to_string()),
    }
}

pub fn small_window(len: usize, t0: usize, seed: u64) -> Window {
    let mut r = rng(seed);
    Window {
        series_id: format!("w{seed}"),
        series_index: 0,
        start: 0,
        t0,
        values: (0..len).map(|t| 10.0 + 4.0 * (t as f64 * 0.5).sin() + r.random_range(-1.0..1.0)).collect(),
        covariates: vec![Vec::new(); len],
    }
}

fn forecaster_gradient_error(seed: u64) -> f64 {
    let att = AttentionConfig::new(4, 2, 2, PatternSpec::log_sparse());
    let mut config = ModelConfig::new(2, att, 6, 1);
    config.embed_dim = 3;
    let model = Forecaster::new(config, seed).unwrap();
    let windows = [small_window(6, 4, seed), small_window(6, 4, seed + 100)];
    let refs: Vec<&Window> = windows.iter().collect();
    let mut store = model.store.clone();
    grad_check(
        &mut store,
        |tape| {
            // per-term mean, as in training, keeps roundoff in the differences small
            let (sum, terms) = model.batch_nll(tape, &refs, LikelihoodRange::Full).map_err(to_autodiff)?;
            Ok(tape.scale(sum, 1.0 / terms as f64))
        },
        GRAD_STEP,
    )
    .unwrap()
    .max_rel_error
}
