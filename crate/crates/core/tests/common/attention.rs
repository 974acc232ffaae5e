//! An independent textbook decoder layer and attention-level oracles.

use std::sync::Arc;

use rand::Rng;

use sparsecast::attention::{AttentionConfig, DecoderLayerParams, DecoderStack};
use sparsecast::autodiff::{ParamStore, Tape, Tensor};
use sparsecast::sparsity::{build_mask, reachable_after, MaskMatrix, PatternSpec};

use super::{random_matrix, rng};

type Matrix = Vec<Vec<f64>>;

fn mat(t: &Tensor, rows: usize, cols: usize) -> Matrix {
    (0..rows).map(|r| t.data()[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .map(|row| (0..b[0].len()).map(|c| row.iter().zip(b).map(|(x, br)| x * br[c]).sum()).collect())
        .collect()
}

fn add_bias(mut a: Matrix, b: &[f64]) -> Matrix {
    for row in &mut a {
        for (x, y) in row.iter_mut().zip(b) {
            *x += y;
        }
    }
    a
}

fn layer_norm(a: &Matrix, g: &[f64], s: &[f64]) -> Matrix {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .zip(g.iter().zip(s))
                .map(|(v, (g, s))| (v - mean) / (var + 1e-5).sqrt() * g + s)
                .collect()
        })
        .collect()
}

/// Textbook post-norm decoder layer with matrix projections and a causal mask.
fn reference_layer(x: &Matrix, store: &ParamStore, p: &DecoderLayerParams, c: &AttentionConfig) -> Matrix {
    let v = |id| store.value(id);
    let n = x.len();
    let mut concat: Matrix = vec![Vec::new(); n];
    for head in &p.heads {
        let q = add_bias(matmul(x, &mat(v(head.q_kernel), c.d_model, c.d_k)), v(head.q_bias).data());
        let k = add_bias(matmul(x, &mat(v(head.k_kernel), c.d_model, c.d_k)), v(head.k_bias).data());
        let val = add_bias(matmul(x, &mat(v(head.v_weight), c.d_model, c.d_v)), v(head.v_bias).data());
        for i in 0..n {
            let scores: Vec<f64> = (0..=i)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (c.d_k as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..c.d_v {
                concat[i].push((0..=i).map(|j| e[j] / z * val[j][d]).sum());
            }
        }
    }
    let attn = add_bias(matmul(&concat, &mat(v(p.out_weight), c.heads * c.d_v, c.d_model)), v(p.out_bias).data());
    let res: Matrix = attn.iter().zip(x).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    let h1 = layer_norm(&res, v(p.norm1_gain).data(), v(p.norm1_shift).data());
    let inner = add_bias(matmul(&h1, &mat(v(p.ff_in_weight), c.d_model, c.d_ff)), v(p.ff_in_bias).data());
    let inner: Matrix = inner.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    let ff = add_bias(matmul(&inner, &mat(v(p.ff_out_weight), c.d_ff, c.d_model)), v(p.ff_out_bias).data());
    let res: Matrix = ff.iter().zip(&h1).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    layer_norm(&res, v(p.norm2_gain).data(), v(p.norm2_shift).data())
}

/// Randomizes every parameter, including biases and norm gains.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
}

pub fn stack(pattern: PatternSpec, d: usize, heads: usize, k: usize, layers: usize, seed: u64) -> (ParamStore, DecoderStack) {
    let mut store = ParamStore::new();
    let config = AttentionConfig::new(d, heads, k, pattern);
    let s = DecoderStack::init(&mut store, "s", config, layers, &mut rng(seed)).unwrap();
    randomize(&mut store, seed + 1);
    (store, s)
}

pub fn run(store: &ParamStore, s: &DecoderStack, x: &Tensor, mask: &Arc<MaskMatrix>) -> Tensor {
    let mut tape = Tape::new(store);
    let y = tape.constant(x.clone());
    let out = s.forward(&mut tape, y, mask).unwrap();
    tape.value(out.output).clone()
}

/// Maximum deviation between the library stack and the reference, k = 1, full mask.
pub fn canonical_deviation(seed: u64, len: usize, layers: usize) -> f64 {
    let (store, s) = stack(PatternSpec::full(), 8, 2, 1, layers, seed);
    let x = random_matrix(&mut rng(seed + 7), len, 8);
    let mask = Arc::new(MaskMatrix::full_causal(len));
    let got = run(&store, &s, &x, &mask);
    let mut expected = mat(&x, len, 8);
    for p in &s.layers {
        expected = reference_layer(&expected, &store, p, &s.config);
    }
    let flat: Vec<f64> = expected.into_iter().flatten().collect();
    got.data().iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Rows `j` whose input influences output row `l`, from exact reverse-mode gradients.
pub fn sensitivity(store: &ParamStore, s: &DecoderStack, x: &Tensor, mask: &Arc<MaskMatrix>, threshold: f64) -> Vec<Vec<bool>> {
    let len = x.rows();
    let width = x.cols();
    (0..len)
        .map(|l| {
            let mut tape = Tape::new(store);
            let y = tape.constant(x.clone());
            let out = s.forward(&mut tape, y, mask).unwrap();
            let mut pick = vec![0.0; len * width];
            let mut r = rng(l as u64);
            for v in &mut pick[l * width..(l + 1) * width] {
                *v = r.random_range(0.5..1.5);
            }
            let pick = tape.constant(Tensor::matrix(len, width, pick).unwrap());
            let prod = tape.mul(out.output, pick).unwrap();
            let loss = tape.sum(prod);
            let grads = tape.backward(loss).unwrap();
            let g = grads.node(y).unwrap();
            (0..len).map(|j| g.row(j).iter().any(|v| v.abs() > threshold)).collect()
        })
        .collect()
}

/// Whether the gradient sensitivity pattern of a `layers`-deep stack equals
/// `layers`-step reachability of its mask.
pub fn sensitivity_matches_reachability(len: usize, layers: usize, seed: u64) -> bool {
    let spec = PatternSpec::log_sparse();
    let (store, s) = stack(spec.clone(), 6, 2, 1, layers, seed);
    let mask = Arc::new(build_mask(&spec, len).unwrap());
    let x = random_matrix(&mut rng(seed + 3), len, 6);
    let sens = sensitivity(&store, &s, &x, &mask, 1e-9);
    let reach = reachable_after(&mask, layers).unwrap();
    (1..=len).all(|l| (1..=len).all(|j| sens[l - 1][j - 1] == (j <= l && reach.contains(l, j))))
}

/// Largest change of rows before `t` when row `t` of the input is perturbed.
pub fn causality_leak(len: usize, k: usize, pattern: PatternSpec, seed: u64) -> f64 {
    let (store, s) = stack(pattern.clone(), 6, 2, k, 2, seed);
    let mask = Arc::new(build_mask(&pattern, len).unwrap());
    let x = random_matrix(&mut rng(seed + 1), len, 6);
    let base = run(&store, &s, &x, &mask);
    let mut worst: f64 = 0.0;
    for t in 0..len {
        let mut y = x.clone();
        for v in &mut y.data_mut()[t * 6..(t + 1) * 6] {
            *v += 3.0;
        }
        let out = run(&store, &s, &y, &mask);
        for (a, b) in base.data()[..t * 6].iter().zip(&out.data()[..t * 6]) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
