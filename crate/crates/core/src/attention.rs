//! Multi-head convolutional self-attention decoder layers.
//!
//! Queries and keys come from a causal convolution of kernel size `k` over the
//! layer input; values use a kernel-size-1 projection. With `k = 1` the layer
//! is the canonical post-norm Transformer decoder layer.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{fan_in_uniform, NodeId, ParamId, ParamStore, Tape, Tensor, LAYER_NORM_EPS};
use crate::error::{config_err, Result};
use crate::sparsity::{MaskMatrix, PatternSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub kernel_size: usize,
    pub d_ff: usize,
    pub pattern: PatternSpec,
}

impl AttentionConfig {
    /// `d_k = d_v = d_model / heads`, `d_ff = 4·d_model`.
    pub fn new(d_model: usize, heads: usize, kernel_size: usize, pattern: PatternSpec) -> Self {
        let head_dim = (d_model / heads.max(1)).max(1);
        Self {
            heads,
            d_model,
            d_k: head_dim,
            d_v: head_dim,
            kernel_size,
            d_ff: 4 * d_model,
            pattern,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return config_err("attention needs at least one head");
        }
        if self.d_k == 0 || self.d_v == 0 || self.d_ff == 0 {
            return config_err("d_k, d_v and d_ff must be positive");
        }
        if self.d_model < 2 {
            return config_err("d_model must be at least 2 for layer norm");
        }
        if self.kernel_size == 0 {
            return config_err("kernel size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `k × d_model × d_k`
    pub q_kernel: ParamId,
    pub q_bias: ParamId,
    pub k_kernel: ParamId,
    pub k_bias: ParamId,
    /// `d_model × d_v`
    pub v_weight: ParamId,
    pub v_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLayerParams {
    pub heads: Vec<HeadParams>,
    /// `(H·d_v) × d_model`
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub ff_in_weight: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out_weight: ParamId,
    pub ff_out_bias: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_shift: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_shift: ParamId,
}

impl DecoderLayerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: &AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let AttentionConfig { heads, d_model, d_k, d_v, kernel_size: k, d_ff, .. } = *config;
        let head_params = (0..heads)
            .map(|h| HeadParams {
                q_kernel: store.add(format!("{prefix}.head{h}.q_kernel"), fan_in_uniform(rng, &[k, d_model, d_k], k * d_model)),
                q_bias: store.add(format!("{prefix}.head{h}.q_bias"), Tensor::zeros(&[d_k])),
                k_kernel: store.add(format!("{prefix}.head{h}.k_kernel"), fan_in_uniform(rng, &[k, d_model, d_k], k * d_model)),
                k_bias: store.add(format!("{prefix}.head{h}.k_bias"), Tensor::zeros(&[d_k])),
                v_weight: store.add(format!("{prefix}.head{h}.v_weight"), fan_in_uniform(rng, &[d_model, d_v], d_model)),
                v_bias: store.add(format!("{prefix}.head{h}.v_bias"), Tensor::zeros(&[d_v])),
            })
            .collect();
        Self {
            heads: head_params,
            out_weight: store.add(format!("{prefix}.out_weight"), fan_in_uniform(rng, &[heads * d_v, d_model], heads * d_v)),
            out_bias: store.add(format!("{prefix}.out_bias"), Tensor::zeros(&[d_model])),
            ff_in_weight: store.add(format!("{prefix}.ff_in_weight"), fan_in_uniform(rng, &[d_model, d_ff], d_model)),
            ff_in_bias: store.add(format!("{prefix}.ff_in_bias"), Tensor::zeros(&[d_ff])),
            ff_out_weight: store.add(format!("{prefix}.ff_out_weight"), fan_in_uniform(rng, &[d_ff, d_model], d_ff)),
            ff_out_bias: store.add(format!("{prefix}.ff_out_bias"), Tensor::zeros(&[d_model])),
            norm1_gain: store.add(format!("{prefix}.norm1_gain"), Tensor::filled(&[d_model], 1.0)),
            norm1_shift: store.add(format!("{prefix}.norm1_shift"), Tensor::zeros(&[d_model])),
            norm2_gain: store.add(format!("{prefix}.norm2_gain"), Tensor::filled(&[d_model], 1.0)),
            norm2_shift: store.add(format!("{prefix}.norm2_shift"), Tensor::zeros(&[d_model])),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadProjection {
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
}

/// Per-head queries and keys by causal convolution, values by pointwise projection.
pub fn project_qkv(
    tape: &mut Tape,
    y: NodeId,
    params: &DecoderLayerParams,
    seq_len: usize,
) -> Result<Vec<HeadProjection>> {
    params
        .heads
        .iter()
        .map(|h| {
            let (qk, qb) = (tape.param(h.q_kernel), tape.param(h.q_bias));
            let q = tape.causal_conv1d_seq(y, qk, qb, seq_len)?;
            let (kk, kb) = (tape.param(h.k_kernel), tape.param(h.k_bias));
            let k = tape.causal_conv1d_seq(y, kk, kb, seq_len)?;
            let (vw, vb) = (tape.param(h.v_weight), tape.param(h.v_bias));
            let v = tape.affine(y, vw, vb)?;
            Ok(HeadProjection { q, k, v })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: NodeId,
    /// Post-softmax weights, `B·L × L`.
    pub weights: NodeId,
}

/// `masked_softmax(Q·Kᵀ/√d_k)·V` for every stacked sequence.
pub fn attend(
    tape: &mut Tape,
    head: HeadProjection,
    mask: &Arc<MaskMatrix>,
    d_k: usize,
) -> Result<AttentionOutput> {
    let seq_len = mask.len();
    let scores = tape.block_matmul_nt(head.q, head.k, seq_len)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.masked_softmax(scaled, mask)?;
    let output = tape.block_matmul(weights, head.v, seq_len)?;
    Ok(AttentionOutput { output, weights })
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub output: NodeId,
    /// One weight matrix per head.
    pub weights: Vec<NodeId>,
}

/// One post-norm decoder layer: attention sublayer then feedforward sublayer,
/// each with a residual connection and layer norm.
pub fn decoder_layer(
    tape: &mut Tape,
    y: NodeId,
    params: &DecoderLayerParams,
    config: &AttentionConfig,
    mask: &Arc<MaskMatrix>,
) -> Result<LayerOutput> {
    let width = tape.value(y).cols();
    if width != config.d_model {
        return config_err(format!("layer input width {width} != d_model {}", config.d_model));
    }
    let heads = project_qkv(tape, y, params, mask.len())?;
    let mut outputs = Vec::with_capacity(heads.len());
    let mut weights = Vec::with_capacity(heads.len());
    for head in heads {
        let a = attend(tape, head, mask, config.d_k)?;
        outputs.push(a.output);
        weights.push(a.weights);
    }
    let concat = tape.concat_cols(&outputs)?;
    let (ow, ob) = (tape.param(params.out_weight), tape.param(params.out_bias));
    let projected = tape.affine(concat, ow, ob)?;
    let residual = tape.add(projected, y)?;
    let (g1, s1) = (tape.param(params.norm1_gain), tape.param(params.norm1_shift));
    let h1 = tape.layer_norm(residual, g1, s1)?;

    let (w1, b1) = (tape.param(params.ff_in_weight), tape.param(params.ff_in_bias));
    let inner = tape.affine(h1, w1, b1)?;
    let inner = tape.relu(inner);
    let (w2, b2) = (tape.param(params.ff_out_weight), tape.param(params.ff_out_bias));
    let ff = tape.affine(inner, w2, b2)?;
    let residual = tape.add(ff, h1)?;
    let (g2, s2) = (tape.param(params.norm2_gain), tape.param(params.norm2_shift));
    let output = tape.layer_norm(residual, g2, s2)?;
    Ok(LayerOutput { output, weights })
}

#[derive(Debug, Clone)]
pub struct StackOutput {
    pub output: NodeId,
    /// `weights[layer][head]`
    pub weights: Vec<Vec<NodeId>>,
}

/// Applies the layers in order, all sharing one mask.
pub fn stack_forward(
    tape: &mut Tape,
    y: NodeId,
    layers: &[DecoderLayerParams],
    config: &AttentionConfig,
    mask: &Arc<MaskMatrix>,
) -> Result<StackOutput> {
    if layers.is_empty() {
        return config_err("a decoder stack needs at least one layer");
    }
    let mut current = y;
    let mut weights = Vec::with_capacity(layers.len());
    for layer in layers {
        let out = decoder_layer(tape, current, layer, config, mask)?;
        current = out.output;
        weights.push(out.weights);
    }
    Ok(StackOutput { output: current, weights })
}

/// A stack of decoder layers with shared configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderStack {
    pub config: AttentionConfig,
    pub layers: Vec<DecoderLayerParams>,
}

impl DecoderStack {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: AttentionConfig,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if n_layers == 0 {
            return config_err("a decoder stack needs at least one layer");
        }
        let layers = (0..n_layers)
            .map(|i| DecoderLayerParams::init(store, &format!("{prefix}.layer{i}"), &config, rng))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn forward(&self, tape: &mut Tape, y: NodeId, mask: &Arc<MaskMatrix>) -> Result<StackOutput> {
        stack_forward(tape, y, &self.layers, &self.config, mask)
    }
}

fn row_affine(x: &[f64], w: &Tensor, bias: &[f64], out: &mut [f64]) {
    let cols = w.cols();
    out.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (o, wv) in out.iter_mut().zip(&w.data()[i * cols..(i + 1) * cols]) {
                *o += xi * wv;
            }
        }
    }
}

fn row_layer_norm(x: &mut [f64], gain: &[f64], shift: &[f64]) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for ((v, g), s) in x.iter_mut().zip(gain).zip(shift) {
        *v = (*v - mean) * rstd * g + s;
    }
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    inputs: Vec<Vec<f64>>,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

/// Cached per-layer state for step-by-step (row-at-a-time) evaluation.
#[derive(Debug, Clone)]
pub struct IncrementalState {
    layers: Vec<LayerCache>,
    rows: usize,
}

impl IncrementalState {
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }
}

/// Row-at-a-time inference that reuses keys, values and layer inputs of earlier
/// rows. Produces the same rows as [`stack_forward`] on the full prefix.
pub struct IncrementalDecoder<'a> {
    store: &'a ParamStore,
    stack: &'a DecoderStack,
    mask: &'a MaskMatrix,
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(store: &'a ParamStore, stack: &'a DecoderStack, mask: &'a MaskMatrix) -> Self {
        Self { store, stack, mask }
    }

    pub fn start(&self) -> IncrementalState {
        let heads = self.stack.config.heads;
        IncrementalState {
            layers: (0..self.stack.layers.len())
                .map(|_| LayerCache {
                    inputs: Vec::new(),
                    keys: vec![Vec::new(); heads],
                    values: vec![Vec::new(); heads],
                })
                .collect(),
            rows: 0,
        }
    }

    /// Feeds the next input row and returns the last layer's output row.
    pub fn push(&self, state: &mut IncrementalState, row: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.stack.config;
        if row.len() != cfg.d_model {
            return config_err(format!("row width {} != d_model {}", row.len(), cfg.d_model));
        }
        let t = state.rows;
        if t >= self.mask.len() {
            return config_err(format!("sequence exceeds mask length {}", self.mask.len()));
        }
        let flags = self.mask.row_flags(t);
        let value = |id: ParamId| self.store.value(id);
        let mut x = row.to_vec();
        for (params, cache) in self.stack.layers.iter().zip(&mut state.layers) {
            cache.inputs.push(x.clone());
            let mut concat = Vec::with_capacity(cfg.heads * cfg.d_v);
            for (h, head) in params.heads.iter().enumerate() {
                let conv = |kernel: ParamId, bias: ParamId| {
                    let kt = value(kernel);
                    let mut out = value(bias).data().to_vec();
                    let taps = cfg.kernel_size;
                    let per_tap = cfg.d_model * cfg.d_k;
                    for i in 0..taps {
                        let lag = taps - 1 - i;
                        if t >= lag {
                            let input = &cache.inputs[t - lag];
                            let w = &kt.data()[i * per_tap..(i + 1) * per_tap];
                            for (c, &xi) in input.iter().enumerate() {
                                for (o, wv) in out.iter_mut().zip(&w[c * cfg.d_k..(c + 1) * cfg.d_k]) {
                                    *o += xi * wv;
                                }
                            }
                        }
                    }
                    out
                };
                let q = conv(head.q_kernel, head.q_bias);
                cache.keys[h].push(conv(head.k_kernel, head.k_bias));
                let mut v = vec![0.0; cfg.d_v];
                row_affine(&x, value(head.v_weight), value(head.v_bias).data(), &mut v);
                cache.values[h].push(v);

                let scale = 1.0 / (cfg.d_k as f64).sqrt();
                let allowed: Vec<usize> = (0..=t).filter(|&j| flags[j]).collect();
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| q.iter().zip(&cache.keys[h][j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut o = vec![0.0; cfg.d_v];
                for (&j, e) in allowed.iter().zip(&exps) {
                    let w = e / total;
                    for (acc, vv) in o.iter_mut().zip(&cache.values[h][j]) {
                        *acc += w * vv;
                    }
                }
                concat.extend(o);
            }
            let mut h1 = vec![0.0; cfg.d_model];
            row_affine(&concat, value(params.out_weight), value(params.out_bias).data(), &mut h1);
            for (a, b) in h1.iter_mut().zip(&x) {
                *a += b;
            }
            row_layer_norm(&mut h1, value(params.norm1_gain).data(), value(params.norm1_shift).data());
            let mut inner = vec![0.0; cfg.d_ff];
            row_affine(&h1, value(params.ff_in_weight), value(params.ff_in_bias).data(), &mut inner);
            for v in &mut inner {
                *v = v.max(0.0);
            }
            let mut out = vec![0.0; cfg.d_model];
            row_affine(&inner, value(params.ff_out_weight), value(params.ff_out_bias).data(), &mut out);
            for (a, b) in out.iter_mut().zip(&h1) {
                *a += b;
            }
            row_layer_norm(&mut out, value(params.norm2_gain).data(), value(params.norm2_shift).data());
            x = out;
        }
        state.rows += 1;
        Ok(x)
    }
}
