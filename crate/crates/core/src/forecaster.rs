//! The probabilistic forecaster: input assembly, scale handling, the Gaussian
//! output head, likelihood and ancestral sampling.
//!
//! Row `t` of a window (0-indexed) sees `z_{t-1}` (zero at `t = 0`) together with
//! the covariates of step `t`, and predicts the distribution of `z_t`.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, DecoderStack, IncrementalDecoder};
use crate::autodiff::{
    fan_in_uniform, load_into, save_checkpoint, softplus, uniform, NodeId, ParamId, ParamStore, Tape, Tensor,
};
use crate::datagen::{CovariateSpec, Window};
use crate::error::{config_err, data_err, Error, Result};
use crate::sparsity::{build_mask, MaskMatrix};
use crate::trainer::empirical_quantile;

pub const DEFAULT_EMBED_DIM: usize = 20;
pub const DEFAULT_SAMPLES: usize = 100;
const CONFIG_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub attention: AttentionConfig,
    /// Shared width of the position and ID embeddings, which are summed.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Longest window (`t0 + tau`) the position table covers.
    pub max_len: usize,
    /// ID-embedding vocabulary.
    pub num_series: usize,
    #[serde(default = "CovariateSpec::none")]
    pub covariates: CovariateSpec,
}

fn default_embed_dim() -> usize {
    DEFAULT_EMBED_DIM
}

impl ModelConfig {
    pub fn new(layers: usize, attention: AttentionConfig, max_len: usize, num_series: usize) -> Self {
        Self {
            layers,
            attention,
            embed_dim: DEFAULT_EMBED_DIM,
            max_len,
            num_series,
            covariates: CovariateSpec::none(),
        }
    }

    /// Width of an assembled input row before projection.
    pub fn input_width(&self) -> usize {
        1 + self.embed_dim + self.covariates.width()
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.layers == 0 {
            return config_err("the model needs at least one layer");
        }
        if self.embed_dim == 0 || self.max_len == 0 || self.num_series == 0 {
            return config_err("embed_dim, max_len and num_series must be positive");
        }
        if self.covariates.stats.len() != self.covariates.features.len() {
            return config_err("covariate statistics do not match the feature list");
        }
        self.attention.pattern.validate(self.max_len)?;
        Ok(())
    }
}

/// Per-window scale `ν = 1 + mean |z|` over the conditioning range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleHandler {
    pub nu: f64,
}

impl ScaleHandler {
    pub fn scale(&self, z: f64) -> f64 {
        z / self.nu
    }

    /// Maps head outputs to `(μ, σ)` in data units.
    pub fn unscale(&self, raw_mu: f64, raw_sigma: f64) -> (f64, f64) {
        (raw_mu * self.nu, softplus(raw_sigma) * self.nu)
    }
}

pub fn compute_scale(history: &[f64]) -> ScaleHandler {
    if history.is_empty() {
        return ScaleHandler { nu: 1.0 };
    }
    let mean = history.iter().map(|v| v.abs()).sum::<f64>() / history.len() as f64;
    ScaleHandler { nu: 1.0 + mean }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDistribution {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `[S][tau]` when sampled.
    pub sample_paths: Option<Vec<Vec<f64>>>,
}

/// Which window steps enter the training likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodRange {
    /// Every step `1..=t0+tau`.
    #[default]
    Full,
    /// Only the forecast segment.
    ForecastOnly,
}

impl LikelihoodRange {
    pub fn range(self, window: &Window) -> Range<usize> {
        match self {
            Self::Full => 0..window.len(),
            Self::ForecastOnly => window.t0..window.len(),
        }
    }
}

/// `Σ ½ln(2πσ²) + (z − μ)²/(2σ²)` over `range` (0-indexed steps).
pub fn negative_log_likelihood(dist: &ForecastDistribution, z: &[f64], range: Range<usize>) -> Result<f64> {
    if range.end > z.len() || range.end > dist.mu.len() || range.end > dist.sigma.len() {
        return data_err(format!("likelihood range {range:?} exceeds the window"));
    }
    Ok(range
        .map(|t| {
            let (s, r) = (dist.sigma[t], z[t] - dist.mu[t]);
            0.5 * (2.0 * std::f64::consts::PI * s * s).ln() + r * r / (2.0 * s * s)
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterParams {
    /// `max_len × embed_dim`
    pub position: ParamId,
    /// `num_series × embed_dim`
    pub series: ParamId,
    pub in_weight: ParamId,
    pub in_bias: ParamId,
    pub stack: DecoderStack,
    /// `d_model × 2`: columns are raw μ and raw σ.
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

/// Tape nodes of a batched forward pass over `B` windows of length `L`.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `B·L × 1`, data units.
    pub mu: NodeId,
    pub sigma: NodeId,
    pub raw: NodeId,
    /// `weights[layer][head]`, each `B·L × L`.
    pub weights: Vec<Vec<NodeId>>,
}

#[derive(Debug)]
pub struct Forecaster {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ForecasterParams,
    masks: Mutex<HashMap<usize, Arc<MaskMatrix>>>,
}

impl Clone for Forecaster {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            params: self.params.clone(),
            masks: Mutex::new(HashMap::new()),
        }
    }
}

impl Forecaster {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.attention.d_model;
        let e = config.embed_dim;
        let width = config.input_width();
        let position = store.add("position_embedding", uniform(&mut rng, &[config.max_len, e], 0.1));
        let series = store.add("series_embedding", uniform(&mut rng, &[config.num_series, e], 0.1));
        let in_weight = store.add("input.weight", fan_in_uniform(&mut rng, &[width, d], width));
        let in_bias = store.add("input.bias", Tensor::zeros(&[d]));
        let stack = DecoderStack::init(&mut store, "decoder", config.attention.clone(), config.layers, &mut rng)?;
        let head_weight = store.add("head.weight", fan_in_uniform(&mut rng, &[d, 2], d));
        let head_bias = store.add("head.bias", Tensor::zeros(&[2]));
        Ok(Self {
            params: ForecasterParams { position, series, in_weight, in_bias, stack, head_weight, head_bias },
            config,
            store,
            masks: Mutex::new(HashMap::new()),
        })
    }

    pub fn mask(&self, len: usize) -> Result<Arc<MaskMatrix>> {
        let mut masks = self.masks.lock().expect("mask cache poisoned");
        if let Some(m) = masks.get(&len) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(build_mask(&self.config.attention.pattern, len)?);
        masks.insert(len, Arc::clone(&m));
        Ok(m)
    }

    fn check_window(&self, w: &Window) -> Result<()> {
        if w.is_empty() || w.len() > self.config.max_len {
            return config_err(format!("window length {} outside 1..={}", w.len(), self.config.max_len));
        }
        if w.series_index >= self.config.num_series {
            return data_err(format!("series index {} outside vocabulary {}", w.series_index, self.config.num_series));
        }
        let c = self.config.covariates.width();
        if w.covariates.len() != w.len() {
            return data_err(format!("window of `{}` lacks covariate rows", w.series_id));
        }
        if let Some(t) = w.covariates.iter().position(|row| row.len() != c) {
            return data_err(format!("window of `{}` is missing covariates at step {t}", w.series_id));
        }
        Ok(())
    }

    /// Assembles `[z_{t-1}/ν, pos_t + id, x_t]` rows for each window, stacked,
    /// and projects them to `d_model`.
    pub fn assemble_inputs(&self, tape: &mut Tape, windows: &[&Window]) -> Result<NodeId> {
        let Some(first) = windows.first() else {
            return config_err("empty batch");
        };
        let len = first.len();
        let mut z_prev = Vec::with_capacity(windows.len() * len);
        let mut covs = Vec::with_capacity(windows.len() * len * self.config.covariates.width());
        let mut positions = Vec::with_capacity(windows.len() * len);
        let mut ids = Vec::with_capacity(windows.len() * len);
        for w in windows {
            self.check_window(w)?;
            if w.len() != len {
                return config_err("batched windows must share one length");
            }
            let scale = compute_scale(w.history());
            z_prev.push(0.0);
            z_prev.extend(w.values[..len - 1].iter().map(|&z| scale.scale(z)));
            for row in &w.covariates {
                covs.extend_from_slice(row);
            }
            positions.extend(0..len);
            ids.extend(std::iter::repeat_n(w.series_index, len));
        }
        let rows = z_prev.len();
        let z_node = tape.constant(Tensor::column(z_prev));
        let pos_table = tape.param(self.params.position);
        let id_table = tape.param(self.params.series);
        let pos = tape.embedding(pos_table, &positions)?;
        let id = tape.embedding(id_table, &ids)?;
        let emb = tape.add(pos, id)?;
        let mut parts = vec![z_node, emb];
        if self.config.covariates.width() > 0 {
            parts.push(tape.constant(Tensor::matrix(rows, self.config.covariates.width(), covs)?));
        }
        let x = tape.concat_cols(&parts)?;
        let (w, b) = (tape.param(self.params.in_weight), tape.param(self.params.in_bias));
        Ok(tape.affine(x, w, b)?)
    }

    pub fn forward_batch(&self, tape: &mut Tape, windows: &[&Window]) -> Result<BatchOutput> {
        let y = self.assemble_inputs(tape, windows)?;
        let len = windows[0].len();
        let mask = self.mask(len)?;
        let out = self.params.stack.forward(tape, y, &mask)?;
        let (hw, hb) = (tape.param(self.params.head_weight), tape.param(self.params.head_bias));
        let raw = tape.affine(out.output, hw, hb)?;
        let nu: Vec<f64> = windows
            .iter()
            .flat_map(|w| std::iter::repeat_n(compute_scale(w.history()).nu, len))
            .collect();
        let nu = tape.constant(Tensor::column(nu));
        let raw_mu = tape.slice_cols(raw, 0, 1)?;
        let raw_sigma = tape.slice_cols(raw, 1, 2)?;
        let mu = tape.mul(raw_mu, nu)?;
        let sp = tape.softplus(raw_sigma);
        let sigma = tape.mul(sp, nu)?;
        Ok(BatchOutput { mu, sigma, raw, weights: out.weights })
    }

    /// Summed NLL of a batch over the selected steps, and the number of terms.
    pub fn batch_nll(&self, tape: &mut Tape, windows: &[&Window], range: LikelihoodRange) -> Result<(NodeId, usize)> {
        let out = self.forward_batch(tape, windows)?;
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for w in windows {
            let r = range.range(w);
            targets.extend_from_slice(&w.values);
            weights.extend((0..w.len()).map(|t| if r.contains(&t) { 1.0 } else { 0.0 }));
        }
        let terms = weights.iter().filter(|&&v| v > 0.0).count();
        if tape.value(out.sigma).data().iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Divergence("predicted sigma collapsed to zero or became non-finite".into()));
        }
        Ok((tape.gaussian_nll(out.mu, out.sigma, &targets, &weights)?, terms))
    }

    pub fn forward_distribution(&self, window: &Window) -> Result<ForecastDistribution> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward_batch(&mut tape, &[window])?;
        Ok(ForecastDistribution {
            mu: tape.value(out.mu).data().to_vec(),
            sigma: tape.value(out.sigma).data().to_vec(),
            sample_paths: None,
        })
    }

    /// Projected input row for step `t` outside the tape.
    fn input_row(&self, t: usize, z_prev: f64, covariates: &[f64], series_index: usize) -> Vec<f64> {
        let v = |id: ParamId| self.store.value(id);
        let (pos, ids) = (v(self.params.position), v(self.params.series));
        let mut x = Vec::with_capacity(self.config.input_width());
        x.push(z_prev);
        x.extend(pos.row(t).iter().zip(ids.row(series_index)).map(|(a, b)| a + b));
        x.extend_from_slice(covariates);
        let w = v(self.params.in_weight);
        let mut out = v(self.params.in_bias).data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wv;
            }
        }
        out
    }

    fn head(&self, h: &[f64], scale: ScaleHandler) -> (f64, f64) {
        let w = self.store.value(self.params.head_weight);
        let b = self.store.value(self.params.head_bias).data();
        let (mut m, mut s) = (b[0], b[1]);
        for (i, &hi) in h.iter().enumerate() {
            m += hi * w.at(i, 0);
            s += hi * w.at(i, 1);
        }
        scale.unscale(m, s)
    }

    /// The same per-step distribution as [`Self::forward_distribution`], computed
    /// one row at a time with the cached decoder used for sampling.
    pub fn incremental_distribution(&self, window: &Window) -> Result<ForecastDistribution> {
        self.check_window(window)?;
        let mask = self.mask(window.len())?;
        let decoder = IncrementalDecoder::new(&self.store, &self.params.stack, &mask);
        let scale = compute_scale(window.history());
        let mut state = decoder.start();
        let (mut mu, mut sigma) = (Vec::new(), Vec::new());
        for t in 0..window.len() {
            let z_prev = if t == 0 { 0.0 } else { scale.scale(window.values[t - 1]) };
            let row = self.input_row(t, z_prev, &window.covariates[t], window.series_index);
            let h = decoder.push(&mut state, &row)?;
            let (m, s) = self.head(&h, scale);
            mu.push(m);
            sigma.push(s);
        }
        Ok(ForecastDistribution { mu, sigma, sample_paths: None })
    }

    /// Draws `samples` paths of length `tau` past the window's history.
    /// Only `window.values[..t0]` are read; covariates must cover `t0 + tau` steps.
    pub fn ancestral_forecast(&self, window: &Window, tau: usize, samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let t0 = window.t0;
        let total = t0 + tau;
        if t0 == 0 {
            return config_err("forecasting needs at least one observed step");
        }
        if total > self.config.max_len {
            return config_err(format!("t0 + tau = {total} exceeds max_len {}", self.config.max_len));
        }
        if window.covariates.len() < total {
            return data_err(format!("covariates of `{}` end before step {total}", window.series_id));
        }
        let c = self.config.covariates.width();
        if window.covariates[..total].iter().any(|r| r.len() != c) {
            return data_err(format!("window of `{}` is missing covariates", window.series_id));
        }
        if window.series_index >= self.config.num_series {
            return data_err(format!("series index {} outside vocabulary", window.series_index));
        }
        let mask = self.mask(total)?;
        let decoder = IncrementalDecoder::new(&self.store, &self.params.stack, &mask);
        let scale = compute_scale(window.history());
        let mut state = decoder.start();
        let mut last = Vec::new();
        for t in 0..=t0 {
            let z_prev = if t == 0 { 0.0 } else { scale.scale(window.values[t - 1]) };
            let row = self.input_row(t, z_prev, &window.covariates[t], window.series_index);
            last = decoder.push(&mut state, &row)?;
        }
        let first = self.head(&last, scale);
        ancestral_sample(state, first, tau, samples, seed, |st, z| {
            let t = st.len();
            let row = self.input_row(t, scale.scale(z), &window.covariates[t], window.series_index);
            let h = decoder.push(st, &row)?;
            Ok(self.head(&h, scale))
        })
    }

    /// Writes one dense `L × L` CSV of post-softmax weights per layer and head.
    pub fn export_attention(&self, window: &Window, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut tape = Tape::new(&self.store);
        let out = self.forward_batch(&mut tape, &[window])?;
        let mut files = Vec::new();
        for (l, heads) in out.weights.iter().enumerate() {
            for (h, &node) in heads.iter().enumerate() {
                let path = dir.join(format!("attention_layer{}_head{}.csv", l + 1, h + 1));
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                for row in tape.value(node).to_rows() {
                    let line: Vec<String> = row.iter().map(f64::to_string).collect();
                    writeln!(f, "{}", line.join(","))?;
                }
                f.flush()?;
                files.push(path);
            }
        }
        Ok(files)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        save_checkpoint(&self.store, dir)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let mut model = Self::new(config, 0)?;
        load_into(&mut model.store, dir)?;
        Ok(model)
    }
}

/// Generic ancestral sampler: from the first one-step `(μ, σ)`, repeatedly draws
/// `z ~ N(μ, σ²)` and feeds it to `advance`, which returns the next `(μ, σ)`.
/// Every path starts from a clone of `state`.
pub fn ancestral_sample<S, F>(
    state: S,
    first: (f64, f64),
    tau: usize,
    samples: usize,
    seed: u64,
    mut advance: F,
) -> Result<Vec<Vec<f64>>>
where
    S: Clone,
    F: FnMut(&mut S, f64) -> Result<(f64, f64)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut st = state.clone();
        let (mut mu, mut sigma) = first;
        let mut path = Vec::with_capacity(tau);
        for step in 0..tau {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let z = mu + sigma * eps;
            path.push(z);
            if step + 1 < tau {
                (mu, sigma) = advance(&mut st, z)?;
            }
        }
        paths.push(path);
    }
    Ok(paths)
}

/// One row of the forecast CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub series_id: String,
    pub step: usize,
    pub mu: f64,
    pub sigma: f64,
    #[serde(rename = "q0.1")]
    pub q10: f64,
    #[serde(rename = "q0.5")]
    pub q50: f64,
    #[serde(rename = "q0.9")]
    pub q90: f64,
}

/// Summarizes sample paths per step: sample mean, sample standard deviation
/// and the 0.1/0.5/0.9 empirical quantiles. Steps are numbered from 1.
pub fn summarize_paths(series_id: &str, paths: &[Vec<f64>]) -> Result<Vec<ForecastRecord>> {
    let Some(tau) = paths.first().map(Vec::len) else {
        return config_err("no sample paths to summarize");
    };
    let q = |rho| empirical_quantile(paths, rho);
    let (q10, q50, q90) = (q(0.1)?, q(0.5)?, q(0.9)?);
    let s = paths.len() as f64;
    Ok((0..tau)
        .map(|t| {
            let mean = paths.iter().map(|p| p[t]).sum::<f64>() / s;
            let var = paths.iter().map(|p| (p[t] - mean).powi(2)).sum::<f64>() / s;
            ForecastRecord {
                series_id: series_id.to_string(),
                step: t + 1,
                mu: mean,
                sigma: var.sqrt(),
                q10: q10[t],
                q50: q50[t],
                q90: q90[t],
            }
        })
        .collect())
}

pub fn write_forecast_csv<W: Write>(records: &[ForecastRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
