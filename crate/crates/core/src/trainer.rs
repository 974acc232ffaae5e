//! Training with early stopping, quantile-loss evaluation and the
//! seasonal-naive baseline.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::datagen::{TimeSeriesSet, Window};
use crate::error::{config_err, data_err, Error, Result};
use crate::forecaster::{Forecaster, LikelihoodRange};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Linear learning-rate ramp over the first `warmup` steps.
    #[serde(default)]
    pub warmup: usize,
    /// Hard cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub likelihood: LikelihoodRange,
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    5
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            lr: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            warmup: 0,
            max_steps: None,
            likelihood: LikelihoodRange::Full,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err("learning rate must be positive and finite");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return config_err("batch size and max epochs must be positive");
        }
        if self.patience == 0 {
            return config_err("patience must be at least 1");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.lr * (step + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

/// Tracks the best validation metric and counts epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, stale: 0 }
    }

    /// Records one epoch's metric; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_nll: f64,
    /// Present on the last step of each epoch.
    pub val_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub epochs: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    /// Per-step train NLL averaged over the final epoch.
    pub final_train_nll: f64,
}

impl TrainReport {
    pub fn write_curve_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "train_nll", "val_nll"])?;
        for p in &self.curve {
            let val = p.val_nll.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([p.step.to_string(), p.train_nll.to_string(), val])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Batches of indices into `windows`, grouping equal lengths, shuffled.
fn batches(windows: &[Window], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        groups.entry(w.len()).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, mut idx) in groups {
        idx.shuffle(rng);
        out.extend(idx.chunks(size).map(<[usize]>::to_vec));
    }
    out.shuffle(rng);
    out
}

/// Mean per-step NLL over `windows`, forward only.
pub fn mean_nll(model: &Forecaster, windows: &[Window], range: LikelihoodRange, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut terms = 0usize;
    let mut groups: BTreeMap<usize, Vec<&Window>> = BTreeMap::new();
    for w in windows {
        groups.entry(w.len()).or_default().push(w);
    }
    for group in groups.values() {
        for chunk in group.chunks(batch_size.max(1)) {
            let mut tape = Tape::new(&model.store);
            let (loss, n) = model.batch_nll(&mut tape, chunk, range)?;
            total += tape.scalar(loss);
            terms += n;
        }
    }
    if terms == 0 {
        return data_err("no likelihood terms to evaluate");
    }
    Ok(total / terms as f64)
}

/// Minimizes mean per-step NLL with Adam, evaluating validation NLL after each
/// epoch and restoring the best parameters at the end.
pub fn train(model: &mut Forecaster, train_set: &[Window], val_set: &[Window], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return config_err("training and validation partitions must be non-empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.store.snapshot();
    let mut curve = Vec::new();
    let mut step = 0usize;
    let mut epochs = 0usize;
    let mut final_train = f64::NAN;
    model.store.zero_grads();

    'epochs: for epoch in 0..config.max_epochs {
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for batch in batches(train_set, config.batch_size, &mut rng) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let refs: Vec<&Window> = batch.iter().map(|&i| &train_set[i]).collect();
            let (grads, nll) = {
                let mut tape = Tape::new(&model.store);
                let (sum, terms) = model.batch_nll(&mut tape, &refs, config.likelihood)?;
                let loss = tape.scale(sum, 1.0 / terms.max(1) as f64);
                let nll = tape.scalar(loss);
                if !nll.is_finite() {
                    return Err(Error::Divergence(format!("non-finite training NLL at step {step} (epoch {epoch})")));
                }
                (tape.backward(loss)?, nll)
            };
            model.store.accumulate(&grads);
            if !model.store.grads_finite() {
                return Err(Error::Divergence(format!("non-finite gradient at step {step} (epoch {epoch})")));
            }
            adam.step_with_lr(&mut model.store, config.lr_at(step));
            step += 1;
            epoch_sum += nll;
            epoch_steps += 1;
            curve.push(CurvePoint { step, train_nll: nll, val_nll: None });
        }
        if epoch_steps == 0 {
            break;
        }
        epochs = epoch + 1;
        final_train = epoch_sum / epoch_steps as f64;
        let val = mean_nll(model, val_set, config.likelihood, config.batch_size)?;
        if !val.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation NLL after epoch {epoch}")));
        }
        if let Some(last) = curve.last_mut() {
            last.val_nll = Some(val);
        }
        log::info!("epoch {epoch}: train nll {final_train:.4}, val nll {val:.4}");
        if stopper.observe(epoch, val) {
            best = model.store.snapshot();
        }
        if stopper.should_stop() || config.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }
    let Some(best_epoch) = stopper.best_epoch else {
        return config_err("no training step was taken");
    };
    model.store.restore(&best);
    Ok(TrainReport {
        curve,
        epochs,
        steps: step,
        best_epoch,
        best_val_nll: stopper.best,
        final_train_nll: final_train,
    })
}

// ---------------------------------------------------------------------------
// metrics

/// `R_ρ = 2 Σ D_ρ(x, x̂) / Σ |x|` with `D_ρ(x, x̂) = (ρ − 1{x ≤ x̂})(x − x̂)`.
pub fn rho_quantile_loss(actuals: &[f64], predictions: &[f64], rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return config_err(format!("rho = {rho} outside (0, 1)"));
    }
    if actuals.len() != predictions.len() {
        return data_err(format!("{} actuals vs {} predictions", actuals.len(), predictions.len()));
    }
    let denom: f64 = actuals.iter().map(|x| x.abs()).sum();
    if denom == 0.0 {
        return data_err("quantile loss is undefined when every actual is zero");
    }
    let num: f64 = actuals
        .iter()
        .zip(predictions)
        .map(|(&x, &p)| (rho - if x <= p { 1.0 } else { 0.0 }) * (x - p))
        .sum();
    Ok(2.0 * num / denom)
}

/// Per-step `⌈ρS⌉`-th order statistic of `paths` (`S × τ`).
pub fn empirical_quantile(paths: &[Vec<f64>], rho: f64) -> Result<Vec<f64>> {
    let s = paths.len();
    if s == 0 {
        return config_err("empirical quantile needs at least one sample");
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return config_err(format!("rho = {rho} outside (0, 1]"));
    }
    let tau = paths[0].len();
    if paths.iter().any(|p| p.len() != tau) {
        return data_err("sample paths differ in length");
    }
    let rank = ((rho * s as f64).ceil() as usize).clamp(1, s);
    let mut column = vec![0.0; s];
    Ok((0..tau)
        .map(|t| {
            for (c, p) in column.iter_mut().zip(paths) {
                *c = p[t];
            }
            column.sort_by(f64::total_cmp);
            column[rank - 1]
        })
        .collect())
}

/// Cyclic repeat of the last `period` observations.
pub fn seasonal_naive(history: &[f64], period: usize, tau: usize) -> Result<Vec<f64>> {
    if period == 0 || history.len() < period {
        return config_err(format!("history of {} points is shorter than period {period}", history.len()));
    }
    let base = history.len() - period;
    Ok((0..tau).map(|i| history[base + i % period]).collect())
}

/// Anything that can produce sample paths for a window; a point forecaster
/// returns a single path.
pub trait PathForecaster {
    /// Paths for steps `t0..t0+tau` of `window`, reading only `values[..t0]`.
    fn sample_paths(&self, window: &Window, tau: usize, seed: u64) -> Result<Vec<Vec<f64>>>;
}

/// A trained model sampled with a fixed number of paths.
pub struct SampledForecaster<'a> {
    pub model: &'a Forecaster,
    pub samples: usize,
}

impl PathForecaster for SampledForecaster<'_> {
    fn sample_paths(&self, window: &Window, tau: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.model.ancestral_forecast(window, tau, self.samples, seed)
    }
}

pub struct SeasonalNaive {
    pub period: usize,
}

impl PathForecaster for SeasonalNaive {
    fn sample_paths(&self, window: &Window, tau: usize, _seed: u64) -> Result<Vec<Vec<f64>>> {
        Ok(vec![seasonal_naive(window.history(), self.period, tau)?])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// One horizon at a time, each conditioned on the true data before it.
    Rolling,
    /// All `days × horizon` steps from a single origin.
    Direct,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rolling" => Ok(Self::Rolling),
            "direct" => Ok(Self::Direct),
            other => config_err(format!("unknown evaluation mode `{other}` (rolling|direct)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Conditioning length before every forecast origin.
    pub t0: usize,
    pub horizon: usize,
    pub days: usize,
    pub mode: EvalMode,
    /// Use this ID-embedding row for every series instead of the series' index.
    #[serde(default)]
    pub series_index: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLoss {
    pub segment: usize,
    pub r50: f64,
    pub r90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub horizon: usize,
    pub days: usize,
    pub points: usize,
    pub r50: f64,
    pub r90: f64,
    /// One entry per rolling origin (a single entry in direct mode).
    pub segments: Vec<SegmentLoss>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<RunMeta>,
}

/// Forecast windows for evaluation: the last `days × horizon` points of every
/// series form the test range.
pub fn evaluation_windows(set: &TimeSeriesSet, covariates: &[Vec<Vec<f64>>], config: &EvalConfig) -> Result<Vec<Vec<Window>>> {
    if config.horizon == 0 || config.days == 0 || config.t0 == 0 {
        return config_err("t0, horizon and days must be positive");
    }
    let test_len = config.horizon * config.days;
    let (origins, tau) = match config.mode {
        EvalMode::Rolling => (config.days, config.horizon),
        EvalMode::Direct => (1, test_len),
    };
    let mut per_origin = vec![Vec::new(); origins];
    for (i, s) in set.series.iter().enumerate() {
        if s.len() < test_len + config.t0 {
            return config_err(format!(
                "series `{}` has {} points; evaluation needs {} history plus {test_len} test points",
                s.id,
                s.len(),
                config.t0
            ));
        }
        let test_start = s.len() - test_len;
        for (d, slot) in per_origin.iter_mut().enumerate() {
            let origin = test_start + d * config.horizon;
            let mut w = Window::from_series(set, covariates, i, origin - config.t0, config.t0, tau)?;
            if let Some(k) = config.series_index {
                w = w.with_series_index(k);
            }
            slot.push(w);
        }
    }
    Ok(per_origin)
}

/// Rolling-origin (or direct) evaluation with pooled R₀.₅ and R₀.₉.
pub fn evaluate_rolling<F: PathForecaster + ?Sized>(
    model: &F,
    set: &TimeSeriesSet,
    covariates: &[Vec<Vec<f64>>],
    config: &EvalConfig,
) -> Result<EvalReport> {
    let windows = evaluation_windows(set, covariates, config)?;
    let (mut all_x, mut all_q50, mut all_q90) = (Vec::new(), Vec::new(), Vec::new());
    let mut segments = Vec::with_capacity(windows.len());
    let mut counter = 0u64;
    for (d, origin) in windows.iter().enumerate() {
        let (mut xs, mut q50s, mut q90s) = (Vec::new(), Vec::new(), Vec::new());
        for w in origin {
            let masked = Window { values: w.history().to_vec(), ..w.clone() };
            let paths = model.sample_paths(&masked, w.tau(), config.seed.wrapping_add(counter))?;
            counter += 1;
            xs.extend_from_slice(w.targets());
            q50s.extend(empirical_quantile(&paths, 0.5)?);
            q90s.extend(empirical_quantile(&paths, 0.9)?);
        }
        segments.push(SegmentLoss {
            segment: d,
            r50: rho_quantile_loss(&xs, &q50s, 0.5)?,
            r90: rho_quantile_loss(&xs, &q90s, 0.9)?,
        });
        all_x.extend(xs);
        all_q50.extend(q50s);
        all_q90.extend(q90s);
    }
    Ok(EvalReport {
        mode: config.mode,
        horizon: config.horizon,
        days: config.days,
        points: all_x.len(),
        r50: rho_quantile_loss(&all_x, &all_q50, 0.5)?,
        r90: rho_quantile_loss(&all_x, &all_q90, 0.9)?,
        segments,
        meta: None,
    })
}
