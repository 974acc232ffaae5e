use sparsecast::attention::AttentionConfig;
use sparsecast::datagen::{TimeSeriesSet, Window};
use sparsecast::forecaster::{Forecaster, LikelihoodRange, ModelConfig};
use sparsecast::sparsity::PatternSpec;
use sparsecast::trainer::{
    evaluate_rolling, train, EvalConfig, EvalMode, PathForecaster, SampledForecaster, SeasonalNaive, TrainConfig,
    TrainReport,
};

/// One window per series: `t0` history steps ending at `end - tau`, then `tau` targets.
/// Every series shares embedding row 0.
pub fn tail_windows(set: &TimeSeriesSet, t0: usize, tau: usize) -> Vec<Window> {
    (0..set.len())
        .map(|i| {
            let start = set.series[i].len() - t0 - tau;
            Window::from_series(set, &[], i, start, t0, tau).unwrap().with_series_index(0)
        })
        .collect()
}

pub struct Arch {
    pub pattern: PatternSpec,
    pub kernel: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
}

impl Arch {
    pub fn new(pattern: PatternSpec, kernel: usize) -> Self {
        Self { pattern, kernel, layers: 3, d_model: 32, heads: 4 }
    }
}

pub fn train_config(seed: u64, max_epochs: usize, patience: usize, max_steps: Option<usize>) -> TrainConfig {
    TrainConfig {
        max_epochs,
        patience,
        max_steps,
        likelihood: LikelihoodRange::ForecastOnly,
        ..TrainConfig::new(seed)
    }
}

pub fn fit(arch: &Arch, max_len: usize, train_w: &[Window], val_w: &[Window], config: &TrainConfig) -> (Forecaster, TrainReport) {
    let att = AttentionConfig::new(arch.d_model, arch.heads, arch.kernel, arch.pattern.clone());
    let mut model = Forecaster::new(ModelConfig::new(arch.layers, att, max_len, 1), config.seed).unwrap();
    let report = train(&mut model, train_w, val_w, config).unwrap();
    (model, report)
}

/// Pooled R0.5 over the last `tau` points of every series, conditioning on the `t0` before them.
pub fn tail_r50<F: PathForecaster + ?Sized>(forecaster: &F, set: &TimeSeriesSet, t0: usize, tau: usize, seed: u64) -> f64 {
    let config = EvalConfig { t0, horizon: tau, days: 1, mode: EvalMode::Direct, series_index: Some(0), seed };
    evaluate_rolling(forecaster, set, &[], &config).unwrap().r50
}

pub fn model_r50(model: &Forecaster, set: &TimeSeriesSet, t0: usize, tau: usize, samples: usize, seed: u64) -> f64 {
    tail_r50(&SampledForecaster { model, samples }, set, t0, tau, seed)
}

pub fn naive_r50(set: &TimeSeriesSet, t0: usize, tau: usize, period: usize) -> f64 {
    tail_r50(&SeasonalNaive { period }, set, t0, tau, 0)
}
