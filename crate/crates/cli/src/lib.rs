//! Experiment orchestration behind the `sparsecast` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sparsecast::attention::AttentionConfig;
use sparsecast::datagen::{
    aggregate, featurize_covariates, generate_synthetic, load_csv, sample_windows, save_csv, split_train_val,
    Aggregation, CovariateSpec, CsvSchema, SyntheticConfig, SyntheticData, TimeFeature, TimeSeriesSet, Window,
    WindowConfig,
};
use sparsecast::forecaster::{summarize_paths, write_forecast_csv, Forecaster, LikelihoodRange, ModelConfig};
use sparsecast::sparsity::{
    attended_budget, build_mask, count_paths, log_sparse_coverage_bound, min_layers_full_coverage,
    reachability_report, MemoryBudget, PatternKind, PatternSpec, SparsityError,
};
use sparsecast::trainer::{
    evaluate_rolling, evaluation_windows, train, EvalConfig, EvalMode, EvalReport, RunMeta, SampledForecaster,
    SeasonalNaive, TrainConfig, TrainReport,
};
use sparsecast::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Self::Config(m),
            Error::Sparsity(e) => Self::Config(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<SparsityError> for CliError {
    fn from(e: SparsityError) -> Self {
        match e {
            SparsityError::Io(e) => Self::Runtime(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv(CsvSource),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateSpec {
    pub factor: usize,
    pub how: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(default)]
    pub aggregate: Option<AggregateSpec>,
    #[serde(default)]
    pub covariates: Vec<TimeFeature>,
    /// Conditioning length of training and evaluation windows.
    pub t0: usize,
    /// Number of training windows drawn before the 90/10 split.
    #[serde(default = "default_window_count")]
    pub windows: usize,
}

fn default_window_count() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub kernel_size: usize,
    pub d_ff: Option<usize>,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { layers: 3, d_model: 32, heads: 4, kernel_size: 3, d_ff: None, embed_dim: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup: usize,
    pub max_steps: Option<usize>,
    /// Defaults to the forecast segment for synthetic data and all steps otherwise.
    pub likelihood: Option<LikelihoodRange>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(0);
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            warmup: t.warmup,
            max_steps: None,
            likelihood: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub mode: EvalMode,
    pub horizon: usize,
    pub days: usize,
    pub samples: usize,
    /// Period of the seasonal-naive reference forecast.
    pub season: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { mode: EvalMode::Rolling, horizon: 24, days: 7, samples: 100, season: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "PatternSpec::log_sparse")]
    pub pattern: PatternSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Command-line values that replace fields of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub pattern: Option<PatternKind>,
    pub kernel_size: Option<usize>,
    pub layers: Option<usize>,
    pub mode: Option<EvalMode>,
    pub samples: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = Some(v);
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(kind) = o.pattern {
            self.pattern.kind = kind;
        }
        if let Some(v) = o.kernel_size {
            self.model.kernel_size = v;
        }
        if let Some(v) = o.layers {
            self.model.layers = v;
        }
        if let Some(v) = o.mode {
            self.eval.mode = v;
        }
        if let Some(v) = o.samples {
            self.eval.samples = v;
        }
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.seed.ok_or_else(|| CliError::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn out_dir(&self) -> CliResult<PathBuf> {
        self.out.clone().ok_or_else(|| CliError::Config("an output directory is required (config `out` or --out)".into()))
    }

    /// Hex SHA-256 of the canonical JSON of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    fn synthetic(&self) -> Option<&SyntheticConfig> {
        match &self.data {
            DataSource::Synthetic(s) => Some(s),
            DataSource::Csv(_) => None,
        }
    }

    fn t0_tau(&self) -> (usize, usize) {
        match &self.data {
            DataSource::Synthetic(s) => (s.t0, s.tau),
            DataSource::Csv(c) => (c.t0, self.eval.horizon),
        }
    }

    /// Longest window the model will see, training or evaluation.
    fn max_len(&self) -> usize {
        let (t0, tau) = self.t0_tau();
        match (&self.data, self.eval.mode) {
            (DataSource::Csv(_), EvalMode::Direct) => t0 + tau.max(self.eval.horizon * self.eval.days),
            _ => t0 + tau,
        }
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> CliResult<()> {
        let m = &self.model;
        if m.layers == 0 || m.d_model < 2 || m.heads == 0 || m.kernel_size == 0 || m.embed_dim == 0 {
            return Err(CliError::Config("model sizes must be positive (d_model >= 2)".into()));
        }
        if !m.d_model.is_multiple_of(m.heads) {
            return Err(CliError::Config(format!("d_model {} is not divisible by {} heads", m.d_model, m.heads)));
        }
        self.pattern.validate(self.max_len()).map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config(0).validate()?;
        if self.eval.samples == 0 || self.eval.horizon == 0 || self.eval.days == 0 || self.eval.season == 0 {
            return Err(CliError::Config("samples, horizon, days and season must be positive".into()));
        }
        match &self.data {
            DataSource::Synthetic(s) => s.validate()?,
            DataSource::Csv(c) => {
                if c.t0 == 0 {
                    return Err(CliError::Config("t0 must be positive".into()));
                }
                if !c.path.exists() {
                    return Err(CliError::Config(format!("data file {} does not exist", c.path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        let default_range = if self.synthetic().is_some() {
            LikelihoodRange::ForecastOnly
        } else {
            LikelihoodRange::Full
        };
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            warmup: t.warmup,
            max_steps: t.max_steps,
            likelihood: t.likelihood.unwrap_or(default_range),
            seed,
        }
    }
}

// ---------------------------------------------------------------------------
// data preparation

/// Everything a run needs after generation or ingestion.
pub struct Prepared {
    pub model_config: ModelConfig,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test_set: TimeSeriesSet,
    pub test_covariates: Vec<Vec<Vec<f64>>>,
    pub eval: EvalConfig,
    pub synthetic: Option<SyntheticData>,
}

fn whole_series_windows(set: &TimeSeriesSet, t0: usize, tau: usize) -> sparsecast::Result<Vec<Window>> {
    (0..set.len())
        .map(|i| Window::from_series(set, &[], i, 0, t0, tau).map(|w| w.with_series_index(0)))
        .collect()
}

pub fn prepare(config: &ExperimentConfig, seed: u64) -> CliResult<Prepared> {
    config.validate()?;
    let m = &config.model;
    let mut attention = AttentionConfig::new(m.d_model, m.heads, m.kernel_size, config.pattern.clone());
    if let Some(d_ff) = m.d_ff {
        attention.d_ff = d_ff;
    }
    match &config.data {
        DataSource::Synthetic(s) => {
            let data = generate_synthetic(s)?;
            let train = whole_series_windows(&data.train(), s.t0, s.tau)?;
            let val = whole_series_windows(&data.val(), s.t0, s.tau)?;
            let mut model_config = ModelConfig::new(m.layers, attention, s.t0 + s.tau, 1);
            model_config.embed_dim = m.embed_dim;
            Ok(Prepared {
                model_config,
                train,
                val,
                test_set: data.test(),
                test_covariates: Vec::new(),
                eval: EvalConfig { t0: s.t0, horizon: s.tau, days: 1, mode: EvalMode::Rolling, series_index: Some(0), seed },
                synthetic: Some(data),
            })
        }
        DataSource::Csv(c) => {
            let mut set = load_csv(&c.path, &c.schema)?;
            if let Some(a) = c.aggregate {
                set = aggregate(&set, a.factor, a.how)?;
            }
            if set.is_empty() {
                return Err(CliError::Runtime(format!("{} holds no series", c.path.display())));
            }
            let holdout = config.eval.horizon * config.eval.days;
            let training: Vec<_> = set
                .series
                .iter()
                .map(|s| &s.timestamps[..s.len().saturating_sub(holdout)])
                .filter(|t| !t.is_empty())
                .collect();
            let spec = if c.covariates.is_empty() {
                CovariateSpec::none()
            } else {
                CovariateSpec::fit(&c.covariates, &training)?
            };
            let covs = set
                .series
                .iter()
                .map(|s| featurize_covariates(&s.timestamps, &spec))
                .collect::<sparsecast::Result<Vec<_>>>()?;
            let wc = WindowConfig { t0: c.t0, tau: config.eval.horizon, holdout };
            let windows = sample_windows(&set, &covs, wc, c.windows, seed)?;
            let (train, val) = split_train_val(windows, seed.wrapping_add(1))?;
            let mut model_config = ModelConfig::new(m.layers, attention, config.max_len(), set.len());
            model_config.embed_dim = m.embed_dim;
            model_config.covariates = spec;
            let e = &config.eval;
            Ok(Prepared {
                model_config,
                train,
                val,
                test_set: set,
                test_covariates: covs,
                eval: EvalConfig { t0: c.t0, horizon: e.horizon, days: e.days, mode: e.mode, series_index: None, seed },
                synthetic: None,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// commands

const MODEL_DIR: &str = "model";

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn synth(config: &ExperimentConfig) -> CliResult<PathBuf> {
    let Some(s) = config.synthetic() else {
        return Err(CliError::Config("`synth` needs a synthetic data source".into()));
    };
    let mut s = s.clone();
    if let Some(seed) = config.seed {
        s.seed = seed;
    }
    let out = config.out_dir()?;
    fs::create_dir_all(&out)?;
    let data = generate_synthetic(&s)?;
    save_csv(&data.set, out.join("synthetic.csv"))?;
    write_json(&out.join("amplitudes.json"), &data.amplitudes)?;
    Ok(out)
}

pub fn train_command(config: &ExperimentConfig) -> CliResult<TrainReport> {
    let seed = config.seed()?;
    let out = config.out_dir()?;
    let prepared = prepare(config, seed)?;
    let mut model = Forecaster::new(prepared.model_config.clone(), seed)?;
    let report = train(&mut model, &prepared.train, &prepared.val, &config.train_config(seed))?;
    fs::create_dir_all(&out)?;
    model.save(out.join(MODEL_DIR))?;
    report.write_curve_csv(fs::File::create(out.join("curve.csv"))?)?;
    write_json(&out.join("train_report.json"), &report)?;
    write_json(&out.join("config.json"), config)?;
    Ok(report)
}

fn load_model(out: &Path) -> CliResult<Forecaster> {
    let dir = out.join(MODEL_DIR);
    if !dir.exists() {
        return Err(CliError::Config(format!("no trained model in {} (run `train` first)", dir.display())));
    }
    Ok(Forecaster::load(dir)?)
}

/// Evaluates the trained model and the seasonal-naive reference.
pub fn eval_command(config: &ExperimentConfig) -> CliResult<(EvalReport, EvalReport)> {
    let started = Instant::now();
    let seed = config.seed()?;
    let out = config.out_dir()?;
    let prepared = prepare(config, seed)?;
    let model = load_model(&out)?;
    let sampler = SampledForecaster { model: &model, samples: config.eval.samples };
    let mut report = evaluate_rolling(&sampler, &prepared.test_set, &prepared.test_covariates, &prepared.eval)?;
    let naive = SeasonalNaive { period: config.eval.season };
    let baseline = evaluate_rolling(&naive, &prepared.test_set, &prepared.test_covariates, &prepared.eval)?;
    report.meta = Some(RunMeta { seed, config_hash: config.hash(), runtime_secs: started.elapsed().as_secs_f64() });
    fs::create_dir_all(&out)?;
    write_json(&out.join("eval_report.json"), &report)?;
    write_json(&out.join("baseline_report.json"), &baseline)?;
    Ok((report, baseline))
}

/// Sample-path summaries for every evaluation origin, written as `forecast.csv`.
pub fn forecast_command(config: &ExperimentConfig) -> CliResult<PathBuf> {
    let seed = config.seed()?;
    let out = config.out_dir()?;
    let prepared = prepare(config, seed)?;
    let model = load_model(&out)?;
    let origins = evaluation_windows(&prepared.test_set, &prepared.test_covariates, &prepared.eval)?;
    let mut records = Vec::new();
    let mut counter = 0u64;
    for origin in &origins {
        for w in origin {
            let paths = model.ancestral_forecast(w, w.tau(), config.eval.samples, seed.wrapping_add(counter))?;
            counter += 1;
            let base = w.start + w.t0;
            records.extend(summarize_paths(&w.series_id, &paths)?.into_iter().map(|mut r| {
                r.step += base;
                r
            }));
        }
    }
    fs::create_dir_all(&out)?;
    let path = out.join("forecast.csv");
    write_forecast_csv(&records, fs::File::create(&path)?)?;
    Ok(path)
}

/// Attention matrices of the first test window, trained model if present.
pub fn export_attention_command(config: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    let seed = config.seed()?;
    let out = config.out_dir()?;
    let prepared = prepare(config, seed)?;
    let model = if out.join(MODEL_DIR).exists() {
        load_model(&out)?
    } else {
        log::warn!("no trained model in {}; exporting an untrained one", out.display());
        Forecaster::new(prepared.model_config.clone(), seed)?
    };
    let origins = evaluation_windows(&prepared.test_set, &prepared.test_covariates, &prepared.eval)?;
    let window = origins
        .first()
        .and_then(|o| o.first())
        .ok_or_else(|| CliError::Runtime("no evaluation window to export".into()))?;
    Ok(model.export_attention(window, out.join("attention"))?)
}

/// Train, evaluate and forecast in one go.
pub fn run_experiment(config: &ExperimentConfig) -> CliResult<PathBuf> {
    config.validate()?;
    config.seed()?;
    let out = config.out_dir()?;
    train_command(config)?;
    eval_command(config)?;
    forecast_command(config)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// mask analysis

#[derive(Debug, Clone, Default)]
pub struct MaskOptions {
    pub length: usize,
    /// Check full coverage after `⌊log₂ L⌋ + 1` layers.
    pub verify_coverage: bool,
    /// Path counts for these `(j, l)` pairs, over `layers` steps.
    pub paths: Vec<(usize, usize)>,
    pub layers: Option<usize>,
    pub dense_csv: Option<PathBuf>,
    pub coordinate_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathCount {
    pub j: usize,
    pub l: usize,
    pub layers: usize,
    /// Decimal, since counts can exceed 64 bits.
    pub count: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageCheck {
    pub layers: usize,
    pub fully_covered: bool,
    pub uncovered_pairs: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskReport {
    pub pattern: String,
    pub length: usize,
    pub budget: MemoryBudget,
    pub min_layers_full_coverage: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageCheck>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub path_counts: Vec<PathCount>,
}

pub fn mask_report(spec: &PatternSpec, options: &MaskOptions) -> CliResult<MaskReport> {
    let length = options.length;
    let mask = build_mask(spec, length)?;
    if let Some(p) = &options.dense_csv {
        mask.write_dense_csv(p)?;
    }
    if let Some(p) = &options.coordinate_csv {
        mask.write_coordinate_list(p)?;
    }
    let bound = log_sparse_coverage_bound(length);
    let coverage = if options.verify_coverage {
        let r = reachability_report(&mask, bound)?;
        let message = if r.fully_covered {
            format!("covered within {bound} layers")
        } else {
            format!("not covered within {bound} layers ({} pairs unreached)", r.uncovered_pairs.len())
        };
        Some(CoverageCheck { layers: bound, fully_covered: r.fully_covered, uncovered_pairs: r.uncovered_pairs.len(), message })
    } else {
        None
    };
    let layers = options.layers.unwrap_or(bound);
    let path_counts = options
        .paths
        .iter()
        .map(|&(j, l)| {
            Ok(PathCount { j, l, layers, count: count_paths(&mask, j, l, layers)?.to_string() })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(MaskReport {
        pattern: spec.to_string(),
        length,
        budget: attended_budget(&mask),
        min_layers_full_coverage: min_layers_full_coverage(&mask),
        coverage,
        path_counts,
    })
}

/// Parses `j:l` pairs.
pub fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected j:l, got `{s}`"))?;
    let j = a.trim().parse().map_err(|_| format!("bad cell `{a}`"))?;
    let l = b.trim().parse().map_err(|_| format!("bad cell `{b}`"))?;
    Ok((j, l))
}
