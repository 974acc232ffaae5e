//! Time-series data: the piecewise-sinusoid synthetic benchmark, CSV ingestion,
//! calendar covariates, weighted window sampling and the train/validation split.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timestamp {
    Tick(i64),
    DateTime(NaiveDateTime),
}

impl Timestamp {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(t) = s.parse::<i64>() {
            return Some(Self::Tick(t));
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Some(Self::DateTime(dt));
            }
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .ok()
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .map(Self::DateTime)
    }

    /// Ticks, or seconds since the epoch for calendar timestamps.
    fn ordinal(&self) -> i64 {
        match self {
            Self::Tick(t) => *t,
            Self::DateTime(dt) => dt.and_utc().timestamp(),
        }
    }

    fn same_kind(&self, other: &Self) -> bool {
        matches!((self, other), (Self::Tick(_), Self::Tick(_)) | (Self::DateTime(_), Self::DateTime(_)))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tick(t) => write!(f, "{t}"),
            Self::DateTime(dt) => write!(f, "{}", dt.format("%Y-%m-%dT%H:%M:%S")),
        }
    }
}

/// Spacing between consecutive observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplePeriod {
    Ticks(i64),
    Seconds(i64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub id: String,
    pub timestamps: Vec<Timestamp>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn start(&self) -> Option<Timestamp> {
        self.timestamps.first().copied()
    }

    pub fn period(&self) -> Option<SamplePeriod> {
        match self.timestamps.as_slice() {
            [a, b, ..] => {
                let d = b.ordinal() - a.ordinal();
                Some(match a {
                    Timestamp::Tick(_) => SamplePeriod::Ticks(d),
                    Timestamp::DateTime(_) => SamplePeriod::Seconds(d),
                })
            }
            _ => None,
        }
    }
}

/// Summary `T` (longest series), `M` (series count), `S` (sample period).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetMetadata {
    pub length: usize,
    pub count: usize,
    pub sample_period: Option<SamplePeriod>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeSeriesSet {
    pub series: Vec<Series>,
}

impl TimeSeriesSet {
    pub fn new(series: Vec<Series>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, s) in series.iter().enumerate() {
            if seen.insert(s.id.clone(), i).is_some() {
                return data_err(format!("duplicate series id `{}`", s.id));
            }
            if s.timestamps.len() != s.values.len() {
                return data_err(format!("series `{}` has mismatched timestamps and values", s.id));
            }
        }
        Ok(Self { series })
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn metadata(&self) -> SetMetadata {
        SetMetadata {
            length: self.series.iter().map(Series::len).max().unwrap_or(0),
            count: self.series.len(),
            sample_period: self.series.iter().find_map(Series::period),
        }
    }

    pub fn get(&self, id: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.id == id)
    }
}

// ---------------------------------------------------------------------------
// synthetic benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Conditioning length; the forecast segment is `[t0, t0 + tau)`.
    pub t0: usize,
    #[serde(default = "default_tau")]
    pub tau: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude_max: f64,
    pub seed: u64,
}

fn default_tau() -> usize {
    24
}
fn default_noise() -> f64 {
    1.0
}
fn default_amplitude() -> f64 {
    60.0
}

impl SyntheticConfig {
    pub fn new(t0: usize, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Self {
        Self {
            t0,
            tau: default_tau(),
            n_train,
            n_val,
            n_test,
            noise_std: default_noise(),
            amplitude_max: default_amplitude(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t0 < 24 || !self.t0.is_multiple_of(12) {
            return config_err(format!("t0 = {} must be >= 24 and a multiple of 12", self.t0));
        }
        if self.tau == 0 {
            return config_err("tau must be positive");
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return config_err("noise_std must be a finite non-negative number");
        }
        if self.amplitude_max < 0.0 || !self.amplitude_max.is_finite() {
            return config_err("amplitude_max must be a finite non-negative number");
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amplitudes {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

/// Noise-free value of the piecewise signal at integer position `x`.
pub fn synthetic_signal(x: usize, t0: usize, amps: &Amplitudes) -> f64 {
    let xf = x as f64;
    let amplitude = match x {
        _ if x < 12 => amps.a1,
        _ if x < 24 => amps.a2,
        _ if x < t0 => amps.a3,
        _ => return amps.a4 * (PI * xf / 12.0).sin() + 72.0,
    };
    amplitude * (PI * xf / 6.0).sin() + 72.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub config: SyntheticConfig,
    /// Train series first, then validation, then test.
    pub set: TimeSeriesSet,
    pub amplitudes: Vec<Amplitudes>,
}

impl SyntheticData {
    fn subset(&self, range: std::ops::Range<usize>) -> TimeSeriesSet {
        TimeSeriesSet {
            series: self.set.series[range].to_vec(),
        }
    }

    pub fn train(&self) -> TimeSeriesSet {
        self.subset(0..self.config.n_train)
    }

    pub fn val(&self) -> TimeSeriesSet {
        let start = self.config.n_train;
        self.subset(start..start + self.config.n_val)
    }

    pub fn test(&self) -> TimeSeriesSet {
        let start = self.config.n_train + self.config.n_val;
        self.subset(start..start + self.config.n_test)
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let length = config.t0 + config.tau;
    let mut series = Vec::with_capacity(config.total());
    let mut amplitudes = Vec::with_capacity(config.total());
    let splits = [("train", config.n_train), ("val", config.n_val), ("test", config.n_test)];
    for (split, count) in splits {
        for i in 0..count {
            let a1 = rng.random::<f64>() * config.amplitude_max;
            let a2 = rng.random::<f64>() * config.amplitude_max;
            let a3 = rng.random::<f64>() * config.amplitude_max;
            let amps = Amplitudes { a1, a2, a3, a4: a1.max(a2) };
            let values = (0..length)
                .map(|x| synthetic_signal(x, config.t0, &amps) + noise.sample(&mut rng))
                .collect();
            series.push(Series {
                id: format!("{split}-{i:05}"),
                timestamps: (0..length as i64).map(Timestamp::Tick).collect(),
                values,
            });
            amplitudes.push(amps);
        }
    }
    Ok(SyntheticData {
        config: config.clone(),
        set: TimeSeriesSet::new(series)?,
        amplitudes,
    })
}

// ---------------------------------------------------------------------------
// covariates

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeFeature {
    Year,
    Month,
    DayOfWeek,
    HourOfDay,
    MinuteOfHour,
    /// Index distance from the series' first observation.
    Age,
}

impl TimeFeature {
    fn raw(self, ts: &Timestamp, index: usize) -> Result<f64> {
        if self == Self::Age {
            return Ok(index as f64);
        }
        let Timestamp::DateTime(dt) = ts else {
            return config_err(format!("{self:?} needs calendar timestamps, got integer ticks"));
        };
        Ok(match self {
            Self::Year => dt.year() as f64,
            Self::Month => dt.month0() as f64,
            Self::DayOfWeek => dt.weekday().num_days_from_monday() as f64,
            Self::HourOfDay => dt.hour() as f64,
            Self::MinuteOfHour => dt.minute() as f64,
            Self::Age => unreachable!(),
        })
    }

    /// Calendar features only vary when the sample period is finer than their unit.
    fn check_period(self, period: Option<SamplePeriod>) -> Result<()> {
        let limit = match self {
            Self::Age | Self::Year => return Ok(()),
            Self::Month => 28 * 86_400,
            Self::DayOfWeek => 7 * 86_400,
            Self::HourOfDay => 86_400,
            Self::MinuteOfHour => 3_600,
        };
        match period {
            Some(SamplePeriod::Ticks(_)) => {
                config_err(format!("{self:?} needs calendar timestamps, got integer ticks"))
            }
            Some(SamplePeriod::Seconds(s)) if s >= limit => {
                config_err(format!("{self:?} is constant at a sample period of {s} s"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

/// Selected time features and their training-range normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub features: Vec<TimeFeature>,
    pub stats: Vec<FeatureStats>,
}

impl CovariateSpec {
    pub fn none() -> Self {
        Self {
            features: Vec::new(),
            stats: Vec::new(),
        }
    }

    /// Fits mean and standard deviation of each feature over training ranges,
    /// one timestamp slice per series starting at that series' first observation.
    pub fn fit(features: &[TimeFeature], training: &[&[Timestamp]]) -> Result<Self> {
        let mut stats = Vec::with_capacity(features.len());
        for &f in features {
            let mut n = 0usize;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for ts in training {
                f.check_period(period_of(ts))?;
                for (i, t) in ts.iter().enumerate() {
                    let v = f.raw(t, i)?;
                    n += 1;
                    sum += v;
                    sum_sq += v * v;
                }
            }
            if n == 0 {
                return data_err("no training timestamps to fit covariate statistics");
            }
            let mean = sum / n as f64;
            let var = (sum_sq / n as f64 - mean * mean).max(0.0);
            // a constant feature would divide by zero; keep it centred instead
            let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            stats.push(FeatureStats { mean, std });
        }
        Ok(Self {
            features: features.to_vec(),
            stats,
        })
    }

    pub fn width(&self) -> usize {
        self.features.len()
    }
}

fn period_of(ts: &[Timestamp]) -> Option<SamplePeriod> {
    match ts {
        [a @ Timestamp::Tick(_), b, ..] => Some(SamplePeriod::Ticks(b.ordinal() - a.ordinal())),
        [a, b, ..] => Some(SamplePeriod::Seconds(b.ordinal() - a.ordinal())),
        _ => None,
    }
}

/// Normalized covariate rows, one per timestamp; `timestamps[0]` is the series start.
pub fn featurize_covariates(timestamps: &[Timestamp], spec: &CovariateSpec) -> Result<Vec<Vec<f64>>> {
    if timestamps.windows(2).any(|w| w[1] <= w[0] || !w[0].same_kind(&w[1])) {
        return data_err("timestamps must be strictly increasing and of one kind");
    }
    for f in &spec.features {
        f.check_period(period_of(timestamps))?;
    }
    timestamps
        .iter()
        .enumerate()
        .map(|(i, t)| {
            spec.features
                .iter()
                .zip(&spec.stats)
                .map(|(f, s)| Ok((f.raw(t, i)? - s.mean) / s.std))
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub id_column: String,
    pub timestamp_column: String,
    pub value_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            id_column: "series_id".into(),
            timestamp_column: "timestamp".into(),
            value_column: "value".into(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TimeSeriesSet> {
    read_csv(std::fs::File::open(path)?, schema)
}

/// Parses long-format CSV; series keep their first-appearance order and rows
/// are sorted by timestamp within each series.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<TimeSeriesSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Ok(TimeSeriesSet::default());
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column `{name}`") })
    };
    let (ic, tc, vc) = (column(&schema.id_column)?, column(&schema.timestamp_column)?, column(&schema.value_column)?);

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(Timestamp, f64, u64)>> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| {
            record
                .get(i)
                .ok_or_else(|| Error::Parse { line, message: format!("missing field {}", i + 1) })
        };
        let id = field(ic)?.to_string();
        let ts = Timestamp::parse(field(tc)?)
            .ok_or_else(|| Error::Parse { line, message: format!("bad timestamp `{}`", field(tc).unwrap_or("")) })?;
        let raw = field(vc)?;
        let value: f64 = raw
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("bad value `{raw}`") })?;
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((ts, value, line));
    }

    let mut series = Vec::with_capacity(order.len());
    for id in order {
        let mut points = rows.remove(&id).expect("recorded id");
        points.sort_by_key(|p| p.0);
        for w in points.windows(2) {
            if !w[0].0.same_kind(&w[1].0) {
                return data_err(format!("series `{id}` mixes tick and calendar timestamps (line {})", w[1].2));
            }
            if w[0].0 == w[1].0 {
                return data_err(format!("series `{id}` repeats timestamp {} (line {})", w[1].0, w[1].2));
            }
        }
        series.push(Series {
            id,
            timestamps: points.iter().map(|p| p.0).collect(),
            values: points.iter().map(|p| p.1).collect(),
        });
    }
    TimeSeriesSet::new(series)
}

pub fn write_csv<W: Write>(set: &TimeSeriesSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["series_id", "timestamp", "value"])?;
    for s in &set.series {
        for (t, v) in s.timestamps.iter().zip(&s.values) {
            w.write_record([s.id.as_str(), &t.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(set: &TimeSeriesSet, path: impl AsRef<Path>) -> Result<()> {
    write_csv(set, std::fs::File::create(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

/// Collapses every `factor` consecutive points into one, labelled with the
/// first timestamp of the group. A trailing partial group is dropped.
pub fn aggregate(set: &TimeSeriesSet, factor: usize, how: Aggregation) -> Result<TimeSeriesSet> {
    if factor == 0 {
        return config_err("aggregation factor must be positive");
    }
    let series = set
        .series
        .iter()
        .map(|s| {
            let groups = s.len() / factor;
            let values = (0..groups)
                .map(|g| {
                    let total: f64 = s.values[g * factor..(g + 1) * factor].iter().sum();
                    match how {
                        Aggregation::Sum => total,
                        Aggregation::Mean => total / factor as f64,
                    }
                })
                .collect();
            Series {
                id: s.id.clone(),
                timestamps: (0..groups).map(|g| s.timestamps[g * factor]).collect(),
                values,
            }
        })
        .collect();
    TimeSeriesSet::new(series)
}

// ---------------------------------------------------------------------------
// windows

/// A training or evaluation instance: `t0` conditioning points followed by
/// `tau` targets, with covariates for every position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub series_id: String,
    /// Row of the ID embedding used for this window.
    pub series_index: usize,
    /// Offset of the first value within its series.
    pub start: usize,
    pub t0: usize,
    pub values: Vec<f64>,
    pub covariates: Vec<Vec<f64>>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tau(&self) -> usize {
        self.values.len() - self.t0
    }

    pub fn history(&self) -> &[f64] {
        &self.values[..self.t0]
    }

    pub fn targets(&self) -> &[f64] {
        &self.values[self.t0..]
    }

    pub fn with_series_index(mut self, index: usize) -> Self {
        self.series_index = index;
        self
    }

    /// Cuts a window out of series `index` of `set`.
    pub fn from_series(
        set: &TimeSeriesSet,
        covariates: &[Vec<Vec<f64>>],
        index: usize,
        start: usize,
        t0: usize,
        tau: usize,
    ) -> Result<Self> {
        let s = &set.series[index];
        let end = start + t0 + tau;
        if end > s.len() {
            return data_err(format!("window {start}..{end} exceeds series `{}` of length {}", s.id, s.len()));
        }
        let cov = covariates.get(index).map(Vec::as_slice).unwrap_or(&[]);
        let covariates = if cov.is_empty() {
            vec![Vec::new(); t0 + tau]
        } else if cov.len() < end {
            return data_err(format!("series `{}` lacks covariates up to position {end}", s.id));
        } else {
            cov[start..end].to_vec()
        };
        Ok(Self {
            series_id: s.id.clone(),
            series_index: index,
            start,
            t0,
            values: s.values[start..end].to_vec(),
            covariates,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub t0: usize,
    pub tau: usize,
    /// Points at the end of every series reserved for testing; windows never reach them.
    pub holdout: usize,
}

/// Draws `count` windows with replacement, with probability proportional to
/// `1 + mean |z|` over the window.
pub fn sample_windows(
    set: &TimeSeriesSet,
    covariates: &[Vec<Vec<f64>>],
    config: WindowConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Window>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let span = config.t0 + config.tau;
    if span == 0 {
        return config_err("window length must be positive");
    }
    let mut candidates = Vec::new();
    let mut weights = Vec::new();
    for (i, s) in set.series.iter().enumerate() {
        let usable = s.len().saturating_sub(config.holdout);
        if usable < span {
            log::warn!("skipping series `{}`: {} usable points < window length {span}", s.id, usable);
            continue;
        }
        // running sum for O(1) window means
        let mut prefix = Vec::with_capacity(usable + 1);
        prefix.push(0.0);
        for v in &s.values[..usable] {
            prefix.push(prefix.last().unwrap() + v.abs());
        }
        for start in 0..=usable - span {
            candidates.push((i, start));
            weights.push(1.0 + (prefix[start + span] - prefix[start]) / span as f64);
        }
    }
    if candidates.is_empty() {
        return data_err("no series is long enough to provide a window");
    }
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Data(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (i, start) = candidates[dist.sample(&mut rng)];
            Window::from_series(set, covariates, i, start, config.t0, config.tau)
        })
        .collect()
}

/// Seeded 90/10 partition.
pub fn split_train_val(windows: Vec<Window>, seed: u64) -> Result<(Vec<Window>, Vec<Window>)> {
    let n = windows.len();
    if n < 10 {
        return config_err(format!("need at least 10 windows to split, got {n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 9 / 10;
    let mut slots: Vec<Option<Window>> = windows.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().expect("each index once")).collect::<Vec<_>>();
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..]);
    Ok((train, val))
}
