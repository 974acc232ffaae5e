mod common;

use std::cell::RefCell;

use proptest::prelude::*;

use sparsecast::attention::AttentionConfig;
use sparsecast::datagen::{generate_synthetic, Series, SyntheticConfig, TimeSeriesSet, Timestamp, Window};
use sparsecast::forecaster::{ancestral_sample, Forecaster, LikelihoodRange, ModelConfig};
use sparsecast::sparsity::PatternSpec;
use sparsecast::trainer::{
    empirical_quantile, evaluate_rolling, evaluation_windows, mean_nll, rho_quantile_loss, seasonal_naive, train,
    EarlyStopping, EvalConfig, EvalMode, PathForecaster, SeasonalNaive, TrainConfig,
};
use sparsecast::{Error, Result};

use common::metrics::rho_oracle_max_error;

/// Reads the answer off the full data set; fails if the window shows it any future value.
struct Oracle<'a> {
    set: &'a TimeSeriesSet,
    seen: RefCell<Vec<(usize, usize)>>,
}

impl PathForecaster for Oracle<'_> {
    fn sample_paths(&self, window: &Window, tau: usize, _seed: u64) -> Result<Vec<Vec<f64>>> {
        assert_eq!(window.values.len(), window.t0, "evaluation leaked values past the origin");
        let s = &self.set.series[window.series_index];
        let origin = window.start + window.t0;
        assert_eq!(&s.values[window.start..origin], &window.values[..]);
        self.seen.borrow_mut().push((window.series_index, origin));
        Ok(vec![s.values[origin..origin + tau].to_vec()])
    }
}

fn ramp_set(count: usize, len: usize) -> TimeSeriesSet {
    TimeSeriesSet::new(
        (0..count)
            .map(|i| Series {
                id: format!("s{i}"),
                timestamps: (0..len as i64).map(Timestamp::Tick).collect(),
                values: (0..len).map(|t| 5.0 + (t as f64 * 0.3 + i as f64).sin() * 3.0).collect(),
            })
            .collect(),
    )
    .unwrap()
}

fn tiny_task(series: usize, seed: u64) -> (Forecaster, Vec<Window>) {
    let data = generate_synthetic(&SyntheticConfig::new(24, series, 0, 0, seed)).unwrap();
    let windows: Vec<Window> = (0..series)
        .map(|i| Window::from_series(&data.set, &[], i, 0, 24, 24).unwrap())
        .collect();
    let att = AttentionConfig::new(16, 2, 3, PatternSpec::log_sparse());
    let model = Forecaster::new(ModelConfig::new(1, att, 48, series), seed).unwrap();
    (model, windows)
}

#[test]
fn quantile_loss_matches_brute_force() {
    assert!(rho_oracle_max_error(1, 1000) <= 1e-12);
    assert_eq!(rho_quantile_loss(&[10.0], &[8.0], 0.5).unwrap(), 0.2);
    assert_eq!(rho_quantile_loss(&[8.0], &[10.0], 0.9).unwrap(), 2.0 * ((0.9 - 1.0) * -2.0) / 8.0);
    assert!(matches!(rho_quantile_loss(&[0.0], &[1.0], 0.5), Err(Error::Data(_))));
}

#[test]
fn normal_quantile_from_samples() {
    let paths = ancestral_sample((), (0.0, 1.0), 1, 100_000, 5, |_, _| Ok((0.0, 1.0))).unwrap();
    let q = empirical_quantile(&paths, 0.9).unwrap()[0];
    assert!((q - 1.2816).abs() < 0.02, "{q}");
    let q = empirical_quantile(&paths, 0.5).unwrap()[0];
    assert!(q.abs() < 0.02, "{q}");
    let flat = vec![vec![3.5]; 7];
    for rho in [0.01, 0.5, 0.99] {
        assert_eq!(empirical_quantile(&flat, rho).unwrap(), vec![3.5]);
    }
}

#[test]
fn tiny_batch_overfits() {
    let (mut model, windows) = tiny_task(8, 3);
    let before = mean_nll(&model, &windows, LikelihoodRange::Full, 8).unwrap();
    let config = TrainConfig {
        lr: 1e-2,
        batch_size: 8,
        max_epochs: 400,
        patience: 400,
        ..TrainConfig::new(3)
    };
    let report = train(&mut model, &windows, &windows, &config).unwrap();
    let after = mean_nll(&model, &windows, LikelihoodRange::Full, 8).unwrap();
    assert!(after <= 0.5 * before, "{before} -> {after}");
    assert_eq!(report.curve.len(), report.steps);
}

#[test]
fn training_is_deterministic_and_restores_the_best_epoch() {
    let (model, windows) = tiny_task(20, 8);
    let (train_w, val_w) = windows.split_at(16);
    let config = TrainConfig { lr: 5e-3, batch_size: 4, max_epochs: 6, patience: 2, ..TrainConfig::new(11) };
    let mut a = model.clone();
    let mut b = model.clone();
    let ra = train(&mut a, train_w, val_w, &config).unwrap();
    let rb = train(&mut b, train_w, val_w, &config).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.store.snapshot(), b.store.snapshot());

    let vals: Vec<f64> = ra.curve.iter().filter_map(|p| p.val_nll).collect();
    assert_eq!(vals.len(), ra.epochs);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(ra.best_val_nll, min);
    let restored = mean_nll(&a, val_w, config.likelihood, config.batch_size).unwrap();
    assert_eq!(restored, min);

    let mut csv = Vec::new();
    ra.write_curve_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("step,train_nll,val_nll\n"));
    assert_eq!(text.lines().count(), ra.steps + 1);
}

#[test]
fn patience_one_stops_after_one_stale_epoch() {
    let mut stop = EarlyStopping::new(1);
    assert!(stop.observe(0, 1.0));
    assert!(!stop.should_stop());
    assert!(!stop.observe(1, 1.0));
    assert!(stop.should_stop());
    assert_eq!(stop.best_epoch, Some(0));
}

#[test]
fn training_rejects_empty_partitions_and_bad_configs() {
    let (mut model, windows) = tiny_task(4, 1);
    let config = TrainConfig::new(0);
    assert!(matches!(train(&mut model, &windows, &[], &config), Err(Error::Config(_))));
    let bad = TrainConfig { patience: 0, ..config };
    assert!(matches!(train(&mut model, &windows, &windows, &bad), Err(Error::Config(_))));
}

#[test]
fn rolling_and_direct_layouts() {
    let set = ramp_set(3, 48 + 7 * 24 + 5);
    let rolling = EvalConfig { t0: 48, horizon: 24, days: 7, mode: EvalMode::Rolling, series_index: None, seed: 0 };
    let windows = evaluation_windows(&set, &[], &rolling).unwrap();
    assert_eq!(windows.len(), 7);
    let test_start = set.series[0].len() - 168;
    for (d, origin) in windows.iter().enumerate() {
        for w in origin {
            assert_eq!(w.start + w.t0, test_start + 24 * d);
            assert_eq!((w.t0, w.tau()), (48, 24));
        }
    }
    let direct = EvalConfig { mode: EvalMode::Direct, ..rolling.clone() };
    let oracle = Oracle { set: &set, seen: RefCell::new(Vec::new()) };
    let report = evaluate_rolling(&oracle, &set, &[], &direct).unwrap();
    assert_eq!(report.points, 3 * 168);
    assert_eq!(report.segments.len(), 1);
    assert_eq!(report.r50, 0.0);

    let oracle = Oracle { set: &set, seen: RefCell::new(Vec::new()) };
    let report = evaluate_rolling(&oracle, &set, &[], &rolling).unwrap();
    assert_eq!((report.r50, report.r90), (0.0, 0.0));
    assert_eq!(report.segments.len(), 7);
    assert_eq!(oracle.seen.borrow().len(), 21);

    let short = EvalConfig { t0: 200, ..rolling };
    assert!(matches!(evaluate_rolling(&oracle, &set, &[], &short), Err(Error::Config(_))));
}

#[test]
fn seasonal_naive_reference() {
    let periodic: Vec<f64> = (0..96).map(|t| [1.0, 4.0, 2.0, 8.0][t % 4]).collect();
    let pred = seasonal_naive(&periodic[..72], 4, 24).unwrap();
    assert_eq!(rho_quantile_loss(&periodic[72..], &pred, 0.5).unwrap(), 0.0);

    let data = generate_synthetic(&SyntheticConfig { noise_std: 0.0, ..SyntheticConfig::new(96, 5, 0, 0, 2) }).unwrap();
    let cfg = EvalConfig { t0: 96, horizon: 24, days: 1, mode: EvalMode::Direct, series_index: None, seed: 0 };
    let report = evaluate_rolling(&SeasonalNaive { period: 24 }, &data.set, &[], &cfg).unwrap();
    assert!(report.r50 > 0.05, "{}", report.r50);
}

proptest! {
    #[test]
    fn median_loss_is_normalized_absolute_error(
        pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40),
    ) {
        let (x, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(x.iter().any(|v| *v != 0.0));
        let nae = x.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.iter().map(|v| v.abs()).sum::<f64>();
        let r = rho_quantile_loss(&x, &p, 0.5).unwrap();
        prop_assert!((r - nae).abs() <= 1e-12 * nae.max(1.0));
        prop_assert!(r >= 0.0);
    }

    #[test]
    fn quantiles_are_monotone_in_rho(
        samples in prop::collection::vec(-10.0f64..10.0, 1..60),
        a in 0.01f64..0.99,
        b in 0.01f64..0.99,
    ) {
        let paths: Vec<Vec<f64>> = samples.iter().map(|&v| vec![v]).collect();
        let (lo, hi) = (a.min(b), a.max(b));
        let ql = empirical_quantile(&paths, lo).unwrap()[0];
        let qh = empirical_quantile(&paths, hi).unwrap()[0];
        prop_assert!(ql <= qh);
        prop_assert!(samples.contains(&ql));
    }
}
