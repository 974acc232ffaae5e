use rand::Rng;

use sparsecast::trainer::rho_quantile_loss;

use super::rng;

/// Pinball loss written out case by case, independent of the library's indicator form.
pub fn brute_rho(actuals: &[f64], predictions: &[f64], rho: f64) -> f64 {
    let mut num = 0.0;
    let mut denom = 0.0;
    for i in 0..actuals.len() {
        let (x, p) = (actuals[i], predictions[i]);
        if x > p {
            num += rho * (x - p);
        } else {
            num += (1.0 - rho) * (p - x);
        }
        denom += x.abs();
    }
    2.0 * num / denom
}

/// Largest relative disagreement with [`brute_rho`] over random instances.
pub fn rho_oracle_max_error(seed: u64, instances: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = r.random_range(1..50);
        let rho = r.random_range(0.01..0.99);
        let actuals: Vec<f64> = (0..n).map(|_| r.random_range(-100.0..100.0)).collect();
        let preds: Vec<f64> = actuals
            .iter()
            .map(|&x| if r.random::<f64>() < 0.1 { x } else { x + r.random_range(-30.0..30.0) })
            .collect();
        let got = rho_quantile_loss(&actuals, &preds, rho).unwrap();
        let want = brute_rho(&actuals, &preds, rho);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    worst
}
