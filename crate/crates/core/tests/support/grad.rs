//! Central finite differences along random parameter directions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error between the analytic directional derivative `g·d` and the
/// central difference `(L(θ + h d) − L(θ − h d)) / 2h`, for `n` random unit
/// directions `d`. Returns the worst relative error.
pub fn directional_check(
    theta: &[f64],
    grad: &[f64],
    n: usize,
    h: f64,
    seed: u64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(theta.len(), grad.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let mut d: Vec<f64> = (0..theta.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);
        let plus: Vec<f64> = theta.iter().zip(&d).map(|(t, v)| t + h * v).collect();
        let minus: Vec<f64> = theta.iter().zip(&d).map(|(t, v)| t - h * v).collect();
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let analytic: f64 = grad.iter().zip(&d).map(|(g, v)| g * v).sum();
        let scale = numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max((numeric - analytic).abs() / scale);
    }
    worst
}
