//! Vector-domain augmentations and mixup draws.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

/// Mixing coefficient and the batch-local partner it was paired with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    pub partner_index: usize,
}

/// Additive isotropic Gaussian noise.
pub fn weak_augment<R: Rng + ?Sized>(x: &[f64], sigma_w: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma_w * z
        })
        .collect()
}

/// Gaussian noise followed by independent coordinate dropout.
pub fn strong_augment<R: Rng + ?Sized>(x: &[f64], sigma_s: f64, p_drop: f64, rng: &mut R) -> Vec<f64> {
    debug_assert!((0.0..1.0).contains(&p_drop));
    x.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            let keep = rng.random::<f64>() >= p_drop;
            if keep {
                v + sigma_s * z
            } else {
                0.0
            }
        })
        .collect()
}

/// `Beta(alpha, alpha)` via `X / (X + Y)` with `X, Y ~ Gamma(alpha, 1)`.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha must be positive");
    let x: f64 = gamma.sample(rng);
    let y: f64 = gamma.sample(rng);
    if x + y == 0.0 {
        0.5
    } else {
        x / (x + y)
    }
}

/// `lambda·x_i + (1 − lambda)·x_j`.
pub fn mix(x_i: &[f64], x_j: &[f64], lambda: f64) -> Vec<f64> {
    debug_assert_eq!(x_i.len(), x_j.len());
    x_i.iter().zip(x_j).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect()
}

/// Interpolate two inputs with `lambda ~ Beta(alpha, alpha)`.
pub fn mixup_inputs<R: Rng + ?Sized>(x_i: &[f64], x_j: &[f64], alpha: f64, rng: &mut R) -> (Vec<f64>, f64) {
    let lambda = sample_beta(alpha, rng);
    (mix(x_i, x_j, lambda), lambda)
}
