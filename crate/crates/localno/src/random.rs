//! Portable random sampling helpers.
//!
//! All stochastic artifacts (datasets, initializations) draw from a seeded
//! ChaCha stream; normal variates use the Box-Muller transform so the byte
//! streams are reproducible across platforms and languages.

use rand::Rng;

/// Standard normal variate via Box-Muller on two uniform draws.
pub fn sample_standard_normal(rng: &mut impl Rng) -> f64 {
    // u1 in (0, 1] to keep the logarithm finite
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
