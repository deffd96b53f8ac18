//! Seeded synthetic images for smoke runs and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imgio::ImageTensor;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Sum of a few plane waves around mid-grey, clamped to `[0, 1]`.
/// Wavelengths lie in `[min_wavelength, max_wavelength)` pixels; each wave is
/// strongest in one channel.
pub fn wave_texture<T: Real>(
    seed: u64,
    height: usize,
    width: usize,
    n_waves: usize,
    min_wavelength: f64,
    max_wavelength: f64,
) -> ImageTensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..n_waves)
        .map(|_| {
            let k = std::f64::consts::TAU / rng.random_range(min_wavelength..max_wavelength);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.05..0.15);
            (k * theta.cos(), k * theta.sin(), phase, amp, rng.random_range(0..3))
        })
        .collect();
    let mut t = Tensor::zeros(&[1, 3, height, width]);
    for c in 0..3 {
        for y in 0..height {
            for x in 0..width {
                let mut v = 0.5;
                for &(kx, ky, phase, amp, ch) in &waves {
                    let a = if ch == c { amp } else { 0.5 * amp };
                    v += a * (kx * x as f64 + ky * y as f64 + phase).sin();
                }
                *t.at_mut(0, c, y, x) = T::lit(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::rgb(t)
}

/// [`wave_texture`] with four waves of wavelength 10 to 24 pixels: smooth
/// enough that a ×4 downsample keeps most of the signal.
pub fn toy_image<T: Real>(seed: u64, size: usize) -> ImageTensor<T> {
    wave_texture(seed, size, size, 4, 10.0, 24.0)
}
