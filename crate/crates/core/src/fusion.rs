//! Soft-thresholding merge of the perception-oriented and distortion-oriented
//! reconstructions.
//!
//! With `Δ = I_G - I_g` (perceptual result minus distortion result) the fused
//! image is `I_g + soft(Δ, ξ)`: every pixel moves from the perceptual value
//! toward the distortion value by at most `ξ`. `ξ = 0` returns `I_G` and any
//! `ξ ≥ max|Δ|` returns `I_g`. Thresholds are in 8-bit intensity units.

use thiserror::Error;

use crate::imgio::{ImageTensor, Range};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("color space mismatch")]
    ColorSpace,
}

/// Which reading of the fusion rule to apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionRule {
    /// `I_g + soft(I_G - I_g, ξ)`; interpolates between the two inputs.
    #[default]
    Interpolating,
    /// `I_G + soft(I_G - I_g, ξ)`; kept for compatibility, extrapolates
    /// away from `I_g`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionParams {
    /// Threshold on the 0–255 scale.
    pub xi: f64,
    pub rule: FusionRule,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { xi: 0.73, rule: FusionRule::Interpolating }
    }
}

impl FusionParams {
    pub fn new(xi: f64) -> Result<Self, FusionError> {
        if !(xi >= 0.0) {
            return Err(FusionError::NegativeThreshold(xi));
        }
        Ok(Self { xi, rule: FusionRule::Interpolating })
    }
}

/// `sign(Δ)·max(|Δ| - ξ, 0)`
pub fn soft<T: Real>(delta: T, xi: T) -> T {
    let m = (delta.abs() - xi).max(T::zero());
    if delta < T::zero() {
        -m
    } else {
        m
    }
}

pub fn soft_slice<T: Real>(delta: &[T], xi: T) -> Result<Vec<T>, FusionError> {
    if !(xi >= T::zero()) {
        return Err(FusionError::NegativeThreshold(xi.as_f64()));
    }
    Ok(delta.iter().map(|&d| soft(d, xi)).collect())
}

/// One fused pixel. Written so both endpoints are exact: a pixel that is
/// fully shrunk returns `low` itself, and `ξ = 0` returns `high` itself.
#[inline]
fn fuse_pixel<T: Real>(high: T, low: T, xi: T) -> T {
    let delta = high - low;
    if delta.abs() <= xi {
        low
    } else if delta > T::zero() {
        high - xi
    } else {
        high + xi
    }
}

/// Fuses the perception-oriented image `i_big` (I_G) with the
/// distortion-oriented image `i_small` (I_g). Both are brought to the 0–255
/// scale first; the result is 0–255, clamped.
pub fn fuse<T: Real>(
    i_big: &ImageTensor<T>,
    i_small: &ImageTensor<T>,
    p: &FusionParams,
) -> Result<ImageTensor<T>, FusionError> {
    if i_big.shape() != i_small.shape() {
        return Err(FusionError::Shape(i_big.shape().to_vec(), i_small.shape().to_vec()));
    }
    if i_big.colorspace != i_small.colorspace {
        return Err(FusionError::ColorSpace);
    }
    if !(p.xi >= 0.0) {
        return Err(FusionError::NegativeThreshold(p.xi));
    }
    let big = i_big.to_range(Range::EightBit);
    let small = i_small.to_range(Range::EightBit);
    let xi = T::lit(p.xi);
    let hi = T::lit(255.0);
    let data = match p.rule {
        FusionRule::Interpolating => big.data.zip_map(&small.data, |g, s| fuse_pixel(g, s, xi)),
        FusionRule::Literal => big.data.zip_map(&small.data, |g, s| g + soft(g - s, xi)),
    };
    let data = data.map(|v| v.max(T::zero()).min(hi));
    Ok(ImageTensor::new(data, Range::EightBit, big.colorspace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::ColorSpace;
    use crate::tensor::Tensor;

    fn px(v: f64) -> ImageTensor<f64> {
        ImageTensor::new(Tensor::full(&[1, 3, 1, 1], v), Range::EightBit, ColorSpace::Rgb)
    }

    #[test]
    fn soft_values() {
        assert_eq!(soft(0.5, 0.73), 0.0);
        assert!((soft(-2.0f64, 0.73) + 1.27).abs() < 1e-15);
        for x in [-3.5, -0.0, 0.0, 1e-9, 42.0] {
            assert_eq!(soft(x, 0.0), x);
        }
        assert!(soft_slice(&[1.0], -0.1).is_err());
    }

    #[test]
    fn pixel_example() {
        let out = fuse(&px(14.0), &px(10.0), &FusionParams::default()).unwrap();
        assert!((out.data.data()[0] - 13.27).abs() < 1e-12);
    }

    #[test]
    fn endpoints() {
        let a = px(200.0);
        let b = px(37.5);
        assert_eq!(fuse(&a, &b, &FusionParams::new(0.0).unwrap()).unwrap().data, a.data);
        assert_eq!(fuse(&a, &b, &FusionParams::new(500.0).unwrap()).unwrap().data, b.data);
        assert_eq!(fuse(&a, &a, &FusionParams::new(3.0).unwrap()).unwrap().data, a.data);
    }

    #[test]
    fn unit_inputs_are_rescaled() {
        let g = ImageTensor::rgb(Tensor::<f64>::full(&[1, 3, 2, 2], 14.0 / 255.0));
        let s = ImageTensor::rgb(Tensor::<f64>::full(&[1, 3, 2, 2], 10.0 / 255.0));
        let out = fuse(&g, &s, &FusionParams::default()).unwrap();
        assert_eq!(out.range, Range::EightBit);
        assert!(out.data.data().iter().all(|&v| (v - 13.27).abs() < 1e-9));
    }

    #[test]
    fn literal_rule_extrapolates() {
        let p = FusionParams { xi: 0.0, rule: FusionRule::Literal };
        let out = fuse(&px(14.0), &px(10.0), &p).unwrap();
        assert_eq!(out.data.data()[0], 18.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(FusionParams::new(-1.0), Err(FusionError::NegativeThreshold(-1.0)));
        let wide = ImageTensor::new(Tensor::full(&[1, 3, 1, 2], 0.0), Range::EightBit, ColorSpace::Rgb);
        assert!(matches!(fuse(&px(1.0), &wide, &FusionParams::default()), Err(FusionError::Shape(..))));
    }
}
