//! PNG input/output, luma conversion, range handling and border cropping.

use std::path::{Path, PathBuf};

use image::{ColorType, ImageReader, RgbImage};
use thiserror::Error;

use crate::scalar::Real;
use crate::tensor::Tensor;

/// Intensity scale of an [`ImageTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Range {
    /// `[0, 1]`
    Unit,
    /// `[0, 255]`
    EightBit,
}

impl Range {
    pub fn peak(self) -> f64 {
        match self {
            Range::Unit => 1.0,
            Range::EightBit => 255.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    /// BT.601 studio-swing luma.
    Y,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb => 3,
            ColorSpace::Y => 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    Missing(PathBuf),
    #[error("{path}: unsupported bit depth ({color:?}); expected 8-bit RGB")]
    BitDepth { path: PathBuf, color: ColorType },
    #[error("{path}: unsupported channel count {channels}; expected 3 (RGB)")]
    Channels { path: PathBuf, channels: u8 },
    #[error("{path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("expected {expected:?} image, got {got:?}")]
    ColorSpace { expected: ColorSpace, got: ColorSpace },
    #[error("only single images can be written (batch = {0})")]
    Batch(usize),
    #[error("cannot shave {shave} px from a {height}x{width} image")]
    EmptyCrop { height: usize, width: usize, shave: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
}

/// A batch of images with explicit range and color-space tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    pub data: Tensor<T>,
    pub range: Range,
    pub colorspace: ColorSpace,
}

impl<T: Real> ImageTensor<T> {
    pub fn new(data: Tensor<T>, range: Range, colorspace: ColorSpace) -> Self {
        let (_, c, h, w) = data.dims4();
        assert_eq!(c, colorspace.channels(), "{colorspace:?} image with {c} channels");
        assert!(h >= 1 && w >= 1);
        Self { data, range, colorspace }
    }

    pub fn rgb(data: Tensor<T>) -> Self {
        Self::new(data, Range::Unit, ColorSpace::Rgb)
    }

    pub fn batch(&self) -> usize {
        self.data.dims4().0
    }

    pub fn height(&self) -> usize {
        self.data.dims4().2
    }

    pub fn width(&self) -> usize {
        self.data.dims4().3
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    /// Rescales (without rounding) to the requested range.
    pub fn to_range(&self, range: Range) -> Self {
        if range == self.range {
            return self.clone();
        }
        let k = T::lit(range.peak() / self.range.peak());
        Self { data: self.data.map(|v| v * k), range, colorspace: self.colorspace }
    }

    pub fn clamped(&self) -> Self {
        let hi = T::lit(self.range.peak());
        Self {
            data: self.data.map(|v| v.max(T::zero()).min(hi)),
            range: self.range,
            colorspace: self.colorspace,
        }
    }

    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor { data: self.data.cast(), range: self.range, colorspace: self.colorspace }
    }

    pub fn sample(&self, i: usize) -> Self {
        Self { data: self.data.sample(i), range: self.range, colorspace: self.colorspace }
    }
}

/// Loads an 8-bit RGB PNG as a unit-range batch of one.
pub fn load_image<T: Real>(path: &Path) -> Result<ImageTensor<T>, ImageError> {
    if !path.exists() {
        return Err(ImageError::Missing(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)
        .map_err(|source| ImageError::Io { path: path.to_path_buf(), source })?
        .with_guessed_format()
        .map_err(|source| ImageError::Io { path: path.to_path_buf(), source })?;
    let img = reader
        .decode()
        .map_err(|source| ImageError::Decode { path: path.to_path_buf(), source })?;
    let color = img.color();
    if color.bytes_per_pixel() / color.channel_count() != 1 {
        return Err(ImageError::BitDepth { path: path.to_path_buf(), color });
    }
    if color != ColorType::Rgb8 {
        return Err(ImageError::Channels { path: path.to_path_buf(), channels: color.channel_count() });
    }
    let rgb = img.into_rgb8();
    Ok(from_rgb8(&rgb))
}

pub fn from_rgb8<T: Real>(rgb: &RgbImage) -> ImageTensor<T> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            // Divide rather than multiply by 1/255 so 255 maps to exactly 1.
            *t.at_mut(0, c, y as usize, x as usize) = T::lit(p[c] as f64) / T::lit(255.0);
        }
    }
    ImageTensor::rgb(t)
}

/// Quantizes a single RGB image to 8-bit codes.
pub fn to_rgb8<T: Real>(img: &ImageTensor<T>) -> Result<RgbImage, ImageError> {
    if img.colorspace != ColorSpace::Rgb {
        return Err(ImageError::ColorSpace { expected: ColorSpace::Rgb, got: img.colorspace });
    }
    if img.batch() != 1 {
        return Err(ImageError::Batch(img.batch()));
    }
    let q = quantize_to_8bit(img);
    let (h, w) = (img.height(), img.width());
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| q.data.at(0, c, y, x).as_f64() as u8);
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(out)
}

/// Writes an 8-bit RGB PNG.
pub fn save_image<T: Real>(img: &ImageTensor<T>, path: &Path) -> Result<(), ImageError> {
    let rgb = to_rgb8(img)?;
    rgb.save_with_format(path, image::ImageFormat::Png).map_err(|source| match source {
        image::ImageError::IoError(e) => ImageError::Io { path: path.to_path_buf(), source: e },
        other => ImageError::Decode { path: path.to_path_buf(), source: other },
    })
}

/// BT.601 studio-swing luma, `(16 + 65.481 R + 128.553 G + 24.966 B) / 255`
/// on unit-range RGB. The result is unit-range Y.
pub fn rgb_to_y<T: Real>(img: &ImageTensor<T>) -> Result<ImageTensor<T>, ImageError> {
    if img.colorspace != ColorSpace::Rgb {
        return Err(ImageError::ColorSpace { expected: ColorSpace::Rgb, got: img.colorspace });
    }
    let unit = img.to_range(Range::Unit);
    let (n, _, h, w) = unit.data.dims4();
    let [kr, kg, kb] = [65.481, 128.553, 24.966].map(T::lit);
    let (off, denom) = (T::lit(16.0), T::lit(255.0));
    let mut y = Tensor::zeros(&[n, 1, h, w]);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let r = unit.data.at(b, 0, i, j);
                let g = unit.data.at(b, 1, i, j);
                let bl = unit.data.at(b, 2, i, j);
                *y.at_mut(b, 0, i, j) = (off + kr * r + kg * g + kb * bl) / denom;
            }
        }
    }
    Ok(ImageTensor::new(y, Range::Unit, ColorSpace::Y))
}

/// Centered crop removing `n` pixels from every side.
pub fn shave_border<T: Real>(img: &ImageTensor<T>, n: usize) -> Result<ImageTensor<T>, ImageError> {
    let (_, _, h, w) = img.data.dims4();
    if h <= 2 * n || w <= 2 * n {
        return Err(ImageError::EmptyCrop { height: h, width: w, shave: n });
    }
    if n == 0 {
        return Ok(img.clone());
    }
    Ok(ImageTensor {
        data: crop(&img.data, n, n, h - 2 * n, w - 2 * n),
        range: img.range,
        colorspace: img.colorspace,
    })
}

/// Spatial crop of every sample and channel.
pub fn crop<T: Real>(t: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Tensor<T> {
    let (n, c, h, w) = t.dims4();
    assert!(top + height <= h && left + width <= w, "crop out of bounds");
    let mut data = Vec::with_capacity(n * c * height * width);
    for b in 0..n {
        for ch in 0..c {
            for y in top..top + height {
                let s = ((b * c + ch) * h + y) * w + left;
                data.extend_from_slice(&t.data()[s..s + width]);
            }
        }
    }
    Tensor::from_vec(&[n, c, height, width], data)
}

/// Clamp to the unit interval, scale to 0–255 and round half away from zero.
/// Eight-bit tagged input is clamped and rounded in place, so the operation
/// is idempotent.
pub fn quantize_to_8bit<T: Real>(img: &ImageTensor<T>) -> ImageTensor<T> {
    let hi = T::lit(255.0);
    let data = match img.range {
        Range::Unit => img.data.map(|v| (v.max(T::zero()).min(T::one()) * hi).round()),
        Range::EightBit => img.data.map(|v| v.max(T::zero()).min(hi).round()),
    };
    ImageTensor { data, range: Range::EightBit, colorspace: img.colorspace }
}

pub fn to_unit<T: Real>(img: &ImageTensor<T>) -> ImageTensor<T> {
    match img.range {
        Range::Unit => img.clone(),
        Range::EightBit => {
            let d = T::lit(255.0);
            ImageTensor { data: img.data.map(|v| v / d), range: Range::Unit, colorspace: img.colorspace }
        }
    }
}

/// Sorted PNG file names (not paths) in a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>, ImageError> {
    let rd = std::fs::read_dir(dir).map_err(|source| ImageError::Io { path: dir.to_path_buf(), source })?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|source| ImageError::Io { path: dir.to_path_buf(), source })?;
        let p = entry.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}
