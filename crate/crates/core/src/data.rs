//! LR–HR training pairs: bicubic degradation, aligned random crops, flips and
//! seeded batching.

use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::imgio::{crop, list_pngs, load_image, ImageError, ImageTensor, Range};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{height}x{width} image is not divisible by scale {scale}")]
    NotDivisible { height: usize, width: usize, scale: usize },
    #[error("image {height}x{width} is smaller than the {patch}x{patch} HR patch")]
    TooSmall { height: usize, width: usize, patch: usize },
    #[error("no usable PNG images in {0}")]
    Empty(PathBuf),
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub hr_dir: PathBuf,
    pub scale: usize,
    pub lr_patch: usize,
    pub batch_size: usize,
    pub flip: bool,
    pub seed: u64,
    /// Samples drawn per source image per epoch.
    pub crops_per_image: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            hr_dir: PathBuf::from("data/hr"),
            scale: 4,
            lr_patch: 24,
            batch_size: 16,
            flip: true,
            seed: 0,
            crops_per_image: 1,
        }
    }
}

impl DatasetConfig {
    pub fn hr_patch(&self) -> usize {
        self.lr_patch * self.scale
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.scale < 1 {
            return Err(DataError::Config("scale must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(DataError::Config("batch_size must be >= 1".into()));
        }
        if self.lr_patch < 1 {
            return Err(DataError::Config("lr_patch must be >= 1".into()));
        }
        if self.crops_per_image < 1 {
            return Err(DataError::Config("crops_per_image must be >= 1".into()));
        }
        Ok(())
    }
}

/// A co-located LR/HR pair (or a batch of them, stacked on axis 0).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair<T> {
    pub lr: ImageTensor<T>,
    pub hr: ImageTensor<T>,
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        1.5 * ax * ax * ax - 2.5 * ax * ax + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax * ax * ax + 2.5 * ax * ax - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Sparse resampling weights for reducing an axis of length `len` by
/// `scale`: one `(source indices, weights)` list per output sample. The
/// kernel is stretched by `scale` (antialiasing) and source indices outside
/// the image are clamped to the edge.
pub fn downsample_weights(len: usize, scale: usize) -> Vec<Vec<(usize, f64)>> {
    let s = scale as f64;
    let out_len = len / scale;
    let support = 2.0 * s;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * s - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let wgt = cubic((center - j as f64) / s);
                if wgt == 0.0 {
                    continue;
                }
                total += wgt;
                let src = j.clamp(0, len as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == src) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((src, wgt)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable antialiased bicubic reduction by an integer factor.
pub fn bicubic_downsample<T: Real>(img: &ImageTensor<T>, scale: usize) -> Result<ImageTensor<T>, DataError> {
    let (n, c, h, w) = img.data.dims4();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(DataError::NotDivisible { height: h, width: w, scale });
    }
    if scale == 1 {
        return Ok(img.clone());
    }
    let (ho, wo) = (h / scale, w / scale);
    let wy = downsample_weights(h, scale);
    let wx = downsample_weights(w, scale);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut rows = vec![0.0f64; ho * w];
    for b in 0..n {
        for ch in 0..c {
            let plane = &img.data.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for (i, taps) in wy.iter().enumerate() {
                for x in 0..w {
                    rows[i * w + x] = taps.iter().map(|&(k, wt)| wt * plane[k * w + x].as_f64()).sum();
                }
            }
            for i in 0..ho {
                for (j, taps) in wx.iter().enumerate() {
                    let v: f64 = taps.iter().map(|&(k, wt)| wt * rows[i * w + k]).sum();
                    *out.at_mut(b, ch, i, j) = T::lit(v);
                }
            }
        }
    }
    Ok(ImageTensor::new(out, img.range, img.colorspace))
}

/// Crops the largest top-left region whose sides are multiples of `scale`.
pub fn mod_crop<T: Real>(img: &ImageTensor<T>, scale: usize) -> ImageTensor<T> {
    let (h, w) = (img.height(), img.width());
    let (hc, wc) = (h - h % scale, w - w % scale);
    if (hc, wc) == (h, w) {
        return img.clone();
    }
    ImageTensor::new(crop(&img.data, 0, 0, hc, wc), img.range, img.colorspace)
}

/// One HR source image with its precomputed degradation.
#[derive(Clone, Debug)]
pub struct SourceImage<T> {
    pub hr: ImageTensor<T>,
    pub lr: ImageTensor<T>,
}

impl<T: Real> SourceImage<T> {
    pub fn new(hr: ImageTensor<T>, scale: usize) -> Result<Self, DataError> {
        let hr = mod_crop(&hr, scale);
        let lr = bicubic_downsample(&hr, scale)?;
        Ok(Self { hr, lr })
    }
}

/// Crops an aligned pair at a random LR offset; the HR offset is the LR one
/// times the scale.
pub fn sample_patch_pair<T: Real, R: Rng>(
    source: &SourceImage<T>,
    cfg: &DatasetConfig,
    rng: &mut R,
) -> Result<PatchPair<T>, DataError> {
    let hp = cfg.hr_patch();
    let (h, w) = (source.hr.height(), source.hr.width());
    if h < hp || w < hp {
        return Err(DataError::TooSmall { height: h, width: w, patch: hp });
    }
    let (lh, lw) = (source.lr.height(), source.lr.width());
    let oy = rng.random_range(0..=lh - cfg.lr_patch);
    let ox = rng.random_range(0..=lw - cfg.lr_patch);
    Ok(PatchPair {
        lr: ImageTensor::new(
            crop(&source.lr.data, oy, ox, cfg.lr_patch, cfg.lr_patch),
            source.lr.range,
            source.lr.colorspace,
        ),
        hr: ImageTensor::new(
            crop(&source.hr.data, oy * cfg.scale, ox * cfg.scale, hp, hp),
            source.hr.range,
            source.hr.colorspace,
        ),
    })
}

pub fn flip_horizontal<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = t.dims4();
    Tensor::from_fn(&[n, c, h, w], |i| {
        let x = i % w;
        t.data()[i - x + (w - 1 - x)]
    })
}

pub fn flip_vertical<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = t.dims4();
    Tensor::from_fn(&[n, c, h, w], |i| {
        let y = (i / w) % h;
        let base = i - y * w;
        t.data()[base + (h - 1 - y) * w]
    })
}

/// Applies the given flips to both halves of the pair.
pub fn apply_flips<T: Real>(pair: &PatchPair<T>, horizontal: bool, vertical: bool) -> PatchPair<T> {
    let f = |img: &ImageTensor<T>| {
        let mut d = img.data.clone();
        if horizontal {
            d = flip_horizontal(&d);
        }
        if vertical {
            d = flip_vertical(&d);
        }
        ImageTensor::new(d, img.range, img.colorspace)
    };
    PatchPair { lr: f(&pair.lr), hr: f(&pair.hr) }
}

/// Random horizontal/vertical flips, each with probability 1/2, shared by
/// LR and HR. The decisions are always drawn so the RNG stream does not
/// depend on `enabled`.
pub fn augment_flip<T: Real, R: Rng>(pair: PatchPair<T>, enabled: bool, rng: &mut R) -> PatchPair<T> {
    let h = rng.random_bool(0.5);
    let v = rng.random_bool(0.5);
    if !enabled {
        return pair;
    }
    apply_flips(&pair, h, v)
}

/// In-memory training set.
#[derive(Clone, Debug)]
pub struct PairSource<T> {
    pub images: Vec<SourceImage<T>>,
}

impl<T: Real> PairSource<T> {
    pub fn new(hr_images: Vec<ImageTensor<T>>, cfg: &DatasetConfig) -> Result<Self, DataError> {
        cfg.validate()?;
        let mut images = Vec::with_capacity(hr_images.len());
        for hr in hr_images {
            let hr = hr.to_range(Range::Unit);
            if hr.height() < cfg.hr_patch() || hr.width() < cfg.hr_patch() {
                return Err(DataError::TooSmall { height: hr.height(), width: hr.width(), patch: cfg.hr_patch() });
            }
            images.push(SourceImage::new(hr, cfg.scale)?);
        }
        if images.is_empty() {
            return Err(DataError::Empty(cfg.hr_dir.clone()));
        }
        Ok(Self { images })
    }

    pub fn load(cfg: &DatasetConfig) -> Result<Self, DataError> {
        let names = list_pngs(&cfg.hr_dir)?;
        let imgs = names
            .iter()
            .map(|n| load_image(&cfg.hr_dir.join(n)))
            .collect::<Result<Vec<_>, _>>()?;
        if imgs.is_empty() {
            return Err(DataError::Empty(cfg.hr_dir.clone()));
        }
        Self::new(imgs, cfg)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Batches per epoch: `N · crops_per_image / batch_size`, at least one.
    pub fn batches_per_epoch(&self, cfg: &DatasetConfig) -> usize {
        (self.len() * cfg.crops_per_image / cfg.batch_size).max(1)
    }

    /// Draws one batch: source images uniformly with replacement, then a
    /// random crop and flip for each.
    pub fn sample_batch<R: Rng>(&self, cfg: &DatasetConfig, rng: &mut R) -> Result<PatchPair<T>, DataError> {
        let mut lrs = Vec::with_capacity(cfg.batch_size);
        let mut hrs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..self.images.len());
            let pair = sample_patch_pair(&self.images[idx], cfg, rng)?;
            let pair = augment_flip(pair, cfg.flip, rng);
            lrs.push(pair.lr.data);
            hrs.push(pair.hr.data);
        }
        let lr = Tensor::stack(&lrs.iter().collect::<Vec<_>>());
        let hr = Tensor::stack(&hrs.iter().collect::<Vec<_>>());
        Ok(PatchPair { lr: ImageTensor::rgb(lr), hr: ImageTensor::rgb(hr) })
    }

    pub fn epoch_batches<R: Rng>(&self, cfg: &DatasetConfig, rng: &mut R) -> Result<Vec<PatchPair<T>>, DataError> {
        (0..self.batches_per_epoch(cfg)).map(|_| self.sample_batch(cfg, rng)).collect()
    }
}

/// Loads `cfg.hr_dir` and draws one epoch of batches.
pub fn make_epoch_batches<T: Real, R: Rng>(cfg: &DatasetConfig, rng: &mut R) -> Result<Vec<PatchPair<T>>, DataError> {
    PairSource::load(cfg)?.epoch_batches(cfg, rng)
}

/// Loads every PNG in `dir` as unit-range RGB, keyed by file name.
pub fn load_dir<T: Real>(dir: &Path) -> Result<Vec<(String, ImageTensor<T>)>, DataError> {
    let names = list_pngs(dir)?;
    if names.is_empty() {
        return Err(DataError::Empty(dir.to_path_buf()));
    }
    names
        .into_iter()
        .map(|n| {
            let img = load_image(&dir.join(&n))?;
            Ok((n, img))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::rgb(Tensor::from_fn(&[1, 3, h, w], |_| rng.random::<f64>()))
    }

    #[test]
    fn weights_sum_to_one() {
        for (len, s) in [(16, 4), (96, 4), (10, 2), (9, 3)] {
            for taps in downsample_weights(len, s) {
                let total: f64 = taps.iter().map(|t| t.1).sum();
                assert!((total - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_is_preserved() {
        let img = ImageTensor::rgb(Tensor::<f64>::full(&[1, 3, 20, 12], 0.3719));
        let lr = bicubic_downsample(&img, 4).unwrap();
        assert_eq!(lr.shape(), &[1, 3, 5, 3]);
        assert!(lr.data.data().iter().all(|&v| (v - 0.3719).abs() < 1e-12));
    }

    #[test]
    fn hr_patch_geometry() {
        let lr = bicubic_downsample(&noise(96, 96, 1), 4).unwrap();
        assert_eq!((lr.height(), lr.width()), (24, 24));
        assert!(matches!(bicubic_downsample(&noise(10, 12, 1), 4), Err(DataError::NotDivisible { .. })));
    }

    #[test]
    fn exact_size_image_has_one_offset() {
        let cfg = DatasetConfig::default();
        let src = SourceImage::new(noise(96, 96, 2), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = sample_patch_pair(&src, &cfg, &mut rng).unwrap();
        assert_eq!(pair.hr, src.hr);
        assert_eq!(pair.lr, src.lr);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let cfg = DatasetConfig::default();
        let src = SourceImage::new(noise(40, 40, 2), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_patch_pair(&src, &cfg, &mut rng), Err(DataError::TooSmall { .. })));
    }

    #[test]
    fn flips_are_involutions() {
        let t = noise(5, 7, 4).data;
        assert_eq!(flip_horizontal(&flip_horizontal(&t)), t);
        assert_eq!(flip_vertical(&flip_vertical(&t)), t);
        assert_eq!(flip_horizontal(&t).at(0, 1, 2, 0), t.at(0, 1, 2, 6));
        assert_eq!(flip_vertical(&t).at(0, 2, 0, 3), t.at(0, 2, 4, 3));
    }

    #[test]
    fn disabled_flip_is_identity() {
        let src = SourceImage::new(noise(32, 32, 5), 4).unwrap();
        let pair = PatchPair { lr: src.lr.clone(), hr: src.hr.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            assert_eq!(augment_flip(pair.clone(), false, &mut rng), pair);
        }
    }

    #[test]
    fn single_image_fills_a_batch() {
        let cfg = DatasetConfig { lr_patch: 4, batch_size: 16, ..Default::default() };
        let set = PairSource::new(vec![noise(32, 32, 6)], &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = set.epoch_batches(&cfg, &mut rng).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].lr.shape(), &[16, 3, 4, 4]);
        assert_eq!(batches[0].hr.shape(), &[16, 3, 16, 16]);
    }
}
