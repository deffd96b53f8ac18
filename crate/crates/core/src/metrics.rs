//! Distortion metrics, the perceptual-index combiner, pluggable perceptual
//! scorers, directory evaluation and the threshold sweep over the
//! perception–distortion plane.
//!
//! All distortion metrics work on the 0–255 scale. The evaluation protocol
//! converts to BT.601 luma and drops a 6 pixel border before measuring.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fusion::{fuse, FusionError, FusionParams, FusionRule};
use crate::imgio::{list_pngs, load_image, rgb_to_y, shave_border, ColorSpace, ImageError, ImageTensor, Range};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PEAK: f64 = 255.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("image {height}x{width} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall { height: usize, width: usize },
    #[error("no counterpart for `{name}` in {dir}")]
    Unmatched { name: String, dir: PathBuf },
    #[error("`{name}`: size {sr:?} does not match reference {hr:?}")]
    SizeMismatch { name: String, sr: Vec<usize>, hr: Vec<usize> },
    #[error("no score for `{0}`")]
    MissingScore(String),
    #[error("threshold grid must be non-empty, ascending and non-negative")]
    BadGrid,
    #[error("no images to evaluate in {0}")]
    Empty(PathBuf),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed CSV: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Preprocessing applied to both images before a metric is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub y_channel: bool,
    pub shave: usize,
}

impl Protocol {
    /// Luma, 6 pixel border ignored.
    pub const STANDARD: Protocol = Protocol { y_channel: true, shave: 6 };
    /// All RGB channels, nothing shaved.
    pub const FULL_RGB: Protocol = Protocol { y_channel: false, shave: 0 };

    /// Returns the image on the 0–255 scale in `f64`, ready for measuring.
    pub fn apply<T: Real>(&self, img: &ImageTensor<T>) -> Result<ImageTensor<f64>, MetricsError> {
        let mut x: ImageTensor<f64> = img.cast();
        if self.y_channel && x.colorspace == ColorSpace::Rgb {
            x = rgb_to_y(&x)?;
        }
        if self.shave > 0 {
            x = shave_border(&x, self.shave)?;
        }
        Ok(x.to_range(Range::EightBit))
    }
}

impl Default for Protocol {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Which protocol each metric family uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricsConfig {
    pub psnr_ssim: Protocol,
    pub rmse: Protocol,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { psnr_ssim: Protocol::STANDARD, rmse: Protocol::STANDARD }
    }
}

fn eightbit<T: Real>(img: &ImageTensor<T>) -> Vec<f64> {
    img.to_range(Range::EightBit).data.data().iter().map(|v| v.as_f64()).collect()
}

fn mse<T: Real>(reference: &ImageTensor<T>, test: &ImageTensor<T>) -> Result<f64, MetricsError> {
    if reference.shape() != test.shape() {
        return Err(MetricsError::Shape(reference.shape().to_vec(), test.shape().to_vec()));
    }
    let a = eightbit(reference);
    let b = eightbit(test);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Root-mean-square error on the 0–255 scale over all elements as given.
pub fn rmse<T: Real>(reference: &ImageTensor<T>, test: &ImageTensor<T>) -> Result<f64, MetricsError> {
    Ok(mse(reference, test)?.sqrt())
}

/// `10·log10(255² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr<T: Real>(reference: &ImageTensor<T>, test: &ImageTensor<T>) -> Result<f64, MetricsError> {
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / m).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// 'valid' separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&aa, h, w, &taps);
    let e_bb = filter_valid(&bb, h, w, &taps);
    let e_ab = filter_valid(&ab, h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean single-scale SSIM (11×11 Gaussian window, σ = 1.5, valid
/// positions only), averaged over channels and batch.
pub fn ssim<T: Real>(reference: &ImageTensor<T>, test: &ImageTensor<T>) -> Result<f64, MetricsError> {
    if reference.shape() != test.shape() {
        return Err(MetricsError::Shape(reference.shape().to_vec(), test.shape().to_vec()));
    }
    let (n, c, h, w) = reference.data.dims4();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { height: h, width: w });
    }
    let a = eightbit(reference);
    let b = eightbit(test);
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        total += ssim_plane(&a[p * plane..(p + 1) * plane], &b[p * plane..(p + 1) * plane], h, w);
    }
    Ok(total / (n * c) as f64)
}

/// `½((10 − Ma) + NIQE)`; lower is better.
pub fn perceptual_index(ma: f64, niqe: f64) -> f64 {
    0.5 * ((10.0 - ma) + niqe)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    LowerBetter,
    HigherBetter,
}

/// No-reference quality score for a single image.
pub trait PerceptualScorer<T: Real> {
    fn polarity(&self) -> Polarity;

    fn score(&self, id: &str, img: &ImageTensor<T>) -> Result<f64, MetricsError>;
}

/// Precomputed per-image scores read from an `image,score` CSV.
#[derive(Clone, Debug)]
pub struct FileScorer {
    scores: HashMap<String, f64>,
    polarity: Polarity,
}

impl FileScorer {
    pub fn new(scores: HashMap<String, f64>, polarity: Polarity) -> Self {
        Self { scores, polarity }
    }

    pub fn from_reader<R: Read>(reader: R, polarity: Polarity) -> Result<Self, MetricsError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut scores = HashMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(MetricsError::Format(format!("score row has {} fields", rec.len())));
            }
            let v: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| MetricsError::Format(format!("bad score `{}`", &rec[1])))?;
            scores.insert(rec[0].trim().to_string(), v);
        }
        Ok(Self { scores, polarity })
    }

    pub fn load(path: &Path, polarity: Polarity) -> Result<Self, MetricsError> {
        Self::from_reader(std::fs::File::open(path)?, polarity)
    }
}

impl<T: Real> PerceptualScorer<T> for FileScorer {
    fn polarity(&self) -> Polarity {
        self.polarity
    }

    fn score(&self, id: &str, _img: &ImageTensor<T>) -> Result<f64, MetricsError> {
        self.scores.get(id).copied().ok_or_else(|| MetricsError::MissingScore(id.to_string()))
    }
}

/// Desk-scale stand-in for a learned perceptual metric: the mean absolute
/// 4-neighbour Laplacian of the luma channel (0–255 scale, interior pixels)
/// mapped to `10 / (1 + energy)`, so sharper images score lower.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProxyScorer;

impl ProxyScorer {
    pub fn laplacian_energy<T: Real>(img: &ImageTensor<T>) -> Result<f64, MetricsError> {
        let mut x: ImageTensor<f64> = img.cast();
        if x.colorspace == ColorSpace::Rgb {
            x = rgb_to_y(&x)?;
        }
        let x = x.to_range(Range::EightBit);
        let (n, _, h, w) = x.data.dims4();
        if h < 3 || w < 3 {
            return Err(MetricsError::TooSmall { height: h, width: w });
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for b in 0..n {
            for y in 1..h - 1 {
                for xx in 1..w - 1 {
                    let c = x.data.at(b, 0, y, xx);
                    let lap = x.data.at(b, 0, y - 1, xx)
                        + x.data.at(b, 0, y + 1, xx)
                        + x.data.at(b, 0, y, xx - 1)
                        + x.data.at(b, 0, y, xx + 1)
                        - 4.0 * c;
                    total += lap.abs();
                    count += 1;
                }
            }
        }
        Ok(total / count as f64)
    }
}

impl<T: Real> PerceptualScorer<T> for ProxyScorer {
    fn polarity(&self) -> Polarity {
        Polarity::LowerBetter
    }

    fn score(&self, _id: &str, img: &ImageTensor<T>) -> Result<f64, MetricsError> {
        Ok(10.0 / (1.0 + Self::laplacian_energy(img)?))
    }
}

/// Protocol-level metrics for one SR/HR pair.
pub fn evaluate_pair<T: Real>(
    hr: &ImageTensor<T>,
    sr: &ImageTensor<T>,
    cfg: &MetricsConfig,
) -> Result<(f64, f64, f64), MetricsError> {
    if hr.shape() != sr.shape() {
        return Err(MetricsError::Shape(hr.shape().to_vec(), sr.shape().to_vec()));
    }
    let (a, b) = (cfg.psnr_ssim.apply(hr)?, cfg.psnr_ssim.apply(sr)?);
    let (ra, rb) = (cfg.rmse.apply(hr)?, cfg.rmse.apply(sr)?);
    Ok((rmse(&ra, &rb)?, psnr(&a, &b)?, ssim(&a, &b)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub image: String,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricMeans {
    pub rmse: f64,
    /// Mean over finite PSNR values only.
    pub psnr: f64,
    /// Records whose PSNR is infinite (identical images).
    pub psnr_infinite: usize,
    pub ssim: f64,
    pub perceptual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
    pub means: MetricMeans,
}

/// Row label used for the dataset means in CSV output.
pub const MEAN_ROW: &str = "mean";

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str) -> Result<f64, MetricsError> {
    match s.trim() {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t.parse().map_err(|_| MetricsError::Format(format!("bad number `{t}`"))),
    }
}

impl MetricReport {
    /// Sorts records by image id and computes the means.
    pub fn from_records(mut records: Vec<MetricRecord>) -> Self {
        records.sort_by(|a, b| a.image.cmp(&b.image));
        let n = records.len().max(1) as f64;
        let finite: Vec<f64> = records.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
        let perceptual = if !records.is_empty() && records.iter().all(|r| r.perceptual.is_some()) {
            Some(records.iter().map(|r| r.perceptual.unwrap()).sum::<f64>() / n)
        } else {
            None
        };
        let means = MetricMeans {
            rmse: records.iter().map(|r| r.rmse).sum::<f64>() / n,
            psnr: if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 },
            psnr_infinite: records.len() - finite.len(),
            ssim: records.iter().map(|r| r.ssim).sum::<f64>() / n,
            perceptual,
        };
        Self { records, means }
    }

    /// `image,rmse,psnr,ssim,perceptual`, one row per image then a `mean` row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["image", "rmse", "psnr", "ssim", "perceptual"])?;
        let opt = |p: Option<f64>| p.map(fmt_f64).unwrap_or_default();
        for r in &self.records {
            wr.write_record([r.image.clone(), fmt_f64(r.rmse), fmt_f64(r.psnr), fmt_f64(r.ssim), opt(r.perceptual)])?;
        }
        let m = &self.means;
        wr.write_record([MEAN_ROW.to_string(), fmt_f64(m.rmse), fmt_f64(m.psnr), fmt_f64(m.ssim), opt(m.perceptual)])?;
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), MetricsError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Parses the per-image rows of a report CSV (the mean row is skipped
    /// and recomputed).
    pub fn read_csv<R: Read>(r: R) -> Result<Self, MetricsError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(MetricsError::Format(format!("expected 5 fields, got {}", rec.len())));
            }
            if &rec[0] == MEAN_ROW {
                continue;
            }
            records.push(MetricRecord {
                image: rec[0].to_string(),
                rmse: parse_f64(&rec[1])?,
                psnr: parse_f64(&rec[2])?,
                ssim: parse_f64(&rec[3])?,
                perceptual: if rec[4].trim().is_empty() { None } else { Some(parse_f64(&rec[4])?) },
            });
        }
        Ok(Self::from_records(records))
    }
}

/// Pairs every PNG in `sr_dir` with the same-named PNG in `hr_dir`.
pub fn match_dirs(sr_dir: &Path, hr_dir: &Path) -> Result<Vec<String>, MetricsError> {
    let sr = list_pngs(sr_dir)?;
    let hr = list_pngs(hr_dir)?;
    if sr.is_empty() {
        return Err(MetricsError::Empty(sr_dir.to_path_buf()));
    }
    if let Some(name) = sr.iter().find(|n| !hr.contains(n)) {
        return Err(MetricsError::Unmatched { name: name.clone(), dir: hr_dir.to_path_buf() });
    }
    if let Some(name) = hr.iter().find(|n| !sr.contains(n)) {
        return Err(MetricsError::Unmatched { name: name.clone(), dir: sr_dir.to_path_buf() });
    }
    Ok(sr)
}

/// Evaluates a directory of SR results against same-named HR references.
pub fn evaluate_dir(
    sr_dir: &Path,
    hr_dir: &Path,
    scorer: Option<&dyn PerceptualScorer<f64>>,
    cfg: &MetricsConfig,
) -> Result<MetricReport, MetricsError> {
    let names = match_dirs(sr_dir, hr_dir)?;
    let mut records = Vec::with_capacity(names.len());
    for name in names {
        let sr: ImageTensor<f64> = load_image(&sr_dir.join(&name))?;
        let hr: ImageTensor<f64> = load_image(&hr_dir.join(&name))?;
        if sr.shape() != hr.shape() {
            return Err(MetricsError::SizeMismatch { name, sr: sr.shape().to_vec(), hr: hr.shape().to_vec() });
        }
        let (r, p, s) = evaluate_pair(&hr, &sr, cfg)?;
        let perceptual = scorer.map(|sc| sc.score(&name, &sr)).transpose()?;
        records.push(MetricRecord { image: name, rmse: r, psnr: p, ssim: s, perceptual });
    }
    Ok(MetricReport::from_records(records))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanePoint {
    pub xi: f64,
    pub perceptual: f64,
    pub rmse: f64,
}

/// One image's inputs to the sweep.
#[derive(Clone, Debug)]
pub struct SweepItem<T> {
    pub id: String,
    /// Perception-oriented reconstruction (I_G).
    pub perceptual: ImageTensor<T>,
    /// Distortion-oriented reconstruction (I_g).
    pub distortion: ImageTensor<T>,
    pub reference: Option<ImageTensor<T>>,
}

/// `0, 0.1, …, 1.0`
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Parses `start:step:end` (inclusive) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, MetricsError> {
    let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
    let grid = if parts.len() == 3 {
        let nums: Vec<f64> = parts.iter().map(|p| parse_f64(p)).collect::<Result<_, _>>()?;
        let (start, step, end) = (nums[0], nums[1], nums[2]);
        if !(step > 0.0) || end < start {
            return Err(MetricsError::BadGrid);
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| start + i as f64 * step).map(|v| (v * 1e12).round() / 1e12).collect()
    } else {
        spec.split(',').map(parse_f64).collect::<Result<Vec<_>, _>>()?
    };
    validate_grid(&grid)?;
    Ok(grid)
}

fn validate_grid(grid: &[f64]) -> Result<(), MetricsError> {
    if grid.is_empty() || grid.iter().any(|&x| !(x >= 0.0)) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(MetricsError::BadGrid);
    }
    Ok(())
}

/// For each threshold, fuses every item and reports the mean perceptual
/// score of the fused images and their mean RMSE (under the RMSE protocol)
/// against the reference, or against the distortion-oriented input when no
/// reference is given.
pub fn plane_sweep<T: Real>(
    items: &[SweepItem<T>],
    grid: &[f64],
    scorer: &dyn PerceptualScorer<T>,
    cfg: &MetricsConfig,
    rule: FusionRule,
) -> Result<Vec<PlanePoint>, MetricsError> {
    validate_grid(grid)?;
    if items.is_empty() {
        return Err(MetricsError::Empty(PathBuf::new()));
    }
    let mut refs: BTreeMap<&str, ImageTensor<f64>> = BTreeMap::new();
    for it in items {
        let r = it.reference.as_ref().unwrap_or(&it.distortion);
        refs.insert(&it.id, cfg.rmse.apply(r)?);
    }
    let mut points = Vec::with_capacity(grid.len());
    for &xi in grid {
        let p = FusionParams { xi, rule };
        let mut rm = 0.0;
        let mut sc = 0.0;
        for it in items {
            let fused = fuse(&it.perceptual, &it.distortion, &p)?;
            rm += rmse(&refs[it.id.as_str()], &cfg.rmse.apply(&fused)?)?;
            sc += scorer.score(&format!("{}@{xi}", it.id), &fused)?;
        }
        let n = items.len() as f64;
        points.push(PlanePoint { xi, perceptual: sc / n, rmse: rm / n });
    }
    Ok(points)
}

pub fn write_plane_csv<W: Write>(points: &[PlanePoint], w: W) -> Result<(), MetricsError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["xi", "perceptual", "rmse"])?;
    for p in points {
        wr.write_record([fmt_f64(p.xi), fmt_f64(p.perceptual), fmt_f64(p.rmse)])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_plane_csv<R: Read>(r: R) -> Result<Vec<PlanePoint>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(MetricsError::Format(format!("expected 3 fields, got {}", rec.len())));
        }
        out.push(PlanePoint { xi: parse_f64(&rec[0])?, perceptual: parse_f64(&rec[1])?, rmse: parse_f64(&rec[2])? });
    }
    Ok(out)
}

/// Builds an 8-bit-scale single-channel image from a plane; test helper for
/// callers that want to measure raw arrays.
pub fn plane_image(h: usize, w: usize, data: Vec<f64>) -> ImageTensor<f64> {
    ImageTensor::new(Tensor::from_vec(&[1, 1, h, w], data), Range::EightBit, ColorSpace::Y)
}
