//! Generator and discriminator objectives with their analytic gradients.
//!
//! Each `*_grad` function returns the loss together with its gradient with
//! respect to the prediction (or the discriminator outputs), which is what
//! the trainer seeds the backward pass with.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arrayfile::{ArrayFile, ArrayFileError};
use crate::models::Scope;
use crate::params::{init_parameters, Architecture, LayerSpec, ParameterSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Lower clamp applied before every logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("empty discriminator output")]
    Empty,
    #[error(transparent)]
    Asset(#[from] ArrayFileError),
    #[error("bad extractor asset: {0}")]
    BadAsset(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Adversarial weight.
    pub lambda1: f64,
    /// Perceptual weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1e-3, lambda2: 6e-3 }
    }
}

fn check_shapes<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// Mean over the batch of each sample's mean squared error.
pub fn pixel_loss<T: Real>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<T, LossError> {
    Ok(pixel_loss_grad(truth, pred)?.0)
}

pub fn pixel_loss_grad<T: Real>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<(T, Tensor<T>), LossError> {
    check_shapes(truth, pred)?;
    // Samples share a size, so the mean of per-sample means is the global mean.
    let n = T::lit(pred.len() as f64);
    let loss = truth.data().iter().zip(pred.data()).map(|(&t, &p)| (p - t) * (p - t)).sum::<T>() / n;
    let two_over_n = T::lit(2.0) / n;
    let grad = pred.zip_map(truth, |p, t| two_over_n * (p - t));
    Ok((loss, grad))
}

/// `-mean(D(G(x)))`, the adversarial term without a logarithm.
pub fn adv_loss_nolog<T: Real>(d_fake: &[T]) -> T {
    adv_loss_nolog_grad(d_fake).0
}

pub fn adv_loss_nolog_grad<T: Real>(d_fake: &[T]) -> (T, Vec<T>) {
    let b = T::lit(d_fake.len() as f64);
    let loss = -d_fake.iter().copied().sum::<T>() / b;
    (loss, vec![-T::one() / b; d_fake.len()])
}

/// `-mean(log D(G(x)))` with outputs clamped below at [`LOG_EPS`].
pub fn adv_loss_log<T: Real>(d_fake: &[T]) -> T {
    adv_loss_log_grad(d_fake).0
}

pub fn adv_loss_log_grad<T: Real>(d_fake: &[T]) -> (T, Vec<T>) {
    let b = T::lit(d_fake.len() as f64);
    let eps = T::lit(LOG_EPS);
    let loss = -d_fake.iter().map(|&d| d.max(eps).ln()).sum::<T>() / b;
    let grad = d_fake
        .iter()
        .map(|&d| if d > eps { -T::one() / (b * d) } else { T::zero() })
        .collect();
    (loss, grad)
}

/// Binary cross-entropy `-mean(log D(real)) - mean(log(1 - D(fake)))`.
pub fn discriminator_loss<T: Real>(d_real: &[T], d_fake: &[T]) -> T {
    discriminator_loss_grad(d_real, d_fake).0
}

/// Loss and gradients with respect to `d_real` and `d_fake`.
pub fn discriminator_loss_grad<T: Real>(d_real: &[T], d_fake: &[T]) -> (T, Vec<T>, Vec<T>) {
    let eps = T::lit(LOG_EPS);
    let br = T::lit(d_real.len() as f64);
    let bf = T::lit(d_fake.len() as f64);
    let real_term = -d_real.iter().map(|&d| d.max(eps).ln()).sum::<T>() / br;
    let fake_term = -d_fake.iter().map(|&d| (T::one() - d).max(eps).ln()).sum::<T>() / bf;
    let g_real = d_real
        .iter()
        .map(|&d| if d > eps { -T::one() / (br * d) } else { T::zero() })
        .collect();
    let g_fake = d_fake
        .iter()
        .map(|&d| {
            let q = T::one() - d;
            if q > eps {
                T::one() / (bf * q)
            } else {
                T::zero()
            }
        })
        .collect();
    (real_term + fake_term, g_real, g_fake)
}

/// `lp + λ₁·la + λ₂·lv`: the single-stage MR objective.
pub fn total_loss_mr(pixel: f64, adv: f64, perceptual: f64, w: &LossWeights) -> f64 {
    pixel + w.lambda1 * adv + w.lambda2 * perceptual
}

/// `lp + λ₁·la`: WP stage 1, no perceptual term.
pub fn stage1_loss(pixel: f64, adv: f64, w: &LossWeights) -> f64 {
    pixel + w.lambda1 * adv
}

/// `λ₁·la + λ₂·lv`: WP stage 2, no pixel term.
pub fn stage2_loss(adv: f64, perceptual: f64, w: &LossWeights) -> f64 {
    w.lambda1 * adv + w.lambda2 * perceptual
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    Vgg16Style,
    Vgg19Style,
    Identity,
    SeededRandom,
}

impl ExtractorKind {
    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::Vgg16Style => "vgg16",
            ExtractorKind::Vgg19Style => "vgg19",
            ExtractorKind::Identity => "identity",
            ExtractorKind::SeededRandom => "random",
        }
    }
}

/// A fixed, differentiable map from an RGB batch to features.
pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn kind(&self) -> ExtractorKind;

    fn extract(&self, x: &Tensor<T>) -> Tensor<T>;

    /// Vector-Jacobian product: gradient at `x` given the gradient at the
    /// features.
    fn pullback(&self, x: &Tensor<T>, grad_features: &Tensor<T>) -> Tensor<T>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn kind(&self) -> ExtractorKind {
        ExtractorKind::Identity
    }

    fn extract(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    fn pullback(&self, _x: &Tensor<T>, grad_features: &Tensor<T>) -> Tensor<T> {
        grad_features.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StackLayer {
    /// 3×3 same-padded convolution followed by ReLU.
    Conv(String),
    MaxPool,
}

/// Conv/ReLU/max-pool stack: either seeded random weights or VGG-style
/// weights read from an asset file.
#[derive(Clone, Debug)]
pub struct ConvStackExtractor<T> {
    kind: ExtractorKind,
    layers: Vec<StackLayer>,
    params: ParameterSet<T>,
    /// Per-channel `(scale, shift)` applied to the input first.
    normalize: Option<(Vec<T>, Vec<T>)>,
}

struct StackArch<'a>(&'a [(String, usize, usize)]);

impl Architecture for StackArch<'_> {
    fn layer_specs(&self) -> Vec<LayerSpec> {
        self.0.iter().map(|(n, i, o)| LayerSpec::conv(n.clone(), *i, *o, 3, 1)).collect()
    }

    fn echo(&self) -> String {
        "arch=feature-stack".into()
    }
}

impl<T: Real> ConvStackExtractor<T> {
    /// Random 3×3 conv + ReLU layers with the given output widths, no
    /// pooling. Deterministic in `seed`.
    pub fn seeded_random(seed: u64, widths: &[usize]) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            convs.push((format!("conv{}", i + 1), cin, w));
            cin = w;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: ParameterSet<T> = init_parameters(&StackArch(&convs), &mut rng);
        // Small random biases so the ReLUs are not all aligned at zero.
        for (name, t) in params.iter_mut() {
            if name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.random_range(-0.1..0.1)));
            }
        }
        Self {
            kind: ExtractorKind::SeededRandom,
            layers: convs.into_iter().map(|(n, _, _)| StackLayer::Conv(n)).collect(),
            params,
            normalize: None,
        }
    }

    /// Reads a VGG-style asset. The header must carry `kind` (`vgg16` or
    /// `vgg19`) and `layers`, a comma-separated list of conv layer names and
    /// `pool`. The stack is cut just before the fifth pool. Optional
    /// `input.mean` / `input.std` arrays normalize the input per channel.
    pub fn from_asset(path: &Path) -> Result<Self, LossError> {
        let file = ArrayFile::<T>::load(path)?;
        let kind = match file.header.get("kind").map(String::as_str) {
            Some("vgg16") => ExtractorKind::Vgg16Style,
            Some("vgg19") => ExtractorKind::Vgg19Style,
            other => return Err(LossError::BadAsset(format!("unknown kind {other:?}"))),
        };
        let spec = file
            .header
            .get("layers")
            .ok_or_else(|| LossError::BadAsset("missing `layers` header".into()))?;
        let mut layers = Vec::new();
        let mut pools = 0;
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if item == "pool" {
                pools += 1;
                if pools == 5 {
                    break;
                }
                layers.push(StackLayer::MaxPool);
            } else {
                layers.push(StackLayer::Conv(item.to_string()));
            }
        }
        let mut params = ParameterSet::new();
        let mut cin = 3;
        for l in &layers {
            if let StackLayer::Conv(name) = l {
                let w = file
                    .get(&format!("{name}.weight"))
                    .ok_or_else(|| LossError::BadAsset(format!("missing {name}.weight")))?;
                let b = file
                    .get(&format!("{name}.bias"))
                    .ok_or_else(|| LossError::BadAsset(format!("missing {name}.bias")))?;
                if w.shape().len() != 4 || w.shape()[1] != cin || w.shape()[2] != 3 || w.shape()[3] != 3 {
                    return Err(LossError::BadAsset(format!("{name}.weight has shape {:?}", w.shape())));
                }
                if b.shape() != [w.shape()[0]] {
                    return Err(LossError::BadAsset(format!("{name}.bias has shape {:?}", b.shape())));
                }
                cin = w.shape()[0];
                params.insert(format!("{name}.weight"), w.clone());
                params.insert(format!("{name}.bias"), b.clone());
            }
        }
        let normalize = match (file.get("input.mean"), file.get("input.std")) {
            (Some(m), Some(s)) if m.len() == 3 && s.len() == 3 => {
                let scale: Vec<T> = s.data().iter().map(|&v| T::one() / v).collect();
                let shift: Vec<T> = m.data().iter().zip(&scale).map(|(&mv, &k)| -mv * k).collect();
                Some((scale, shift))
            }
            (None, None) => None,
            _ => return Err(LossError::BadAsset("input.mean/input.std must both be 3-vectors".into())),
        };
        Ok(Self { kind, layers, params, normalize })
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn layers(&self) -> &[StackLayer] {
        &self.layers
    }

    fn trace(&self, x: &Tensor<T>) -> crate::models::Traced<T> {
        let mut s = Scope::new(&self.params);
        let xi = s.input(x.clone());
        let mut h = xi;
        if let Some((scale, shift)) = &self.normalize {
            h = s.graph.affine(h, scale.clone(), shift.clone());
        }
        for l in &self.layers {
            h = match l {
                StackLayer::Conv(name) => {
                    let c = s.conv(h, name, 1).expect("extractor layer validated at construction");
                    s.graph.relu(c)
                }
                StackLayer::MaxPool => s.graph.max_pool2(h),
            };
        }
        s.finish(vec![xi], h)
    }
}

impl<T: Real> FeatureExtractor<T> for ConvStackExtractor<T> {
    fn kind(&self) -> ExtractorKind {
        self.kind
    }

    fn extract(&self, x: &Tensor<T>) -> Tensor<T> {
        self.trace(x).output().clone()
    }

    fn pullback(&self, x: &Tensor<T>, grad_features: &Tensor<T>) -> Tensor<T> {
        let (_, mut ig) = self.trace(x).backward(grad_features);
        ig.remove(0)
    }
}

/// Mean squared error between extracted features.
pub fn perceptual_loss<T: Real>(
    extractor: &dyn FeatureExtractor<T>,
    truth: &Tensor<T>,
    pred: &Tensor<T>,
) -> Result<T, LossError> {
    check_shapes(truth, pred)?;
    let ft = extractor.extract(truth);
    let fp = extractor.extract(pred);
    Ok(pixel_loss(&ft, &fp)?)
}

pub fn perceptual_loss_grad<T: Real>(
    extractor: &dyn FeatureExtractor<T>,
    truth: &Tensor<T>,
    pred: &Tensor<T>,
) -> Result<(T, Tensor<T>), LossError> {
    check_shapes(truth, pred)?;
    let ft = extractor.extract(truth);
    let fp = extractor.extract(pred);
    let (loss, gf) = pixel_loss_grad(&ft, &fp)?;
    Ok((loss, extractor.pullback(pred, &gf)))
}
