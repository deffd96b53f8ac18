//! Generator and discriminator networks.
//!
//! Every network is described by a config implementing [`Architecture`] and
//! evaluated by building a [`Graph`] over a [`ParameterSet`]. The `trace_*`
//! functions keep the graph so gradients with respect to parameters and the
//! input can be pulled back; the `*_forward` functions return values only.
//!
//! Parameter naming:
//!
//! | network | layers |
//! |---|---|
//! | MR generator | `head`, `mr{b}.res{r}.{conv1,act,conv2}`, `mr{b}.gate`, `up{i}.{conv,act}`, `tail` |
//! | WP generator | `head`, `head_act`, `res{i}.{conv1,act,conv2}`, `up{i}.{conv,act}`, `tail` |
//! | discriminator | `conv{1..8}`, `bn{2..8}`, `fc1`, `fc2` |

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::imgio::{ColorSpace, ImageTensor, Range};
use crate::ops::conv_out_len;
use crate::params::{Architecture, LayerKind, LayerSpec, ParamError, ParameterSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
/// ResBlocks chained inside one MR block (and the gate's group count).
pub const RESBLOCKS_PER_MR: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("layer `{layer}` expects {expected} input channels, got {got}")]
    Channels { layer: String, expected: usize, got: usize },
    #[error("gate unit needs {expected} feature groups, got {got}")]
    GroupCount { expected: usize, got: usize },
    #[error("discriminator expects {expected}x{expected} input, got {height}x{width}")]
    InputSize { expected: usize, height: usize, width: usize },
    #[error("generator input must be RGB")]
    NotRgb,
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MRGeneratorConfig {
    pub n_features: usize,
    pub n_mr_blocks: usize,
}

impl Default for MRGeneratorConfig {
    fn default() -> Self {
        Self { n_features: 64, n_mr_blocks: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WPGeneratorConfig {
    pub n_features: usize,
    pub n_resblocks: usize,
}

impl Default for WPGeneratorConfig {
    fn default() -> Self {
        Self { n_features: 64, n_resblocks: 16 }
    }
}

pub const WP_OUTER_KERNEL: usize = 9;
pub const INNER_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub use_batchnorm: bool,
    pub base_features: usize,
    /// Side length of the (square) HR training patch.
    pub input_size: usize,
    pub dense_features: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { use_batchnorm: true, base_features: 64, input_size: 96, dense_features: 1024 }
    }
}

impl DiscriminatorConfig {
    pub fn widths(&self) -> [usize; 8] {
        [1, 1, 2, 2, 4, 4, 8, 8].map(|m| m * self.base_features)
    }

    pub fn strides(&self) -> [usize; 8] {
        [1, 2, 1, 2, 1, 2, 1, 2]
    }

    /// Spatial side after the conv stack.
    pub fn final_size(&self) -> usize {
        self.strides().iter().fold(self.input_size, |s, &st| conv_out_len(s, 3, st, 1))
    }
}

fn resblock_specs(prefix: &str, n: usize, out: &mut Vec<LayerSpec>) {
    out.push(LayerSpec::conv(format!("{prefix}.conv1"), n, n, INNER_KERNEL, 1));
    out.push(LayerSpec::prelu(format!("{prefix}.act"), n));
    out.push(LayerSpec::conv(format!("{prefix}.conv2"), n, n, INNER_KERNEL, 1));
}

fn upsample_specs(prefix: &str, n: usize, out: &mut Vec<LayerSpec>) {
    out.push(LayerSpec::conv(format!("{prefix}.conv"), n, 4 * n, INNER_KERNEL, 1));
    out.push(LayerSpec::prelu(format!("{prefix}.act"), n));
}

impl Architecture for MRGeneratorConfig {
    fn layer_specs(&self) -> Vec<LayerSpec> {
        let n = self.n_features;
        let mut v = vec![LayerSpec::conv("head", 3, n, INNER_KERNEL, 1)];
        for b in 0..self.n_mr_blocks {
            for r in 0..RESBLOCKS_PER_MR {
                resblock_specs(&format!("mr{b}.res{r}"), n, &mut v);
            }
            v.push(LayerSpec::conv(format!("mr{b}.gate"), RESBLOCKS_PER_MR * n, n, 1, 1));
        }
        upsample_specs("up0", n, &mut v);
        upsample_specs("up1", n, &mut v);
        v.push(LayerSpec::conv("tail", n, 3, INNER_KERNEL, 1));
        v
    }

    fn echo(&self) -> String {
        format!("arch=mr n_features={} n_mr_blocks={}", self.n_features, self.n_mr_blocks)
    }
}

impl Architecture for WPGeneratorConfig {
    fn layer_specs(&self) -> Vec<LayerSpec> {
        let n = self.n_features;
        let mut v = vec![
            LayerSpec::conv("head", 3, n, WP_OUTER_KERNEL, 1),
            LayerSpec::prelu("head_act", n),
        ];
        for r in 0..self.n_resblocks {
            resblock_specs(&format!("res{r}"), n, &mut v);
        }
        upsample_specs("up0", n, &mut v);
        upsample_specs("up1", n, &mut v);
        v.push(LayerSpec::conv("tail", n, 3, WP_OUTER_KERNEL, 1));
        v
    }

    fn echo(&self) -> String {
        format!("arch=wp n_features={} n_resblocks={}", self.n_features, self.n_resblocks)
    }
}

impl Architecture for DiscriminatorConfig {
    fn layer_specs(&self) -> Vec<LayerSpec> {
        let widths = self.widths();
        let strides = self.strides();
        let mut v = Vec::new();
        let mut cin = 3;
        for i in 0..8 {
            v.push(LayerSpec::conv(format!("conv{}", i + 1), cin, widths[i], 3, strides[i]));
            if self.use_batchnorm && i > 0 {
                v.push(LayerSpec::batch_norm(format!("bn{}", i + 1), widths[i]));
            }
            cin = widths[i];
        }
        let s = self.final_size();
        v.push(LayerSpec::dense("fc1", widths[7] * s * s, self.dense_features));
        v.push(LayerSpec::dense("fc2", self.dense_features, 1));
        v
    }

    fn echo(&self) -> String {
        format!(
            "arch=disc use_batchnorm={} base_features={} input_size={} dense_features={}",
            self.use_batchnorm, self.base_features, self.input_size, self.dense_features
        )
    }
}

/// Either generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GeneratorConfig {
    Mr(MRGeneratorConfig),
    Wp(WPGeneratorConfig),
}

impl Architecture for GeneratorConfig {
    fn layer_specs(&self) -> Vec<LayerSpec> {
        match self {
            GeneratorConfig::Mr(c) => c.layer_specs(),
            GeneratorConfig::Wp(c) => c.layer_specs(),
        }
    }

    fn echo(&self) -> String {
        match self {
            GeneratorConfig::Mr(c) => c.echo(),
            GeneratorConfig::Wp(c) => c.echo(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            GeneratorConfig::Mr(c) if c.n_mr_blocks < 1 => Err(ModelError::Config("n_mr_blocks must be >= 1".into())),
            GeneratorConfig::Wp(c) if c.n_resblocks < 1 => Err(ModelError::Config("n_resblocks must be >= 1".into())),
            GeneratorConfig::Mr(MRGeneratorConfig { n_features: 0, .. })
            | GeneratorConfig::Wp(WPGeneratorConfig { n_features: 0, .. }) => {
                Err(ModelError::Config("n_features must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Training-mode forward (unclamped output) with the graph retained.
    pub fn trace<T: Real>(&self, params: &ParameterSet<T>, lr: &ImageTensor<T>) -> Result<Traced<T>, ModelError> {
        match self {
            GeneratorConfig::Mr(c) => trace_mr_generator(params, c, lr),
            GeneratorConfig::Wp(c) => trace_wp_generator(params, c, lr),
        }
    }

    /// Inference: forward pass clamped to `[0, 1]`.
    pub fn infer<T: Real>(&self, params: &ParameterSet<T>, lr: &ImageTensor<T>) -> Result<ImageTensor<T>, ModelError> {
        let out = self.trace(params, lr)?.output_image();
        Ok(out.clamped())
    }
}

/// True when no layer of `arch` is a batch normalization.
pub fn is_batchnorm_free<A: Architecture + ?Sized>(arch: &A) -> bool {
    arch.layer_specs().iter().all(|s| !matches!(s.kind, LayerKind::BatchNorm { .. }))
}

/// Graph under construction, with parameters bound as leaves on first use.
pub struct Scope<'p, T> {
    pub graph: Graph<T>,
    params: &'p ParameterSet<T>,
    leaves: BTreeMap<String, NodeId>,
}

impl<'p, T: Real> Scope<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Self { graph: Graph::new(), params, leaves: BTreeMap::new() }
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.graph.leaf(t)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let t = self.params.get(name)?.clone();
        let id = self.graph.leaf(t);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    fn channels(&self, x: NodeId) -> usize {
        self.graph.value(x).dims4().1
    }

    /// Same-padding convolution with bias.
    pub fn conv(&mut self, x: NodeId, layer: &str, stride: usize) -> Result<NodeId, ModelError> {
        let w = self.param(&format!("{layer}.weight"))?;
        let b = self.param(&format!("{layer}.bias"))?;
        let (_, expected, k, _) = self.graph.value(w).dims4();
        let got = self.channels(x);
        if got != expected {
            return Err(ModelError::Channels { layer: layer.to_string(), expected, got });
        }
        Ok(self.graph.conv(x, w, Some(b), stride, k / 2))
    }

    pub fn prelu(&mut self, x: NodeId, layer: &str) -> Result<NodeId, ModelError> {
        let a = self.param(&format!("{layer}.slope"))?;
        let expected = self.graph.value(a).len();
        let got = self.channels(x);
        if got != expected {
            return Err(ModelError::Channels { layer: layer.to_string(), expected, got });
        }
        Ok(self.graph.prelu(x, a))
    }

    pub fn batch_norm(&mut self, x: NodeId, layer: &str) -> Result<NodeId, ModelError> {
        let g = self.param(&format!("{layer}.gamma"))?;
        let b = self.param(&format!("{layer}.beta"))?;
        Ok(self.graph.batch_norm(x, g, b))
    }

    pub fn dense(&mut self, x: NodeId, layer: &str) -> Result<NodeId, ModelError> {
        let w = self.param(&format!("{layer}.weight"))?;
        let b = self.param(&format!("{layer}.bias"))?;
        let expected = self.graph.value(w).shape()[1];
        let xv = self.graph.value(x);
        let got = xv.len() / xv.shape()[0];
        if got != expected {
            return Err(ModelError::Channels { layer: layer.to_string(), expected, got });
        }
        Ok(self.graph.linear(x, w, b))
    }

    pub fn finish(self, inputs: Vec<NodeId>, output: NodeId) -> Traced<T> {
        Traced { graph: self.graph, leaves: self.leaves, inputs, output }
    }
}

/// A forward pass with its graph, ready for backpropagation.
pub struct Traced<T> {
    graph: Graph<T>,
    leaves: BTreeMap<String, NodeId>,
    inputs: Vec<NodeId>,
    output: NodeId,
}

impl<T: Real> Traced<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.graph.value(self.output)
    }

    pub fn output_image(&self) -> ImageTensor<T> {
        ImageTensor::new(self.output().clone(), Range::Unit, ColorSpace::Rgb)
    }

    /// Pulls `grad_output` back to every bound parameter and every input.
    /// Parameters that were never bound do not appear in the result.
    pub fn backward(&self, grad_output: &Tensor<T>) -> (ParameterSet<T>, Vec<Tensor<T>>) {
        let grads = self.graph.backward(&[(self.output, grad_output)]);
        let mut pg = ParameterSet::new();
        for (name, &id) in &self.leaves {
            pg.insert(name.clone(), grads.get_or_zero(id, self.graph.value(id)));
        }
        let ig = self
            .inputs
            .iter()
            .map(|&id| grads.get_or_zero(id, self.graph.value(id)))
            .collect();
        (pg, ig)
    }
}

pub fn build_resblock<T: Real>(s: &mut Scope<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
    let h = s.conv(x, &format!("{prefix}.conv1"), 1)?;
    let h = s.prelu(h, &format!("{prefix}.act"))?;
    let h = s.conv(h, &format!("{prefix}.conv2"), 1)?;
    Ok(s.graph.add(x, h))
}

pub fn build_gate<T: Real>(
    s: &mut Scope<'_, T>,
    groups: &[NodeId],
    block_input: NodeId,
    layer: &str,
) -> Result<NodeId, ModelError> {
    if groups.len() != RESBLOCKS_PER_MR {
        return Err(ModelError::GroupCount { expected: RESBLOCKS_PER_MR, got: groups.len() });
    }
    let n = s.channels(block_input);
    for &g in groups {
        let got = s.channels(g);
        if got != n {
            return Err(ModelError::Channels { layer: layer.to_string(), expected: n, got });
        }
    }
    let cat = s.graph.concat(groups);
    let extracted = s.conv(cat, layer, 1)?;
    Ok(s.graph.add(extracted, block_input))
}

/// Returns the block output and the four group features.
pub fn build_mr_block<T: Real>(
    s: &mut Scope<'_, T>,
    x: NodeId,
    prefix: &str,
) -> Result<(NodeId, Vec<NodeId>), ModelError> {
    let mut groups = Vec::with_capacity(RESBLOCKS_PER_MR);
    let mut h = x;
    for r in 0..RESBLOCKS_PER_MR {
        h = build_resblock(s, h, &format!("{prefix}.res{r}"))?;
        groups.push(h);
    }
    let out = build_gate(s, &groups, x, &format!("{prefix}.gate"))?;
    Ok((out, groups))
}

pub fn build_upsample<T: Real>(s: &mut Scope<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
    let h = s.conv(x, &format!("{prefix}.conv"), 1)?;
    let h = s.graph.pixel_shuffle(h, 2);
    s.prelu(h, &format!("{prefix}.act"))
}

fn check_rgb<T: Real>(img: &ImageTensor<T>) -> Result<(), ModelError> {
    if img.colorspace != ColorSpace::Rgb {
        return Err(ModelError::NotRgb);
    }
    Ok(())
}

pub fn trace_resblock<T: Real>(params: &ParameterSet<T>, prefix: &str, x: &Tensor<T>) -> Result<Traced<T>, ModelError> {
    let mut s = Scope::new(params);
    let xi = s.input(x.clone());
    let y = build_resblock(&mut s, xi, prefix)?;
    Ok(s.finish(vec![xi], y))
}

/// `y = x + conv2(prelu(conv1(x)))`
pub fn resblock_forward<T: Real>(params: &ParameterSet<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    Ok(trace_resblock(params, prefix, x)?.output().clone())
}

pub fn trace_gate_unit<T: Real>(
    params: &ParameterSet<T>,
    layer: &str,
    groups: &[Tensor<T>],
    block_input: &Tensor<T>,
) -> Result<Traced<T>, ModelError> {
    let mut s = Scope::new(params);
    let mut inputs: Vec<NodeId> = groups.iter().map(|g| s.input(g.clone())).collect();
    let bi = s.input(block_input.clone());
    let y = build_gate(&mut s, &inputs, bi, layer)?;
    inputs.push(bi);
    Ok(s.finish(inputs, y))
}

/// Concatenates the groups, projects them with a 1×1 convolution back to the
/// block width and adds the block input.
pub fn gate_unit_forward<T: Real>(
    params: &ParameterSet<T>,
    layer: &str,
    groups: &[Tensor<T>],
    block_input: &Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    Ok(trace_gate_unit(params, layer, groups, block_input)?.output().clone())
}

pub fn trace_mr_block<T: Real>(params: &ParameterSet<T>, prefix: &str, x: &Tensor<T>) -> Result<Traced<T>, ModelError> {
    let mut s = Scope::new(params);
    let xi = s.input(x.clone());
    let (y, _) = build_mr_block(&mut s, xi, prefix)?;
    Ok(s.finish(vec![xi], y))
}

pub fn mr_block_forward<T: Real>(params: &ParameterSet<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    Ok(trace_mr_block(params, prefix, x)?.output().clone())
}

/// The four group features of an MR block, in chain order.
pub fn mr_block_groups<T: Real>(params: &ParameterSet<T>, prefix: &str, x: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
    let mut s = Scope::new(params);
    let xi = s.input(x.clone());
    let (_, groups) = build_mr_block(&mut s, xi, prefix)?;
    Ok(groups.iter().map(|&g| s.graph.value(g).clone()).collect())
}

pub fn trace_upsample<T: Real>(params: &ParameterSet<T>, prefix: &str, x: &Tensor<T>) -> Result<Traced<T>, ModelError> {
    let mut s = Scope::new(params);
    let xi = s.input(x.clone());
    let y = build_upsample(&mut s, xi, prefix)?;
    Ok(s.finish(vec![xi], y))
}

/// 3×3 conv to four times the width, 2× pixel shuffle, PReLU.
pub fn upsample_x2<T: Real>(params: &ParameterSet<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    Ok(trace_upsample(params, prefix, x)?.output().clone())
}

pub fn trace_mr_generator<T: Real>(
    params: &ParameterSet<T>,
    cfg: &MRGeneratorConfig,
    lr: &ImageTensor<T>,
) -> Result<Traced<T>, ModelError> {
    check_rgb(lr)?;
    let mut s = Scope::new(params);
    let xi = s.input(lr.data.clone());
    let mut h = s.conv(xi, "head", 1)?;
    for b in 0..cfg.n_mr_blocks {
        h = build_mr_block(&mut s, h, &format!("mr{b}"))?.0;
    }
    let h = build_upsample(&mut s, h, "up0")?;
    let h = build_upsample(&mut s, h, "up1")?;
    let y = s.conv(h, "tail", 1)?;
    Ok(s.finish(vec![xi], y))
}

/// Training-mode MR generator (output not clamped).
pub fn mr_generator_forward<T: Real>(
    params: &ParameterSet<T>,
    cfg: &MRGeneratorConfig,
    lr: &ImageTensor<T>,
) -> Result<ImageTensor<T>, ModelError> {
    Ok(trace_mr_generator(params, cfg, lr)?.output_image())
}

fn build_wp_trunk<T: Real>(s: &mut Scope<'_, T>, shallow: NodeId, n_resblocks: usize) -> Result<NodeId, ModelError> {
    let mut h = shallow;
    for r in 0..n_resblocks {
        h = build_resblock(s, h, &format!("res{r}"))?;
    }
    Ok(h)
}

pub fn trace_wp_generator<T: Real>(
    params: &ParameterSet<T>,
    cfg: &WPGeneratorConfig,
    lr: &ImageTensor<T>,
) -> Result<Traced<T>, ModelError> {
    check_rgb(lr)?;
    let mut s = Scope::new(params);
    let xi = s.input(lr.data.clone());
    let h = s.conv(xi, "head", 1)?;
    let shallow = s.prelu(h, "head_act")?;
    let trunk = build_wp_trunk(&mut s, shallow, cfg.n_resblocks)?;
    let h = s.graph.add(trunk, shallow);
    let h = build_upsample(&mut s, h, "up0")?;
    let h = build_upsample(&mut s, h, "up1")?;
    let y = s.conv(h, "tail", 1)?;
    Ok(s.finish(vec![xi], y))
}

/// Training-mode WP generator (output not clamped).
pub fn wp_generator_forward<T: Real>(
    params: &ParameterSet<T>,
    cfg: &WPGeneratorConfig,
    lr: &ImageTensor<T>,
) -> Result<ImageTensor<T>, ModelError> {
    Ok(trace_wp_generator(params, cfg, lr)?.output_image())
}

/// `(shallow features, ResBlock trunk output)` of the WP generator, before
/// the long skip is added.
pub fn wp_trunk_features<T: Real>(
    params: &ParameterSet<T>,
    cfg: &WPGeneratorConfig,
    lr: &ImageTensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
    check_rgb(lr)?;
    let mut s = Scope::new(params);
    let xi = s.input(lr.data.clone());
    let h = s.conv(xi, "head", 1)?;
    let shallow = s.prelu(h, "head_act")?;
    let trunk = build_wp_trunk(&mut s, shallow, cfg.n_resblocks)?;
    Ok((s.graph.value(shallow).clone(), s.graph.value(trunk).clone()))
}

pub fn trace_discriminator<T: Real>(
    params: &ParameterSet<T>,
    cfg: &DiscriminatorConfig,
    img: &Tensor<T>,
) -> Result<Traced<T>, ModelError> {
    let (_, _, h, w) = img.dims4();
    if h != cfg.input_size || w != cfg.input_size {
        return Err(ModelError::InputSize { expected: cfg.input_size, height: h, width: w });
    }
    let slope = T::lit(LEAKY_SLOPE);
    let strides = cfg.strides();
    let mut s = Scope::new(params);
    let xi = s.input(img.clone());
    let mut x = xi;
    for (i, &stride) in strides.iter().enumerate() {
        x = s.conv(x, &format!("conv{}", i + 1), stride)?;
        if cfg.use_batchnorm && i > 0 {
            x = s.batch_norm(x, &format!("bn{}", i + 1))?;
        }
        x = s.graph.leaky_relu(x, slope);
    }
    let x = s.dense(x, "fc1")?;
    let x = s.graph.leaky_relu(x, slope);
    let x = s.dense(x, "fc2")?;
    let y = s.graph.sigmoid(x);
    Ok(s.finish(vec![xi], y))
}

/// Probability that each image in the batch is real.
pub fn discriminator_forward<T: Real>(
    params: &ParameterSet<T>,
    cfg: &DiscriminatorConfig,
    img: &ImageTensor<T>,
) -> Result<Vec<T>, ModelError> {
    check_rgb(img)?;
    Ok(trace_discriminator(params, cfg, &img.data)?.output().data().to_vec())
}
