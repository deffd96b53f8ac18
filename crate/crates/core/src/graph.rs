//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Networks are built by pushing nodes; [`Graph::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products into every node that
//! contributes to the seeded outputs.

use crate::ops::{self, BatchNormCache};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Add(NodeId, NodeId),
    PRelu {
        input: NodeId,
        slope: NodeId,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    Relu(NodeId),
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BatchNormCache<T>,
    },
    PixelShuffle {
        input: NodeId,
        factor: usize,
    },
    Concat(Vec<NodeId>),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Sigmoid(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Affine {
        input: NodeId,
        scale: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let v = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        );
        self.push(v, Op::Conv { input, weight, bias, stride, pad })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn prelu(&mut self, input: NodeId, slope: NodeId) -> NodeId {
        let v = ops::prelu(self.value(input), self.value(slope));
        self.push(v, Op::PRelu { input, slope })
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: T) -> NodeId {
        let v = ops::leaky_relu(self.value(input), slope);
        self.push(v, Op::LeakyRelu { input, slope })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(input))
    }

    pub fn batch_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (v, cache) = ops::batch_norm(self.value(input), self.value(gamma), self.value(beta));
        self.push(v, Op::BatchNorm { input, gamma, beta, cache })
    }

    pub fn pixel_shuffle(&mut self, input: NodeId, factor: usize) -> NodeId {
        let v = ops::pixel_shuffle(self.value(input), factor);
        self.push(v, Op::PixelShuffle { input, factor })
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = ops::concat_channels(&vals);
        self.push(v, Op::Concat(inputs.to_vec()))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let v = ops::linear(self.value(input), self.value(weight), self.value(bias));
        self.push(v, Op::Linear { input, weight, bias })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).map(ops::sigmoid);
        self.push(v, Op::Sigmoid(input))
    }

    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        let (v, argmax) = ops::max_pool2(self.value(input));
        self.push(v, Op::MaxPool2 { input, argmax })
    }

    /// Fixed per-channel `x * scale[c] + shift[c]`.
    pub fn affine(&mut self, input: NodeId, scale: Vec<T>, shift: Vec<T>) -> NodeId {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let mut v = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let s = (b * c + ch) * h * w;
                for e in &mut v.data_mut()[s..s + h * w] {
                    *e = *e * scale[ch] + shift[ch];
                }
            }
        }
        self.push(v, Op::Affine { input, scale })
    }

    /// Reverse pass. `seeds` pairs output nodes with the gradient of the
    /// objective with respect to them. Returns one optional gradient per
    /// node; nodes that do not influence any seed stay `None`.
    pub fn backward(&self, seeds: &[(NodeId, &Tensor<T>)]) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(self.value(*id).shape(), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut grads, *id, (*g).clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { input, weight, bias, stride, pad } => {
                    let (gx, gw, gb) =
                        ops::conv2d_backward(self.value(*input), self.value(*weight), &g, *stride, *pad);
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weight, gw);
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::PRelu { input, slope } => {
                    let (gx, ga) = ops::prelu_backward(self.value(*input), self.value(*slope), &g);
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *slope, ga);
                }
                Op::LeakyRelu { input, slope } => {
                    let gx = ops::leaky_relu_backward(self.value(*input), *slope, &g);
                    accumulate(&mut grads, *input, gx);
                }
                Op::Relu(input) => {
                    let gx = self
                        .value(*input)
                        .zip_map(&g, |x, gv| if x > T::zero() { gv } else { T::zero() });
                    accumulate(&mut grads, *input, gx);
                }
                Op::BatchNorm { input, gamma, beta, cache } => {
                    let (gx, gg, gb) = ops::batch_norm_backward(cache, self.value(*gamma), &g);
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::PixelShuffle { input, factor } => {
                    accumulate(&mut grads, *input, ops::pixel_unshuffle(&g, *factor));
                }
                Op::Concat(inputs) => {
                    let widths: Vec<usize> = inputs.iter().map(|&i| self.value(i).dims4().1).collect();
                    for (i, part) in inputs.iter().zip(ops::split_channels(&g, &widths)) {
                        accumulate(&mut grads, *i, part);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*input), self.value(*weight), &g);
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Sigmoid(input) => {
                    let gx = node.value.zip_map(&g, |s, gv| gv * s * (T::one() - s));
                    accumulate(&mut grads, *input, gx);
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*input).shape());
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        gx.data_mut()[src] += gv;
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Affine { input, scale, .. } => {
                    let (n, c, h, w) = g.dims4();
                    let mut gx = g.clone();
                    for b in 0..n {
                        for ch in 0..c {
                            let s = (b * c + ch) * h * w;
                            for e in &mut gx.data_mut()[s..s + h * w] {
                                *e *= scale[ch];
                            }
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
            }
            // Only leaves keep their gradient; interior ones were consumed.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Grads { grads }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    let slot = &mut grads[id.0];
    match slot {
        Some(existing) => {
            // Parameter shapes may be (c,) while the op reports (c,); only
            // the element count has to agree.
            assert_eq!(existing.len(), g.len());
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf, shaped like `like`, or zeros if the leaf did not
    /// contribute.
    pub fn get_or_zero(&self, id: NodeId, like: &Tensor<T>) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => Tensor::from_vec(like.shape(), g.data().to_vec()),
            None => Tensor::zeros(like.shape()),
        }
    }
}
