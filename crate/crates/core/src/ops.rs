//! Forward and vector-Jacobian kernels for the layer types used by the
//! networks. All activations are NCHW.

use crate::scalar::Real;
use crate::tensor::Tensor;

/// Output extent of a square-kernel convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Range of output indices `o` for which `o * stride + k - pad` lands inside
/// `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    let lo = lo.min(out_len);
    (lo, hi.max(lo))
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, ci, h, w) = x.dims4();
    let (co, wci, k, k2) = weight.dims4();
    assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
    assert_eq!(k, k2);
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..co {
            let oplane = &mut od[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo];
            if let Some(bias) = bias {
                let bv = bias.data()[oc];
                oplane.iter_mut().for_each(|v| *v = bv);
            }
            for ic in 0..ci {
                let iplane = &xd[(b * ci + ic) * h * w..(b * ci + ic + 1) * h * w];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, stride, pad);
                    for kx in 0..k {
                        let wv = wd[((oc * ci + ic) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(wo, w, kx, stride, pad);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let irow = &iplane[iy * w..(iy + 1) * w];
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                let off = ox_lo + kx - pad;
                                for (o, &i) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[off..]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, w) = x.dims4();
    let (co, _, k, _) = weight.dims4();
    let (_, _, ho, wo) = grad_out.dims4();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[co]);
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    {
        let gbd = gb.data_mut();
        for b in 0..n {
            for oc in 0..co {
                let gplane = &gd[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo];
                gbd[oc] += gplane.iter().copied().sum::<T>();
            }
        }
    }
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    for b in 0..n {
        for oc in 0..co {
            let gplane = &gd[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo];
            for ic in 0..ci {
                let base = (b * ci + ic) * h * w;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, stride, pad);
                    for kx in 0..k {
                        let widx = ((oc * ci + ic) * k + ky) * k + kx;
                        let wv = wd[widx];
                        let (ox_lo, ox_hi) = valid_range(wo, w, kx, stride, pad);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let irow_start = base + iy * w;
                            if stride == 1 {
                                let off = irow_start + ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                let irow = &xd[off..off + len];
                                let g = &grow[ox_lo..ox_hi];
                                for (&gv, &iv) in g.iter().zip(irow) {
                                    acc += gv * iv;
                                }
                                let gxrow = &mut gxd[off..off + len];
                                for (gxv, &gv) in gxrow.iter_mut().zip(g) {
                                    *gxv += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ii = irow_start + ox * stride + kx - pad;
                                    let gv = grow[ox];
                                    acc += gv * xd[ii];
                                    gxd[ii] += wv * gv;
                                }
                            }
                        }
                        gwd[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-channel PReLU: `max(0, x) + slope[c] * min(0, x)`.
pub fn prelu<T: Real>(x: &Tensor<T>, slope: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(slope.len(), c, "prelu: {} slopes for {c} channels", slope.len());
    let mut out = x.clone();
    let plane = h * w;
    for b in 0..n {
        for ch in 0..c {
            let a = slope.data()[ch];
            let start = (b * c + ch) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                if *v < T::zero() {
                    *v = *v * a;
                }
            }
        }
    }
    out
}

pub fn prelu_backward<T: Real>(
    x: &Tensor<T>,
    slope: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut gx = grad_out.clone();
    let mut ga = Tensor::zeros(&[c]);
    for b in 0..n {
        for ch in 0..c {
            let a = slope.data()[ch];
            let start = (b * c + ch) * plane;
            let mut acc = T::zero();
            for i in start..start + plane {
                let xv = x.data()[i];
                if xv < T::zero() {
                    acc += grad_out.data()[i] * xv;
                    gx.data_mut()[i] = grad_out.data()[i] * a;
                }
            }
            ga.data_mut()[ch] += acc;
        }
    }
    (gx, ga)
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v < T::zero() { v * slope } else { v })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Tensor<T> {
    x.zip_map(grad_out, |v, g| if v < T::zero() { g * slope } else { g })
}

/// Depth-to-space: `(n, c·r², h, w) → (n, c, h·r, w·r)`, channel
/// `c·r² + i·r + j` lands on sub-pixel `(i, j)`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, cin, h, w) = x.dims4();
    assert_eq!(cin % (r * r), 0, "pixel_shuffle: {cin} channels not divisible by {}", r * r);
    let c = cin / (r * r);
    let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src = ch * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            *out.at_mut(b, ch, y * r + i, xx * r + j) = x.at(b, src, y, xx);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Space-to-depth; the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, c, hr, wr) = x.dims4();
    assert!(hr % r == 0 && wr % r == 0);
    let (h, w) = (hr / r, wr / r);
    let mut out = Tensor::zeros(&[n, c * r * r, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst = ch * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            *out.at_mut(b, dst, y, xx) = x.at(b, ch, y * r + i, xx * r + j);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let (n, _, h, w) = xs[0].dims4();
    let ctot: usize = xs.iter().map(|t| t.dims4().1).sum();
    let mut data = Vec::with_capacity(n * ctot * h * w);
    for b in 0..n {
        for t in xs {
            let (tn, tc, th, tw) = t.dims4();
            assert_eq!((tn, th, tw), (n, h, w), "concat: mismatched shapes");
            let len = tc * h * w;
            data.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
        }
    }
    Tensor::from_vec(&[n, ctot, h, w], data)
}

/// Splits a channel-axis gradient back into per-input pieces.
pub fn split_channels<T: Real>(g: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let (n, ctot, h, w) = g.dims4();
    assert_eq!(widths.iter().sum::<usize>(), ctot);
    let mut outs: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(n * c * h * w)).collect();
    for b in 0..n {
        let mut offset = b * ctot * h * w;
        for (out, &c) in outs.iter_mut().zip(widths) {
            out.extend_from_slice(&g.data()[offset..offset + c * h * w]);
            offset += c * h * w;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &c)| Tensor::from_vec(&[n, c, h, w], d))
        .collect()
}

/// Fully connected layer over the flattened `(c, h, w)` features of each
/// sample. `weight` is `(out, in)`; the result is `(n, out, 1, 1)`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let fin = x.len() / n;
    let (fout, win) = (weight.shape()[0], weight.shape()[1]);
    assert_eq!(fin, win, "linear: {fin} input features, weight expects {win}");
    let mut out = Tensor::zeros(&[n, fout, 1, 1]);
    for b in 0..n {
        let xs = &x.data()[b * fin..(b + 1) * fin];
        for o in 0..fout {
            let wr = &weight.data()[o * fin..(o + 1) * fin];
            let dot: T = wr.iter().zip(xs).map(|(&a, &b)| a * b).sum();
            out.data_mut()[b * fout + o] = dot + bias.data()[o];
        }
    }
    out
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = x.shape()[0];
    let fin = x.len() / n;
    let fout = weight.shape()[0];
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[fout]);
    for b in 0..n {
        let xs = &x.data()[b * fin..(b + 1) * fin];
        for o in 0..fout {
            let g = grad_out.data()[b * fout + o];
            gb.data_mut()[o] += g;
            let wr = &weight.data()[o * fin..(o + 1) * fin];
            let gxr = &mut gx.data_mut()[b * fin..(b + 1) * fin];
            for (gxv, &wv) in gxr.iter_mut().zip(wr) {
                *gxv += g * wv;
            }
            let gwr = &mut gw.data_mut()[o * fin..(o + 1) * fin];
            for (gwv, &xv) in gwr.iter_mut().zip(xs) {
                *gwv += g * xv;
            }
        }
    }
    (gx, gw, gb)
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Training-mode batch normalization statistics.
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, BatchNormCache<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let m = T::lit((n * plane) as f64);
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mut mean = T::zero();
        for b in 0..n {
            let s = (b * c + ch) * plane;
            mean += x.data()[s..s + plane].iter().copied().sum::<T>();
        }
        mean /= m;
        let mut var = T::zero();
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for &v in &x.data()[s..s + plane] {
                var += (v - mean) * (v - mean);
            }
        }
        var /= m;
        let istd = T::one() / (var + T::lit(BN_EPS)).sqrt();
        inv_std[ch] = istd;
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                let xh = (x.data()[i] - mean) * istd;
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + bt;
            }
        }
    }
    (out, BatchNormCache { xhat, inv_std })
}

pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = grad_out.dims4();
    let plane = h * w;
    let m = T::lit((n * plane) as f64);
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                let g = grad_out.data()[i];
                sum_g += g;
                sum_gx += g * cache.xhat.data()[i];
            }
        }
        gb.data_mut()[ch] = sum_g;
        gg.data_mut()[ch] = sum_gx;
        let gam = gamma.data()[ch];
        let k = gam * cache.inv_std[ch] / m;
        for b in 0..n {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                let g = grad_out.data()[i];
                let xh = cache.xhat.data()[i];
                gx.data_mut()[i] = k * (m * g - sum_g - xh * sum_gx);
            }
        }
    }
    (gx, gg, gb)
}

/// 2×2 max pooling with stride 2; also returns the flat argmax of each window.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * c + ch) * h + 2 * y + dy) * w + 2 * xx + dx;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            bi = i;
                        }
                    }
                    *out.at_mut(b, ch, y, xx) = best;
                    arg.push(bi);
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, w) = x.dims4();
        let (co, _, k, _) = wt.dims4();
        let ho = conv_out_len(h, k, stride, pad);
        let wo = conv_out_len(w, k, stride, pad);
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ic in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += wt.at(oc, ic, ky, kx) * x.at(b, ic, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        *out.at_mut(b, oc, oy, ox) = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        for &(k, stride, pad, h, w) in &[
            (3, 1, 1, 7, 6),
            (3, 2, 1, 7, 6),
            (9, 1, 4, 7, 6),
            (1, 1, 0, 7, 6),
            (3, 2, 0, 7, 6),
            (9, 1, 4, 3, 2),
            (3, 2, 1, 1, 1),
        ] {
            let x = pseudo(&[2, 3, h, w], 1);
            let wt = pseudo(&[4, 3, k, k], 2);
            let got = conv2d(&x, &wt, None, stride, pad);
            let want = naive_conv(&x, &wt, stride, pad);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={stride} p={pad}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> and likewise for the weight.
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 6, 5), (3, 2, 1, 6, 5), (5, 1, 2, 6, 5), (9, 1, 4, 3, 2)] {
            let x = pseudo(&[2, 2, h, w], 3);
            let wt = pseudo(&[3, 2, k, k], 4);
            let y = conv2d(&x, &wt, None, stride, pad);
            let g = pseudo(y.shape(), 5);
            let (gx, gw, gb) = conv2d_backward(&x, &wt, &g, stride, pad);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs_x: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            let rhs_w: f64 = wt.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_x).abs() < 1e-10);
            assert!((lhs - rhs_w).abs() < 1e-10);
            let (n, co, ho, wo) = g.dims4();
            for oc in 0..co {
                let mut s = 0.0;
                for b in 0..n {
                    for yy in 0..ho {
                        for xx in 0..wo {
                            s += g.at(b, oc, yy, xx);
                        }
                    }
                }
                assert!((gb.data()[oc] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pixel_shuffle_round_trip() {
        let x = pseudo(&[2, 8, 3, 4], 9);
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), &[2, 2, 6, 8]);
        assert_eq!(pixel_unshuffle(&y, 2), x);
    }

    #[test]
    fn pixel_shuffle_of_constant_is_constant() {
        let x = Tensor::<f64>::full(&[1, 4, 3, 3], 0.7);
        assert!(pixel_shuffle(&x, 2).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn concat_split_round_trip() {
        let a = pseudo(&[2, 2, 3, 3], 1);
        let b = pseudo(&[2, 3, 3, 3], 2);
        let c = concat_channels(&[&a, &b]);
        let parts = split_channels(&c, &[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }
}
