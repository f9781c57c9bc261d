//! Forward and backward kernels for the spatial operators.
//!
//! All image tensors are `[batch, channels, height, width]`, row-major.
//! Convolutions lower to im2col + gemm per sample.

use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn transposed_out_len(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.k - 2 * self.pad
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn dims4<S: Scalar>(t: &Tensor<S>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Unfolds `x[c, h, w]` into `col[c*k*k, ho*wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut [S],
) {
    let kk = g.k * g.k;
    for ci in 0..c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * kk + ky * g.k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { S::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [S],
) {
    let kk = g.k * g.k;
    for ci in 0..c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * kk + ky * g.k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>, g: ConvGeom) -> Tensor<S> {
    let (bn, c, h, wd) = dims4(x);
    let (o, c2, k, k2) = dims4(w);
    assert!(c == c2 && k == g.k && k2 == g.k, "conv2d weight {:?} vs input {:?}", w.shape(), x.shape());
    let (ho, wo) = (g.out_len(h), g.out_len(wd));
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[bn, o, ho, wo]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); ckk * ho * wo] };
    let in_len = c * h * wd;
    let out_len = o * ho * wo;
    for bi in 0..bn {
        let xs = &x.data()[bi * in_len..(bi + 1) * in_len];
        let cols: &[S] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, c, h, wd, g, ho, wo, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[bi * out_len..(bi + 1) * out_len];
        gemm(MatRef::new(w.data(), o, ckk), MatRef::new(cols, ckk, ho * wo), S::zero(), dst);
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to (input, weight, bias).
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gout: &Tensor<S>,
    g: ConvGeom,
    needs: [bool; 3],
) -> [Option<Tensor<S>>; 3] {
    let (bn, c, h, wd) = dims4(x);
    let (o, _, k, _) = dims4(w);
    let (_, _, ho, wo) = dims4(gout);
    let ckk = c * k * k;
    let in_len = c * h * wd;
    let out_len = o * ho * wo;
    let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut gw = needs[1].then(|| Tensor::zeros(w.shape()));
    let mut col = vec![S::zero(); ckk * ho * wo];
    for bi in 0..bn {
        let go = &gout.data()[bi * out_len..(bi + 1) * out_len];
        if let Some(gw) = gw.as_mut() {
            let xs = &x.data()[bi * in_len..(bi + 1) * in_len];
            let cols: &[S] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, c, h, wd, g, ho, wo, &mut col);
                &col
            };
            gemm(MatRef::new(go, o, ho * wo), MatRef::new(cols, ckk, ho * wo).t(), S::one(), gw.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx.data_mut()[bi * in_len..(bi + 1) * in_len];
            if g.is_pointwise() {
                gemm(MatRef::new(w.data(), o, ckk).t(), MatRef::new(go, o, ho * wo), S::zero(), dst);
            } else {
                gemm(MatRef::new(w.data(), o, ckk).t(), MatRef::new(go, o, ho * wo), S::zero(), &mut col);
                col2im(&col, c, h, wd, g, ho, wo, dst);
            }
        }
    }
    let gb = needs[2].then(|| channel_sums(gout));
    [gx, gw, gb]
}

/// Transposed convolution; weight layout `[in, out, k, k]`.
pub fn conv_transpose2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    g: ConvGeom,
) -> Tensor<S> {
    let (bn, ci, h, wd) = dims4(x);
    let (ci2, co, k, _) = dims4(w);
    assert_eq!(ci, ci2, "conv_transpose2d weight {:?} vs input {:?}", w.shape(), x.shape());
    let (ho, wo) = (g.transposed_out_len(h), g.transposed_out_len(wd));
    let ckk = co * k * k;
    let mut out = Tensor::zeros(&[bn, co, ho, wo]);
    let mut col = vec![S::zero(); ckk * h * wd];
    let in_len = ci * h * wd;
    let out_len = co * ho * wo;
    for bi in 0..bn {
        let xs = &x.data()[bi * in_len..(bi + 1) * in_len];
        gemm(MatRef::new(w.data(), ci, ckk).t(), MatRef::new(xs, ci, h * wd), S::zero(), &mut col);
        let dst = &mut out.data_mut()[bi * out_len..(bi + 1) * out_len];
        col2im(&col, co, ho, wo, g, h, wd, dst);
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gout: &Tensor<S>,
    g: ConvGeom,
    needs: [bool; 3],
) -> [Option<Tensor<S>>; 3] {
    let (bn, ci, h, wd) = dims4(x);
    let (_, co, k, _) = dims4(w);
    let (_, _, ho, wo) = dims4(gout);
    let ckk = co * k * k;
    let in_len = ci * h * wd;
    let out_len = co * ho * wo;
    let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut gw = needs[1].then(|| Tensor::zeros(w.shape()));
    let mut col = vec![S::zero(); ckk * h * wd];
    if gx.is_some() || gw.is_some() {
        for bi in 0..bn {
            let go = &gout.data()[bi * out_len..(bi + 1) * out_len];
            im2col(go, co, ho, wo, g, h, wd, &mut col);
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data_mut()[bi * in_len..(bi + 1) * in_len];
                gemm(MatRef::new(w.data(), ci, ckk), MatRef::new(&col, ckk, h * wd), S::zero(), dst);
            }
            if let Some(gw) = gw.as_mut() {
                let xs = &x.data()[bi * in_len..(bi + 1) * in_len];
                gemm(MatRef::new(xs, ci, h * wd), MatRef::new(&col, ckk, h * wd).t(), S::one(), gw.data_mut());
            }
        }
    }
    let gb = needs[2].then(|| channel_sums(gout));
    [gx, gw, gb]
}

/// Sum over batch and spatial positions, per channel.
fn channel_sums<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (bn, c, h, w) = dims4(t);
    let mut out = Tensor::zeros(&[c]);
    for bi in 0..bn {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let s: S = t.data()[base..base + h * w].iter().copied().sum();
            out.data_mut()[ci] += s;
        }
    }
    out
}

/// Per-(sample, group) statistics: (mean, reciprocal std).
fn group_stats<S: Scalar>(x: &Tensor<S>, groups: usize, eps: f64) -> Vec<(S, S)> {
    let (bn, c, h, w) = dims4(x);
    let per = c / groups * h * w;
    let mut stats = Vec::with_capacity(bn * groups);
    for bi in 0..bn {
        for gi in 0..groups {
            let base = (bi * c) * h * w + gi * per;
            let xs = &x.data()[base..base + per];
            let n = S::of(per as f64);
            let mean = xs.iter().copied().sum::<S>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            stats.push((mean, S::one() / (var + S::of(eps)).sqrt()));
        }
    }
    stats
}

pub fn group_norm<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>, groups: usize, eps: f64) -> Tensor<S> {
    let (bn, c, h, w) = dims4(x);
    assert_eq!(c % groups, 0, "channels must divide into groups");
    let stats = group_stats(x, groups, eps);
    let cg = c / groups;
    let hw = h * w;
    let mut out = x.clone();
    for bi in 0..bn {
        for ci in 0..c {
            let (mean, rstd) = stats[bi * groups + ci / cg];
            let (ga, be) = (gamma.data()[ci], beta.data()[ci]);
            let base = (bi * c + ci) * hw;
            for v in &mut out.data_mut()[base..base + hw] {
                *v = (*v - mean) * rstd * ga + be;
            }
        }
    }
    out
}

pub fn group_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    gout: &Tensor<S>,
    groups: usize,
    eps: f64,
    needs: [bool; 3],
) -> [Option<Tensor<S>>; 3] {
    let (bn, c, h, w) = dims4(x);
    let stats = group_stats(x, groups, eps);
    let cg = c / groups;
    let hw = h * w;
    let per = cg * hw;
    let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for bi in 0..bn {
        for gi in 0..groups {
            let (mean, rstd) = stats[bi * groups + gi];
            let mut sum_d = S::zero();
            let mut sum_dx = S::zero();
            for cl in 0..cg {
                let ci = gi * cg + cl;
                let ga = gamma.data()[ci];
                let base = (bi * c + ci) * hw;
                for p in 0..hw {
                    let xhat = (x.data()[base + p] - mean) * rstd;
                    let go = gout.data()[base + p];
                    ggamma.data_mut()[ci] += go * xhat;
                    gbeta.data_mut()[ci] += go;
                    let d = go * ga;
                    sum_d += d;
                    sum_dx += d * xhat;
                }
            }
            if let Some(gx) = gx.as_mut() {
                let n = S::of(per as f64);
                for cl in 0..cg {
                    let ci = gi * cg + cl;
                    let ga = gamma.data()[ci];
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        let xhat = (x.data()[base + p] - mean) * rstd;
                        let d = gout.data()[base + p] * ga;
                        gx.data_mut()[base + p] = rstd / n * (n * d - sum_d - xhat * sum_dx);
                    }
                }
            }
        }
    }
    [gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
}

pub fn max_pool2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (bn, c, h, w) = dims4(x);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[bn, c, ho, wo]);
    for p in 0..bn * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = S::neg_infinity();
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    m = m.max(x.data()[(p * h + 2 * oy + dy) * w + 2 * ox + dx]);
                }
                out.data_mut()[(p * ho + oy) * wo + ox] = m;
            }
        }
    }
    out
}

pub fn max_pool2_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>) -> Tensor<S> {
    let (bn, c, h, w) = dims4(x);
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = Tensor::zeros(x.shape());
    for p in 0..bn * c {
        for oy in 0..ho {
            for ox in 0..wo {
                // first maximal element receives the gradient
                let mut best = (p * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                gx.data_mut()[best] += gout.data()[(p * ho + oy) * wo + ox];
            }
        }
    }
    gx
}

pub fn upsample_nearest<S: Scalar>(x: &Tensor<S>, f: usize) -> Tensor<S> {
    let (bn, c, h, w) = dims4(x);
    let (ho, wo) = (h * f, w * f);
    let mut out = Tensor::zeros(&[bn, c, ho, wo]);
    for p in 0..bn * c {
        for oy in 0..ho {
            for ox in 0..wo {
                out.data_mut()[(p * ho + oy) * wo + ox] = x.data()[(p * h + oy / f) * w + ox / f];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<S: Scalar>(x_shape: &[usize], gout: &Tensor<S>, f: usize) -> Tensor<S> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = (h * f, w * f);
    let mut gx = Tensor::zeros(x_shape);
    for p in 0..x_shape[0] * x_shape[1] {
        for oy in 0..ho {
            for ox in 0..wo {
                gx.data_mut()[(p * h + oy / f) * w + ox / f] += gout.data()[(p * ho + oy) * wo + ox];
            }
        }
    }
    gx
}
