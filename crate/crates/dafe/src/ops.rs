//! Layer primitives with hand-written forward and backward passes.
//!
//! Convolution here is cross-correlation (no kernel flip) plus bias; every
//! reference oracle and the persistence format assume that convention.
//! All operations are pure functions of their inputs.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Convolution geometry, separate from the weights so the parameter store
/// can own the latter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvMeta {
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvMeta {
            in_channels,
            out_channels,
            kh: k,
            kw: k,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Output extent along one axis: floor((n + 2p - d*(k-1) - 1)/s) + 1.
    pub fn out_dim(&self, in_dim: usize, k: usize) -> Result<usize> {
        let padded = in_dim + 2 * self.padding;
        let effective = self.dilation * (k - 1) + 1;
        if effective > padded {
            return Err(Error::Shape(format!(
                "effective kernel extent {effective} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - effective) / self.stride + 1)
    }

    pub fn out_shape(&self, x: Shape) -> Result<Shape> {
        if x.c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got input {x}",
                self.in_channels
            )));
        }
        let oh = self.out_dim(x.h, self.kh)?;
        let ow = self.out_dim(x.w, self.kw)?;
        Ok(Shape::new(x.n, self.out_channels, oh, ow))
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kh, self.kw)
    }
}

/// Convolution geometry plus owned weights and bias; the standalone form of
/// the layer. The network graph stores the same data in its parameter store.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub meta: ConvMeta,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl ConvSpec {
    pub fn new(meta: ConvMeta, weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weights.shape != meta.weight_shape() {
            return Err(Error::Shape(format!(
                "conv weights {} do not match expected {}",
                weights.shape,
                meta.weight_shape()
            )));
        }
        if bias.len() != meta.out_channels {
            return Err(Error::Shape(format!(
                "conv bias length {} does not match {} output channels",
                bias.len(),
                meta.out_channels
            )));
        }
        Ok(ConvSpec {
            meta,
            weights,
            bias,
        })
    }
}

pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv2d_raw(&spec.meta, input, &spec.weights.data, &spec.bias)
}

pub fn conv2d_backward(
    input: &Tensor,
    spec: &ConvSpec,
    upstream_grad: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (gx, gw, gb) = conv2d_backward_raw(&spec.meta, input, &spec.weights.data, upstream_grad)?;
    Ok((gx, Tensor::from_vec(spec.meta.weight_shape(), gw), gb))
}

/// Cross-correlation forward on raw weight/bias slices.
pub fn conv2d_raw(meta: &ConvMeta, x: &Tensor, w: &[f64], b: &[f64]) -> Result<Tensor> {
    let xs = x.shape;
    let os = meta.out_shape(xs)?;
    debug_assert_eq!(w.len(), meta.weight_shape().len());
    debug_assert_eq!(b.len(), meta.out_channels);
    let (s, p, d) = (meta.stride, meta.padding, meta.dilation);
    let mut out = Tensor::zeros(os);

    for n in 0..xs.n {
        for co in 0..os.c {
            let bias = b[co];
            for oy in 0..os.h {
                let ob = os.idx(n, co, oy, 0);
                out.data[ob..ob + os.w].fill(bias);
                for ci in 0..xs.c {
                    let wb = ((co * xs.c + ci) * meta.kh) * meta.kw;
                    for ky in 0..meta.kh {
                        let iy = (oy * s + ky * d) as isize - p as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let xb = xs.idx(n, ci, iy as usize, 0);
                        let xrow = &x.data[xb..xb + xs.w];
                        let orow = &mut out.data[ob..ob + os.w];
                        let wrow = &w[wb + ky * meta.kw..wb + (ky + 1) * meta.kw];
                        if s == 1 {
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let off = (kx * d) as isize - p as isize;
                                let ox0 = (-off).max(0) as usize;
                                let ox1 = (xs.w as isize - off).min(os.w as isize).max(0) as usize;
                                if ox0 >= ox1 {
                                    continue;
                                }
                                let src = &xrow[(ox0 as isize + off) as usize..];
                                for (o, &xv) in orow[ox0..ox1].iter_mut().zip(src) {
                                    *o += wv * xv;
                                }
                            }
                        } else {
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let off = (kx * d) as isize - p as isize;
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    let ix = (ox * s) as isize + off;
                                    if ix >= 0 && ix < xs.w as isize {
                                        *o += wv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss w.r.t. conv input, weights, and bias given the
/// upstream gradient. Returns flat weight gradients in weight layout order.
pub fn conv2d_backward_raw(
    meta: &ConvMeta,
    x: &Tensor,
    w: &[f64],
    gy: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let xs = x.shape;
    let os = meta.out_shape(xs)?;
    if gy.shape != os {
        return Err(Error::Shape(format!(
            "conv upstream gradient {} does not match output {os}",
            gy.shape
        )));
    }
    let (s, p, d) = (meta.stride, meta.padding, meta.dilation);
    let mut gx = Tensor::zeros(xs);
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; meta.out_channels];

    for n in 0..xs.n {
        for co in 0..os.c {
            for oy in 0..os.h {
                let gb_row = os.idx(n, co, oy, 0);
                let gyrow = &gy.data[gb_row..gb_row + os.w];
                gb[co] += gyrow.iter().sum::<f64>();
                for ci in 0..xs.c {
                    let wb = ((co * xs.c + ci) * meta.kh) * meta.kw;
                    for ky in 0..meta.kh {
                        let iy = (oy * s + ky * d) as isize - p as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let xb = xs.idx(n, ci, iy as usize, 0);
                        let xrow = &x.data[xb..xb + xs.w];
                        if s == 1 {
                            for kx in 0..meta.kw {
                                let wv = w[wb + ky * meta.kw + kx];
                                let off = (kx * d) as isize - p as isize;
                                let ox0 = (-off).max(0) as usize;
                                let ox1 = (xs.w as isize - off).min(os.w as isize).max(0) as usize;
                                if ox0 >= ox1 {
                                    continue;
                                }
                                let xi0 = (ox0 as isize + off) as usize;
                                let len = ox1 - ox0;
                                let mut acc = 0.0;
                                for (&g, &xv) in gyrow[ox0..ox1].iter().zip(&xrow[xi0..xi0 + len]) {
                                    acc += g * xv;
                                }
                                gw[wb + ky * meta.kw + kx] += acc;
                                let gxrow = &mut gx.data[xb + xi0..xb + xi0 + len];
                                for (gxv, &g) in gxrow.iter_mut().zip(&gyrow[ox0..ox1]) {
                                    *gxv += wv * g;
                                }
                            }
                        } else {
                            for kx in 0..meta.kw {
                                let wv = w[wb + ky * meta.kw + kx];
                                let off = (kx * d) as isize - p as isize;
                                for (ox, &g) in gyrow.iter().enumerate() {
                                    let ix = (ox * s) as isize + off;
                                    if ix >= 0 && ix < xs.w as isize {
                                        gw[wb + ky * meta.kw + kx] += g * xrow[ix as usize];
                                        gx.data[xb + ix as usize] += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// 2x2 stride-2 max pooling. Odd extents are treated as padded with -inf on
/// the bottom/right, so output dims are ceil(H/2) x ceil(W/2).
pub fn maxpool2(x: &Tensor) -> Tensor {
    maxpool2_with_argmax(x).0
}

/// Pooling plus the flat input index of each window maximum (first-found in
/// row-major window order on ties), which the backward pass routes into.
pub fn maxpool2_with_argmax(x: &Tensor) -> (Tensor, Vec<usize>) {
    let xs = x.shape;
    let os = Shape::new(xs.n, xs.c, xs.h.div_ceil(2), xs.w.div_ceil(2));
    let mut out = Tensor::zeros(os);
    let mut argmax = vec![0usize; os.len()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        let iy = 2 * oy + dy;
                        if iy >= xs.h {
                            continue;
                        }
                        for dx in 0..2 {
                            let ix = 2 * ox + dx;
                            if ix >= xs.w {
                                continue;
                            }
                            let i = xs.idx(n, c, iy, ix);
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = os.idx(n, c, oy, ox);
                    out.data[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(input_shape: Shape, argmax: &[usize], gy: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    for (o, &i) in argmax.iter().enumerate() {
        gx.data[i] += gy.data[o];
    }
    gx
}

/// Smallest max-vs-runner-up gap over all 2x2 pooling windows; infinity when
/// every window has a single live cell. Gradient checks use this to reject
/// draws where a perturbation could flip an argmax.
pub fn maxpool2_top2_gap(x: &Tensor) -> f64 {
    let xs = x.shape;
    let mut min_gap = f64::INFINITY;
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..xs.h.div_ceil(2) {
                for ox in 0..xs.w.div_ceil(2) {
                    let mut top = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                            if iy >= xs.h || ix >= xs.w {
                                continue;
                            }
                            let v = x.data[xs.idx(n, c, iy, ix)];
                            if v > top {
                                second = top;
                                top = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    if second.is_finite() {
                        min_gap = min_gap.min(top - second);
                    }
                }
            }
        }
    }
    min_gap
}

fn axis_map(out_dim: usize, in_dim: usize) -> Vec<(usize, usize, f64)> {
    (0..out_dim)
        .map(|o| {
            let src = if out_dim > 1 {
                o as f64 * (in_dim - 1) as f64 / (out_dim - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(in_dim - 1);
            let i1 = (i0 + 1).min(in_dim - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Align-corners bilinear interpolation: src = dst*(in-1)/(out-1), so the
/// corner samples are preserved exactly. Only upsampling is supported.
pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let xs = x.shape;
    if out_h < xs.h || out_w < xs.w {
        return Err(Error::Shape(format!(
            "bilinear_upsample cannot downsample {xs} to {out_h}x{out_w}"
        )));
    }
    let ys = axis_map(out_h, xs.h);
    let xsmap = axis_map(out_w, xs.w);
    let os = Shape::new(xs.n, xs.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let plane = x.plane(n, c);
            let oplane = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let r0 = &plane[y0 * xs.w..(y0 + 1) * xs.w];
                let r1 = &plane[y1 * xs.w..(y1 + 1) * xs.w];
                let orow = &mut oplane[oy * out_w..(oy + 1) * out_w];
                for (o, &(x0, x1, fx)) in orow.iter_mut().zip(&xsmap) {
                    let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                    let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                    *o = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_upsample_backward(input_shape: Shape, gy: &Tensor) -> Tensor {
    let os = gy.shape;
    let ys = axis_map(os.h, input_shape.h);
    let xsmap = axis_map(os.w, input_shape.w);
    let mut gx = Tensor::zeros(input_shape);
    for n in 0..os.n {
        for c in 0..os.c {
            let gplane = gy.plane(n, c);
            let xplane = gx.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let grow = &gplane[oy * os.w..(oy + 1) * os.w];
                for (&g, &(x0, x1, fx)) in grow.iter().zip(&xsmap) {
                    xplane[y0 * input_shape.w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    xplane[y0 * input_shape.w + x1] += g * (1.0 - fy) * fx;
                    xplane[y1 * input_shape.w + x0] += g * fy * (1.0 - fx);
                    xplane[y1 * input_shape.w + x1] += g * fy * fx;
                }
            }
        }
    }
    gx
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.grad = None;
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Subgradient 0 at the kink: gradient flows only where the input was
/// strictly positive.
pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape, gy.shape);
    let mut gx = Tensor::zeros(x.shape);
    for ((gxv, &xv), &g) in gx.data.iter_mut().zip(&x.data).zip(&gy.data) {
        if xv > 0.0 {
            *gxv = g;
        }
    }
    gx
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "add requires identical shapes, got {} and {}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(a.shape);
    for ((o, &av), &bv) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
        *o = av + bv;
    }
    Ok(out)
}

/// a + alpha * b.
pub fn scale_add(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "scale_add requires identical shapes, got {} and {}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(a.shape);
    for ((o, &av), &bv) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
        *o = av + alpha * bv;
    }
    Ok(out)
}

pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Shape("concat_channels needs at least one input".into()))?;
    let (n, h, w) = (first.shape.n, first.shape.h, first.shape.w);
    let mut c_total = 0;
    for t in inputs {
        if t.shape.n != n || t.shape.h != h || t.shape.w != w {
            return Err(Error::Shape(format!(
                "concat_channels requires matching N,H,W: {} vs {}",
                first.shape, t.shape
            )));
        }
        c_total += t.shape.c;
    }
    let os = Shape::new(n, c_total, h, w);
    let mut out = Tensor::zeros(os);
    for ni in 0..n {
        let mut c_off = 0;
        for t in inputs {
            for ci in 0..t.shape.c {
                out.plane_mut(ni, c_off + ci).copy_from_slice(t.plane(ni, ci));
            }
            c_off += t.shape.c;
        }
    }
    Ok(out)
}

/// Splits the upstream gradient back into per-input gradients.
pub fn concat_channels_backward(input_shapes: &[Shape], gy: &Tensor) -> Vec<Tensor> {
    let mut grads: Vec<Tensor> = input_shapes.iter().map(|&s| Tensor::zeros(s)).collect();
    for ni in 0..gy.shape.n {
        let mut c_off = 0;
        for g in grads.iter_mut() {
            for ci in 0..g.shape.c {
                g.plane_mut(ni, ci).copy_from_slice(gy.plane(ni, c_off + ci));
            }
            c_off += g.shape.c;
        }
    }
    grads
}

/// Replicates a single-channel map across `channels` channels.
pub fn broadcast_channels(x: &Tensor, channels: usize) -> Result<Tensor> {
    if x.shape.c != 1 {
        return Err(Error::Shape(format!(
            "broadcast_channels expects a single-channel input, got {}",
            x.shape
        )));
    }
    let os = Shape::new(x.shape.n, channels, x.shape.h, x.shape.w);
    let mut out = Tensor::zeros(os);
    for n in 0..x.shape.n {
        let src = x.plane(n, 0);
        for c in 0..channels {
            out.plane_mut(n, c).copy_from_slice(src);
        }
    }
    Ok(out)
}

pub fn broadcast_channels_backward(gy: &Tensor) -> Tensor {
    let is = Shape::new(gy.shape.n, 1, gy.shape.h, gy.shape.w);
    let mut gx = Tensor::zeros(is);
    for n in 0..gy.shape.n {
        for c in 0..gy.shape.c {
            let src = gy.plane(n, c);
            for (g, &v) in gx.plane_mut(n, 0).iter_mut().zip(src) {
                *g += v;
            }
        }
    }
    gx
}

fn mirror_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Pads bottom/right by edge-excluding reflection so both spatial extents
/// become multiples of `m`. Used on input images only (no backward).
pub fn reflect_pad_to_multiple(x: &Tensor, m: usize) -> Tensor {
    let xs = x.shape;
    let h = xs.h.div_ceil(m) * m;
    let w = xs.w.div_ceil(m) * m;
    if h == xs.h && w == xs.w {
        return x.clone();
    }
    let os = Shape::new(xs.n, xs.c, h, w);
    let mut out = Tensor::zeros(os);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..h {
                let iy = mirror_index(oy, xs.h);
                for ox in 0..w {
                    dst[oy * w + ox] = src[iy * xs.w + mirror_index(ox, xs.w)];
                }
            }
        }
    }
    out
}
