//! Forward and adjoint kernels for every layer primitive.
//!
//! These are plain functions of their inputs; [`super::GradTape`] records
//! which ones ran and calls the matching adjoint during `backward`.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution after validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (batch, in_channels, height, width) = input.dims4()?;
        let (out_channels, wc, kernel_h, kernel_w) = weight.dims4()?;
        if wc != in_channels {
            return Err(Error::dim(
                "conv2d",
                format!("input has {in_channels} channels, weight expects {wc}"),
            ));
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kernel_h}x{kernel_w} must have odd extents"),
            ));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be positive".into()));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::dim(
                "conv2d",
                format!("padded input {height}x{width}+{padding} smaller than kernel"),
            ));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1 stride-1 unpadded kernel reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + k - pad` is in range.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.padding, self.width);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // largest ox with ox*s + k - p <= w - 1
        let hi = if w + p > k {
            ((w + p - k - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let (h, w, oh, ow) = (self.height, self.width, self.out_h, self.out_w);
        let plane = oh * ow;
        for c in 0..self.in_channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..oh {
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if self.stride == 1 {
                            let start = lo + kj - self.padding;
                            drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                                *d = src[ox * self.stride + kj - self.padding];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let (h, w, oh, ow) = (self.height, self.width, self.out_h, self.out_w);
        let plane = oh * ow;
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            drow[ox * self.stride + kj - self.padding] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation plus per-output-channel bias.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", b.shape(), g.out_channels),
            ));
        }
    }
    let (k, plane) = (g.patch_len(), g.out_plane());
    let mut out = Tensor::zeros(&[g.batch, g.out_channels, g.out_h, g.out_w]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let in_item = g.in_channels * g.height * g.width;
    let out_item = g.out_channels * plane;
    for bi in 0..g.batch {
        let x = &input.data()[bi * in_item..(bi + 1) * in_item];
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        let y = &mut out.data_mut()[bi * out_item..(bi + 1) * out_item];
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                y[co * plane..(co + 1) * plane].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        // SAFETY: matrices are dense row-major inside their slices.
        unsafe {
            T::gemm(
                g.out_channels,
                k,
                plane,
                T::one(),
                weight.data().as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                plane as isize,
                1,
                beta,
                y.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
    }
    Ok(out)
}

/// Adjoints of [`conv2d`]: `(d_input, d_weight, d_bias)`.
/// The input adjoint is skipped when `need_input` is false.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    if grad_out.shape() != [g.batch, g.out_channels, g.out_h, g.out_w] {
        return Err(Error::dim(
            "conv2d_backward",
            format!("gradient shape {:?}", grad_out.shape()),
        ));
    }
    let (k, plane) = (g.patch_len(), g.out_plane());
    let in_item = g.in_channels * g.height * g.width;
    let out_item = g.out_channels * plane;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[g.out_channels]);
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let mut dcol = vec![T::zero(); k * plane];
    for bi in 0..g.batch {
        let x = &input.data()[bi * in_item..(bi + 1) * in_item];
        let dy = &grad_out.data()[bi * out_item..(bi + 1) * out_item];
        for co in 0..g.out_channels {
            db.data_mut()[co] += dy[co * plane..(co + 1) * plane].iter().copied().sum();
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        // SAFETY: dense row-major operands; the transposes are expressed via strides.
        unsafe {
            T::gemm(
                g.out_channels,
                plane,
                k,
                T::one(),
                dy.as_ptr(),
                plane as isize,
                1,
                cols.as_ptr(),
                1,
                plane as isize,
                T::one(),
                dw.data_mut().as_mut_ptr(),
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * in_item..(bi + 1) * in_item];
            let target: &mut [T] = if g.is_pointwise() { dxb } else { &mut dcol };
            // SAFETY: as above.
            unsafe {
                T::gemm(
                    k,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight.data().as_ptr(),
                    1,
                    k as isize,
                    dy.as_ptr(),
                    plane as isize,
                    1,
                    T::zero(),
                    target.as_mut_ptr(),
                    plane as isize,
                    1,
                );
            }
            if !g.is_pointwise() {
                g.col2im(&dcol, &mut dx.data_mut()[bi * in_item..(bi + 1) * in_item]);
            }
        }
    }
    Ok((dx, dw, db))
}

/// Per-channel statistics and normalized activations saved for the adjoint.
#[derive(Debug, Clone)]
pub struct BatchNormOutput<T: Real> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and biased batch variance (train mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn check_bn_params<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: f64,
) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "batch_norm",
            format!(
                "affine shapes {:?}/{:?} for {c} channels",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!(
            "batch-norm epsilon must be positive, got {epsilon}"
        )));
    }
    Ok((b, c, h * w))
}

fn bn_apply<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let (b, c, plane) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let (g, be, m, s) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in off..off + plane {
                let n = (x.data()[i] - m) * s;
                xhat.data_mut()[i] = n;
                y.data_mut()[i] = g * n + be;
            }
        }
    }
    (y, xhat)
}

/// Batch normalization using the statistics of this batch.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: f64,
) -> Result<BatchNormOutput<T>> {
    let (b, c, plane) = check_bn_params(x, gamma, beta, epsilon)?;
    let count = b * plane;
    if count < 2 {
        return Err(Error::dim(
            "batch_norm",
            "train mode needs at least two values per channel",
        ));
    }
    let n = T::of(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            s += x.data()[off..off + plane].iter().copied().sum();
        }
        let m = s / n;
        let mut v = T::zero();
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for &xv in &x.data()[off..off + plane] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    let eps = T::of(epsilon);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (output, normalized) = bn_apply(x, gamma, beta, &mean, &inv_std);
    Ok(BatchNormOutput {
        output,
        normalized,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    })
}

/// Batch normalization using stored running statistics.
pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    epsilon: f64,
) -> Result<BatchNormOutput<T>> {
    let (_, c, _) = check_bn_params(x, gamma, beta, epsilon)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::dim("batch_norm", "running statistics length"));
    }
    let eps = T::of(epsilon);
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let (output, normalized) = bn_apply(x, gamma, beta, running_mean, &inv_std);
    Ok(BatchNormOutput {
        output,
        normalized,
        inv_std,
        batch_mean: Vec::new(),
        batch_var: Vec::new(),
    })
}

/// Adjoints of batch normalization: `(d_input, d_gamma, d_beta)`.
///
/// In train mode the statistics depend on the input and contribute to its
/// adjoint; in eval mode they are constants.
pub fn batch_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    train: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.same_shape(normalized, "batch_norm_backward")?;
    let (b, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let n = T::of((b * plane) as f64);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(grad_out.shape());
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (T::zero(), T::zero());
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                sdy += grad_out.data()[i];
                sdyx += grad_out.data()[i] * normalized.data()[i];
            }
        }
        dgamma.data_mut()[ch] = sdyx;
        dbeta.data_mut()[ch] = sdy;
        let g = gamma.data()[ch] * inv_std[ch];
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                let dy = grad_out.data()[i];
                dx.data_mut()[i] = if train {
                    g * (dy - sdy / n - normalized.data()[i] * sdyx / n)
                } else {
                    g * dy
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Max pooling; returns the output and, per output site, the flat input
/// index of the first maximum in scan order.
pub fn max_pool2d<T: Real>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::dim(
            "max_pool2d",
            format!("window {window} stride {stride} on {h}x{w}"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let mut o = 0;
    for p in 0..b * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * stride * w + ox * stride;
                let mut best = x.data()[best_i];
                for ky in 0..window {
                    for kx in 0..window {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                out.data_mut()[o] = best;
                argmax.push(best_i);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// Interpolation taps along one axis: for each output index, the two source
/// indices and their weights.
fn bilinear_taps<T: Real>(len: usize, factor: usize) -> Vec<(usize, usize, T, T)> {
    let f = factor as f64;
    (0..len * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / f - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, T::of(1.0 - l1), T::of(l1))
        })
        .collect()
}

/// Bilinear upsampling by an integer factor with half-pixel centers and
/// border clamping.
pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::Usage("upsample factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, _, wy1)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, _, wx1)) in tx.iter().enumerate() {
                let top = r0[x0] + wx1 * (r0[x1] - r0[x0]);
                let bottom = r1[x0] + wx1 * (r1[x1] - r1[x0]);
                dst[oy * ow + ox] = top + wy1 * (bottom - top);
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    factor: usize,
) -> Result<Tensor<T>> {
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    if grad_out.shape() != [b, c, oh, ow] {
        return Err(Error::dim(
            "upsample_backward",
            format!("gradient shape {:?}", grad_out.shape()),
        ));
    }
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let mut dx = Tensor::zeros(input_shape);
    for p in 0..b * c {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += wy0 * wx0 * v;
                d[y0 * w + x1] += wy0 * wx1 * v;
                d[y1 * w + x0] += wy1 * wx0 * v;
                d[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    Ok(dx)
}

/// Channel-axis concatenation in argument order.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Usage("concat of no tensors".into()))?;
    let (b, _, h, w) = first.dims4()?;
    let mut total = 0;
    for t in inputs {
        let (tb, tc, th, tw) = t.dims4()?;
        if (tb, th, tw) != (b, h, w) {
            return Err(Error::dim(
                "concat_channels",
                format!("{:?} vs {:?}", first.shape(), t.shape()),
            ));
        }
        total += tc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * total * plane);
    for bi in 0..b {
        for t in inputs {
            let item = t.shape()[1] * plane;
            data.extend_from_slice(&t.data()[bi * item..(bi + 1) * item]);
        }
    }
    Tensor::new(&[b, total, h, w], data)
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<T> {
    pred.same_shape(target, "bce")?;
    let (lo, hi) = (T::of(eps), T::of(1.0 - eps));
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    Ok(sum / T::of(pred.len() as f64))
}

/// Gradient of [`bce`] with respect to the prediction; zero where clamped.
pub fn bce_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Tensor<T> {
    let (lo, hi) = (T::of(eps), T::of(1.0 - eps));
    let n = T::of(pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                T::zero()
            } else {
                (-y / p + (T::one() - y) / (T::one() - p)) / n
            }
        })
        .collect();
    Tensor::new(pred.shape(), data).expect("shape preserved")
}

/// `2 * sum(p * y) / (sum(p) + sum(y))`, defined as 1 when both sums vanish.
pub fn soft_dice<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.same_shape(target, "soft_dice")?;
    let (inter, denom) = dice_sums(pred, target);
    Ok(if denom == T::zero() {
        T::one()
    } else {
        (inter + inter) / denom
    })
}

fn dice_sums<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> (T, T) {
    let mut inter = T::zero();
    let mut denom = T::zero();
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        inter += p * y;
        denom += p + y;
    }
    (inter, denom)
}

pub fn soft_dice_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let (inter, denom) = dice_sums(pred, target);
    if denom == T::zero() {
        return Tensor::zeros(pred.shape());
    }
    let two = T::of(2.0);
    let a = two / denom;
    let b = two * inter / (denom * denom);
    target.map(|y| a * y - b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_kernel_doubles_input() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 1, 1], &[2.]);
        let b = t(&[1], &[0.]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[2., 4., 6., 8., 10., 12., 14., 16., 18.]);
    }

    #[test]
    fn all_ones_kernel_sums() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, 1, 1),
            Err(Error::Dimension { .. })
        ));
        let even = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &even, None, 1, 1).is_err());
    }

    #[test]
    fn strided_output_size() {
        let x = Tensor::<f32>::full(&[1, 1, 7, 6], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 3]);
        // corner sees a 2x2 patch of ones
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn relu_values() {
        let x = t(&[3], &[-1., 0., 2.]);
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        let neg = Tensor::full(&[4], -3.0f32);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0f32), 0.5);
        assert!((sigmoid_scalar(100.0f32) - 1.0).abs() < 1e-7);
        assert!(sigmoid_scalar(-100.0f32) >= 0.0);
        assert!(sigmoid_scalar(-1000.0f64).is_finite());
    }

    #[test]
    fn max_pool_basics() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let (y, idx) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.]);
        assert_eq!(idx, vec![3]);
        let c = Tensor::full(&[1, 2, 4, 4], 0.7f32);
        let (y, idx) = max_pool2d(&c, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.7));
        // ties resolve to the first site in scan order
        assert_eq!(idx[0], 0);
    }

    #[test]
    fn upsample_constant_and_identity() {
        let x = t(&[1, 1, 1, 1], &[3.5]);
        let y = upsample_bilinear(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.5; 4]);
        let r = Tensor::<f32>::from_fn(&[1, 2, 3, 3], |i| (i as f32).sin());
        assert_eq!(upsample_bilinear(&r, 1).unwrap(), r);
    }

    #[test]
    fn concat_order_and_errors() {
        let a = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 2, 2, 2], 2.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2, 2]);
        assert_eq!(&c.data()[..4], &[1.0; 4]);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let bad = Tensor::<f32>::zeros(&[1, 1, 3, 2]);
        assert!(matches!(
            concat_channels(&[&a, &bad]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn batch_norm_rejects_nonpositive_epsilon() {
        let x = Tensor::<f32>::zeros(&[2, 1, 2, 2]);
        let g = Tensor::full(&[1], 1.0f32);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            batch_norm_train(&x, &g, &b, 0.0),
            Err(Error::Config(_))
        ));
        // zero variance is absorbed by epsilon
        let out = batch_norm_train(&x, &g, &b, 1e-5).unwrap();
        assert!(out.output.all_finite());
    }

    #[test]
    fn bce_midpoint_and_hand_case() {
        let p = t(&[1], &[0.5]);
        let y = t(&[1], &[1.0]);
        assert!((bce(&p, &y, 1e-7).unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
        let p = Tensor::<f64>::new(&[2], vec![0.9, 0.2]).unwrap();
        let y = Tensor::<f64>::new(&[2], vec![1.0, 0.0]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((bce(&p, &y, 1e-7).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn bce_floor_at_perfect_prediction() {
        let y = Tensor::<f64>::new(&[4], vec![1., 0., 1., 0.]).unwrap();
        assert!(bce(&y, &y, 1e-7).unwrap() <= 1.1e-7);
    }

    #[test]
    fn soft_dice_cases() {
        let y = t(&[3], &[1., 0., 1.]);
        assert_eq!(soft_dice(&y, &y).unwrap(), 1.0);
        let other = t(&[3], &[0., 1., 0.]);
        assert_eq!(soft_dice(&other, &y).unwrap(), 0.0);
        let p = t(&[2], &[0.5, 0.5]);
        let y = t(&[2], &[1., 0.]);
        assert_eq!(soft_dice(&p, &y).unwrap(), 0.5);
        let z = Tensor::<f32>::zeros(&[3]);
        assert_eq!(soft_dice(&z, &z).unwrap(), 1.0);
    }
}
