use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Scalar, Shape, Tensor};
use crate::error::{check_dim, Error, Result};

/// Square-kernel 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Dense convolution with "same" padding (`kernel / 2`).
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
            bias: false,
        }
    }

    /// One filter per channel, `channels * multiplier` outputs.
    pub fn depthwise(channels: usize, multiplier: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels * multiplier,
            kernel,
            stride,
            padding: kernel / 2,
            groups: channels,
            bias: false,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_per_group(),
            self.kernel,
            self.kernel,
        )
    }

    /// Weight count, bias excluded.
    pub fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(
                "convolution needs at least one input and output channel",
            ));
        }
        if self.kernel == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::config("kernel, stride and groups must be >= 1"));
        }
        if !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::config(format!(
                "channels {}->{} are not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Output extent along one spatial axis (floor division, as every
    /// framework does for strided convolutions).
    pub fn out_extent(&self, size: usize) -> Result<usize> {
        let padded = size + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::config(format!(
                "kernel {} does not fit input extent {} with padding {}",
                self.kernel, size, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        check_dim("conv2d", "C", self.in_channels, input.c)?;
        Ok(Shape::new(
            input.n,
            self.out_channels,
            self.out_extent(input.h)?,
            self.out_extent(input.w)?,
        ))
    }
}

fn check_weights(spec: &ConvSpec, weights: &Tensor) -> Result<()> {
    let ws = spec.weight_shape();
    let got = weights.shape();
    check_dim("conv2d weights", "out_channels", ws.n, got.n)?;
    check_dim("conv2d weights", "in_channels/groups", ws.c, got.c)?;
    check_dim("conv2d weights", "kernel_h", ws.h, got.h)?;
    check_dim("conv2d weights", "kernel_w", ws.w, got.w)
}

fn check_params(spec: &ConvSpec, weights: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    check_weights(spec, weights)?;
    match (spec.bias, bias) {
        (true, Some(b)) => check_dim("conv2d bias", "len", spec.out_channels, b.len()),
        (true, None) => Err(Error::config(
            "convolution declares a bias but none was given",
        )),
        (false, Some(_)) => Err(Error::config("convolution has no bias but one was given")),
        (false, None) => Ok(()),
    }
}

/// Valid output columns `[lo, hi)` for kernel tap `k` so that the input
/// column `o * stride + k - pad` lies in `[0, size)`.
#[inline]
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k - pad < size
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let limit = size + pad; // o*stride + k < size + pad
    let hi = if limit > k {
        ((limit - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unrolled dot product with a fixed summation order.
#[inline]
fn dot(a: &[Scalar], b: &[Scalar]) -> Scalar {
    let mut acc = [0.0 as Scalar; 4];
    let (ac, ar) = a.split_at(a.len() / 4 * 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: Scalar = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: Scalar, x: &[Scalar], y: &mut [Scalar]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Patch matrix of one sample for a dense convolution: row `p` holds the
/// receptive field of output pixel `p`, ordered like a weight row.
fn im2col(x: &[Scalar], spec: &ConvSpec, ins: Shape, outs: Shape) -> Vec<Scalar> {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let kk = spec.in_channels * k * k;
    let mut cols = vec![0.0 as Scalar; outs.h * outs.w * kk];
    for c in 0..spec.in_channels {
        let xp = &x[c * ins.h * ins.w..(c + 1) * ins.h * ins.w];
        for kh in 0..k {
            let (h0, h1) = valid_range(outs.h, ins.h, kh, s, p);
            for kw in 0..k {
                let j = (c * k + kh) * k + kw;
                let (w0, w1) = valid_range(outs.w, ins.w, kw, s, p);
                for yh in h0..h1 {
                    let xrow = &xp[(yh * s + kh - p) * ins.w..];
                    for yw in w0..w1 {
                        cols[(yh * outs.w + yw) * kk + j] = xrow[yw * s + kw - p];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(cols: &[Scalar], spec: &ConvSpec, ins: Shape, outs: Shape, gx: &mut [Scalar]) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let kk = spec.in_channels * k * k;
    for c in 0..spec.in_channels {
        let gp = &mut gx[c * ins.h * ins.w..(c + 1) * ins.h * ins.w];
        for kh in 0..k {
            let (h0, h1) = valid_range(outs.h, ins.h, kh, s, p);
            for kw in 0..k {
                let j = (c * k + kh) * k + kw;
                let (w0, w1) = valid_range(outs.w, ins.w, kw, s, p);
                for yh in h0..h1 {
                    let row = (yh * s + kh - p) * ins.w;
                    for yw in w0..w1 {
                        gp[row + yw * s + kw - p] += cols[(yh * outs.w + yw) * kk + j];
                    }
                }
            }
        }
    }
}

fn dense_sample(
    x: &[Scalar],
    w: &[Scalar],
    spec: &ConvSpec,
    ins: Shape,
    outs: Shape,
    y: &mut [Scalar],
) {
    let cols = im2col(x, spec, ins, outs);
    let kk = spec.in_channels * spec.kernel * spec.kernel;
    let plane = outs.h * outs.w;
    for (wo, yo) in w.chunks_exact(kk).zip(y.chunks_exact_mut(plane)) {
        for (yv, patch) in yo.iter_mut().zip(cols.chunks_exact(kk)) {
            *yv += dot(wo, patch);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dense_sample_backward(
    x: &[Scalar],
    w: &[Scalar],
    gy: &[Scalar],
    spec: &ConvSpec,
    ins: Shape,
    outs: Shape,
    gx: &mut [Scalar],
    gw: &mut [Scalar],
) {
    let cols = im2col(x, spec, ins, outs);
    let kk = spec.in_channels * spec.kernel * spec.kernel;
    let plane = outs.h * outs.w;
    let mut gcols = vec![0.0 as Scalar; cols.len()];
    for ((wo, gwo), gyo) in w
        .chunks_exact(kk)
        .zip(gw.chunks_exact_mut(kk))
        .zip(gy.chunks_exact(plane))
    {
        for ((&g, patch), gpatch) in gyo
            .iter()
            .zip(cols.chunks_exact(kk))
            .zip(gcols.chunks_exact_mut(kk))
        {
            if g != 0.0 {
                axpy(g, patch, gwo);
                axpy(g, wo, gpatch);
            }
        }
    }
    col2im(&gcols, spec, ins, outs, gx);
}

fn conv_sample(
    x: &[Scalar],
    w: &[Scalar],
    spec: &ConvSpec,
    ins: Shape,
    outs: Shape,
    y: &mut [Scalar],
) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
    let (ih, iw, oh, ow) = (ins.h, ins.w, outs.h, outs.w);
    for o in 0..spec.out_channels {
        let g = o / cog;
        let yp = &mut y[o * oh * ow..(o + 1) * oh * ow];
        for ci in 0..cig {
            let c = g * cig + ci;
            let xp = &x[c * ih * iw..(c + 1) * ih * iw];
            for kh in 0..k {
                let (h0, h1) = valid_range(oh, ih, kh, s, p);
                for kw in 0..k {
                    let wv = w[((o * cig + ci) * k + kh) * k + kw];
                    let (w0, w1) = valid_range(ow, iw, kw, s, p);
                    for yh in h0..h1 {
                        let xh = yh * s + kh - p;
                        let xrow = &xp[xh * iw..(xh + 1) * iw];
                        let yrow = &mut yp[yh * ow..(yh + 1) * ow];
                        if s == 1 {
                            let off = w0 + kw - p;
                            for (yv, xv) in yrow[w0..w1].iter_mut().zip(&xrow[off..off + w1 - w0]) {
                                *yv += wv * *xv;
                            }
                        } else {
                            for yw in w0..w1 {
                                yrow[yw] += wv * xrow[yw * s + kw - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Output is `(N, out_channels, h', w')`.
pub fn conv2d_forward(
    x: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let outs = spec.output_shape(x.shape())?;
    check_params(spec, weights, bias)?;
    let ins = x.shape();
    let mut y = Tensor::zeros(outs);
    if let Some(b) = bias {
        let plane = outs.plane();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = b.data()[(i / plane) % outs.c];
        }
    }
    let (xs, ys) = (ins.sample(), outs.sample());
    if ys == 0 {
        return Ok(y);
    }
    y.data_mut()
        .par_chunks_mut(ys)
        .zip(x.data().par_chunks(xs.max(1)))
        .for_each(|(yb, xb)| {
            if spec.groups == 1 {
                dense_sample(xb, weights.data(), spec, ins, outs, yb)
            } else {
                conv_sample(xb, weights.data(), spec, ins, outs, yb)
            }
        });
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub x: Tensor,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn conv_sample_backward(
    x: &[Scalar],
    w: &[Scalar],
    gy: &[Scalar],
    spec: &ConvSpec,
    ins: Shape,
    outs: Shape,
    gx: &mut [Scalar],
    gw: &mut [Scalar],
) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
    let (ih, iw, oh, ow) = (ins.h, ins.w, outs.h, outs.w);
    for o in 0..spec.out_channels {
        let g = o / cog;
        let gyp = &gy[o * oh * ow..(o + 1) * oh * ow];
        for ci in 0..cig {
            let c = g * cig + ci;
            let xp = &x[c * ih * iw..(c + 1) * ih * iw];
            let gxp = &mut gx[c * ih * iw..(c + 1) * ih * iw];
            for kh in 0..k {
                let (h0, h1) = valid_range(oh, ih, kh, s, p);
                for kw in 0..k {
                    let widx = ((o * cig + ci) * k + kh) * k + kw;
                    let wv = w[widx];
                    let (w0, w1) = valid_range(ow, iw, kw, s, p);
                    let mut acc: Scalar = 0.0;
                    for yh in h0..h1 {
                        let xh = yh * s + kh - p;
                        let grow = &gyp[yh * ow..(yh + 1) * ow];
                        for (yw, &g) in grow.iter().enumerate().take(w1).skip(w0) {
                            let xi = xh * iw + yw * s + kw - p;
                            acc += g * xp[xi];
                            gxp[xi] += wv * g;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}

/// Exact gradients of [`conv2d_forward`] with respect to input, weights and
/// bias. Weight gradients are accumulated per sample and summed in batch
/// order, so the result does not depend on the thread count.
pub fn conv2d_backward(
    x: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let outs = spec.output_shape(x.shape())?;
    check_weights(spec, weights)?;
    super::same_shape("conv2d_backward grad_out", outs, grad_out.shape())?;
    let ins = x.shape();
    let (xs, ys, wn) = (ins.sample(), outs.sample(), weights.len());

    let mut gx = Tensor::zeros(ins);
    let mut partial = vec![0.0 as Scalar; ins.n * wn];
    if ys > 0 && xs > 0 {
        gx.data_mut()
            .par_chunks_mut(xs)
            .zip(partial.par_chunks_mut(wn))
            .zip(x.data().par_chunks(xs))
            .zip(grad_out.data().par_chunks(ys))
            .for_each(|(((gxb, gwb), xb), gyb)| {
                if spec.groups == 1 {
                    dense_sample_backward(xb, weights.data(), gyb, spec, ins, outs, gxb, gwb)
                } else {
                    conv_sample_backward(xb, weights.data(), gyb, spec, ins, outs, gxb, gwb)
                }
            });
    }
    let mut gw = vec![0.0 as Scalar; wn];
    for chunk in partial.chunks(wn.max(1)) {
        for (a, b) in gw.iter_mut().zip(chunk) {
            *a += *b;
        }
    }
    let bias = spec.bias.then(|| {
        let mut gb = vec![0.0 as Scalar; spec.out_channels];
        for n in 0..outs.n {
            for (o, slot) in gb.iter_mut().enumerate() {
                *slot += grad_out.plane(n, o).iter().sum::<Scalar>();
            }
        }
        Tensor::vector(gb)
    });
    Ok(ConvGrads {
        x: gx,
        weights: Tensor::from_vec(weights.shape(), gw)?,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[Scalar]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    /// Sliding-window reference used as the oracle for the fast path.
    fn naive(x: &Tensor, spec: &ConvSpec, w: &Tensor) -> Tensor {
        let outs = spec.output_shape(x.shape()).unwrap();
        let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
        let mut y = Tensor::zeros(outs);
        for n in 0..outs.n {
            for o in 0..outs.c {
                for yh in 0..outs.h {
                    for yw in 0..outs.w {
                        let mut acc = 0.0;
                        for ci in 0..cig {
                            let c = (o / cog) * cig + ci;
                            for kh in 0..spec.kernel {
                                for kw in 0..spec.kernel {
                                    let ih =
                                        (yh * spec.stride + kh) as isize - spec.padding as isize;
                                    let iw =
                                        (yw * spec.stride + kw) as isize - spec.padding as isize;
                                    if ih < 0
                                        || iw < 0
                                        || ih >= x.shape().h as isize
                                        || iw >= x.shape().w as isize
                                    {
                                        continue;
                                    }
                                    acc +=
                                        w.at(o, ci, kh, kw) * x.at(n, c, ih as usize, iw as usize);
                                }
                            }
                        }
                        let i = y.index(n, o, yh, yw);
                        y.data_mut()[i] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn two_by_two_diagonal_kernel() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let spec = ConvSpec::new(1, 1, 2, 1).with_padding(0);
        let w = t(Shape::new(1, 1, 2, 2), &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d_forward(&x, &spec, &w, None).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn ones_kernel_with_padding() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let spec = ConvSpec::new(1, 1, 3, 1);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d_forward(&x, &spec, &w, None).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 2, 2), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let x = Tensor::from_fn(Shape::new(2, 3, 4, 5), |i| i as Scalar * 0.25 - 3.0);
        let spec = ConvSpec::depthwise(3, 1, 1, 1);
        let w = Tensor::full(Shape::new(3, 1, 1, 1), 1.0);
        let y = conv2d_forward(&x, &spec, &w, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let cases = [
            ConvSpec::new(3, 4, 3, 1),
            ConvSpec::new(3, 4, 3, 2),
            ConvSpec::new(2, 2, 5, 2),
            ConvSpec::depthwise(4, 2, 3, 2),
            ConvSpec {
                groups: 2,
                ..ConvSpec::new(4, 6, 3, 1)
            },
            ConvSpec::new(3, 2, 1, 2).with_padding(0),
        ];
        for spec in cases {
            let x = Tensor::from_fn(Shape::new(2, spec.in_channels, 7, 6), |i| {
                ((i * 37 % 11) as Scalar) - 5.0
            });
            let w = Tensor::from_fn(spec.weight_shape(), |i| {
                ((i * 13 % 7) as Scalar) * 0.5 - 1.5
            });
            let fast = conv2d_forward(&x, &spec, &w, None).unwrap();
            assert_eq!(fast, naive(&x, &spec, &w), "{spec:?}");
        }
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let spec = ConvSpec::new(1, 2, 1, 1).with_bias(true);
        let w = Tensor::full(spec.weight_shape(), 1.0);
        let b = Tensor::vector(vec![1.5, -2.0]);
        let y = conv2d_forward(&x, &spec, &w, Some(&b)).unwrap();
        assert_eq!(y.plane(0, 0), &[1.5; 4]);
        assert_eq!(y.plane(0, 1), &[-2.0; 4]);
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let spec = ConvSpec::new(3, 1, 3, 1);
        let w = Tensor::zeros(spec.weight_shape());
        let err = conv2d_forward(&x, &spec, &w, None).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Dimension {
                    axis: "C",
                    expected: 3,
                    got: 2,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn kernel_larger_than_input_is_config_error() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let spec = ConvSpec::new(1, 1, 5, 1).with_padding(0);
        let w = Tensor::zeros(spec.weight_shape());
        assert!(matches!(
            conv2d_forward(&x, &spec, &w, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let spec = ConvSpec::new(2, 3, 3, 1).with_bias(true);
        let x = Tensor::from_fn(Shape::new(2, 2, 4, 4), |i| i as Scalar);
        let w = Tensor::from_fn(spec.weight_shape(), |i| i as Scalar * 0.1);
        let g = conv2d_backward(&x, &spec, &w, &Tensor::zeros(Shape::new(2, 3, 4, 4))).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let spec = ConvSpec::depthwise(3, 1, 1, 1);
        let x = Tensor::from_fn(Shape::new(1, 3, 3, 3), |i| i as Scalar);
        let w = Tensor::full(spec.weight_shape(), 1.0);
        let gy = Tensor::from_fn(Shape::new(1, 3, 3, 3), |i| (i as Scalar).sin());
        let g = conv2d_backward(&x, &spec, &w, &gy).unwrap();
        assert_eq!(g.x, gy);
    }
}
