use serde::{Deserialize, Serialize};

use super::{same_shape, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Means over each H·W plane, giving (N, C, 1, 1).
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let p = s.plane().max(1) as Scalar;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            out.data_mut()[n * s.c + c] = x.plane(n, c).iter().sum::<Scalar>() / p;
        }
    }
    out
}

/// Spreads each pooled gradient evenly over the plane it came from.
pub fn global_avg_pool_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(
        "global_avg_pool_backward",
        Shape::new(input_shape.n, input_shape.c, 1, 1),
        grad_out.shape(),
    )?;
    let p = input_shape.plane();
    let scale = 1.0 / p.max(1) as Scalar;
    Ok(Tensor::from_fn(input_shape, |i| {
        grad_out.data()[i / p] * scale
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolSpec {
            kernel,
            stride,
            padding,
        }
    }

    fn out_extent(&self, size: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::config("pool kernel and stride must be >= 1"));
        }
        if self.padding >= self.kernel {
            return Err(Error::config(
                "pool padding must be smaller than the kernel",
            ));
        }
        let padded = size + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::config(format!(
                "pool kernel {} does not fit padded extent {padded}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(Shape::new(
            input.n,
            input.c,
            self.out_extent(input.h)?,
            self.out_extent(input.w)?,
        ))
    }
}

/// Index into the input plane of each output's maximum. Padding never wins.
fn argmax(x: &Tensor, spec: &PoolSpec, out: Shape) -> Vec<usize> {
    let s = x.shape();
    let mut idx = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for oh in 0..out.h {
                for ow in 0..out.w {
                    let mut best = usize::MAX;
                    let mut best_v = Scalar::NEG_INFINITY;
                    for kh in 0..spec.kernel {
                        let ih = (oh * spec.stride + kh) as isize - spec.padding as isize;
                        if ih < 0 || ih >= s.h as isize {
                            continue;
                        }
                        for kw in 0..spec.kernel {
                            let iw = (ow * spec.stride + kw) as isize - spec.padding as isize;
                            if iw < 0 || iw >= s.w as isize {
                                continue;
                            }
                            let j = ih as usize * s.w + iw as usize;
                            if best == usize::MAX || plane[j] > best_v {
                                best = j;
                                best_v = plane[j];
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
    }
    idx
}

pub fn max_pool(x: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    let out = spec.output_shape(x.shape())?;
    let idx = argmax(x, spec, out);
    let per_out = out.plane();
    let per_in = x.shape().plane();
    Ok(Tensor::from_fn(out, |i| {
        x.data()[(i / per_out) * per_in + idx[i]]
    }))
}

/// Routes each output gradient to the input that produced the maximum.
pub fn max_pool_backward(x: &Tensor, spec: &PoolSpec, grad_out: &Tensor) -> Result<Tensor> {
    let out = spec.output_shape(x.shape())?;
    same_shape("max_pool_backward", out, grad_out.shape())?;
    let idx = argmax(x, spec, out);
    let per_out = out.plane();
    let per_in = x.shape().plane();
    let mut gx = Tensor::zeros(x.shape());
    for (i, &g) in grad_out.data().iter().enumerate() {
        gx.data_mut()[(i / per_out) * per_in + idx[i]] += g;
    }
    Ok(gx)
}
