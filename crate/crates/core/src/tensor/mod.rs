//! Rank-4 NCHW tensors and the primitive differentiable kernels.
//!
//! Every kernel here is a pure function of its arguments. Reductions run in a
//! fixed order per sample, so results are bit-identical across calls and
//! across thread counts.

mod conv;
mod norm;
mod ops;
mod pool;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use norm::{
    batchnorm_backward, batchnorm_forward, BatchNormState, BnCache, BnGrads, BN_EPS, BN_MOMENTUM,
};
pub use ops::{
    add, add_backward_broadcast, add_broadcast_channel, concat_channels, concat_channels_backward,
    fully_connected, fully_connected_backward, hard_sigmoid, hard_sigmoid_backward, relu,
    relu_backward, scale_channels, scale_channels_backward, slice_channels, FcGrads,
};
pub use pool::{global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, PoolSpec};

use crate::error::{check_dim, Error, Result};

/// Element type of every tensor. `f64` unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// (batch, channels, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per sample (C·H·W).
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: Scalar) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<Scalar>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension {
                op: "Tensor::from_vec",
                axis: "len",
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// A (1, len, 1, 1) tensor, the layout used for vectors.
    pub fn vector(data: Vec<Scalar>) -> Self {
        let shape = Shape::new(1, data.len(), 1, 1);
        Tensor { shape, data }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> Scalar) -> Self {
        let data = (0..shape.numel()).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> Scalar {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous H·W plane of one (sample, channel).
    pub fn plane(&self, n: usize, c: usize) -> &[Scalar] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        check_dim("reshape", "numel", self.shape.numel(), shape.numel())?;
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: Scalar) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape("add_assign", self.shape, other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sum(&self) -> Scalar {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Scalar {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn same_shape(op: &'static str, expected: Shape, got: Shape) -> Result<()> {
    check_dim(op, "N", expected.n, got.n)?;
    check_dim(op, "C", expected.c, got.c)?;
    check_dim(op, "H", expected.h, got.h)?;
    check_dim(op, "W", expected.w, got.w)
}
