//! Differentiable operators.
//!
//! Convolutions are cross-correlations (no kernel flip) everywhere, including the
//! reference [`oracle`]. Kernels are stored as a `(1, kh, kw, kd, c_in * c_out)`
//! tensor, so the weight for tap `(i, j, l)`, input channel `a` and output channel
//! `b` sits at `((i * kw + j) * kd + l) * c_in * c_out + a * c_out + b`.
//!
//! Backward functions accumulate into parameter gradient buffers; callers zero
//! them between steps.

mod activation;
mod concat;
mod conv;
mod loss;
mod norm;
pub mod oracle;
mod pool;
mod separable;
mod transpose;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::{same_padding, Shape5, Tensor};
use crate::{Error, Result};

pub use activation::{add_fwd, relu_bwd, relu_fwd};
pub use concat::{concat_channels_bwd, concat_channels_fwd};
pub use conv::{
    conv1d_z_bwd, conv1d_z_fwd, conv2d_in3d_bwd, conv2d_in3d_fwd, conv3d_bwd, conv3d_fwd,
};
pub use loss::{one_hot, softmax, softmax_xent_bwd, softmax_xent_fwd};
pub use norm::{instance_norm_bwd, instance_norm_fwd, NormCache, DEFAULT_EPSILON};
pub use oracle::{conv3d_oracle, conv_transpose3d_oracle};
pub use pool::{maxpool3d_bwd, maxpool3d_fwd, PoolIndices};
pub use separable::{outer_kernel, separable_pair_equivalence_check, separable_residual};
pub use transpose::{conv_transpose3d_bwd, conv_transpose3d_fwd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding from [`same_padding`]; output extent is `input / stride`.
    Same,
    /// No padding; output extent is `(input - k) / stride + 1`.
    Valid,
}

/// A fully resolved convolution: kernel extents are concrete numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub kd: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub padding: Padding,
    /// Transposed convolutions are the adjoint of a `Valid` convolution with the
    /// same kernel and stride.
    pub transposed: bool,
}

/// Per-axis window geometry: padding in front and output extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AxisPlan {
    pub front: usize,
    pub out: usize,
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize, usize), stride: usize, c_in: usize, c_out: usize) -> Self {
        ConvSpec {
            kh: kernel.0,
            kw: kernel.1,
            kd: kernel.2,
            stride,
            c_in,
            c_out,
            padding: Padding::Same,
            transposed: false,
        }
    }

    pub fn valid(mut self) -> Self {
        self.padding = Padding::Valid;
        self
    }

    /// 2x2x2 stride-2 transposed convolution, the decoder's up-sampling layer.
    pub fn upsample(c_in: usize, c_out: usize) -> Self {
        ConvSpec {
            kh: 2,
            kw: 2,
            kd: 2,
            stride: 2,
            c_in,
            c_out,
            padding: Padding::Valid,
            transposed: true,
        }
    }

    /// Along-depth kernel spanning the whole incoming depth.
    pub fn full_depth(depth: usize, c_in: usize, c_out: usize) -> Self {
        ConvSpec::new((1, 1, depth), 1, c_in, c_out)
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw * self.kd
    }

    pub fn weight_shape(&self) -> Result<Shape5> {
        Shape5::new(1, self.kh, self.kw, self.kd, self.c_in * self.c_out)
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        self.taps() * self.c_in * self.c_out + self.c_out
    }

    fn validate(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 || self.kd == 0 {
            return Err(Error::Unsupported(format!("kernel extents must be >= 1: {self:?}")));
        }
        if self.stride == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Unsupported(format!("stride and channels must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn axis(&self, k: usize, extent: usize) -> Result<AxisPlan> {
        match self.padding {
            Padding::Valid => {
                if extent < k {
                    return Err(Error::InvalidShape(format!(
                        "kernel {k} larger than input extent {extent}"
                    )));
                }
                Ok(AxisPlan { front: 0, out: (extent - k) / self.stride + 1 })
            }
            Padding::Same => {
                let (front, back) = same_padding(k, extent)?;
                if extent + front + back < k {
                    return Err(Error::InvalidShape(format!(
                        "kernel {k} larger than padded extent {}",
                        extent + front + back
                    )));
                }
                let out = extent / self.stride;
                if out == 0 {
                    return Err(Error::InvalidShape(format!(
                        "stride {} collapses extent {extent}",
                        self.stride
                    )));
                }
                Ok(AxisPlan { front, out })
            }
        }
    }

    pub(crate) fn plan(&self, input: Shape5) -> Result<[AxisPlan; 3]> {
        self.validate()?;
        if self.transposed {
            return Err(Error::Unsupported("plan() is for forward convolutions".into()));
        }
        if input.c != self.c_in {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, conv expects {}",
                input.c, self.c_in
            )));
        }
        Ok([self.axis(self.kh, input.h)?, self.axis(self.kw, input.w)?, self.axis(self.kd, input.d)?])
    }

    /// Output shape for an input of shape `input`.
    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        if self.transposed {
            self.validate()?;
            if input.c != self.c_in {
                return Err(Error::ShapeMismatch(format!(
                    "input has {} channels, transposed conv expects {}",
                    input.c, self.c_in
                )));
            }
            let up = |e: usize, k: usize| (e - 1) * self.stride + k;
            return Shape5::new(
                input.n,
                up(input.h, self.kh),
                up(input.w, self.kw),
                up(input.d, self.kd),
                self.c_out,
            );
        }
        let [h, w, d] = self.plan(input)?;
        Shape5::new(input.n, h.out, w.out, d.out, self.c_out)
    }
}

/// Kernel bank and bias of one convolution, plus their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub weight_grad: Tensor,
    pub bias_grad: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(spec: &ConvSpec) -> Result<Self> {
        let shape = spec.weight_shape()?;
        Ok(ConvParams {
            weights: Tensor::zeros(shape)?,
            bias: vec![0.0; spec.c_out],
            weight_grad: Tensor::zeros(shape)?,
            bias_grad: vec![0.0; spec.c_out],
        })
    }

    pub fn from_parts(spec: &ConvSpec, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        if bias.len() != spec.c_out {
            return Err(Error::ShapeMismatch(format!(
                "bias of length {} for {} output channels",
                bias.len(),
                spec.c_out
            )));
        }
        p.weights = Tensor::from_vec(spec.weight_shape()?, weights)?;
        p.bias = bias;
        Ok(p)
    }

    pub(crate) fn check(&self, spec: &ConvSpec) -> Result<()> {
        if self.weights.shape() != spec.weight_shape()? || self.bias.len() != spec.c_out {
            return Err(Error::ShapeMismatch(format!(
                "parameters {} / {} do not fit {spec:?}",
                self.weights.shape(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.as_mut_slice().fill(0.0);
        self.bias_grad.fill(0.0);
    }
}

/// Affine parameters of an instance normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
    pub gamma_grad: Vec<f64>,
    pub beta_grad: Vec<f64>,
}

impl InstanceNormParams {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize) -> Self {
        InstanceNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            epsilon: DEFAULT_EPSILON,
            gamma_grad: vec![0.0; channels],
            beta_grad: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn zero_grad(&mut self) {
        self.gamma_grad.fill(0.0);
        self.beta_grad.fill(0.0);
    }
}

pub(crate) fn check_grad_shape(grad: &Tensor, expected: Shape5, what: &str) -> Result<()> {
    if grad.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{what}: gradient {} but expected {expected}",
            grad.shape()
        )));
    }
    Ok(())
}
