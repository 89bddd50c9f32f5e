//! Minimal layer set on top of candle tensors. Every learnable tensor is a
//! [`Var`] registered by name in a [`ParamBuilder`], so the classifier can
//! enumerate, freeze, serialise and restore its weights by name.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Registers named parameters and buffers while a network is constructed.
pub(crate) struct ParamBuilder<'a> {
    prefix: String,
    params: &'a mut BTreeMap<String, Var>,
    buffers: &'a mut BTreeMap<String, Var>,
    rng: &'a mut ChaCha8Rng,
    dtype: DType,
    device: &'a Device,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(
        prefix: &str,
        params: &'a mut BTreeMap<String, Var>,
        buffers: &'a mut BTreeMap<String, Var>,
        rng: &'a mut ChaCha8Rng,
        dtype: DType,
        device: &'a Device,
    ) -> Self {
        ParamBuilder {
            prefix: prefix.to_string(),
            params,
            buffers,
            rng,
            dtype,
            device,
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        ParamBuilder {
            prefix: format!("{}.{name}", self.prefix),
            params: self.params,
            buffers: self.buffers,
            rng: self.rng,
            dtype: self.dtype,
            device: self.device,
        }
    }

    fn key(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    fn tensor(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, self.device)?.to_dtype(self.dtype)?)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let var = Var::from_tensor(&self.tensor(values, shape)?)?;
        self.params.insert(self.key(name), var.clone());
        Ok(var)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = Var::from_tensor(&self.tensor(vec![value; n], shape)?)?;
        self.params.insert(self.key(name), var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = Var::from_tensor(&self.tensor(vec![value; n], shape)?)?;
        self.buffers.insert(self.key(name), var.clone());
        Ok(var)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: (usize, usize),
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn square(kernel: usize) -> Self {
        ConvSpec {
            kernel: (kernel, kernel),
            stride: 1,
            padding: (0, 0),
            groups: 1,
            bias: false,
        }
    }

    pub fn rect(kh: usize, kw: usize) -> Self {
        ConvSpec {
            kernel: (kh, kw),
            padding: (kh / 2, kw / 2),
            ..Self::square(1)
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    /// Padding that keeps the spatial size at stride 1.
    pub fn same(mut self) -> Self {
        self.padding = (self.kernel.0 / 2, self.kernel.1 / 2);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl Conv2d {
    /// He-uniform initialised convolution.
    pub fn new(pb: &mut ParamBuilder, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        let fan_in = (c_in / spec.groups) * kh * kw;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = pb.uniform("weight", &[c_out, c_in / spec.groups, kh, kw], bound)?;
        let bias = if spec.bias {
            Some(pb.constant("bias", &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (ph, pw) = self.padding;
        let y = if ph == pw {
            x.conv2d(&self.weight, ph, self.stride, 1, self.groups)?
        } else {
            x.pad_with_zeros(2, ph, ph)?
                .pad_with_zeros(3, pw, pw)?
                .conv2d(&self.weight, 0, self.stride, 1, self.groups)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalisation that always normalises with its running statistics.
/// The scale and shift are learnable; the statistics are buffers loaded from
/// pretrained weights and never updated by training.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    gamma: Var,
    beta: Var,
    mean: Var,
    var: Var,
    eps: f64,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder, channels: usize, eps: f64) -> Result<Self> {
        Ok(BatchNorm {
            gamma: pb.constant("gamma", &[channels], 1.0)?,
            beta: pb.constant("beta", &[channels], 0.0)?,
            mean: pb.buffer("running_mean", &[channels], 0.0)?,
            var: pb.buffer("running_var", &[channels], 1.0)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = (1, (), 1, 1);
        let inv_std = (self.var.as_tensor() + self.eps)?.sqrt()?.recip()?;
        let scale = (self.gamma.as_tensor() * inv_std)?;
        let shift = (self.beta.as_tensor() - (self.mean.as_tensor() * &scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape(shape)?)?
            .broadcast_add(&shift.reshape(shape)?)?)
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    relu: bool,
}

impl ConvBn {
    pub fn new(pb: &mut ParamBuilder, c_in: usize, c_out: usize, spec: ConvSpec, eps: f64) -> Result<Self> {
        Self::build(pb, c_in, c_out, spec, eps, true)
    }

    pub fn linear(pb: &mut ParamBuilder, c_in: usize, c_out: usize, spec: ConvSpec, eps: f64) -> Result<Self> {
        Self::build(pb, c_in, c_out, spec, eps, false)
    }

    fn build(
        pb: &mut ParamBuilder,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        eps: f64,
        relu: bool,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::new(&mut pb.sub("conv"), c_in, c_out, spec)?,
            bn: BatchNorm::new(&mut pb.sub("bn"), c_out, eps)?,
            relu,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?)?;
        if self.relu {
            Ok(y.relu()?)
        } else {
            Ok(y)
        }
    }
}

/// Fully connected layer with Glorot-uniform weights, stored `(out, in)`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Ok(Linear {
            weight: pb.uniform("weight", &[d_out, d_in], bound)?,
            bias: pb.constant("bias", &[d_out], 0.0)?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Max pooling with `-inf` padding on every side.
pub(crate) fn max_pool(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let x = if pad > 0 { pad_value(x, pad, pad, f64::NEG_INFINITY)? } else { x.clone() };
    Ok(x.max_pool2d_with_stride(kernel, stride)?)
}

/// Max pooling with TensorFlow-style `same` padding: output size
/// `ceil(input / stride)`, extra padding at the bottom/right.
pub(crate) fn max_pool_same(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let total = |n: usize| {
        let out = n.div_ceil(stride);
        ((out - 1) * stride + kernel).saturating_sub(n)
    };
    let (th, tw) = (total(h), total(w));
    let x = pad_value_hw(x, (th / 2, th - th / 2), (tw / 2, tw - tw / 2), f64::NEG_INFINITY)?;
    Ok(x.max_pool2d_with_stride(kernel, stride)?)
}

/// Average pooling with zero padding counted in the divisor.
pub(crate) fn avg_pool(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let x = if pad > 0 {
        x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?
    } else {
        x.clone()
    };
    Ok(x.avg_pool2d_with_stride(kernel, stride)?)
}

fn pad_value(x: &Tensor, ph: usize, pw: usize, value: f64) -> Result<Tensor> {
    pad_value_hw(x, (ph, ph), (pw, pw), value)
}

fn pad_value_hw(x: &Tensor, h: (usize, usize), w: (usize, usize), value: f64) -> Result<Tensor> {
    let mut x = x.clone();
    for (dim, (before, after)) in [(2usize, h), (3usize, w)] {
        let mut parts = Vec::with_capacity(3);
        let mut dims = x.dims().to_vec();
        if before > 0 {
            dims[dim] = before;
            parts.push(Tensor::full(value, dims.as_slice(), x.device())?.to_dtype(x.dtype())?);
        }
        parts.push(x.clone());
        if after > 0 {
            dims[dim] = after;
            parts.push(Tensor::full(value, dims.as_slice(), x.device())?.to_dtype(x.dtype())?);
        }
        if parts.len() > 1 {
            x = Tensor::cat(&parts, dim)?;
        }
    }
    Ok(x)
}

/// Row-wise softmax over the last dimension of a `(batch, classes)` tensor.
pub(crate) fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}
