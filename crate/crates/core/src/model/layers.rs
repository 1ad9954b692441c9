use candle_core::{Tensor, Var};

use super::params::{Init, ParamKind, ParamStore};
use crate::error::Result;
use crate::ops;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Where a layer lives: the full parameter prefix plus the logical name
/// used to draw its initial values.
#[derive(Debug, Clone)]
pub(crate) struct Scope {
    pub name: String,
    pub logical: String,
}

impl Scope {
    pub fn new(prefix: &str, logical: &str) -> Self {
        let join = |a: &str, b: &str| {
            if a.is_empty() {
                b.to_string()
            } else {
                format!("{a}.{b}")
            }
        };
        Scope {
            name: join(prefix, logical),
            logical: logical.to_string(),
        }
    }

    pub fn sub(&self, part: &str) -> Self {
        Scope {
            name: format!("{}.{part}", self.name),
            logical: format!("{}.{part}", self.logical),
        }
    }
}

/// Bias-free convolution over channels-last maps.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new(
        store: &ParamStore,
        scope: &Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let s = scope.sub("weight");
        let weight = store.create(
            &s.name,
            &s.logical,
            &[c_out, c_in, kernel, kernel],
            ParamKind::Weight,
            Init::KaimingFanIn,
        )?;
        Ok(Conv {
            weight,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d_nhwc(x, self.weight.as_tensor(), self.stride, self.padding)
    }

    /// Applies a 1×1 convolution to pooled `[N, C_in]` vectors.
    pub fn forward_vector(&self, x: &Tensor) -> Result<Tensor> {
        let (c_out, c_in, _, _) = self.weight.dims4()?;
        Ok(x.matmul(&self.weight.as_tensor().reshape((c_out, c_in))?.t()?)?)
    }
}

/// Batch normalization over the last (channel) axis.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    pub fn new(store: &ParamStore, scope: &Scope, channels: usize) -> Result<Self> {
        let mk = |part: &str, kind, init| {
            let s = scope.sub(part);
            store.create(&s.name, &s.logical, &[channels], kind, init)
        };
        Ok(BatchNorm {
            weight: mk("weight", ParamKind::Norm, Init::Const(1.0))?,
            bias: mk("bias", ParamKind::Norm, Init::Const(0.0))?,
            running_mean: mk("running_mean", ParamKind::Buffer, Init::Const(0.0))?,
            running_var: mk("running_var", ParamKind::Buffer, Init::Const(1.0))?,
        })
    }

    /// In training mode normalizes with batch statistics and updates the
    /// running estimates; otherwise uses the running estimates.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let channels = *dims.last().expect("rank >= 1");
        let flat = x.reshape(((), channels))?;
        let normalized = if train {
            let rows = flat.dim(0)?;
            let mean = flat.mean_keepdim(0)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?;
            let unbiased = if rows > 1 {
                rows as f64 / (rows - 1) as f64
            } else {
                1.0
            };
            let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (mean.detach().squeeze(0)? * BN_MOMENTUM)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (var.detach().squeeze(0)? * (BN_MOMENTUM * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            centered.broadcast_div(&(var + BN_EPS)?.sqrt()?)?
        } else {
            let std = (self.running_var.as_tensor().detach() + BN_EPS)?.sqrt()?;
            flat.broadcast_sub(&self.running_mean.as_tensor().detach())?
                .broadcast_div(&std)?
        };
        let out = normalized
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        Ok(out.reshape(dims)?)
    }
}

/// ResNet bottleneck (1×1, 3×3 with stride, 1×1) with projection shortcut
/// when the shape changes.
#[derive(Debug, Clone)]
pub(crate) struct Bottleneck {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    conv3: Conv,
    bn3: BatchNorm,
    downsample: Option<(Conv, BatchNorm)>,
}

impl Bottleneck {
    pub fn new(
        store: &ParamStore,
        scope: &Scope,
        c_in: usize,
        width: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let downsample = if stride != 1 || c_in != c_out {
            Some((
                Conv::new(store, &scope.sub("downsample.0"), c_in, c_out, 1, stride)?,
                BatchNorm::new(store, &scope.sub("downsample.1"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1: Conv::new(store, &scope.sub("conv1"), c_in, width, 1, 1)?,
            bn1: BatchNorm::new(store, &scope.sub("bn1"), width)?,
            conv2: Conv::new(store, &scope.sub("conv2"), width, width, 3, stride)?,
            bn2: BatchNorm::new(store, &scope.sub("bn2"), width)?,
            conv3: Conv::new(store, &scope.sub("conv3"), width, c_out, 1, 1)?,
            bn3: BatchNorm::new(store, &scope.sub("bn3"), c_out)?,
            downsample,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

/// Stem: 7×7 stride-2 convolution, batch norm, rectifier, 3×3 stride-2 max
/// pooling.
#[derive(Debug, Clone)]
pub(crate) struct Stem {
    conv: Conv,
    bn: BatchNorm,
}

impl Stem {
    pub fn new(store: &ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Stem {
            conv: Conv::new(store, &Scope::new(prefix, "conv1"), 3, channels, 7, 2)?,
            bn: BatchNorm::new(store, &Scope::new(prefix, "bn1"), channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, train)?.relu()?;
        ops::max_pool_nhwc(&y, 3, 2, 1)
    }
}

/// Dimension reduction of a pooled feature: 1×1 convolution, batch norm,
/// rectifier.
#[derive(Debug, Clone)]
pub(crate) struct Reduction {
    conv: Conv,
    bn: BatchNorm,
}

impl Reduction {
    pub fn new(store: &ParamStore, scope: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Reduction {
            conv: Conv::new(store, &scope.sub("conv"), c_in, c_out, 1, 1)?,
            bn: BatchNorm::new(store, &scope.sub("bn"), c_out)?,
        })
    }

    pub fn forward(&self, pooled: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward_vector(pooled)?;
        Ok(self.bn.forward(&y, train)?.relu()?)
    }
}
