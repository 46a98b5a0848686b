use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, NodeId, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Everything a forward pass needs besides the layer itself.
pub struct Forward<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
}

impl Forward<'_> {
    pub fn with_mode(&mut self, mode: Mode) -> Forward<'_> {
        Forward {
            graph: self.graph,
            store: self.store,
            mode,
            rng: self.rng,
        }
    }
}

/// Creates parameters with a shared naming prefix, group and precision.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub precision: Precision,
}

impl ParamBuilder<'_> {
    pub fn normal(&mut self, name: &str, group: ParamGroup, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng).to_precision(self.precision);
        self.store.add(name, group, t)
    }

    pub fn constant(&mut self, name: &str, group: ParamGroup, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, group, Tensor::full(shape, value).to_precision(self.precision))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

fn kaiming(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: ParamGroup, in_features: usize, out_features: usize) -> Self {
        Self::with_std(pb, name, group, in_features, out_features, kaiming(in_features), 0.0)
    }

    pub fn with_std(
        pb: &mut ParamBuilder,
        name: &str,
        group: ParamGroup,
        in_features: usize,
        out_features: usize,
        std: f64,
        bias: f64,
    ) -> Self {
        Linear {
            weight: pb.normal(&format!("{name}.weight"), group, &[out_features, in_features], std),
            bias: pb.constant(&format!("{name}.bias"), group, &[out_features], bias),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: NodeId) -> Result<NodeId> {
        let w = fw.graph.param(fw.store, self.weight)?;
        let b = fw.graph.param(fw.store, self.bias)?;
        fw.graph.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dLayer {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        Conv3dLayer {
            weight: pb.normal(
                &format!("{name}.weight"),
                group,
                &[out_channels, in_channels, kernel[0], kernel[1], kernel[2]],
                kaiming(fan_in),
            ),
            bias: pb.constant(&format!("{name}.bias"), group, &[out_channels], 0.0),
            stride,
            pad,
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: NodeId) -> Result<NodeId> {
        let w = fw.graph.param(fw.store, self.weight)?;
        let b = fw.graph.param(fw.store, self.bias)?;
        fw.graph.conv3d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 2],
    pub pad: [usize; 2],
}

impl Conv2dLayer {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Self {
        let fan_in = in_channels * kernel[0] * kernel[1];
        Conv2dLayer {
            weight: pb.normal(
                &format!("{name}.weight"),
                group,
                &[out_channels, in_channels, kernel[0], kernel[1]],
                kaiming(fan_in),
            ),
            bias: pb.constant(&format!("{name}.bias"), group, &[out_channels], 0.0),
            stride,
            pad,
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: NodeId) -> Result<NodeId> {
        let w = fw.graph.param(fw.store, self.weight)?;
        let b = fw.graph.param(fw.store, self.bias)?;
        fw.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: ParamGroup, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: pb.constant(&format!("{name}.gamma"), group, &[channels], 1.0),
            beta: pb.constant(&format!("{name}.beta"), group, &[channels], 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running averages; eval mode uses the running averages.
    pub fn forward(&mut self, fw: &mut Forward, x: NodeId) -> Result<NodeId> {
        let gamma = fw.graph.param(fw.store, self.gamma)?;
        let beta = fw.graph.param(fw.store, self.beta)?;
        match fw.mode {
            Mode::Train => {
                let (out, mean, var, count) = fw.graph.batchnorm_train(x, gamma, beta, BN_EPS)?;
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                for c in 0..mean.len() {
                    self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
                    self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * unbias;
                }
                Ok(out)
            }
            Mode::Eval => fw
                .graph
                .batchnorm_eval(x, gamma, beta, &self.running_mean, &self.running_var, BN_EPS),
        }
    }

    pub fn set_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.running_mean.len() || var.len() != self.running_var.len() {
            return Err(Error::dim(format!("{}: running statistics have the wrong width", self.name)));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }
}

/// Prefixes dimension errors with the layer that raised them.
pub(crate) fn at_layer<T>(layer: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Dimension(msg) => Error::Dimension(format!("{layer}: {msg}")),
        other => other,
    })
}
