//! Combining the holistic feature `g` with the relation bank `l`.

use std::fmt;
use std::str::FromStr;

use super::layers::{at_layer, BatchNorm, Conv3dLayer, Forward, Linear, ParamBuilder};
use crate::autograd::{NodeId, ParamGroup};
use crate::error::{Error, Result};

/// How `g` and `l` are merged into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMethod {
    /// `F1(l) ⊙ g + F2(l)` followed by the appended feature.
    Conditional,
    Max,
    Average,
    Concat,
    Bilinear,
    Sum,
    Conv2d,
    Conv3d,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 8] = [
        FusionMethod::Conditional,
        FusionMethod::Max,
        FusionMethod::Average,
        FusionMethod::Concat,
        FusionMethod::Bilinear,
        FusionMethod::Sum,
        FusionMethod::Conv2d,
        FusionMethod::Conv3d,
    ];

    /// Whether the method consumes the pre-pool feature maps instead of `g` and `l`.
    pub fn uses_maps(self) -> bool {
        matches!(self, FusionMethod::Conv2d | FusionMethod::Conv3d)
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMethod::Conditional => "conditional",
            FusionMethod::Max => "max",
            FusionMethod::Average => "average",
            FusionMethod::Concat => "concat",
            FusionMethod::Bilinear => "bilinear",
            FusionMethod::Sum => "sum",
            FusionMethod::Conv2d => "conv2d",
            FusionMethod::Conv3d => "conv3d",
        })
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::input(format!("unknown fusion method {s:?}")))
    }
}

/// Extra feature concatenated after the modulated holistic feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Append {
    Holistic,
    Relation,
    None,
}

impl fmt::Display for Append {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Append::Holistic => "holistic",
            Append::Relation => "relation",
            Append::None => "none",
        })
    }
}

impl FromStr for Append {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holistic" => Ok(Append::Holistic),
            "relation" => Ok(Append::Relation),
            "none" => Ok(Append::None),
            other => Err(Error::input(format!("unknown append choice {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub append: Append,
    pub dropout: f64,
    pub bilinear_rank: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            method: FusionMethod::Conditional,
            append: Append::Holistic,
            dropout: 0.5,
            bilinear_rank: 8,
        }
    }
}

/// Widths and map geometry the fusion module is built against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionInputs {
    pub d_g: usize,
    pub d_l: usize,
    /// Channels of the holistic volume and of the per-frame maps.
    pub volume_channels: usize,
    pub map_channels: usize,
    /// (T, H, W) of the holistic volume; the frame maps are resized to it.
    pub volume: [usize; 3],
}

enum Parts {
    Conditional { f1: Linear, f2: Linear },
    Projected { proj: Linear },
    Bilinear { proj: Linear, u: Linear, v: Linear, rank: usize },
    Concat,
    Conv { conv: Conv3dLayer, bn: BatchNorm },
}

/// Values the fusion module may read; map nodes are only needed by the conv variants.
#[derive(Debug, Clone, Copy)]
pub struct FusionFeeds {
    pub g: NodeId,
    pub l: NodeId,
    pub volume: Option<NodeId>,
    pub maps: Option<NodeId>,
}

pub struct FusionModule {
    pub config: FusionConfig,
    inputs: FusionInputs,
    parts: Parts,
}

impl FusionModule {
    pub fn new(pb: &mut ParamBuilder, config: FusionConfig, inputs: FusionInputs) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::config(format!("fusion dropout {} outside [0, 1)", config.dropout)));
        }
        let group = ParamGroup::Fusion;
        let FusionInputs { d_g, d_l, .. } = inputs;
        let parts = match config.method {
            FusionMethod::Conditional => Parts::Conditional {
                f1: Linear::with_std(pb, "fusion.f1", group, d_l, d_g, 0.01, 1.0),
                f2: Linear::with_std(pb, "fusion.f2", group, d_l, d_g, 0.01, 0.0),
            },
            FusionMethod::Max | FusionMethod::Average | FusionMethod::Sum => Parts::Projected {
                proj: Linear::new(pb, "fusion.proj", group, d_l, d_g),
            },
            FusionMethod::Bilinear => {
                if config.bilinear_rank == 0 {
                    return Err(Error::config("bilinear rank must be at least 1"));
                }
                let r = config.bilinear_rank;
                let std = 1.0 / (d_g as f64).sqrt();
                Parts::Bilinear {
                    proj: Linear::new(pb, "fusion.proj", group, d_l, d_g),
                    u: Linear::with_std(pb, "fusion.bilinear.u", group, d_g, d_g * r, std, 0.0),
                    v: Linear::with_std(pb, "fusion.bilinear.v", group, d_g, d_g * r, std, 0.0),
                    rank: r,
                }
            }
            FusionMethod::Concat => Parts::Concat,
            FusionMethod::Conv2d | FusionMethod::Conv3d => {
                let (kernel, pad) = if config.method == FusionMethod::Conv2d {
                    ([1, 3, 3], [0, 1, 1])
                } else {
                    ([3, 3, 3], [1, 1, 1])
                };
                let cin = inputs.volume_channels + inputs.map_channels;
                Parts::Conv {
                    conv: Conv3dLayer::new(pb, "fusion.conv", group, cin, d_g, kernel, [1; 3], pad),
                    bn: BatchNorm::new(pb, "fusion.conv.bn", group, d_g),
                }
            }
        };
        Ok(FusionModule { config, inputs, parts })
    }

    /// Width of the fused vector.
    pub fn output_width(&self) -> usize {
        let FusionInputs { d_g, d_l, .. } = self.inputs;
        match self.config.method {
            FusionMethod::Conditional => match self.config.append {
                Append::Holistic => 2 * d_g,
                Append::Relation => d_g + d_l,
                Append::None => d_g,
            },
            FusionMethod::Concat => d_g + d_l,
            _ => d_g,
        }
    }

    pub fn batchnorms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        match &mut self.parts {
            Parts::Conv { bn, .. } => Some(bn),
            _ => None,
        }
        .into_iter()
    }

    /// The `F1`/`F2` layers of the conditional method.
    pub fn modulators(&self) -> Option<(&Linear, &Linear)> {
        match &self.parts {
            Parts::Conditional { f1, f2 } => Some((f1, f2)),
            _ => None,
        }
    }

    fn check_width(fw: &Forward, node: NodeId, width: usize, what: &str) -> Result<()> {
        let s = fw.graph.shape(node);
        if s.len() != 2 || s[1] != width {
            return Err(Error::dim(format!("fusion: {what} has shape {s:?}, expected [B, {width}]")));
        }
        Ok(())
    }

    pub fn forward(&mut self, fw: &mut Forward, feeds: FusionFeeds) -> Result<NodeId> {
        let FusionInputs { d_g, d_l, volume, .. } = self.inputs;
        let FusionFeeds { g, l, .. } = feeds;
        if !self.config.method.uses_maps() {
            Self::check_width(fw, g, d_g, "g")?;
            Self::check_width(fw, l, d_l, "l")?;
        }
        let rate = self.config.dropout;
        match &mut self.parts {
            Parts::Conditional { f1, f2 } => {
                let dropped = fw.graph.dropout(l, rate, fw.mode, fw.rng)?;
                let scale = f1.forward(fw, dropped)?;
                let shift = f2.forward(fw, dropped)?;
                let modulated = fw.graph.hadamard(scale, g)?;
                let modulated = fw.graph.add(modulated, shift)?;
                match self.config.append {
                    Append::Holistic => fw.graph.concat(&[modulated, g], 1),
                    Append::Relation => fw.graph.concat(&[modulated, l], 1),
                    Append::None => Ok(modulated),
                }
            }
            Parts::Projected { proj } => {
                let dropped = fw.graph.dropout(l, rate, fw.mode, fw.rng)?;
                let p = proj.forward(fw, dropped)?;
                match self.config.method {
                    FusionMethod::Max => fw.graph.maximum(g, p),
                    FusionMethod::Sum => fw.graph.add(g, p),
                    _ => {
                        let s = fw.graph.add(g, p)?;
                        fw.graph.scale(s, 0.5)
                    }
                }
            }
            Parts::Bilinear { proj, u, v, rank } => {
                let dropped = fw.graph.dropout(l, rate, fw.mode, fw.rng)?;
                let p = proj.forward(fw, dropped)?;
                let a = u.forward(fw, g)?;
                let b = v.forward(fw, p)?;
                let prod = fw.graph.hadamard(a, b)?;
                let batch = fw.graph.shape(prod)[0];
                let grouped = fw.graph.reshape(prod, &[batch, d_g, *rank])?;
                fw.graph.sum_last_axis(grouped)
            }
            Parts::Concat => fw.graph.concat(&[g, l], 1),
            Parts::Conv { conv, bn } => {
                let (Some(vol), Some(maps)) = (feeds.volume, feeds.maps) else {
                    return Err(Error::input("conv fusion needs the pathway feature maps"));
                };
                let aligned = fw.graph.resize_nearest(maps, volume)?;
                let stacked = at_layer("fusion conv input", fw.graph.concat(&[vol, aligned], 1))?;
                let x = at_layer("fusion conv", conv.forward(fw, stacked))?;
                let x = bn.forward(fw, x)?;
                let x = fw.graph.relu(x)?;
                fw.graph.global_avgpool3d(x, volume)
            }
        }
    }
}

/// Linear classifier; softmax is applied by the loss or by [`probabilities`].
pub fn classifier(pb: &mut ParamBuilder, name: &str, group: ParamGroup, width: usize, classes: usize) -> Linear {
    Linear::with_std(pb, name, group, width, classes, 0.01, 0.0)
}

/// Row-wise softmax of the head's logits.
pub fn probabilities(fw: &mut Forward, head: &Linear, z: NodeId) -> Result<crate::tensor::Tensor> {
    let logits = at_layer("classifier", head.forward(fw, z))?;
    crate::tensor::ops::softmax(fw.graph.value(logits))
}
