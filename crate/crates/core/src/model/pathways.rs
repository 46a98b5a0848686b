//! The holistic 3D-convolution pathway and the temporal relation pathway.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::layers::{at_layer, BatchNorm, Conv2dLayer, Conv3dLayer, Forward, Linear, ParamBuilder};
use crate::autograd::{Mode, NodeId, ParamGroup};
use crate::error::{Error, Result};

/// Max-pool settings of a stage: (kernel, stride).
pub type PoolSpec = ([usize; 3], [usize; 3]);

/// The pooling used by the first two holistic pools: no temporal reduction.
pub const EARLY_POOL: PoolSpec = ([1, 3, 3], [1, 2, 2]);

/// conv -> batch-norm -> relu -> optional max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub pool: Option<PoolSpec>,
}

impl ConvStage {
    pub fn new(out_channels: usize, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3], pool: Option<PoolSpec>) -> Self {
        ConvStage {
            out_channels,
            kernel,
            stride,
            pad,
            pool,
        }
    }

    /// 3x3x3 conv, stride 1, same padding.
    pub fn cube(out_channels: usize, pool: Option<PoolSpec>) -> Self {
        Self::new(out_channels, [3; 3], [1; 3], [1; 3], pool)
    }
}

fn extent(input: usize, k: usize, s: usize, p: usize, what: &str) -> Result<usize> {
    if s == 0 || k == 0 || k > input + 2 * p {
        return Err(Error::dim(format!(
            "{what}: kernel {k} (stride {s}, pad {p}) does not fit extent {input}"
        )));
    }
    Ok((input + 2 * p - k) / s + 1)
}

fn extents3(input: [usize; 3], k: [usize; 3], s: [usize; 3], p: [usize; 3], what: &str) -> Result<[usize; 3]> {
    Ok([
        extent(input[0], k[0], s[0], p[0], what)?,
        extent(input[1], k[1], s[1], p[1], what)?,
        extent(input[2], k[2], s[2], p[2], what)?,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct HolisticConfig {
    pub stages: Vec<ConvStage>,
}

impl HolisticConfig {
    /// Three conv blocks (8, 16, `d_g` channels); the first two pool 1x3x3 with stride 1x2x2.
    pub fn desk(d_g: usize) -> Self {
        HolisticConfig {
            stages: vec![
                ConvStage::cube(8, Some(EARLY_POOL)),
                ConvStage::cube(16, Some(EARLY_POOL)),
                ConvStage::cube(d_g, None),
            ],
        }
    }

    /// Pooling pyramid shaped like an inflated Inception-v1 on 16x64x64
    /// clips: strided stem, two 1x3x3/1x2x2 pools, two temporal pools, and a
    /// final 2x7x7 average over 1024 channels.
    pub fn full_width() -> Self {
        let temporal_pool = ([2, 1, 1], [2, 1, 1]);
        HolisticConfig {
            stages: vec![
                ConvStage::new(8, [3; 3], [2; 3], [1; 3], Some(EARLY_POOL)),
                ConvStage::cube(16, Some(EARLY_POOL)),
                ConvStage::new(32, [1; 3], [1; 3], [0; 3], Some(temporal_pool)),
                ConvStage::new(1024, [1; 3], [1; 3], [0; 3], Some(temporal_pool)),
            ],
        }
    }

    pub fn d_g(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// Checks the early-pool rule and returns the (T, H, W) extents before
    /// the final average pool.
    pub fn output_volume(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if self.stages.is_empty() {
            return Err(Error::config("holistic pathway needs at least one stage"));
        }
        for (i, pool) in self.stages.iter().filter_map(|s| s.pool).take(2).enumerate() {
            if pool != EARLY_POOL {
                return Err(Error::config(format!(
                    "holistic max-pool {i} must use kernel 1x3x3 with stride 1x2x2, got {pool:?}"
                )));
            }
        }
        let mut v = input;
        for (i, s) in self.stages.iter().enumerate() {
            v = extents3(v, s.kernel, s.stride, s.pad, &format!("holistic stage {i} conv"))?;
            if let Some((k, st)) = s.pool {
                v = extents3(v, k, st, [0; 3], &format!("holistic stage {i} max-pool"))?;
            }
        }
        Ok(v)
    }
}

struct Stage3d {
    conv: Conv3dLayer,
    bn: BatchNorm,
    pool: Option<PoolSpec>,
}

/// Stacked 3D conv blocks followed by a global average pool; produces `g`.
pub struct HolisticPathway {
    stages: Vec<Stage3d>,
    final_volume: [usize; 3],
    d_g: usize,
}

pub struct HolisticOutput {
    /// `[B, D_g]`.
    pub g: NodeId,
    /// Last feature volume before the average pool, `[B, D_g, T', H', W']`.
    pub volume: NodeId,
}

impl HolisticPathway {
    pub fn new(pb: &mut ParamBuilder, config: &HolisticConfig, in_channels: usize, input: [usize; 3]) -> Result<Self> {
        let final_volume = config.output_volume(input)?;
        let mut channels = in_channels;
        let stages = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let name = format!("holistic.stage{i}");
                let st = Stage3d {
                    conv: Conv3dLayer::new(pb, &format!("{name}.conv"), ParamGroup::Holistic, channels, s.out_channels, s.kernel, s.stride, s.pad),
                    bn: BatchNorm::new(pb, &format!("{name}.bn"), ParamGroup::Holistic, s.out_channels),
                    pool: s.pool,
                };
                channels = s.out_channels;
                st
            })
            .collect();
        Ok(HolisticPathway {
            stages,
            final_volume,
            d_g: config.d_g(),
        })
    }

    pub fn d_g(&self) -> usize {
        self.d_g
    }

    pub fn final_volume(&self) -> [usize; 3] {
        self.final_volume
    }

    pub fn batchnorms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.stages.iter_mut().map(|s| &mut s.bn)
    }

    pub fn forward(&mut self, fw: &mut Forward, clip: NodeId) -> Result<HolisticOutput> {
        let mut x = clip;
        for (i, s) in self.stages.iter_mut().enumerate() {
            x = at_layer(&format!("holistic stage {i} conv"), s.conv.forward(fw, x))?;
            x = s.bn.forward(fw, x)?;
            x = fw.graph.relu(x)?;
            if let Some((k, st)) = s.pool {
                x = at_layer(&format!("holistic stage {i} max-pool"), fw.graph.maxpool3d(x, k, st))?;
            }
        }
        let kernel = {
            let s = fw.graph.shape(x);
            [s[2], s[3], s[4]]
        };
        let g = at_layer("holistic average pool", fw.graph.global_avgpool3d(x, kernel))?;
        Ok(HolisticOutput { g, volume: x })
    }
}

/// 2D conv stage: kernel/stride/pad on (H, W), optional (kernel, stride) max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dStage {
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub pad: [usize; 2],
    pub pool: Option<([usize; 2], [usize; 2])>,
}

impl Conv2dStage {
    /// 3x3 conv with same padding and a 2x2 max-pool.
    pub fn square(out_channels: usize) -> Self {
        Conv2dStage {
            out_channels,
            kernel: [3, 3],
            stride: [1, 1],
            pad: [1, 1],
            pool: Some(([2, 2], [2, 2])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub stages: Vec<Conv2dStage>,
    pub d_f: usize,
}

impl ExtractorConfig {
    pub fn desk(d_f: usize) -> Self {
        ExtractorConfig {
            stages: vec![Conv2dStage::square(8), Conv2dStage::square(16), Conv2dStage::square(16)],
            d_f,
        }
    }
}

struct Stage2d {
    conv: Conv2dLayer,
    bn: BatchNorm,
    pool: Option<([usize; 2], [usize; 2])>,
}

/// Per-frame 2D CNN with shared weights, ending in a projection to `D_f`.
pub struct FrameFeatureExtractor {
    stages: Vec<Stage2d>,
    proj: Linear,
    proj_bn: BatchNorm,
    map_channels: usize,
    map_extent: [usize; 2],
    d_f: usize,
}

pub struct FrameOutput {
    /// `[B, T, D_f]`.
    pub features: NodeId,
    /// Last conv maps before the final pool, stacked over time: `[B, C_f, T, h, w]`.
    pub maps: NodeId,
}

impl FrameFeatureExtractor {
    pub fn new(pb: &mut ParamBuilder, config: &ExtractorConfig, in_channels: usize, frame: [usize; 2]) -> Result<Self> {
        if config.stages.is_empty() {
            return Err(Error::config("frame extractor needs at least one stage"));
        }
        let group = ParamGroup::FrameExtractor;
        let mut channels = in_channels;
        let mut hw = frame;
        let mut map_extent = frame;
        let mut stages = Vec::new();
        for (i, s) in config.stages.iter().enumerate() {
            let what = format!("frame extractor stage {i}");
            hw = [
                extent(hw[0], s.kernel[0], s.stride[0], s.pad[0], &what)?,
                extent(hw[1], s.kernel[1], s.stride[1], s.pad[1], &what)?,
            ];
            map_extent = hw;
            if let Some((k, st)) = s.pool {
                hw = [extent(hw[0], k[0], st[0], 0, &what)?, extent(hw[1], k[1], st[1], 0, &what)?];
            }
            let name = format!("extractor.stage{i}");
            stages.push(Stage2d {
                conv: Conv2dLayer::new(pb, &format!("{name}.conv"), group, channels, s.out_channels, s.kernel, s.stride, s.pad),
                bn: BatchNorm::new(pb, &format!("{name}.bn"), group, s.out_channels),
                pool: s.pool,
            });
            channels = s.out_channels;
        }
        let flat = channels * hw[0] * hw[1];
        Ok(FrameFeatureExtractor {
            stages,
            proj: Linear::new(pb, "extractor.proj", group, flat, config.d_f),
            proj_bn: BatchNorm::new(pb, "extractor.proj.bn", group, config.d_f),
            map_channels: channels,
            map_extent,
            d_f: config.d_f,
        })
    }

    pub fn d_f(&self) -> usize {
        self.d_f
    }

    pub fn map_channels(&self) -> usize {
        self.map_channels
    }

    pub fn batchnorms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.stages
            .iter_mut()
            .map(|s| &mut s.bn)
            .chain(std::iter::once(&mut self.proj_bn))
    }

    /// Applies the 2D stack to every frame of a `[B, C, T, H, W]` clip.
    pub fn forward(&mut self, fw: &mut Forward, clip: NodeId) -> Result<FrameOutput> {
        let s = fw.graph.shape(clip).to_vec();
        if s.len() != 5 {
            return Err(Error::dim(format!("frame extractor: expected [B, C, T, H, W], got {s:?}")));
        }
        let (b, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let frames = fw.graph.permute(clip, &[0, 2, 1, 3, 4])?;
        let mut x = fw.graph.reshape(frames, &[b * t, c, h, w])?;
        let mut maps = x;
        for (i, st) in self.stages.iter_mut().enumerate() {
            x = at_layer(&format!("frame extractor stage {i} conv"), st.conv.forward(fw, x))?;
            x = st.bn.forward(fw, x)?;
            x = fw.graph.relu(x)?;
            maps = x;
            if let Some((k, stride)) = st.pool {
                let sh = fw.graph.shape(x).to_vec();
                let v = fw.graph.reshape(x, &[sh[0], sh[1], 1, sh[2], sh[3]])?;
                let p = at_layer(
                    &format!("frame extractor stage {i} max-pool"),
                    fw.graph.maxpool3d(v, [1, k[0], k[1]], [1, stride[0], stride[1]]),
                )?;
                let ps = fw.graph.shape(p).to_vec();
                x = fw.graph.reshape(p, &[ps[0], ps[1], ps[3], ps[4]])?;
            }
        }
        let flat_len: usize = fw.graph.shape(x)[1..].iter().product();
        let flat = fw.graph.reshape(x, &[b * t, flat_len])?;
        let f = at_layer("frame extractor projection", self.proj.forward(fw, flat))?;
        let f = self.proj_bn.forward(fw, f)?;
        let f = fw.graph.relu(f)?;
        let features = fw.graph.reshape(f, &[b, t, self.d_f])?;

        let [mh, mw] = self.map_extent;
        let m = fw.graph.reshape(maps, &[b, t, self.map_channels, mh, mw])?;
        let maps = fw.graph.permute(m, &[0, 2, 1, 3, 4])?;
        Ok(FrameOutput { features, maps })
    }
}

/// How relation tuples are drawn.
pub enum TupleMode<'a> {
    /// Uniform without replacement, then sorted into temporal order.
    Random(&'a mut ChaCha8Rng),
    /// Evenly spaced with both endpoints: `round(k (N-1) / (m-1))`.
    Even,
}

/// An increasing tuple of `m` frame indices out of `n`.
pub fn sample_tuple(n: usize, m: usize, mode: &mut TupleMode) -> Result<Vec<usize>> {
    if m < 2 || m > n {
        return Err(Error::input(format!("tuple size {m} must lie in [2, {n}]")));
    }
    Ok(match mode {
        TupleMode::Random(rng) => {
            let mut idx = sample(*rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        TupleMode::Even => (0..m)
            .map(|k| ((k * (n - 1)) as f64 / (m - 1) as f64).round() as usize)
            .collect(),
    })
}

/// `h_phi_m`: two (linear, batch-norm, relu) layers on an `m`-frame concatenation.
pub struct RelationScaleMlp {
    pub scale: usize,
    pub first: Linear,
    pub first_bn: BatchNorm,
    pub second: Linear,
    pub second_bn: BatchNorm,
}

impl RelationScaleMlp {
    pub fn new(pb: &mut ParamBuilder, scale: usize, d_f: usize, d_r: usize) -> Self {
        let group = ParamGroup::RelationMlp;
        let name = format!("relation.m{scale}");
        RelationScaleMlp {
            scale,
            first: Linear::new(pb, &format!("{name}.fc1"), group, scale * d_f, d_r),
            first_bn: BatchNorm::new(pb, &format!("{name}.bn1"), group, d_r),
            second: Linear::new(pb, &format!("{name}.fc2"), group, d_r, d_r),
            second_bn: BatchNorm::new(pb, &format!("{name}.bn2"), group, d_r),
        }
    }

    /// Concatenates the selected frame features in tuple order and applies the MLP.
    pub fn forward(&mut self, fw: &mut Forward, features: NodeId, tuple: &[usize]) -> Result<NodeId> {
        if tuple.len() != self.scale {
            return Err(Error::input(format!(
                "tuple of {} frames given to the scale-{} relation",
                tuple.len(),
                self.scale
            )));
        }
        let s = fw.graph.shape(features).to_vec();
        let picked = fw.graph.select(features, 1, tuple)?;
        let concat = fw.graph.reshape(picked, &[s[0], self.scale * s[2]])?;
        let h = at_layer(&format!("relation m={} fc1", self.scale), self.first.forward(fw, concat))?;
        let h = self.first_bn.forward(fw, h)?;
        let h = fw.graph.relu(h)?;
        let h = self.second.forward(fw, h)?;
        let h = self.second_bn.forward(fw, h)?;
        fw.graph.relu(h)
    }
}

/// One relation MLP per scale `m = 2..=N`.
pub struct RelationBlock {
    pub mlps: Vec<RelationScaleMlp>,
    pub d_r: usize,
}

impl RelationBlock {
    pub fn new(pb: &mut ParamBuilder, frames: usize, d_f: usize, d_r: usize) -> Result<Self> {
        if frames < 2 {
            return Err(Error::config("the relation pathway needs at least two frames"));
        }
        Ok(RelationBlock {
            mlps: (2..=frames).map(|m| RelationScaleMlp::new(pb, m, d_f, d_r)).collect(),
            d_r,
        })
    }

    pub fn bank_width(&self) -> usize {
        self.d_r * self.mlps.len()
    }

    pub fn batchnorms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.mlps
            .iter_mut()
            .flat_map(|m| [&mut m.first_bn, &mut m.second_bn])
    }

    /// The multi-scale relation bank `[R(s_2), ..., R(s_N)]`. In train mode
    /// each scale averages `tuples_per_scale` random tuples drawn from the
    /// forward rng; in eval mode it uses the single evenly spaced tuple.
    pub fn build_bank(&mut self, fw: &mut Forward, features: NodeId, tuples_per_scale: usize) -> Result<NodeId> {
        let n = fw.graph.shape(features)[1];
        if self.mlps.len() + 1 != n || self.mlps.iter().enumerate().any(|(i, m)| m.scale != i + 2) {
            return Err(Error::config(format!(
                "relation bank over {n} frames needs one MLP for each scale 2..={n}"
            )));
        }
        if tuples_per_scale == 0 {
            return Err(Error::config("tuples per scale must be at least 1"));
        }
        let random = fw.mode == Mode::Train;
        let k = if random { tuples_per_scale } else { 1 };
        let mut segments = Vec::with_capacity(self.mlps.len());
        for mlp in &mut self.mlps {
            let mut acc = None;
            for _ in 0..k {
                let tuple = if random {
                    sample_tuple(n, mlp.scale, &mut TupleMode::Random(fw.rng))?
                } else {
                    sample_tuple(n, mlp.scale, &mut TupleMode::Even)?
                };
                let r = mlp.forward(fw, features, &tuple)?;
                acc = Some(match acc {
                    None => r,
                    Some(a) => fw.graph.add(a, r)?,
                });
            }
            let mut seg = acc.expect("k >= 1");
            if k > 1 {
                seg = fw.graph.scale(seg, 1.0 / k as f64)?;
            }
            segments.push(seg);
        }
        fw.graph.concat(&segments, 1)
    }
}
