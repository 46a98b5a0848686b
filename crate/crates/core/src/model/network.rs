use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fusion::{classifier, FusionConfig, FusionFeeds, FusionInputs, FusionModule};
use super::layers::{BatchNorm, Forward, Linear, ParamBuilder};
use super::pathways::{ExtractorConfig, FrameFeatureExtractor, HolisticConfig, HolisticPathway, RelationBlock};
use crate::autograd::{NodeId, ParamGroup, ParamStore};
use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Everything needed to build a [`FuthNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub holistic: HolisticConfig,
    pub extractor: ExtractorConfig,
    pub d_r: usize,
    pub tuples_per_scale: usize,
    pub fusion: FusionConfig,
    pub precision: Precision,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Grayscale 16x32x32 clips, `D_g = 64`, `D_f = 32`, `D_r = 64`, four classes.
    pub fn desk() -> Self {
        ModelConfig {
            channels: 1,
            frames: 16,
            height: 32,
            width: 32,
            classes: 4,
            holistic: HolisticConfig::desk(64),
            extractor: ExtractorConfig::desk(32),
            d_r: 64,
            tuples_per_scale: 1,
            fusion: FusionConfig::default(),
            precision: Precision::F32,
            init_seed: 0,
        }
    }

    /// Full-width features (`D_g = 1024`, `D_f = 1024`, `D_r = 256`) on 16x64x64 RGB clips.
    pub fn full_width(classes: usize) -> Self {
        ModelConfig {
            channels: 3,
            height: 64,
            width: 64,
            classes,
            holistic: HolisticConfig::full_width(),
            extractor: ExtractorConfig::desk(1024),
            d_r: 256,
            ..Self::desk()
        }
    }

    pub fn d_g(&self) -> usize {
        self.holistic.d_g()
    }

    pub fn d_l(&self) -> usize {
        self.d_r * self.frames.saturating_sub(1)
    }

    /// Shape of a single clip as fed to the network, `[C, T, H, W]`.
    pub fn clip_shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }
}

/// Which classifier produces the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Holistic,
    Relation,
    Fusion,
}

/// Pathway outputs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub g: NodeId,
    pub l: NodeId,
    pub volume: NodeId,
    pub maps: NodeId,
}

impl Features {
    pub fn feeds(&self) -> FusionFeeds {
        FusionFeeds {
            g: self.g,
            l: self.l,
            volume: Some(self.volume),
            maps: Some(self.maps),
        }
    }
}

/// The two-pathway network with a classifier over `g`, over `l`, and over the fused vector.
///
/// Parameters live in `store`; `net` holds the layer structure and the
/// batch-norm running statistics, so a forward pass can borrow the two
/// separately.
pub struct FuthNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Modules,
}

pub struct Modules {
    pub holistic: HolisticPathway,
    pub extractor: FrameFeatureExtractor,
    pub relation: RelationBlock,
    pub fusion: FusionModule,
    pub holistic_head: Linear,
    pub relation_head: Linear,
    pub fusion_head: Linear,
    pub tuples_per_scale: usize,
}

impl FuthNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.classes == 0 {
            return Err(Error::config("class count must be positive"));
        }
        if config.d_r == 0 || config.extractor.d_f == 0 {
            return Err(Error::config("relation widths must be positive"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
            precision: config.precision,
        };
        let [c, t, h, w] = config.clip_shape();
        let holistic = HolisticPathway::new(&mut pb, &config.holistic, c, [t, h, w])?;
        let extractor = FrameFeatureExtractor::new(&mut pb, &config.extractor, c, [h, w])?;
        let relation = RelationBlock::new(&mut pb, t, extractor.d_f(), config.d_r)?;
        let inputs = FusionInputs {
            d_g: holistic.d_g(),
            d_l: relation.bank_width(),
            volume_channels: holistic.d_g(),
            map_channels: extractor.map_channels(),
            volume: holistic.final_volume(),
        };
        let fusion = FusionModule::new(&mut pb, config.fusion.clone(), inputs)?;
        let k = config.classes;
        let config_tuples = config.tuples_per_scale;
        let holistic_head = classifier(&mut pb, "head.holistic", ParamGroup::HolisticHead, inputs.d_g, k);
        let relation_head = classifier(&mut pb, "head.relation", ParamGroup::RelationHead, inputs.d_l, k);
        let fusion_head = classifier(&mut pb, "head.fusion", ParamGroup::FusionHead, fusion.output_width(), k);
        Ok(FuthNet {
            config,
            store,
            net: Modules {
                holistic,
                extractor,
                relation,
                fusion,
                holistic_head,
                relation_head,
                fusion_head,
                tuples_per_scale: config_tuples,
            },
        })
    }

    /// A clip rearranged to the network layout `[C, T, H, W]` at the model precision.
    pub fn clip_input(&self, clip: &VideoClip) -> Result<Tensor> {
        let [c, t, h, w] = self.config.clip_shape();
        let [ct, cc, ch, cw] = clip.dims();
        if [cc, ct, ch, cw] != [c, t, h, w] {
            return Err(Error::config(format!(
                "clip of shape [T={ct}, C={cc}, H={ch}, W={cw}] does not match the model input [T={t}, C={c}, H={h}, W={w}]"
            )));
        }
        let plane = h * w;
        let src = clip.frames.data();
        let mut data = Vec::with_capacity(c * t * plane);
        for ci in 0..c {
            for ti in 0..t {
                let off = (ti * c + ci) * plane;
                data.extend_from_slice(&src[off..off + plane]);
            }
        }
        Tensor::with_precision(&[c, t, h, w], data, self.config.precision)
    }
}

/// Stacks equally shaped tensors along a new leading batch axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::input("cannot stack an empty list"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::dim(format!("cannot stack {:?} with {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::with_precision(&shape, data, first.precision())
}

impl Modules {
    /// Every batch-norm layer, in a fixed order.
    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.holistic
            .batchnorms_mut()
            .chain(self.extractor.batchnorms_mut())
            .chain(self.relation.batchnorms_mut())
            .chain(self.fusion.batchnorms_mut())
            .collect()
    }

    pub fn holistic_features(&mut self, fw: &mut Forward, clip: NodeId) -> Result<(NodeId, NodeId)> {
        let out = self.holistic.forward(fw, clip)?;
        Ok((out.g, out.volume))
    }

    pub fn relation_features(&mut self, fw: &mut Forward, clip: NodeId) -> Result<(NodeId, NodeId)> {
        let frames = self.extractor.forward(fw, clip)?;
        let l = self.relation.build_bank(fw, frames.features, self.tuples_per_scale)?;
        Ok((l, frames.maps))
    }

    pub fn features(&mut self, fw: &mut Forward, clip: NodeId) -> Result<Features> {
        let (g, volume) = self.holistic_features(fw, clip)?;
        let (l, maps) = self.relation_features(fw, clip)?;
        Ok(Features { g, l, volume, maps })
    }

    /// Fused logits from already computed pathway outputs.
    pub fn fused_logits(&mut self, fw: &mut Forward, feeds: FusionFeeds) -> Result<NodeId> {
        let z = self.fusion.forward(fw, feeds)?;
        self.fusion_head.forward(fw, z)
    }

    pub fn logits(&mut self, fw: &mut Forward, clip: NodeId, head: Head) -> Result<NodeId> {
        match head {
            Head::Holistic => {
                let (g, _) = self.holistic_features(fw, clip)?;
                self.holistic_head.forward(fw, g)
            }
            Head::Relation => {
                let (l, _) = self.relation_features(fw, clip)?;
                self.relation_head.forward(fw, l)
            }
            Head::Fusion => {
                let f = self.features(fw, clip)?;
                self.fused_logits(fw, f.feeds())
            }
        }
    }
}
