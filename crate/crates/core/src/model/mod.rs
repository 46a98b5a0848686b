//! Network layers, the two pathways, fusion, and the assembled classifier.

pub mod fusion;
pub mod layers;
pub mod network;
pub mod pathways;

pub use fusion::{Append, FusionConfig, FusionFeeds, FusionMethod, FusionModule};
pub use layers::{BatchNorm, Forward, Linear, ParamBuilder};
pub use network::{stack, Features, FuthNet, Head, ModelConfig, Modules};
pub use pathways::{sample_tuple, ExtractorConfig, HolisticConfig, TupleMode};
