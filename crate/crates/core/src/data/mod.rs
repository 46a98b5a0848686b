//! Clip storage, dataset manifests, frame sampling and the synthetic motion task.

mod clip;
mod manifest;
mod synth;

pub use clip::{read_clip, write_clip, ClipFile, VideoClip, CLIP_MAGIC, CLIP_VERSION, DTYPE_F32};
pub use manifest::{DatasetManifest, Split};
pub use synth::{generate_synthetic_clip, Direction, MotionProgram, SyntheticTaskSpec};

use crate::error::{Error, Result};

/// Fixed-rate sampling of `n` frames out of `raw`: stride `floor(raw / n)`, starting at 0.
pub fn sample_frames(raw: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::input("cannot sample zero frames"));
    }
    if n > raw {
        return Err(Error::input(format!("cannot sample {n} frames from a {raw}-frame clip")));
    }
    let stride = raw / n;
    Ok((0..n).map(|k| k * stride).collect())
}
