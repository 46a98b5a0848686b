//! Bootstrapping 3D convolution kernels from 2D ones.
//!
//! A 2D kernel `w` becomes a 3D kernel with `N` temporal taps, each equal to
//! `w / N`. On a clip whose `N` frames are all the same image, the temporal
//! sum of the taps gives back `w`, so the 3D layer reproduces the 2D
//! response frame by frame.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InflationSpec {
    pub temporal_extent: usize,
    pub source_shape: [usize; 4],
}

impl InflationSpec {
    pub fn new(temporal_extent: usize, source_shape: [usize; 4]) -> Result<Self> {
        if temporal_extent == 0 {
            return Err(Error::input("temporal extent must be at least 1"));
        }
        Ok(InflationSpec {
            temporal_extent,
            source_shape,
        })
    }

    pub fn inflated_shape(&self) -> [usize; 5] {
        let [f, c, kh, kw] = self.source_shape;
        [f, c, self.temporal_extent, kh, kw]
    }
}

/// `[F, C, kh, kw]` -> `[F, C, N, kh, kw]` with every temporal slice equal to `w2d / N`.
pub fn inflate_2d_to_3d(w2d: &Tensor, temporal_extent: usize) -> Result<Tensor> {
    if w2d.rank() != 4 {
        return Err(Error::dim(format!("inflate: expected a rank-4 kernel, got {:?}", w2d.shape())));
    }
    let s = w2d.shape();
    let spec = InflationSpec::new(temporal_extent, [s[0], s[1], s[2], s[3]])?;
    let n = spec.temporal_extent;
    let plane = s[2] * s[3];
    let scale = 1.0 / n as f64;
    let mut data = Vec::with_capacity(w2d.len() * n);
    for fc in w2d.data().chunks(plane) {
        for _ in 0..n {
            data.extend(fc.iter().map(|v| v * scale));
        }
    }
    Ok(Tensor::from_parts_rounded(spec.inflated_shape().to_vec(), data, w2d.precision()))
}

/// `[C, H, W]` repeated `frames` times as a `[1, C, frames, H, W]` clip.
pub fn repeat_frame(frame: &Tensor, frames: usize) -> Result<Tensor> {
    if frame.rank() != 3 || frames == 0 {
        return Err(Error::dim(format!("repeat_frame: need a [C, H, W] frame, got {:?}", frame.shape())));
    }
    let s = frame.shape();
    let plane = s[1] * s[2];
    let mut data = Vec::with_capacity(frame.len() * frames);
    for c in frame.data().chunks(plane) {
        for _ in 0..frames {
            data.extend_from_slice(c);
        }
    }
    Ok(Tensor::from_parts(vec![1, s[0], frames, s[1], s[2]], data, frame.precision()))
}

/// Largest absolute deviation between the inflated 3D response on a
/// repeated-frame clip and the 2D response on the single frame.
pub fn boring_video_equivalence(
    frame: &Tensor,
    w2d: &Tensor,
    bias: &Tensor,
    temporal_extent: usize,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<f64> {
    let s = frame.shape();
    if frame.rank() != 3 {
        return Err(Error::dim(format!("boring video: need a [C, H, W] frame, got {s:?}")));
    }
    let image = frame.reshape(&[1, s[0], s[1], s[2]])?;
    let reference = ops::conv2d(&image, w2d, bias, stride, pad)?;
    let clip = repeat_frame(frame, temporal_extent)?;
    let w3d = inflate_2d_to_3d(w2d, temporal_extent)?;
    let video = ops::conv3d(&clip, &w3d, bias, [1, stride[0], stride[1]], [0, pad[0], pad[1]])?;
    let r = reference.shape();
    let flat = video.reshape(&[r[0], r[1], r[2], r[3]])?;
    Ok(flat.max_abs_diff(&reference))
}
