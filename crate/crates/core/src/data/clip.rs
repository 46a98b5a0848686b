use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub const CLIP_MAGIC: &[u8; 4] = b"FUTH";
pub const CLIP_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

/// Size of the fixed header: magic, version, dtype code, then T, C, H, W.
const HEADER_LEN: usize = 4 + 4 + 4 + 16;

/// A clip of `[T, C, H, W]` frames with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub label: usize,
}

impl VideoClip {
    pub fn new(frames: Tensor, label: usize) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::dim(format!("a clip is [T, C, H, W], got {:?}", frames.shape())));
        }
        Ok(VideoClip { frames, label })
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.frames.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Keeps only the frames at `indices`, in order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<VideoClip> {
        let [t, c, h, w] = self.dims();
        let plane = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            if i >= t {
                return Err(Error::input(format!("frame {i} out of range for {t} frames")));
            }
            data.extend_from_slice(&self.frames.data()[i * plane..(i + 1) * plane]);
        }
        VideoClip::new(
            Tensor::from_parts(vec![indices.len(), c, h, w], data, self.frames.precision()),
            self.label,
        )
    }

    /// Frame `t` as a `[C, H, W]` tensor.
    pub fn frame(&self, t: usize) -> Tensor {
        self.frames.index_leading(t)
    }
}

/// Binary clip encoding:
///
/// ```text
/// "FUTH" | version u32 | dtype u32 | T u32 | C u32 | H u32 | W u32 | T*C*H*W f32 | label u32
/// ```
///
/// All integers and floats are little-endian; the payload is row-major.
pub struct ClipFile;

impl ClipFile {
    pub fn encode(clip: &VideoClip) -> Result<Vec<u8>> {
        let dims = clip.dims();
        let mut out = Vec::with_capacity(HEADER_LEN + clip.frames.len() * 4 + 4);
        out.extend_from_slice(CLIP_MAGIC);
        out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for d in dims {
            let d = u32::try_from(d).map_err(|_| Error::input(format!("extent {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in clip.frames.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let label = u32::try_from(clip.label).map_err(|_| Error::input("label does not fit in u32"))?;
        out.extend_from_slice(&label.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<VideoClip> {
        let u32_at = |offset: usize, what: &str| -> Result<u32> {
            bytes
                .get(offset..offset + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::format(bytes.len() as u64, format!("truncated while reading {what}")))
        };
        match bytes.get(..4) {
            Some(m) if m == CLIP_MAGIC => {}
            Some(_) => return Err(Error::format(0, "bad magic, expected \"FUTH\"")),
            None => return Err(Error::format(bytes.len() as u64, "truncated before magic")),
        }
        let version = u32_at(4, "version")?;
        if version != CLIP_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let dtype = u32_at(8, "dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(8, format!("unsupported dtype code {dtype}")));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u32_at(12 + 4 * i, "dims")? as usize;
            if *d == 0 {
                return Err(Error::format(12 + 4 * i as u64, "zero extent"));
            }
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(12, "dims overflow"))?;
        let payload_end = HEADER_LEN + numel * 4;
        let expected = payload_end + 4;
        if bytes.len() < expected {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated: expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        if bytes.len() > expected {
            return Err(Error::format(
                expected as u64,
                format!("{} trailing bytes after label", bytes.len() - expected),
            ));
        }
        let data = bytes[HEADER_LEN..payload_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect::<Vec<f64>>();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((HEADER_LEN + 4 * pos) as u64, "non-finite sample"));
        }
        let label = u32_at(payload_end, "label")? as usize;
        VideoClip::new(Tensor::from_parts(dims.to_vec(), data, Precision::F32), label)
    }
}

pub fn write_clip(path: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    fs::write(path, ClipFile::encode(clip)?)?;
    Ok(())
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<VideoClip> {
    ClipFile::decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(dims: [usize; 4], label: usize, seed: u64) -> VideoClip {
        let frames = Tensor::from_fn(&dims, |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 37.0 - 13.0);
        VideoClip::new(frames, label).unwrap()
    }

    #[test]
    fn payload_size_matches_dims() {
        let bytes = ClipFile::encode(&clip([16, 3, 32, 32], 2, 0)).unwrap();
        assert_eq!(bytes.len() - HEADER_LEN - 4, 196_608);
        assert_eq!(&bytes[..4], b"FUTH");
    }

    #[test]
    fn truncated_and_padded_files_are_rejected() {
        let bytes = ClipFile::encode(&clip([2, 1, 3, 3], 1, 5)).unwrap();
        let err = ClipFile::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == bytes.len() as u64 - 1));
        let mut long = bytes.clone();
        long.push(0);
        let err = ClipFile::decode(&long).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == bytes.len() as u64));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = ClipFile::encode(&clip([1, 1, 2, 2], 0, 1)).unwrap();
        bytes[4] = 2;
        assert!(matches!(ClipFile::decode(&bytes), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(ClipFile::decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(t in 1usize..5, c in 1usize..4, h in 1usize..6, w in 1usize..6, label in 0usize..10, seed in any::<u64>()) {
            let original = clip([t, c, h, w], label, seed);
            let decoded = ClipFile::decode(&ClipFile::encode(&original).unwrap()).unwrap();
            prop_assert_eq!(decoded, original);
        }
    }
}
