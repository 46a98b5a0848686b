//! Binary checkpoint: `FUTHCKPT`, a version word, a table of named text
//! blobs, then a table of named tensors. All integers are little-endian
//! u32; tensor values are little-endian f64.
//!
//! ```text
//! magic[8] version
//! n_text  { name_len name text_len text }*
//! n_tensor { name_len name precision rank dims[rank] values[f64; prod(dims)] }*
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FUTHCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub texts: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("file ends inside {what} starting at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn text(&self, name: &str) -> Option<&str> {
        self.texts.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize);
        put_u32(&mut out, self.texts.len());
        for (name, text) in &self.texts {
            put_str(&mut out, name);
            put_str(&mut out, text);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, matches!(t.precision(), Precision::F64) as usize);
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32("text count")? {
            let name = r.string("text name")?;
            let text = r.string("text body")?;
            ck.texts.push((name, text));
        }
        for _ in 0..r.u32("tensor count")? {
            let name = r.string("tensor name")?;
            let at = r.pos as u64;
            let precision = match r.u32("precision")? {
                0 => Precision::F32,
                1 => Precision::F64,
                other => return Err(Error::format(at, format!("unknown precision code {other}"))),
            };
            let rank = r.u32("rank")?;
            let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let at = r.pos as u64;
            let raw = r.take(len * 8, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::with_precision(&shape, data, precision)
                .map_err(|e| Error::format(at, format!("tensor {name}: {e}")))?;
            ck.tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after the tensor table"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
