//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PDCKPT\0\0"
//! version      u32      FORMAT_VERSION
//! tag          u32 length + UTF-8 ("conformer", "aux:event", ...)
//! config       u64 length + UTF-8 JSON echo of the producing config
//! entry count  u32
//! per entry    u32 name length + UTF-8 name, u8 trainable flag,
//!              u32 rank, rank x u64 dims, prod(dims) x f64
//! checksum     u64 FNV-1a of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::util::fnv64;

pub const MAGIC: &[u8; 8] = b"PDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tag: String,
    pub config_json: String,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.tag.len() as u32).to_le_bytes());
        b.extend_from_slice(self.tag.as_bytes());
        b.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config_json.as_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value, trainable) in self.params.iter() {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(u8::from(trainable));
            b.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for d in value.shape() {
                b.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in value.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv64(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m);
        if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(bad("checksum mismatch (corrupt or truncated)"));
        }
        let mut r = Reader {
            b: body,
            pos: 8,
            origin,
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let n = r.u32()? as usize;
        let tag = r.string(n)?;
        let n = r.u64()? as usize;
        let config_json = r.string(n)?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| bad("entry too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data)?;
            if trainable {
                params.add(name, t);
            } else {
                params.add_buffer(name, t);
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after entries"));
        }
        Ok(Self {
            tag,
            config_json,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Fails unless the tag equals `expected`.
    pub fn expect_tag(&self, expected: &str, origin: &Path) -> Result<()> {
        if self.tag != expected {
            return Err(Error::format(
                origin,
                format!("checkpoint holds {:?}, expected {expected:?}", self.tag),
            ));
        }
        Ok(())
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.b.len());
        let end = end.ok_or_else(|| Error::format(self.origin, "truncated checkpoint"))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let origin = self.origin;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(origin, "invalid UTF-8"))
    }
}
