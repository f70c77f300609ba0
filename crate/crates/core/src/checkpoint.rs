//! Binary parameter container shared by every model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MATCKPT\0"
//! version    u32      1
//! kind       u32 length + UTF-8
//! meta       u32 length + UTF-8 ("key=value" lines)
//! blocks     u32 count, then per block: u32 length + UTF-8 name, u64 rows, u64 cols
//! values     f64 little-endian, blocks in table order, row-major
//! ```
//!
//! A sidecar `<file>.manifest` repeats the kind and metadata as text.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::{ParamBlock, Params};

pub const MAGIC: &[u8; 8] = b"MATCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub params: Params,
}

impl Checkpoint {
    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::format("checkpoint", format!("meta {key} is not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::format("checkpoint", format!("meta {key} is not a number")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format("checkpoint", format!("missing meta {key}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                "checkpoint",
                format!("expected a {kind} checkpoint, found {}", self.kind),
            ));
        }
        Ok(())
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + ckpt.params.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut buf, &ckpt.kind);
    put_str(&mut buf, &meta_text(&ckpt.meta));
    let blocks = ckpt.params.blocks();
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        put_str(&mut buf, &b.name);
        buf.extend_from_slice(&(b.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(b.cols as u64).to_le_bytes());
    }
    for v in ckpt.params.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn meta_text(meta: &BTreeMap<String, String>) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint", "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "invalid UTF-8"))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let kind = r.string()?;
    let meta = r
        .string()?
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count);
    let mut offset = 0;
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        blocks.push(ParamBlock {
            name,
            rows,
            cols,
            offset,
        });
        offset += rows * cols;
    }
    let raw = r.take(offset * 8)?;
    if r.pos != buf.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Checkpoint {
        kind,
        meta,
        params: Params::from_parts(blocks, data),
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))?;
    let manifest = format!("kind={}\n{}", ckpt.kind, meta_text(&ckpt.meta));
    let mp = manifest_path(path);
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
