//! Flat checkpoint file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "CRDFCKPT"
//! version u32
//! count   u32
//! count x { name_len u32, name utf-8, ndim u32, dims u64 x ndim }
//! payload f64 x sum(numel) in manifest order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::RuntimeError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRDFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + params.num_scalars() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], RuntimeError> {
        if self.buf.len() - self.pos < n {
            return Err(RuntimeError::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, RuntimeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, RuntimeError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParamStore, RuntimeError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(RuntimeError::Checkpoint("bad magic header".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(RuntimeError::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u32("count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| RuntimeError::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        manifest.push((name, shape));
    }
    let mut store = ParamStore::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8, &format!("payload of `{name}`"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(RuntimeError::Checkpoint(format!(
            "{} trailing bytes after payload",
            buf.len() - r.pos
        )));
    }
    Ok(store)
}

/// Writes through a sibling temp file and renames, so an interrupted write
/// never replaces an existing checkpoint with a partial one.
pub fn write_checkpoint(path: &Path, params: &ParamStore) -> Result<(), RuntimeError> {
    if !params.is_finite() {
        return Err(RuntimeError::NonFinite("checkpoint parameters"));
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(params))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore, RuntimeError> {
    decode_checkpoint(&fs::read(path)?)
}
