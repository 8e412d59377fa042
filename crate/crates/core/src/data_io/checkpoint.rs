//! Binary checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "SPCT" | version | config_len | config JSON | n_arrays |
//!   n_arrays × ( name_len | name | rows | cols | rows·cols × f64 LE )
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(params.config())?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_u32(&mut out, params.tensors().len())?;
    for (name, m) in params.names().iter().zip(params.tensors()) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.rows())?;
        put_u32(&mut out, m.cols())?;
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let found = c.u32("version")?;
    if found != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found,
        });
    }
    let len = c.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
    let n = c.u32("array count")? as usize;
    let mut named = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_owned();
        let rows = c.u32("rows")? as usize;
        let cols = c.u32("cols")? as usize;
        let count = rows
            .checked_mul(cols)
            .and_then(|k| k.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("array {name} too large")))?;
        let raw = c.take(count, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        named.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    ModelParams::from_parts(config, named)
}

/// Writes through a temporary sibling file so a failed write never leaves
/// a partial checkpoint behind.
pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(params)?;
    let tmp = path.with_extension("tmp-ckpt");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    read_checkpoint(&fs::read(path)?)
}
