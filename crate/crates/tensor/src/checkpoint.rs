//! Little-endian parameter checkpoints.
//!
//! Layout: `b"IMVS"`, `u32` version, `u32` parameter count, then for each
//! parameter: `u32` name length, UTF-8 name, `u32` rank, `rank x u32`
//! extents, `numel x f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IMVS";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        let dims = p.value.dims();
        out.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for &v in p.value.data() {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            TensorError::Checkpoint(format!("{what} at byte {}: {e}", self.offset))
        })?;
        self.offset += n;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint<T: Real, R: Read>(input: R) -> Result<ParamStore<T>> {
    let mut r = Reader {
        inner: input,
        offset: 0,
    };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic, not an IMVS checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        if len > 4096 {
            return Err(TensorError::Checkpoint(format!(
                "implausible name length {len} at byte {}",
                r.offset
            )));
        }
        let name = String::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| TensorError::Checkpoint(format!("non-UTF-8 name before byte {}", r.offset)))?;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(TensorError::Checkpoint(format!("`{name}` has rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<_>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.bytes(numel * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.insert(name, Tensor::new(dims.as_slice(), data)?)?;
    }
    Ok(store)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
