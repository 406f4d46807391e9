//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"CLNK"`, `u32` version, `u32` parameter count, then per parameter
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u64` extents, and the
//! values as raw `f64`. Parameters appear in registration order.

use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::ClgModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CLNK";
pub const VERSION: u32 = 1;

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * store.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32("parameter count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| Error::Format(format!("parameter `{name}` has implausible shape {shape:?}")))?;
        let bytes = r.take(8 * n, "values")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last parameter",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

/// Where the configuration used to build a checkpoint is stored.
pub fn sidecar_path(ckpt: impl AsRef<Path>) -> PathBuf {
    let mut s = ckpt.as_ref().as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

/// Writes the parameters and a sidecar config next to them.
pub fn save_model(model: &ClgModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_checkpoint(&model.store, path)?;
    let side = sidecar_path(path);
    std::fs::write(&side, model.cfg.to_toml_string()).map_err(|e| Error::io(side, e))
}

/// Rebuilds a model from a checkpoint. Without an explicit config the sidecar
/// is used if present, else the defaults.
pub fn load_model(path: impl AsRef<Path>, cfg: Option<Config>) -> Result<ClgModel> {
    let path = path.as_ref();
    let cfg = match cfg {
        Some(c) => c,
        None => {
            let side = sidecar_path(path);
            if side.exists() {
                Config::load(side)?
            } else {
                Config::default()
            }
        }
    };
    let mut model = ClgModel::new(cfg, 0)?;
    model.store.load_from(load_checkpoint(path)?)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.1, 1e300]).unwrap());
        s.add("b.bias", Tensor::new(vec![4], vec![0.0, -0.0, 7.0, 8.0]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let back = from_bytes(&to_bytes(&s)).unwrap();
        assert_eq!(back.len(), 2);
        for ((name, t), p) in back.iter().zip(s.iter()) {
            assert_eq!(name, &p.name);
            assert_eq!(t.shape(), p.value.shape());
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t.data()), bits(p.value.data()));
        }
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = to_bytes(&store());
        for n in 0..bytes.len() {
            assert!(matches!(from_bytes(&bytes[..n]), Err(Error::Format(_))), "prefix {n}");
        }
    }

    #[test]
    fn rejects_magic_and_version() {
        let mut bytes = to_bytes(&store());
        bytes[4] = 2;
        let e = from_bytes(&bytes).unwrap_err();
        assert!(e.to_string().contains("version 2"));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }
}
