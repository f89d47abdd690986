//! Versioned binary container shared by model, adapter and index files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "PADAPT\0\x01"
//! version    u32
//! n_meta     u32      then n_meta x (u32 len, utf-8 key, u32 len, utf-8 value)
//! n_params   u32      then n_params x (u32 len, utf-8 name, u32 ndim, ndim x u64 dim,
//!                                      prod(dim) x f64 value)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"PADAPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: IndexMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let mut meta = IndexMap::new();
        for _ in 0..get_u32(&mut r)? {
            let k = get_str(&mut r)?;
            let v = get_str(&mut r)?;
            meta.insert(k, v);
        }
        let mut params = ParamStore::new();
        for _ in 0..get_u32(&mut r)? {
            let name = get_str(&mut r)?;
            let ndim = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            if numel.checked_mul(8).is_none_or(|n| n > r.len()) {
                return Err(Error::Format(format!("truncated values for `{name}`")));
            }
            let data = (0..numel)
                .map(|_| {
                    let mut b = [0u8; 8];
                    read_exact(&mut r, &mut b).map(|_| f64::from_le_bytes(b))
                })
                .collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("missing meta key `{key}`")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("unexpected end of file".into()))
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > r.len() {
        return Err(Error::Format("string length exceeds file".into()));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("invalid utf-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..4, key in "[a-z.]{1,12}") {
            let cols = values.len();
            let mut params = ParamStore::new();
            params.insert("w", Tensor::new(vec![1, cols], values.clone()).unwrap());
            params.insert("b", Tensor::new(vec![rows], vec![0.5; rows]).unwrap());
            let mut meta = IndexMap::new();
            meta.insert(key.clone(), "v=1".to_string());
            let ck = Checkpoint { meta, params };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.params.content_hash(), ck.params.content_hash());
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros(&[2, 2]));
        let bytes = Checkpoint { meta: IndexMap::new(), params }.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Format(m)) if m.contains("version")));
    }
}
