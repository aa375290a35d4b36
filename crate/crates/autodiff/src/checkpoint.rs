//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ALECKPT\0"
//! version  u32
//! n_meta   u32, then n_meta x (key: str, value: str)
//! n_tensor u32, then n_tensor x (name: str, ndim: u32, dims: ndim x u64, payload: f64 LE)
//! str      u32 byte length followed by UTF-8 bytes
//! ```

use std::io::{Read, Write};

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ALECKPT\0";
pub const VERSION: u32 = 1;

/// Decoded checkpoint: free-form metadata plus the parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let len = get_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| AutodiffError::Checkpoint(e.to_string()))
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    metadata: &[(String, String)],
    params: &ParamStore,
) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, metadata.len() as u32)?;
    for (k, v) in metadata {
        put_str(w, k)?;
        put_str(w, v)?;
    }
    put_u32(w, params.len() as u32)?;
    for (_, name, t) in params.iter() {
        put_str(w, name)?;
        put_u32(w, 2)?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let n_meta = get_u32(r)?;
    let mut metadata = Vec::with_capacity(n_meta as usize);
    for _ in 0..n_meta {
        let k = get_str(r)?;
        let v = get_str(r)?;
        metadata.push((k, v));
    }
    let n = get_u32(r)?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = get_str(r)?;
        let ndim = get_u32(r)?;
        let dims = (0..ndim)
            .map(|_| get_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                return Err(AutodiffError::Checkpoint(format!(
                    "tensor {name} has {ndim} dimensions"
                )))
            }
        };
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.add(name, Tensor::new(rows, cols, data)?);
    }
    Ok(Checkpoint { metadata, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_preserves_bits(
            shapes in prop::collection::vec((1usize..5, 1usize..5), 0..4),
            seed in any::<u64>(),
        ) {
            let mut store = ParamStore::new();
            let mut x = seed;
            for (i, (r, c)) in shapes.iter().enumerate() {
                let data = (0..r * c)
                    .map(|_| {
                        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        f64::from_bits(x >> 2) % 1e6
                    })
                    .map(|v| if v.is_finite() { v } else { 0.5 })
                    .collect();
                store.add(format!("p{i}"), Tensor::new(*r, *c, data).unwrap());
            }
            let meta = vec![("T".to_string(), "3".to_string())];
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &meta, &store).unwrap();
            let back = read_checkpoint(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.metadata, meta);
            prop_assert_eq!(back.params.len(), store.len());
            for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(back.params.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                for (a, b) in t1.data().iter().zip(t2.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let err = read_checkpoint(&mut &b"NOTACKPT\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, AutodiffError::Checkpoint(_)));
    }
}
