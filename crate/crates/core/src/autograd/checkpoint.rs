//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"TR2P"`, `u32` version, then until EOF one record per parameter:
//! `u32` name length, UTF-8 name, `u32` rank, `rank x u64` dims,
//! `prod(dims) x f64` values.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TR2P";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while c.pos < bytes.len() {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = c.u32()? as usize;
        let dims = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let values = (0..n)
            .map(|_| c.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        store.insert(&name, Tensor::new(dims, values)?)?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_garbage() {
        assert!(parse_checkpoint(b"nope").is_err());
        let mut bytes = checkpoint_bytes(&ParamStore::new());
        bytes.extend_from_slice(&[3, 0]);
        assert!(parse_checkpoint(&bytes).is_err());
    }

    #[test]
    fn layout_is_little_endian() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![1.5]).unwrap()).unwrap();
        let bytes = checkpoint_bytes(&store);
        let mut expected = b"TR2P".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in proptest::collection::vec(
                ("[a-z.]{1,12}", proptest::collection::vec(1usize..4, 1..4), any::<u64>()),
                0..5,
            )
        ) {
            let mut store = ParamStore::new();
            for (i, (name, dims, seed)) in entries.iter().enumerate() {
                let n: usize = dims.iter().product();
                let data: Vec<f64> = (0..n)
                    .map(|k| ((seed.wrapping_add(k as u64) % 1_000_003) as f64 - 5e5) * 1.234_567e-3)
                    .collect();
                store.insert(&format!("{name}{i}"), Tensor::new(dims.clone(), data).unwrap()).unwrap();
            }
            let bytes = checkpoint_bytes(&store);
            let back = parse_checkpoint(&bytes).unwrap();
            prop_assert_eq!(checkpoint_bytes(&back), bytes);
            prop_assert_eq!(back, store);
        }
    }
}
