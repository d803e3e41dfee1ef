//! Binary tensor container: the magic `MSSG1`, then for every tensor
//! `u32 name length`, UTF-8 name, `u32 rank`, `rank × u64` extents and the
//! values as little-endian `f64`. All integers are little-endian.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MSSG1";

pub fn encode_checkpoint<'a, I>(tensors: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut out = MAGIC.to_vec();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint("missing MSSG1 magic".into()));
    }
    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len(),
    };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(cur.u64("extent")?).map_err(|_| {
                Error::Checkpoint(format!("extent of {name} does not fit in memory"))
            })?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("{name} is impossibly large")))?;
        let raw = cur.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint(format!("{name} is impossibly large")))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor =
            Tensor::from_vec(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn save_checkpoint<'a, I>(tensors: I, path: impl AsRef<Path>) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_fixed() {
        let t = Tensor::from_vec(vec![1], vec![1.5]).unwrap();
        let bytes = encode_checkpoint([("w", &t)]);
        let mut want = b"MSSG1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'w');
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_checkpoint(b"NOPE").is_err());
        let t = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = encode_checkpoint([("x", &t)]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert_eq!(decode_checkpoint(MAGIC).unwrap().len(), 0);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in proptest::collection::vec(
                ("[a-z.0-9]{1,12}", proptest::collection::vec(1usize..4, 0..4), any::<u64>()),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor)> = entries
                .into_iter()
                .map(|(name, shape, seed)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n)
                        .map(|i| f64::from_bits(seed.rotate_left(i as u32) & 0x3fef_ffff_ffff_ffff))
                        .collect();
                    (name, Tensor::from_vec(shape, data).unwrap())
                })
                .collect();
            let bytes = encode_checkpoint(tensors.iter().map(|(n, t)| (n.as_str(), t)));
            let back = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in back.iter().zip(&tensors) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits1, bits2);
            }
        }
    }
}
