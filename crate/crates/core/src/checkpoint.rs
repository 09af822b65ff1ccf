//! Binary checkpoint format.
//!
//! ```text
//! "ACCNN1"
//! u64 count
//! count × { u64 name_len, name bytes (UTF-8), u64 rank, rank × u64 extent,
//!           numel × f32 }
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"ACCNN1";

pub fn encode(params: &Params<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<Params<f32>> {
    let mut magic = [0u8; 6];
    read_exact(&mut bytes, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let count = read_u64(&mut bytes)?;
    let mut params = Params::new();
    for _ in 0..count {
        let len = read_len(&mut bytes, 1 << 16)?;
        let mut name = vec![0u8; len];
        read_exact(&mut bytes, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_len(&mut bytes, 16)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_len(&mut bytes, usize::MAX)?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n * 4 <= bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: extents {shape:?} exceed file")))?;
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 4];
            read_exact(&mut bytes, &mut b)?;
            values.push(f32::from_le_bytes(b));
        }
        let tensor = Tensor::new(shape, values).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, tensor);
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    Ok(params)
}

pub fn save(params: &Params<f32>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Params<f32>> {
    decode(&fs::read(path)?)
}

fn read_exact(bytes: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    bytes
        .read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u64(bytes: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(bytes, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len(bytes: &mut &[u8], limit: usize) -> Result<usize> {
    let v = read_u64(bytes)?;
    usize::try_from(v)
        .ok()
        .filter(|&v| v <= limit)
        .ok_or_else(|| Error::Checkpoint(format!("length field {v} out of range")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut p = Params::new();
        p.insert("w", Tensor::from_f64s([1, 2], &[1.0, -2.0]).unwrap());
        let bytes = encode(&p);
        assert_eq!(&bytes[..6], b"ACCNN1");
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 1);
        assert_eq!(&bytes[22..23], b"w");
        assert_eq!(u64::from_le_bytes(bytes[23..31].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 23 + 8 + 16 + 8);
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn truncated_and_garbage_inputs_are_rejected() {
        let mut p = Params::new();
        p.insert("w", Tensor::full([3], 1.5f32));
        let bytes = encode(&p);
        for cut in [0, 5, 13, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert!(decode(b"NOTACKPT").is_err());
    }
}
