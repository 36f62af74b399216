//! `DPT1` checkpoint format:
//!
//! ```text
//! "DPT1"
//! u32 count, then count x (u32 len, utf-8 name)          -- name table
//! count x (u32 len, name, u32 ndim, ndim x u64, f64 data) -- tensors
//! ```
//!
//! All integers and floats are little-endian.

use std::io::Read;

use super::{ParamSet, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPT1";

pub fn write_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, _) in params.iter() {
        put_str(&mut out, name);
    }
    for (name, t) in params.iter() {
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

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated u32"))?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated u64"))?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let n = get_u32(r)? as usize;
    if r.len() < n {
        return Err(bad("truncated name"));
    }
    let (s, rest) = r.split_at(n);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| bad("name is not utf-8"))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = bytes;
    if r.len() < 4 || &r[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing DPT1 magic"));
    }
    r = &r[4..];
    let count = get_u32(&mut r)? as usize;
    let names = (0..count)
        .map(|_| get_str(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let mut params = ParamSet::new();
    for expected in names {
        let name = get_str(&mut r)?;
        if name != expected {
            return Err(bad(format!("tensor `{name}` out of table order, expected `{expected}`")));
        }
        let ndim = get_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| get_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if r.len() < numel * 8 {
            return Err(bad(format!("truncated data for `{name}`")));
        }
        let (raw, rest) = r.split_at(numel * 8);
        r = rest;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if !r.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.len())));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seed in any::<u64>(), n in 1usize..5) {
            let mut rng = Rng::new(seed);
            let mut p = ParamSet::new();
            for i in 0..n {
                let shape = [1 + rng.below(4), 1 + rng.below(3)];
                let mut t = Tensor::randn(&shape, 1e3, &mut rng);
                t.data_mut()[0] = f64::from_bits(rng.next_u64() & 0x7fef_ffff_ffff_ffff);
                p.insert(format!("layer{i}.w"), t);
            }
            let bytes = write_checkpoint(&p);
            let back = read_checkpoint(&bytes).unwrap();
            prop_assert_eq!(write_checkpoint(&back), bytes);
            for ((_, a), (_, b)) in p.iter().zip(back.iter()) {
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[2, 2]));
        let bytes = write_checkpoint(&p);
        assert!(read_checkpoint(b"DPT0").is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
