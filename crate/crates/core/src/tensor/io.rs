//! Binary tensor serialization used by checkpoints.
//!
//! Layout, all little-endian: magic `NXT1`, rank as u64, extents as u64
//! each, then the raw f64 payload in row-major order.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"NXT1";

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, &mut offset)?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad tensor magic {magic:?}, expected NXT1"),
        });
    }
    let rank = read_u64(r, &mut offset)? as usize;
    if rank > 64 {
        return Err(Error::Parse {
            offset: offset - 8,
            msg: format!("implausible tensor rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r, &mut offset)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0.0f64; n];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        read_exact_at(r, &mut buf, &mut offset)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Tensor::from_vec(shape, data))
}

fn read_u64(r: &mut impl Read, offset: &mut u64) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact_at(r, &mut buf, offset)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Parse {
        offset: *offset,
        msg: format!("truncated tensor stream: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bits() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.7e300, -1.0, 0.25]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_stream_is_a_parse_error() {
        let t = Tensor::ones(&[4]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        match read_tensor(&mut buf.as_slice()) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
