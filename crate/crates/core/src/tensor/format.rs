//! `P2AF` binary tensor files.
//!
//! Layout: magic `P2AF`, `u16` version (1), `u16` rank, one `u32` per
//! dimension, then the payload as little-endian `f64` in row-major order.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"P2AF";
const VERSION: u16 = 1;

pub fn write_tensor<W: Write>(mut out: W, t: &Tensor) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(t.rank() as u16).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated P2AF stream: {e}"));
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(fmt)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut two = [0u8; 2];
    input.read_exact(&mut two).map_err(fmt)?;
    let version = u16::from_le_bytes(two);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported P2AF version {version}")));
    }
    input.read_exact(&mut two).map_err(fmt)?;
    let rank = u16::from_le_bytes(two) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut four = [0u8; 4];
        input.read_exact(&mut four).map_err(fmt)?;
        shape.push(u32::from_le_bytes(four) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 8];
    input.read_exact(&mut payload).map_err(fmt)?;
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&bytes[..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rng_fill, Fill};
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"P2AF");
        assert_eq!(&buf[4..8], &[1, 0, 2, 0]);
        assert_eq!(&buf[8..16], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 16 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensor(&b"NOPE\x01\x00"[..]), Err(Error::Format(_))));
        let t = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.pop();
        assert!(matches!(read_tensor(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed: u64, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
            let t = rng_fill(&[c, h, w], seed, Fill::Normal { std: 3.0 }).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&buf[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
