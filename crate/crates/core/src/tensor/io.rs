use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};
use crate::io_util::read_exact;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_HEADER_LEN: usize = 16;

/// Writes `t` as: `TNSR`, rank (u32), element count (u64), then `rank` u32
/// extents and the little-endian `f32` payload in row-major order.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u32::try_from(t.rank()).map_err(|_| Error::format("tensor rank overflows u32"))?;
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&rank.to_le_bytes())?;
    w.write_all(&(t.numel() as u64).to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::format("tensor extent overflows u32"))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut header = [0u8; TENSOR_HEADER_LEN];
    read_exact(r, &mut header, "tensor header")?;
    if &header[..4] != TENSOR_MAGIC {
        return Err(Error::format("bad tensor magic"));
    }
    let rank = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let numel = u64::from_le_bytes(header[8..16].try_into().unwrap());
    if rank > 8 {
        return Err(Error::format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, "tensor extents")?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let expected: u64 = shape.iter().map(|&e| e as u64).product();
    if expected != numel {
        return Err(Error::format(format!(
            "tensor extents {shape:?} disagree with element count {numel}"
        )));
    }
    let mut bytes = vec![0u8; numel as usize * 4];
    read_exact(r, &mut bytes, "tensor payload")?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}
