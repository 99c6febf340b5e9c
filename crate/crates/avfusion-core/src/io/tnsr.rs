//! The TNSR binary tensor container.
//!
//! Layout, all little-endian:
//!   magic "TNSR" | u8 dtype (0 = f32, 1 = f64) | u32 rank | u32 dims... |
//!   payload, row-major.
//!
//! Readers treat input as untrusted: dims are range-checked and the payload
//! length must match the header exactly before anything is allocated.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AvError, Result};
use crate::tensor::{checked_numel, Dtype, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"TNSR";
/// Dimensions per tensor are capped; nothing in the pipeline goes past 5.
pub const MAX_RANK: usize = 8;

/// A tensor of either supported precision, as found in a container.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t,
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.shape().len() + t.numel() * T::DTYPE.size_bytes());
    out.extend_from_slice(&MAGIC);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

pub fn save<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| AvError::io(path.display().to_string(), e))
}

/// Header of a container: dtype and dims, without touching the payload.
pub fn decode_header(bytes: &[u8]) -> Result<(Dtype, Vec<usize>, usize)> {
    if bytes.len() < 9 {
        return Err(AvError::Format("tnsr: truncated header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(AvError::Format("tnsr: bad magic".into()));
    }
    let dtype = Dtype::from_code(bytes[4])
        .ok_or_else(|| AvError::Format(format!("tnsr: unknown dtype code {}", bytes[4])))?;
    let rank = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(AvError::Format(format!("tnsr: rank {rank} out of range 1..={MAX_RANK}")));
    }
    if bytes.len() < 9 + 4 * rank {
        return Err(AvError::Format("tnsr: truncated dims".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 9 + 4 * i;
        let d = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if d == 0 {
            return Err(AvError::Format("tnsr: zero dimension".into()));
        }
        dims.push(d as usize);
    }
    Ok((dtype, dims, 9 + 4 * rank))
}

/// Decode one tensor from a byte slice. Returns the tensor and the number of
/// bytes consumed, so containers can be concatenated.
pub fn decode(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let (dtype, dims, header_len) = decode_header(bytes)?;
    let numel = checked_numel(&dims)
        .ok_or_else(|| AvError::Format("tnsr: element count overflows".into()))?;
    let payload = numel
        .checked_mul(dtype.size_bytes())
        .ok_or_else(|| AvError::Format("tnsr: payload size overflows".into()))?;
    let total = header_len
        .checked_add(payload)
        .ok_or_else(|| AvError::Format("tnsr: total size overflows".into()))?;
    if bytes.len() < total {
        return Err(AvError::Format(format!(
            "tnsr: payload truncated, want {payload} bytes, have {}",
            bytes.len() - header_len
        )));
    }
    let body = &bytes[header_len..total];
    let tensor = match dtype {
        Dtype::F32 => {
            let data = body.chunks_exact(4).map(f32::read_le).collect();
            AnyTensor::F32(Tensor::from_vec(&dims, data)?)
        }
        Dtype::F64 => {
            let data = body.chunks_exact(8).map(f64::read_le).collect();
            AnyTensor::F64(Tensor::from_vec(&dims, data)?)
        }
    };
    Ok((tensor, total))
}

/// Decode a standalone container; trailing bytes are an error.
pub fn decode_exact(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, used) = decode(bytes)?;
    if used != bytes.len() {
        return Err(AvError::Format(format!(
            "tnsr: {} trailing bytes after payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn load(path: &Path) -> Result<AnyTensor> {
    let bytes =
        std::fs::read(path).map_err(|e| AvError::io(path.display().to_string(), e))?;
    decode_exact(&bytes)
}

/// Read just the header of a container file.
pub fn load_header(path: &Path) -> Result<(Dtype, Vec<usize>)> {
    let mut f =
        std::fs::File::open(path).map_err(|e| AvError::io(path.display().to_string(), e))?;
    let mut head = [0u8; 9 + 4 * MAX_RANK];
    let mut filled = 0;
    while filled < head.len() {
        match f.read(&mut head[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) => return Err(AvError::io(path.display().to_string(), e)),
        }
    }
    let (dtype, dims, _) = decode_header(&head[..filled])?;
    Ok((dtype, dims))
}

/// Decode a tensor from the front of a reader (used inside checkpoints).
pub fn read_tensor(r: &mut impl Read) -> Result<AnyTensor> {
    let mut head = vec![0u8; 9];
    r.read_exact(&mut head).map_err(|e| AvError::Format(format!("tnsr: {e}")))?;
    if head[0..4] != MAGIC {
        return Err(AvError::Format("tnsr: bad magic".into()));
    }
    let rank = u32::from_le_bytes([head[5], head[6], head[7], head[8]]) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(AvError::Format(format!("tnsr: rank {rank} out of range 1..={MAX_RANK}")));
    }
    let mut dims_buf = vec![0u8; 4 * rank];
    r.read_exact(&mut dims_buf).map_err(|e| AvError::Format(format!("tnsr: {e}")))?;
    head.extend_from_slice(&dims_buf);
    let (dtype, dims, _) = decode_header(&head)?;
    let numel = checked_numel(&dims)
        .ok_or_else(|| AvError::Format("tnsr: element count overflows".into()))?;
    let payload = numel
        .checked_mul(dtype.size_bytes())
        .ok_or_else(|| AvError::Format("tnsr: payload size overflows".into()))?;
    // bounded reads so a corrupt header cannot trigger one huge allocation
    let mut body = Vec::new();
    let mut remaining = payload;
    let mut chunk = vec![0u8; 1 << 20];
    while remaining > 0 {
        let take = remaining.min(chunk.len());
        r.read_exact(&mut chunk[..take])
            .map_err(|e| AvError::Format(format!("tnsr: payload truncated: {e}")))?;
        body.extend_from_slice(&chunk[..take]);
        remaining -= take;
    }
    let tensor = match dtype {
        Dtype::F32 => {
            let data = body.chunks_exact(4).map(f32::read_le).collect();
            AnyTensor::F32(Tensor::from_vec(&dims, data)?)
        }
        Dtype::F64 => {
            let data = body.chunks_exact(8).map(f64::read_le).collect();
            AnyTensor::F64(Tensor::from_vec(&dims, data)?)
        }
    };
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32_and_f64() {
        let t32 = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 9.5, -0.125]).unwrap();
        let b = encode(&t32);
        assert_eq!(&b[0..4], b"TNSR");
        assert_eq!(b[4], 0);
        match decode_exact(&b).unwrap() {
            AnyTensor::F32(t) => assert_eq!(t, t32),
            _ => panic!("wrong dtype"),
        }

        let t64 = Tensor::<f64>::from_vec(&[4], vec![1e-300, -2.5, 0.0, 7.0]).unwrap();
        let b = encode(&t64);
        assert_eq!(b[4], 1);
        match decode_exact(&b).unwrap() {
            AnyTensor::F64(t) => assert_eq!(t, t64),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(decode_exact(b"").is_err());
        assert!(decode_exact(b"TNSR").is_err());
        assert!(decode_exact(b"XXXX\x00\x01\x00\x00\x00\x01\x00\x00\x00").is_err());
        // dtype 7 unknown
        assert!(decode_exact(b"TNSR\x07\x01\x00\x00\x00\x01\x00\x00\x00").is_err());
        // rank 0
        assert!(decode_exact(b"TNSR\x00\x00\x00\x00\x00").is_err());
        // giant dims must not allocate: rank 2 of u32::MAX x u32::MAX
        let mut evil = Vec::new();
        evil.extend_from_slice(b"TNSR\x01");
        evil.extend_from_slice(&2u32.to_le_bytes());
        evil.extend_from_slice(&u32::MAX.to_le_bytes());
        evil.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_exact(&evil).is_err());
        // trailing garbage
        let t = Tensor::<f32>::from_vec(&[1], vec![1.0]).unwrap();
        let mut b = encode(&t);
        b.push(0);
        assert!(decode_exact(&b).is_err());
        assert!(decode(&b).is_ok());
    }

    #[test]
    fn streaming_read_matches_decode() {
        let t = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(&t);
        let mut cursor = std::io::Cursor::new(&bytes);
        match read_tensor(&mut cursor).unwrap() {
            AnyTensor::F64(got) => assert_eq!(got, t),
            _ => panic!("wrong dtype"),
        }
    }
}
