//! `STTN` tensor containers.
//!
//! Layout: magic `STTN`, version byte `0x01`, dtype byte (`0x00` float32,
//! `0x01` uint16), rank byte, `rank` little-endian `u32` dims, then the
//! row-major little-endian payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"STTN";
const VERSION: u8 = 0x01;
const DTYPE_F32: u8 = 0x00;
const DTYPE_U16: u8 = 0x01;

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub enum SttnPayload {
    F32(Tensor),
    U16 { shape: Vec<usize>, data: Vec<u16> },
}

impl SttnPayload {
    pub fn shape(&self) -> &[usize] {
        match self {
            SttnPayload::F32(t) => t.shape(),
            SttnPayload::U16 { shape, .. } => shape,
        }
    }

    pub fn into_f32(self) -> Result<Tensor> {
        match self {
            SttnPayload::F32(t) => Ok(t),
            SttnPayload::U16 { .. } => Err(Error::Corrupt("expected a float32 tensor, found uint16".into())),
        }
    }

    pub fn into_u16(self) -> Result<(Vec<usize>, Vec<u16>)> {
        match self {
            SttnPayload::U16 { shape, data } => Ok((shape, data)),
            SttnPayload::F32(_) => Err(Error::Corrupt("expected a uint16 tensor, found float32".into())),
        }
    }
}

pub fn write_sttn<W: Write>(w: &mut W, payload: &SttnPayload) -> Result<()> {
    let shape = payload.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("rank {} too large for STTN", shape.len())));
    }
    let dtype = match payload {
        SttnPayload::F32(_) => DTYPE_F32,
        SttnPayload::U16 { .. } => DTYPE_U16,
    };
    let mut buf = Vec::with_capacity(8 + 4 * shape.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[VERSION, dtype, shape.len() as u8]);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match payload {
        SttnPayload::F32(t) => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        SttnPayload::U16 { data, .. } => data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_sttn<R: Read>(r: &mut R) -> Result<SttnPayload> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head, "STTN header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Corrupt("bad STTN magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Corrupt(format!("unsupported STTN version {}", head[4])));
    }
    let dtype = head[5];
    let rank = head[6] as usize;
    let mut dims = vec![0u8; 4 * rank];
    read_exact(r, &mut dims, "STTN dims")?;
    let shape: Vec<usize> =
        dims.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    if shape.contains(&0) {
        return Err(Error::Corrupt(format!("invalid STTN shape {shape:?}")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Corrupt("STTN shape overflows".into()))?;
    match dtype {
        DTYPE_F32 => {
            let mut raw = vec![0u8; numel * 4];
            read_exact(r, &mut raw, "STTN float32 payload")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Ok(SttnPayload::F32(Tensor::new(&shape, data)?))
        }
        DTYPE_U16 => {
            let mut raw = vec![0u8; numel * 2];
            read_exact(r, &mut raw, "STTN uint16 payload")?;
            let data = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
            Ok(SttnPayload::U16 { shape, data })
        }
        other => Err(Error::Corrupt(format!("unknown STTN dtype byte {other:#04x}"))),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}
