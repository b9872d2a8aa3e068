//! DFXT binary tensor format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    "DFXT"
//! version  u16      (1)
//! k        u8       bit width
//! rank     u8
//! dims     u32 x rank
//! exponent i16      shared exponent, -32768 for an all-zero tensor
//! data     i8 x n   for k <= 8; i16 x n for k = 16 (optimizer state only)
//! ```

use std::io::{Read, Write};

use super::tensor::{check_bits, FxpTensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFXT";
pub const VERSION: u16 = 1;
pub const ZERO_EXPONENT: i16 = i16::MIN;

/// Width-agnostic view of a serialized tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFxp {
    pub shape: Vec<usize>,
    pub bits: u32,
    pub exponent: Option<i32>,
    pub mantissas: Vec<i32>,
}

pub fn write_raw(raw: &RawFxp, w: &mut impl Write) -> Result<()> {
    if raw.bits != 16 {
        check_bits(raw.bits)?;
    }
    let rank = u8::try_from(raw.shape.len()).map_err(|_| Error::Format("rank above 255".into()))?;
    let exponent = match raw.exponent {
        None => ZERO_EXPONENT,
        Some(e) => i16::try_from(e)
            .ok()
            .filter(|&e| e != ZERO_EXPONENT)
            .ok_or_else(|| Error::Format(format!("exponent {e} does not fit in i16")))?,
    };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[raw.bits as u8, rank])?;
    for &d in &raw.shape {
        let d = u32::try_from(d).map_err(|_| Error::Format("dimension above u32".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&exponent.to_le_bytes())?;
    if raw.bits == 16 {
        let mut buf = Vec::with_capacity(raw.mantissas.len() * 2);
        for &m in &raw.mantissas {
            buf.extend_from_slice(&(m as i16).to_le_bytes());
        }
        w.write_all(&buf)?;
    } else {
        let buf: Vec<u8> = raw.mantissas.iter().map(|&m| m as i8 as u8).collect();
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated DFXT tensor".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_raw(r: &mut impl Read) -> Result<RawFxp> {
    if &read_array::<4>(r)? != MAGIC {
        return Err(Error::Format("bad DFXT magic".into()));
    }
    let version = u16::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported DFXT version {version}")));
    }
    let [bits, rank] = read_array::<2>(r)?;
    let bits = bits as u32;
    if bits != 16 {
        check_bits(bits)?;
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(read_array(r)?) as usize);
    }
    let exponent = i16::from_le_bytes(read_array(r)?);
    let exponent = (exponent != ZERO_EXPONENT).then_some(exponent as i32);
    let n: usize = shape.iter().product();
    let width = if bits == 16 { 2 } else { 1 };
    let mut data = vec![0u8; n * width];
    r.read_exact(&mut data)
        .map_err(|_| Error::Format("truncated DFXT payload".into()))?;
    let mantissas = if bits == 16 {
        data.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i32).collect()
    } else {
        data.iter().map(|&b| b as i8 as i32).collect()
    };
    Ok(RawFxp {
        shape,
        bits,
        exponent,
        mantissas,
    })
}

impl From<&FxpTensor> for RawFxp {
    fn from(t: &FxpTensor) -> Self {
        RawFxp {
            shape: t.shape().to_vec(),
            bits: t.bits(),
            exponent: t.exponent(),
            mantissas: t.mantissas().iter().map(|&m| m as i32).collect(),
        }
    }
}

impl TryFrom<RawFxp> for FxpTensor {
    type Error = Error;

    fn try_from(raw: RawFxp) -> Result<Self> {
        if raw.bits > 8 {
            return Err(Error::InvalidBitWidth(raw.bits));
        }
        let mantissas = raw
            .mantissas
            .iter()
            .map(|&m| i8::try_from(m).map_err(|_| Error::Format("mantissa out of i8 range".into())))
            .collect::<Result<Vec<_>>>()?;
        FxpTensor::new(raw.shape, raw.bits, raw.exponent, mantissas)
    }
}

pub fn write_fxp(t: &FxpTensor, w: &mut impl Write) -> Result<()> {
    write_raw(&RawFxp::from(t), w)
}

pub fn read_fxp(r: &mut impl Read) -> Result<FxpTensor> {
    read_raw(r)?.try_into()
}

pub fn to_bytes(t: &FxpTensor) -> Vec<u8> {
    let mut buf = Vec::new();
    write_fxp(t, &mut buf).expect("in-memory write");
    buf
}
