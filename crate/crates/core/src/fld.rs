//! FLD1: a minimal binary tensor container.
//!
//! ```text
//! "FLD1" | u8 rank | rank x u32 LE extents | u8 dtype (1 = f32, 2 = f64) | LE scalars
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"FLD1";
pub const MAX_RANK: usize = 4;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > MAX_RANK {
        return Err(Error::RankTooLarge(t.rank()));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * std::mem::size_of::<T>());
    out.extend_from_slice(&MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(T::DTYPE_CODE);
    T::to_le_bytes_vec(t.data(), &mut out);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(Error::TruncatedPayload { expected: end, found: bytes.len() });
    }
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Decodes a tensor, converting the stored dtype to `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic.try_into().expect("4 bytes") });
    }
    let rank = take(bytes, &mut at, 1)?[0] as usize;
    if rank > MAX_RANK {
        return Err(Error::RankTooLarge(rank));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = take(bytes, &mut at, 4)?;
        shape.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let code = take(bytes, &mut at, 1)?[0];
    let width = match code {
        1 => 4,
        2 => 8,
        other => return Err(Error::UnknownDtype(other)),
    };
    let numel: usize = shape.iter().product();
    let payload = take(bytes, &mut at, numel * width)?;
    if at != bytes.len() {
        return Err(Error::InvalidArgument(format!("{} trailing bytes after FLD1 payload", bytes.len() - at)));
    }
    let data = payload
        .chunks_exact(width)
        .map(|c| match code {
            1 if T::DTYPE_CODE == 1 => T::from_le_chunk(c),
            2 if T::DTYPE_CODE == 2 => T::from_le_chunk(c),
            1 => T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
            _ => T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        })
        .collect();
    Tensor::new(shape, data)
}

pub fn write<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"FLD1");
        assert_eq!(b[4], 2);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(b[13], 1);
        assert_eq!(&b[14..18], &1f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn rank_five_rejected() {
        let t = Tensor::<f64>::zeros([1, 1, 1, 1, 1]);
        assert!(matches!(encode(&t), Err(Error::RankTooLarge(5))));
    }

    #[test]
    fn dtype_conversion_on_read() {
        let t = Tensor::<f32>::new([3], vec![0.5, 1.25, -3.0]).unwrap();
        let back: Tensor<f64> = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.5, 1.25, -3.0]);
    }
}
