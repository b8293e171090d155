//! `.fbtn` packed tensor files: `"FBTN"`, then channels, height and width as
//! little-endian `u32`, then the plane's words as little-endian `u64`.

use thiserror::Error;

use crate::bitpack::{BitpackError, Dims, PackedBitPlane};

pub const MAGIC: [u8; 4] = *b"FBTN";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorFileError {
    #[error("bad magic at byte 0")]
    BadMagic,
    #[error("truncated at byte {offset}: expected {expected} bytes in total")]
    Truncated { offset: usize, expected: usize },
    #[error("{extra} trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("dimensions {0}x{1}x{2} overflow")]
    Overflow(u32, u32, u32),
    #[error("invalid payload at byte {offset}: {source}")]
    Payload {
        offset: usize,
        #[source]
        source: BitpackError,
    },
}

pub fn write(plane: &PackedBitPlane) -> Vec<u8> {
    let d = plane.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * plane.words().len());
    out.extend_from_slice(&MAGIC);
    for v in [d.channels, d.height, d.width] {
        let v = u32::try_from(v).expect("tensor dimension fits in u32");
        out.extend_from_slice(&v.to_le_bytes());
    }
    for w in plane.words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn read(bytes: &[u8]) -> Result<PackedBitPlane, TensorFileError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(TensorFileError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(TensorFileError::Truncated {
            offset: bytes.len(),
            expected: HEADER_LEN,
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (c, h, w) = (field(0), field(1), field(2));
    let dims = Dims::new(c as usize, h as usize, w as usize);
    let words = (h as usize)
        .checked_mul(w as usize)
        .and_then(|n| n.checked_mul((c as usize).div_ceil(64)))
        .ok_or(TensorFileError::Overflow(c, h, w))?;
    let expected = words
        .checked_mul(8)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(TensorFileError::Overflow(c, h, w))?;
    if bytes.len() < expected {
        return Err(TensorFileError::Truncated {
            offset: bytes.len(),
            expected,
        });
    }
    if bytes.len() > expected {
        return Err(TensorFileError::TrailingBytes {
            offset: expected,
            extra: bytes.len() - expected,
        });
    }
    let data: Vec<u64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    PackedBitPlane::from_words(dims, data).map_err(|source| {
        let offset = match source {
            BitpackError::PaddingLanes { word } => HEADER_LEN + 8 * word,
            _ => HEADER_LEN,
        };
        TensorFileError::Payload { offset, source }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let p = PackedBitPlane::from_fn(Dims::new(65, 2, 1), |c, h, _| (c + h) % 3 == 0);
        let bytes = write(&p);
        assert_eq!(&bytes[..4], b"FBTN");
        assert_eq!(&bytes[4..8], &65u32.to_le_bytes());
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 4);
        assert_eq!(read(&bytes).unwrap(), p);
    }

    #[test]
    fn rejects_damage() {
        let p = PackedBitPlane::from_fn(Dims::new(3, 1, 1), |_, _, _| true);
        let bytes = write(&p);
        assert_eq!(
            read(&bytes[..20]),
            Err(TensorFileError::Truncated {
                offset: 20,
                expected: 24
            })
        );
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            read(&long),
            Err(TensorFileError::TrailingBytes { .. })
        ));
        let mut pad = bytes.clone();
        pad[HEADER_LEN] |= 0x80;
        assert!(matches!(
            read(&pad),
            Err(TensorFileError::Payload { offset: 16, .. })
        ));
        assert_eq!(read(b"FBTX"), Err(TensorFileError::BadMagic));
    }
}
