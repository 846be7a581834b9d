//! FSQA feature files: a 16-byte little-endian header (`FSQA`, version,
//! `T`, `D`) followed by `T * D` f32 values, time-major.

use std::path::Path;

use crate::tensor::SeqTensor;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FSQA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Serializes a `D x T` channel-major tensor.
pub fn encode_features(x: &SeqTensor) -> Vec<u8> {
    let (d, t) = x.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * d * t);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for ti in 0..t {
        for di in 0..d {
            out.extend_from_slice(&x.get(di, ti).to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses a feature file into a `D x T` tensor.
pub fn decode_features(bytes: &[u8]) -> Result<SeqTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let (t, d) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    if t == 0 || d == 0 {
        return Err(Error::Format(format!("empty feature grid {t} x {d}")));
    }
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format(format!("feature grid {t} x {d} too large")))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let body = &bytes[HEADER_LEN..];
    let mut values = vec![0f32; d * t];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let (ti, di) = (k / d, k % d);
        values[di * t + ti] = f32::from_le_bytes(chunk.try_into().expect("four bytes"));
    }
    SeqTensor::from_vec(d, t, values)
}

pub fn read_features(path: &Path) -> Result<SeqTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

pub fn write_features(path: &Path, x: &SeqTensor) -> Result<()> {
    std::fs::write(path, encode_features(x)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_and_size() {
        let x = SeqTensor::from_fn(1024, 120, |d, t| (d * 1000 + t) as f32);
        let b = encode_features(&x);
        assert_eq!(b.len(), 16 + 120 * 1024 * 4);
        assert_eq!(&b[..4], b"FSQA");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 120, 0, 0, 0, 0, 4, 0, 0]);
        // Second stored value is channel 1 of time step 0.
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 1000.0);
    }

    #[test]
    fn rejects_bad_headers_and_sizes() {
        let b = encode_features(&SeqTensor::from_fn(3, 4, |d, t| (d + t) as f32));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_features(&b[..b.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_features(&b[..7]), Err(Error::Truncated { expected: 16, found: 7 })));
        let mut long = b.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_features(&long), Err(Error::Truncated { .. })));
        let mut huge = b[..16].to_vec();
        huge[8..16].copy_from_slice(&[255; 8]);
        assert!(decode_features(&huge).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(d in 1usize..9, t in 1usize..20, bits in prop::collection::vec(any::<u32>(), 200)) {
            let x = SeqTensor::from_fn(d, t, |c, i| f32::from_bits(bits[(c * t + i) % 200]));
            let y = decode_features(&encode_features(&x)).unwrap();
            prop_assert_eq!(y.shape(), (d, t));
            let same = x.values().iter().zip(y.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_features(&bytes);
        }
    }
}
