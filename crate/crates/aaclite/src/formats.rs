//! On-disk containers: `AACI` images and `AACL` checkpoints.
//!
//! Image bytes: `"AACI"`, u32 version, u32 H, u32 W, then `H*W` f64 values
//! row-major. All little-endian.

use std::fs;
use std::path::Path;

use aaclite_core::model::{decode_checkpoint, encode_checkpoint, AacLiteNet};
use aaclite_core::{Error as CoreError, Tensor};

use crate::error::{IoContext, Result};

pub const IMAGE_MAGIC: [u8; 4] = *b"AACI";
pub const IMAGE_VERSION: u32 = 1;
const IMAGE_HEADER: usize = 16;

/// Encodes a `[H, W]` grid.
pub fn encode_image(pixels: &Tensor) -> aaclite_core::Result<Vec<u8>> {
    let [h, w] = *pixels.shape() else {
        return Err(CoreError::Shape(format!(
            "image must be [H, W], got {:?}",
            pixels.shape()
        )));
    };
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| CoreError::Shape(format!("extent {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(IMAGE_HEADER + 8 * pixels.numel());
    out.extend_from_slice(&IMAGE_MAGIC);
    out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    for v in pixels.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> aaclite_core::Result<Tensor> {
    if bytes.len() < IMAGE_HEADER {
        return Err(CoreError::Format(format!(
            "image header truncated at {} bytes",
            bytes.len()
        )));
    }
    if bytes[..4] != IMAGE_MAGIC {
        return Err(CoreError::Format(format!(
            "bad image magic {:?}",
            &bytes[..4]
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != IMAGE_VERSION {
        return Err(CoreError::Version {
            found: version,
            expected: IMAGE_VERSION,
        });
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[IMAGE_HEADER..];
    let want = h.checked_mul(w).and_then(|n| n.checked_mul(8));
    if want != Some(payload.len()) {
        return Err(CoreError::Format(format!(
            "{h}x{w} image needs {} payload bytes, found {}",
            h * w * 8,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::from_vec(&[h, w], data)
}

pub fn write_image(path: impl AsRef<Path>, pixels: &Tensor) -> Result<()> {
    let bytes = encode_image(pixels)?;
    fs::write(&path, bytes).at(path)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(&path).at(&path)?;
    Ok(decode_image(&bytes)?)
}

pub fn save_checkpoint(net: &AacLiteNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(&path, encode_checkpoint(net)).at(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AacLiteNet> {
    let bytes = fs::read(&path).at(&path)?;
    Ok(decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_is_bit_exact() {
        let t = Tensor::from_fn(&[3, 5], |i| (i as f64).sin() * 1e-300 + 0.1 * i as f64).unwrap();
        let bytes = encode_image(&t).unwrap();
        assert_eq!(bytes.len(), 16 + 15 * 8);
        assert_eq!(&bytes[..4], b"AACI");
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back.shape(), &[3, 5]);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn image_rejects_bad_bytes() {
        let bytes = encode_image(&Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_image(&bad), Err(CoreError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_image(&bad),
            Err(CoreError::Version { found: 9, .. })
        ));
        assert!(matches!(
            decode_image(&bytes[..bytes.len() - 1]),
            Err(CoreError::Format(_))
        ));
        assert!(matches!(
            decode_image(&bytes[..10]),
            Err(CoreError::Format(_))
        ));
        assert!(encode_image(&Tensor::zeros(&[1, 2, 2]).unwrap()).is_err());
    }
}
