//! Binary condensed-dataset files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MDC1" | version u32 | K u32 | N u32 | C u32 | H u32 | W u32 | precision u8
//! payload: K·N·C·H·W floats (f32 or f64, LE), class-major then rank
//! footer:  CRC32 of the payload bytes, u32
//! ```

use std::path::Path;

use crate::datasets::SyntheticDataset;
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDC1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 6 * 4 + 1;

/// Parsed header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub classes: u32,
    pub ipc: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub precision: Precision,
}

impl Header {
    fn payload_values(&self) -> usize {
        [
            self.classes,
            self.ipc,
            self.channels,
            self.height,
            self.width,
        ]
        .iter()
        .map(|&v| v as usize)
        .product()
    }
}

/// A loaded file in whichever precision it was written.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyDataset {
    F32(SyntheticDataset<f32>),
    F64(SyntheticDataset<f64>),
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn encode<T: Scalar>(ds: &SyntheticDataset<T>) -> Result<Vec<u8>> {
    let [c, h, w] = ds.image_shape;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.images.len() * T::PRECISION.byte_width() + 4);
    out.extend_from_slice(MAGIC);
    for (v, what) in [
        (FORMAT_VERSION as usize, "version"),
        (ds.classes, "classes"),
        (ds.ipc, "ipc"),
        (c, "channels"),
        (h, "height"),
        (w, "width"),
    ] {
        out.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
    }
    out.push(T::PRECISION.tag());
    let start = out.len();
    for &v in ds.images.data() {
        v.write_le(&mut out);
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file too short ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4"));
    let version = word(0);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tag = bytes[HEADER_LEN - 1];
    let precision = Precision::from_tag(tag)
        .ok_or_else(|| Error::Format(format!("unknown precision tag {tag}")))?;
    Ok(Header {
        version,
        classes: word(1),
        ipc: word(2),
        channels: word(3),
        height: word(4),
        width: word(5),
        precision,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header) -> Result<&'a [u8]> {
    let len = header.payload_values() * header.precision.byte_width();
    if bytes.len() != HEADER_LEN + len + 4 {
        return Err(Error::Format(format!(
            "expected {} bytes for header {header:?}, found {}",
            HEADER_LEN + len + 4,
            bytes.len()
        )));
    }
    let data = &bytes[HEADER_LEN..HEADER_LEN + len];
    let stored = u32::from_le_bytes(bytes[HEADER_LEN + len..].try_into().expect("4"));
    let computed = crc32fast::hash(data);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(data)
}

fn build<T: Scalar>(header: &Header, data: &[u8]) -> Result<SyntheticDataset<T>> {
    let values = data
        .chunks_exact(T::PRECISION.byte_width())
        .map(T::read_le)
        .collect();
    let shape = [
        header.classes as usize,
        header.ipc as usize,
        header.channels as usize,
        header.height as usize,
        header.width as usize,
    ];
    SyntheticDataset::new(Tensor::new(&shape, values)?)
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyDataset> {
    let header = decode_header(bytes)?;
    let data = payload(bytes, &header)?;
    Ok(match header.precision {
        Precision::F32 => AnyDataset::F32(build(&header, data)?),
        Precision::F64 => AnyDataset::F64(build(&header, data)?),
    })
}

/// Decodes a file written in precision `T`; other precisions are an error.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<SyntheticDataset<T>> {
    let header = decode_header(bytes)?;
    if header.precision != T::PRECISION {
        return Err(Error::Format(format!(
            "file holds {:?} values, {:?} requested",
            header.precision,
            T::PRECISION
        )));
    }
    build(&header, payload(bytes, &header)?)
}

pub fn save<T: Scalar>(ds: &SyntheticDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(ds)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<SyntheticDataset<T>> {
    decode(&std::fs::read(path)?)
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyDataset> {
    decode_any(&std::fs::read(path)?)
}

/// Loads either precision and converts to `T`.
pub fn load_as<T: Scalar>(path: impl AsRef<Path>) -> Result<SyntheticDataset<T>> {
    let images = match load_any(path)? {
        AnyDataset::F32(d) => d.images.cast::<T>(),
        AnyDataset::F64(d) => d.images.cast::<T>(),
    };
    SyntheticDataset::new(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample<T: Scalar>(vals: &[f64]) -> SyntheticDataset<T> {
        SyntheticDataset::new(Tensor::from_f64(&[2, 3, 1, 1, 2], vals).unwrap()).unwrap()
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact_f32(v in prop::collection::vec(any::<f32>(), 12)) {
            let ds = SyntheticDataset::new(Tensor::new(&[2, 3, 1, 1, 2], v).unwrap()).unwrap();
            let back = decode::<f32>(&encode(&ds).unwrap()).unwrap();
            prop_assert!(back.images.bit_eq(&ds.images));
        }

        #[test]
        fn round_trip_is_bit_exact_f64(v in prop::collection::vec(any::<f64>(), 12)) {
            let ds = SyntheticDataset::new(Tensor::new(&[2, 3, 1, 1, 2], v).unwrap()).unwrap();
            let back = decode::<f64>(&encode(&ds).unwrap()).unwrap();
            prop_assert!(back.images.bit_eq(&ds.images));
        }
    }

    #[test]
    fn header_fields_are_little_endian() {
        let bytes = encode(&sample::<f32>(&[0.0; 12])).unwrap();
        assert_eq!(&bytes[..4], b"MDC1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes[HEADER_LEN - 1], 1);
        assert_eq!(bytes.len(), HEADER_LEN + 12 * 4 + 4);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let vals: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut bytes = encode(&sample::<f64>(&vals)).unwrap();
        bytes[HEADER_LEN + 5] ^= 0x10;
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn precision_mismatch_and_truncation_rejected() {
        let bytes = encode(&sample::<f32>(&[1.0; 12])).unwrap();
        assert!(decode::<f64>(&bytes).is_err());
        assert!(matches!(decode_any(&bytes), Ok(AnyDataset::F32(_))));
        assert!(matches!(
            decode::<f32>(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format(_))));
    }
}
