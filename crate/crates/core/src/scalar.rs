//! Floating-point element type shared by every tensor in a run.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Storage precision tag, as written into condensed-dataset headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Precision::F32),
            2 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `PRECISION.byte_width()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// Raw bit pattern, widened; used for bitwise comparisons and hashing.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn bits(self) -> u64 {
        self.to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_tags_round_trip() {
        for p in [Precision::F32, Precision::F64] {
            assert_eq!(Precision::from_tag(p.tag()), Some(p));
        }
        assert_eq!(Precision::from_tag(0), None);
    }

    #[test]
    fn le_bytes_round_trip() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        (-2.25f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.5);
        assert_eq!(f64::read_le(&buf[4..]), -2.25);
    }
}
