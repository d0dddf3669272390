//! Fixed-point formats and integer tensors.
//!
//! All tensor data is carried as `i64` regardless of the declared width, so
//! intermediate accumulations never wrap; the declared format bounds what
//! values are representable at module boundaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Integer representation: `bits` total, `frac` fractional bits, sign# flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub bits: u32,
    pub frac: i32,
    pub signed: bool,
}

impl FixedPointFormat {
    pub fn new(bits: u32, frac: i32, signed: bool) -> Self {
        Self { bits, frac, signed }
    }

    pub fn min_value(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn max_value(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    pub fn contains(&self, v: i64) -> bool {
        v >= self.min_value() && v <= self.max_value()
    }

    pub fn saturate(&self, v: i64) -> i64 {
        v.clamp(self.min_value(), self.max_value())
    }

    /// Bytes one element occupies in the flat binary tensor format.
    pub fn byte_width(&self) -> usize {
        match self.bits {
            0..=8 => 1,
            9..=16 => 2,
            _ => 4,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QuantError {
    #[error("data length {got} does not match shape product {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("value {value} not representable in {bits}-bit {kind} format")]
    OutOfRange { value: i64, bits: u32, kind: &'static str },
    #[error("bit width {0} out of supported range 1..=32")]
    BadWidth(u32),
}

/// Integer tensor with explicit fixed-point format. Data is row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
    pub format: FixedPointFormat,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i64>, format: FixedPointFormat) -> Result<Self, QuantError> {
        if format.bits == 0 || format.bits > 32 {
            return Err(QuantError::BadWidth(format.bits));
        }
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(QuantError::LengthMismatch { got: data.len(), want });
        }
        for &v in &data {
            if !format.contains(v) {
                return Err(QuantError::OutOfRange {
                    value: v,
                    bits: format.bits,
                    kind: if format.signed { "signed" } else { "unsigned" },
                });
            }
        }
        Ok(Self { shape, data, format })
    }

    /// Construct without range validation, for wide intermediate domains
    /// (e.g. accumulator-scale tensors) that never hit serialization.
    pub fn new_unchecked(shape: Vec<usize>, data: Vec<i64>, format: FixedPointFormat) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, format }
    }

    pub fn zeros(shape: Vec<usize>, format: FixedPointFormat) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0; len], format }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Serialize to flat little-endian binary at the format's byte width.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let w = self.format.byte_width();
        let mut out = Vec::with_capacity(self.data.len() * w);
        for &v in &self.data {
            out.extend_from_slice(&(v as i32).to_le_bytes()[..w]);
        }
        out
    }

    /// Inverse of [`to_le_bytes`]; sign-extends signed formats.
    pub fn from_le_bytes(
        shape: Vec<usize>,
        format: FixedPointFormat,
        bytes: &[u8],
    ) -> Result<Self, QuantError> {
        let w = format.byte_width();
        let want: usize = shape.iter().product();
        if bytes.len() != want * w {
            return Err(QuantError::LengthMismatch { got: bytes.len() / w.max(1), want });
        }
        let mut data = Vec::with_capacity(want);
        for chunk in bytes.chunks_exact(w) {
            let mut raw = [0u8; 4];
            raw[..w].copy_from_slice(chunk);
            let mut v = u32::from_le_bytes(raw) as i64;
            if format.signed {
                let sign_bit = 1i64 << (8 * w - 1);
                if v & sign_bit != 0 {
                    v -= sign_bit << 1;
                }
            }
            data.push(v);
        }
        Self::new(shape, data, format)
    }
}

/// Arithmetic right shift with round-half-to-even on the discarded bits.
///
/// `shift_round_half_even(7, 1) == 4`, `shift_round_half_even(5, 1) == 2`.
pub fn shift_round_half_even(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v & ((1i64 << shift) - 1);
    let half = 1i64 << (shift - 1);
    if rem > half {
        floor + 1
    } else if rem < half {
        floor
    } else {
        floor + (floor & 1)
    }
}

/// Rescale an accumulator-domain value into `out`: shift with
/// round-half-to-even, then saturate.
pub fn requantize(acc: i64, shift: u32, out: &FixedPointFormat) -> i64 {
    out.saturate(shift_round_half_even(acc, shift))
}
