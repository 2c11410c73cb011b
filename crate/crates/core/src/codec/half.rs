//! IEEE 754 binary16 conversion with round-to-nearest-even.

use crate::error::{Error, Result};

pub const HALF_MAX_BITS: u16 = 0x7BFF;
pub const HALF_MAX: f32 = 65504.0;

/// Sequence of binary16 bit patterns.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QuantizedVector(pub Vec<u16>);

impl QuantizedVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn words(&self) -> &[u16] {
        &self.0
    }
}

/// Converts one `f32` to binary16 bits. Magnitudes beyond the largest finite
/// half saturate to ±65504 instead of overflowing to infinity.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let abs = bits & 0x7FFF_FFFF;
    debug_assert!(abs <= 0x7F80_0000, "NaN reaches conversion");
    if f32::from_bits(abs) >= HALF_MAX {
        return sign | HALF_MAX_BITS;
    }
    let exp = (abs >> 23) as i32 - 127;
    let mantissa = abs & 0x007F_FFFF;
    if exp >= -14 {
        // normal half: keep 10 mantissa bits, round the dropped 13
        let mut m = ((exp + 15) as u32) << 10 | (mantissa >> 13);
        let rem = mantissa & 0x1FFF;
        if rem > 0x1000 || (rem == 0x1000 && m & 1 == 1) {
            m += 1;
        }
        return sign | m as u16;
    }
    if abs < 0x0080_0000 {
        // f32 subnormals are far below half resolution
        return sign;
    }
    // half subnormal: value / 2^-24 = full_mantissa * 2^(exp + 1)
    let full = mantissa | 0x0080_0000;
    let shift = (-(exp + 1)) as u32;
    if shift > 24 {
        return sign;
    }
    let mut m = full >> shift;
    let rem = full & ((1u32 << shift) - 1);
    let halfway = 1u32 << (shift - 1);
    if rem > halfway || (rem == halfway && m & 1 == 1) {
        m += 1;
    }
    sign | m as u16
}

pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1F) as u32;
    let mantissa = (h & 0x03FF) as u32;
    let bits = match (exp, mantissa) {
        (0, 0) => sign,
        (0, m) => {
            // normalize the subnormal
            let lead = 31 - m.leading_zeros();
            let e = lead + 127 - 24;
            let frac = (m << (23 - lead)) & 0x007F_FFFF;
            sign | e << 23 | frac
        }
        (31, 0) => sign | 0x7F80_0000,
        (31, m) => sign | 0x7FC0_0000 | m << 13,
        (e, m) => sign | (e + 127 - 15) << 23 | m << 13,
    };
    f32::from_bits(bits)
}

pub fn quantize_f16(values: &[f32]) -> Result<QuantizedVector> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if v.is_nan() {
                Err(Error::Input(format!("NaN at component {i} cannot be quantized")))
            } else {
                Ok(f32_to_f16_bits(*v))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(QuantizedVector)
}

pub fn dequantize_f16(q: &QuantizedVector) -> Vec<f32> {
    q.0.iter().map(|h| f16_bits_to_f32(*h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn identities_and_signed_zero() {
        assert_eq!(f32_to_f16_bits(1.0), 0x3C00);
        assert_eq!(f16_bits_to_f32(0x3C00), 1.0);
        assert_eq!(f32_to_f16_bits(0.0), 0x0000);
        assert_eq!(f32_to_f16_bits(-0.0), 0x8000);
        assert!(f16_bits_to_f32(0x8000).is_sign_negative());
    }

    #[test]
    fn saturates_instead_of_overflowing() {
        assert_eq!(f32_to_f16_bits(1e6), HALF_MAX_BITS);
        assert_eq!(f32_to_f16_bits(-70000.0), 0x8000 | HALF_MAX_BITS);
        assert_eq!(f32_to_f16_bits(f32::INFINITY), HALF_MAX_BITS);
    }

    #[test]
    fn ties_round_to_even() {
        // 1 + 2^-11 lies halfway between 1 and the next half; even mantissa wins
        assert_eq!(f32_to_f16_bits(1.0 + 2f32.powi(-11)), 0x3C00);
        assert_eq!(f32_to_f16_bits(1.0 + 3.0 * 2f32.powi(-11)), 0x3C02);
        // halfway between the two smallest subnormals
        assert_eq!(f32_to_f16_bits(1.5 * 2f32.powi(-24)), 0x0002);
        assert_eq!(f32_to_f16_bits(0.5 * 2f32.powi(-24)), 0x0000);
    }

    #[test]
    fn every_half_pattern_roundtrips() {
        for h in 0..=u16::MAX {
            let exp = (h >> 10) & 0x1F;
            if exp == 31 {
                continue;
            }
            assert_eq!(f32_to_f16_bits(f16_bits_to_f32(h)), h, "pattern {h:#06x}");
        }
    }

    #[test]
    fn nan_is_input_error() {
        assert!(matches!(quantize_f16(&[0.5, f32::NAN]), Err(Error::Input(_))));
    }

    #[test]
    fn error_within_half_ulp_bound() {
        let mut rng = Rng::seeded(16);
        for _ in 0..1_000_000 {
            let x = rng.uniform_range(-1.0, 1.0) as f32;
            let y = f16_bits_to_f32(f32_to_f16_bits(x));
            let bound = 2f64.powi(-11) * (x.abs() as f64).max(2f64.powi(-14));
            assert!(((y - x) as f64).abs() <= bound, "{x} -> {y}");
        }
    }
}
