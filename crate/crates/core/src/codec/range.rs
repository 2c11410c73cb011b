//! Adaptive binary range coder with carry propagation.
//!
//! The encoder keeps a 64-bit `low` so carries out of the 32-bit window can be
//! resolved lazily: the most recent byte below the carry point is held back in
//! `cache` together with a count of pending `0xFF` bytes.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 12;
pub const PROB_ONE: u16 = 1 << PROB_BITS;
pub const PROB_INIT: u16 = PROB_ONE / 2;
pub const ADAPT_SHIFT: u32 = 5;
const TOP: u32 = 1 << 24;

/// Adaptive probability that the next bit is 1, in units of `1 / 4096`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prob(pub u16);

impl Default for Prob {
    fn default() -> Self {
        Prob(PROB_INIT)
    }
}

impl Prob {
    #[inline]
    pub fn update(&mut self, bit: bool) {
        if bit {
            self.0 += (PROB_ONE - self.0) >> ADAPT_SHIFT;
        } else {
            self.0 -= self.0 >> ADAPT_SHIFT;
        }
    }
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    /// Bytes owed to the output: the cached byte plus pending 0xFF bytes.
    cache_size: u64,
    /// The first byte produced is always zero and is never written.
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            started: false,
            out: Vec::new(),
        }
    }

    #[inline]
    pub fn encode(&mut self, prob: &mut Prob, bit: bool) {
        let bound = (self.range >> PROB_BITS) * prob.0 as u32;
        if bit {
            self.range = bound;
        } else {
            self.low += bound as u64;
            self.range -= bound;
        }
        prob.update(bit);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn emit(&mut self, byte: u8) {
        if self.started {
            self.out.push(byte);
        } else {
            debug_assert_eq!(byte, 0);
            self.started = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut dec = RangeDecoder {
            data,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or(Error::Decode {
            offset: self.pos,
            message: "range-coded stream truncated".into(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    #[inline]
    pub fn decode(&mut self, prob: &mut Prob) -> Result<bool> {
        let bound = (self.range >> PROB_BITS) * prob.0 as u32;
        let bit = if self.code < bound {
            self.range = bound;
            true
        } else {
            self.code -= bound;
            self.range -= bound;
            false
        };
        prob.update(bit);
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(bit)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Errors unless the whole input was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Decode {
                offset: self.pos,
                message: format!("{} unexpected trailing bytes", self.data.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Context set for byte-serialized streams: (byte parity) x (bit-tree node),
/// where the tree node encodes the bit index and the bits already seen in the
/// current byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitModel {
    probs: [[Prob; 256]; 2],
}

impl Default for BitModel {
    fn default() -> Self {
        BitModel {
            probs: [[Prob::default(); 256]; 2],
        }
    }
}

impl BitModel {
    pub fn probability(&self, parity: usize, node: usize) -> u16 {
        self.probs[parity][node].0
    }

    /// Codes one byte MSB first; `parity` 0 for high bytes, 1 for low bytes.
    pub fn encode_byte(&mut self, enc: &mut RangeEncoder, parity: usize, byte: u8) {
        let mut node = 1usize;
        for i in (0..8).rev() {
            let bit = (byte >> i) & 1 == 1;
            enc.encode(&mut self.probs[parity][node], bit);
            node = (node << 1) | bit as usize;
        }
    }

    pub fn decode_byte(&mut self, dec: &mut RangeDecoder<'_>, parity: usize) -> Result<u8> {
        let mut node = 1usize;
        for _ in 0..8 {
            let bit = dec.decode(&mut self.probs[parity][node])?;
            node = (node << 1) | bit as usize;
        }
        Ok((node & 0xFF) as u8)
    }
}

/// Codes an arbitrary byte string with a fresh model, alternating parity.
pub fn encode_bytes(data: &[u8]) -> Vec<u8> {
    let mut model = BitModel::default();
    let mut enc = RangeEncoder::new();
    for (i, b) in data.iter().enumerate() {
        model.encode_byte(&mut enc, i % 2, *b);
    }
    enc.finish()
}

pub fn decode_bytes(stream: &[u8], len: usize) -> Result<Vec<u8>> {
    let mut model = BitModel::default();
    let mut dec = RangeDecoder::new(stream)?;
    let out = (0..len)
        .map(|i| model.decode_byte(&mut dec, i % 2))
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

/// Codes a bit sequence under one adaptive context.
pub fn encode_bits(bits: &[bool]) -> Vec<u8> {
    let mut p = Prob::default();
    let mut enc = RangeEncoder::new();
    for b in bits {
        enc.encode(&mut p, *b);
    }
    enc.finish()
}

pub fn decode_bits(stream: &[u8], count: usize) -> Result<Vec<bool>> {
    let mut p = Prob::default();
    let mut dec = RangeDecoder::new(stream)?;
    let out = (0..count).map(|_| dec.decode(&mut p)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn empty_stream_is_flush_only() {
        let s = encode_bytes(&[]);
        assert!(s.len() <= 8);
        assert_eq!(decode_bytes(&s, 0).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn probability_stays_in_range() {
        let mut p = Prob::default();
        for _ in 0..10_000 {
            p.update(true);
        }
        assert!(p.0 < PROB_ONE && p.0 >= 1);
        for _ in 0..10_000 {
            p.update(false);
        }
        assert!(p.0 >= 1);
    }

    #[test]
    fn skewed_bits_approach_entropy() {
        let mut rng = Rng::seeded(10);
        let bits: Vec<bool> = (0..10_000).map(|_| rng.uniform() < 0.1).collect();
        let s = encode_bits(&bits);
        let h = -(0.1f64 * 0.1f64.log2() + 0.9 * 0.9f64.log2());
        let shannon_bytes = 10_000.0 * h / 8.0;
        assert!((s.len() as f64) <= 1.05 * shannon_bytes + 16.0, "{} bytes", s.len());
        assert_eq!(decode_bits(&s, bits.len()).unwrap(), bits);
    }

    #[test]
    fn carry_heavy_streams_roundtrip() {
        // long runs of near-certain bits drive low towards 0xFF.. patterns
        let mut data = vec![0xFFu8; 3000];
        data.extend(std::iter::repeat(0u8).take(3000));
        data.extend((0..3000).map(|i| (i * 7 % 256) as u8));
        let s = encode_bytes(&data);
        assert_eq!(decode_bytes(&s, data.len()).unwrap(), data);
    }

    #[test]
    fn truncation_reports_offset() {
        let data: Vec<u8> = (0..200).map(|i| (i * 31 % 251) as u8).collect();
        let s = encode_bytes(&data);
        match decode_bytes(&s[..s.len() - 2], data.len()) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, s.len() - 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut s = encode_bytes(b"abc");
        s.push(0);
        assert!(decode_bytes(&s, 3).is_err());
    }
}
