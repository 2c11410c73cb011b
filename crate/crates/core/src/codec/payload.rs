//! Per-frame payloads: f16 feature words then f16 pose words, each word
//! serialized high byte first and range-coded under a session-long model.

use super::half::{dequantize_f16, quantize_f16, QuantizedVector};
use super::range::{BitModel, RangeDecoder, RangeEncoder};
use crate::camera::{HeadPose, POSE_WIDTH};
use crate::error::{Error, Result};

/// Words of one decoded payload.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPayload {
    pub feature: QuantizedVector,
    pub pose: QuantizedVector,
}

impl DecodedPayload {
    pub fn feature_values(&self) -> Vec<f32> {
        dequantize_f16(&self.feature)
    }

    pub fn pose(&self) -> Result<HeadPose> {
        HeadPose::from_slice(&dequantize_f16(&self.pose))
    }
}

fn encode_words(model: &mut BitModel, enc: &mut RangeEncoder, words: &[u16]) {
    for w in words {
        let [hi, lo] = w.to_be_bytes();
        model.encode_byte(enc, 0, hi);
        model.encode_byte(enc, 1, lo);
    }
}

fn decode_words(model: &mut BitModel, dec: &mut RangeDecoder<'_>, n: usize) -> Result<Vec<u16>> {
    (0..n)
        .map(|_| {
            let hi = model.decode_byte(dec, 0)?;
            let lo = model.decode_byte(dec, 1)?;
            Ok(u16::from_be_bytes([hi, lo]))
        })
        .collect()
}

/// Sender half of a session's payload coder. The model adapts across frames
/// and is only reset by creating a new encoder.
#[derive(Debug, Clone)]
pub struct PayloadEncoder {
    feature_width: usize,
    model: BitModel,
}

impl PayloadEncoder {
    pub fn new(feature_width: usize) -> Self {
        PayloadEncoder {
            feature_width,
            model: BitModel::default(),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn encode(&mut self, feature: &[f32], pose: &HeadPose) -> Result<Vec<u8>> {
        if feature.len() != self.feature_width {
            return Err(Error::Config(format!(
                "payload feature width {} does not match session width {}",
                feature.len(),
                self.feature_width
            )));
        }
        let fq = quantize_f16(feature)?;
        let pq = quantize_f16(&pose.to_array())?;
        Ok(self.encode_quantized(&fq, &pq))
    }

    pub fn encode_quantized(&mut self, feature: &QuantizedVector, pose: &QuantizedVector) -> Vec<u8> {
        let mut enc = RangeEncoder::new();
        encode_words(&mut self.model, &mut enc, feature.words());
        encode_words(&mut self.model, &mut enc, pose.words());
        enc.finish()
    }
}

#[derive(Debug, Clone)]
pub struct PayloadDecoder {
    feature_width: usize,
    model: BitModel,
}

impl PayloadDecoder {
    pub fn new(feature_width: usize) -> Self {
        PayloadDecoder {
            feature_width,
            model: BitModel::default(),
        }
    }

    /// Decodes one payload; on error the model is left as it was so the
    /// caller may report the failure without corrupting later state.
    pub fn decode(&mut self, bytes: &[u8]) -> Result<DecodedPayload> {
        let mut model = self.model.clone();
        let mut dec = RangeDecoder::new(bytes)?;
        let feature = decode_words(&mut model, &mut dec, self.feature_width)?;
        let pose = decode_words(&mut model, &mut dec, POSE_WIDTH)?;
        dec.finish()?;
        self.model = model;
        Ok(DecodedPayload {
            feature: QuantizedVector(feature),
            pose: QuantizedVector(pose),
        })
    }
}

/// Pre-entropy payload size in bits for a feature width.
pub fn raw_payload_bits(feature_width: usize) -> usize {
    16 * (feature_width + POSE_WIDTH)
}
