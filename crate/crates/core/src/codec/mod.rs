//! Feature compression: binary16 quantization and adaptive range coding.

mod half;
mod payload;
mod range;

pub use half::{dequantize_f16, f16_bits_to_f32, f32_to_f16_bits, quantize_f16, QuantizedVector, HALF_MAX, HALF_MAX_BITS};
pub use payload::{raw_payload_bits, DecodedPayload, PayloadDecoder, PayloadEncoder};
pub use range::{
    decode_bits, decode_bytes, encode_bits, encode_bytes, BitModel, Prob, RangeDecoder, RangeEncoder, ADAPT_SHIFT,
    PROB_BITS, PROB_INIT, PROB_ONE,
};
