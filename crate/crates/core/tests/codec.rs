use half::f16;
use nerfcast::codec::{
    decode_bits, decode_bytes, dequantize_f16, encode_bits, encode_bytes, f16_bits_to_f32, f32_to_f16_bits,
    quantize_f16, raw_payload_bits, PayloadDecoder, PayloadEncoder, QuantizedVector,
};
use nerfcast::numerics::Rng;
use nerfcast::HeadPose;
use proptest::prelude::*;

proptest! {
    #[test]
    fn f16_conversion_matches_reference_library(x in -65504.0f32..=65504.0) {
        prop_assert_eq!(f32_to_f16_bits(x), f16::from_f32(x).to_bits());
    }

    #[test]
    fn f16_small_magnitudes_match_reference(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        prop_assume!(x.is_finite() && x.abs() <= 65504.0);
        prop_assert_eq!(f32_to_f16_bits(x), f16::from_f32(x).to_bits());
    }

    #[test]
    fn byte_strings_roundtrip(data in proptest::collection::vec(any::<u8>(), 0..600)) {
        let coded = encode_bytes(&data);
        prop_assert_eq!(decode_bytes(&coded, data.len()).unwrap(), data);
    }

    #[test]
    fn bit_strings_roundtrip(bits in proptest::collection::vec(any::<bool>(), 0..2000)) {
        let coded = encode_bits(&bits);
        prop_assert_eq!(decode_bits(&coded, bits.len()).unwrap(), bits);
    }

    #[test]
    fn payload_sessions_are_bit_exact(
        width in 1usize..100,
        seed in any::<u64>(),
        frames in 1usize..6,
    ) {
        let mut rng = Rng::seeded(seed);
        let mut enc = PayloadEncoder::new(width);
        let mut dec = PayloadDecoder::new(width);
        for _ in 0..frames {
            let feature: Vec<f32> = (0..width).map(|_| rng.normal() as f32 * 3.0).collect();
            let pose = HeadPose::orbit(rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.3, 0.3), 1.4);
            let bytes = enc.encode(&feature, &pose).unwrap();
            let out = dec.decode(&bytes).unwrap();
            prop_assert_eq!(out.feature, quantize_f16(&feature).unwrap());
            prop_assert_eq!(out.pose, quantize_f16(&pose.to_array()).unwrap());
        }
    }
}

#[test]
fn every_finite_half_decodes_like_reference() {
    for h in 0..=u16::MAX {
        let r = f16::from_bits(h);
        if r.is_nan() {
            continue;
        }
        assert_eq!(f16_bits_to_f32(h).to_bits(), r.to_f32().to_bits(), "pattern {h:#06x}");
    }
}

#[test]
fn dequantize_is_left_inverse_on_half_grid() {
    let words: Vec<u16> = (0..2000u16).map(|i| i.wrapping_mul(37)).filter(|w| !f16::from_bits(*w).is_nan()).collect();
    let q = QuantizedVector(words.clone());
    let values = dequantize_f16(&q);
    assert_eq!(quantize_f16(&values).unwrap().0, words);
}

#[test]
fn skewed_source_codes_near_entropy() {
    let mut rng = Rng::seeded(42);
    let n = 10_000;
    let bits: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.1).collect();
    let p = bits.iter().filter(|b| **b).count() as f64 / n as f64;
    let h = -(p * p.log2() + (1.0 - p) * (1.0 - p).log2());
    let bound = h * n as f64 / 8.0;
    let coded = encode_bits(&bits);
    assert!((coded.len() as f64) <= 1.05 * bound + 16.0, "{} bytes vs bound {bound:.1}", coded.len());
    assert_eq!(decode_bits(&coded, n).unwrap(), bits);
}

#[test]
fn raw_payload_bound_matches_word_counts() {
    assert_eq!(raw_payload_bits(79), 1456);
    assert_eq!(raw_payload_bits(30), 672);
}

/// Hex payload vectors shipped with the repository: a session of frames whose
/// quantized words must code to exactly these bytes, in order.
#[test]
fn shipped_payload_vectors() {
    let text = include_str!("data/payload_vectors.txt");
    let parse_words = |s: &str| -> Vec<u16> {
        s.split(',').map(|w| u16::from_str_radix(w, 16).unwrap()).collect()
    };
    let parse_bytes = |s: &str| -> Vec<u8> {
        (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
    };
    let mut sessions = 0;
    let mut frames = 0;
    let mut coders: Option<(PayloadEncoder, PayloadDecoder)> = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("session") => {
                let width: usize = fields.next().unwrap().strip_prefix("width=").unwrap().parse().unwrap();
                coders = Some((PayloadEncoder::new(width), PayloadDecoder::new(width)));
                sessions += 1;
            }
            Some("frame") => {
                let (enc, dec) = coders.as_mut().expect("frame before session");
                let mut feature = None;
                let mut pose = None;
                let mut payload = None;
                for f in fields {
                    let (k, v) = f.split_once('=').unwrap();
                    match k {
                        "feature" => feature = Some(parse_words(v)),
                        "pose" => pose = Some(parse_words(v)),
                        "payload" => payload = Some(parse_bytes(v)),
                        _ => panic!("unknown field {k}"),
                    }
                }
                let (feature, pose, payload) = (feature.unwrap(), pose.unwrap(), payload.unwrap());
                let coded = enc.encode_quantized(&QuantizedVector(feature.clone()), &QuantizedVector(pose.clone()));
                assert_eq!(coded, payload, "session {sessions} frame {frames}");
                let out = dec.decode(&payload).unwrap();
                assert_eq!(out.feature.0, feature);
                assert_eq!(out.pose.0, pose);
                frames += 1;
            }
            other => panic!("unexpected record {other:?}"),
        }
    }
    assert!(sessions >= 2 && frames >= 5);
}
