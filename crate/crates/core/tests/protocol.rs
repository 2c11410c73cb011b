use std::fs::File;
use std::io::{BufReader, BufWriter};

use nerfcast::codec::{quantize_f16, raw_payload_bits};
use nerfcast::embedding::EmbeddingMode;
use nerfcast::field::{Model, ModelSpec, RenderSettings};
use nerfcast::protocol::{receiver_run, sender_run, SessionHeader, HEADER_LEN, PACKET_HEADER_LEN};
use nerfcast::scene::{generate_dataset, sample_trajectory, Dataset, SceneConfig};
use nerfcast::session::{decode_stream, encode_frames, simulate};
use nerfcast::Error;

fn dataset() -> Dataset {
    let scene = SceneConfig::default();
    generate_dataset(&scene, &sample_trajectory(&scene, 24, 8).unwrap(), 16, 16).unwrap()
}

fn model(mode: EmbeddingMode, seed: u64) -> Model<f32> {
    let spec = ModelSpec {
        mode,
        embed_width: 30,
        head_layers: 1,
        head_width: 12,
        torso_layers: 1,
        torso_width: 8,
        ..ModelSpec::default()
    };
    Model::init(spec, seed).unwrap()
}

#[test]
fn file_channel_carries_embedded_features_bit_exactly() {
    let ds = dataset();
    let m = model(EmbeddingMode::FineTuned, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.nvrt");
    let header = SessionHeader::for_model(&m, ds.fps).unwrap();
    assert!(header.fine_tuned() && header.constraint_code());
    let sent = {
        let mut w = BufWriter::new(File::create(&path).unwrap());
        let frames = ds.frames.iter().map(|f| (f.feature.as_slice(), &f.pose));
        sender_run(&header, m.encoder.as_ref(), frames, &mut w).unwrap()
    };
    let mut received = Vec::new();
    let mut r = BufReader::new(File::open(&path).unwrap());
    let report = receiver_run(&mut r, &m, None, |f| {
        received.push(f);
        Ok(())
    })
    .unwrap();
    assert_eq!(report.bitrate, sent);
    assert_eq!(report.bytes_consumed, std::fs::metadata(&path).unwrap().len());
    assert_eq!(received.len(), ds.len());
    let encoder = m.encoder.as_ref().unwrap();
    for (i, (r, f)) in received.iter().zip(&ds.frames).enumerate() {
        assert_eq!(r.index as usize, i);
        let (embedded, _) = encoder.embed(f.feature.as_slice()).unwrap();
        assert_eq!(r.feature_words, quantize_f16(&embedded).unwrap().words());
        assert_eq!(r.pose_words, quantize_f16(&f.pose.to_array()).unwrap().words());
        assert!(r.frame.is_none());
    }
    let total_bytes = HEADER_LEN + ds.len() * PACKET_HEADER_LEN + (sent.payload_bits / 8) as usize;
    assert_eq!(total_bytes as u64, report.bytes_consumed);
}

#[test]
fn narrow_embedding_needs_fewer_bits_than_raw() {
    let ds = dataset();
    let (_, raw) = encode_frames(&model(EmbeddingMode::Raw, 2), &ds.frames, ds.fps).unwrap();
    let (_, ft) = encode_frames(&model(EmbeddingMode::FineTuned, 2), &ds.frames, ds.fps).unwrap();
    assert!(raw.payload_bits_per_frame() <= raw_payload_bits(79) as f64);
    assert!(ft.payload_bits_per_frame() <= raw_payload_bits(30) as f64);
    assert!(ft.payload_bits_per_frame() < raw.payload_bits_per_frame());
}

#[test]
fn receiver_consumption_is_independent_of_render_resolution() {
    let ds = dataset();
    let m = model(EmbeddingMode::Raw, 3);
    let (stream, _) = encode_frames(&m, &ds.frames[..4], ds.fps).unwrap();
    let mut outcomes = Vec::new();
    for res in [8, 16, 32] {
        let settings = RenderSettings::for_model(&m.spec, 4, 4, res, res);
        let (frames, report) = decode_stream(&stream, &m, Some(&settings)).unwrap();
        assert!(frames.iter().all(|f| f.frame.as_ref().unwrap().width() == res));
        let words: Vec<_> = frames.iter().map(|f| (f.feature_words.clone(), f.pose_words.clone())).collect();
        outcomes.push((report.bytes_consumed, report.bitrate, words));
    }
    assert!(outcomes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn simulation_is_reproducible() {
    let ds = dataset();
    let m = model(EmbeddingMode::FineTuned, 4);
    let settings = RenderSettings::for_model(&m.spec, 4, 4, 16, 16);
    let a = simulate(&m, ds.held_out(), ds.fps, &settings).unwrap();
    let b = simulate(&m, ds.held_out(), ds.fps, &settings).unwrap();
    assert_eq!(a.stream, b.stream);
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.frame_csv(), b.frame_csv());
    assert_eq!(a.summary_csv(), b.summary_csv());
}

#[test]
fn sessions_for_other_models_are_refused() {
    let ds = dataset();
    let (stream, _) = encode_frames(&model(EmbeddingMode::Raw, 5), &ds.frames[..2], ds.fps).unwrap();
    let err = decode_stream(&stream, &model(EmbeddingMode::Raw, 6), None).unwrap_err();
    assert!(matches!(err, Error::SessionRefused(_)), "{err}");
    let mut tampered = stream.clone();
    tampered[HEADER_LEN + 1] ^= 0xff;
    assert!(decode_stream(&tampered, &model(EmbeddingMode::Raw, 5), None).is_err());
}
