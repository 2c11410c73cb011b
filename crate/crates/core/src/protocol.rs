//! Frame-substitution transport: a session header followed by one packet per
//! frame, each carrying the range-coded (feature, pose) payload.
//!
//! ```text
//! header  "NVRT" | version u16 | model digest [32] | feature width u16 | pose width u16
//!         | expression dim u16 | fps f32 | flags u16            (50 bytes, little-endian)
//! packet  frame index u32 | payload length u16 | payload
//! ```
//!
//! The channel is any ordered, reliable byte stream: `std::io::Write` on the
//! sending end and `std::io::Read` on the receiving end. [`pipe`] provides an
//! in-memory pair usable across threads; files give recorded sessions.

use std::io::{self, Read, Write};
use std::sync::mpsc;

use crate::camera::{HeadPose, POSE_WIDTH};
use crate::codec::{PayloadDecoder, PayloadEncoder};
use crate::embedding::{EmbeddingMode, EncoderParams};
use crate::error::{Error, Result};
use crate::field::checkpoint::{spec_flags, FLAG_CONSTRAINT_CODE, FLAG_FINE_TUNED};
use crate::field::{model_digest, render_frame, Model, ModelDigest, RenderSettings};
use crate::frame::Frame;
use crate::wire::ByteReader;

pub const SESSION_MAGIC: &[u8; 4] = b"NVRT";
pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 50;
pub const PACKET_HEADER_LEN: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SessionHeader {
    pub model: ModelDigest,
    pub feature_width: u16,
    pub pose_width: u16,
    pub expr_dim: u16,
    pub fps: f32,
    pub flags: u16,
}

impl SessionHeader {
    /// Header announcing a session driven by `model`.
    pub fn for_model(model: &Model<f32>, fps: f32) -> Result<Self> {
        let narrow = |v: usize| u16::try_from(v).map_err(|_| Error::Config(format!("width {v} exceeds 16 bits")));
        Ok(SessionHeader {
            model: model_digest(model)?,
            feature_width: narrow(model.spec.conditioning_width())?,
            pose_width: POSE_WIDTH as u16,
            expr_dim: narrow(model.spec.expr_dim)?,
            fps,
            flags: spec_flags(&model.spec),
        })
    }

    pub fn fine_tuned(&self) -> bool {
        self.flags & FLAG_FINE_TUNED != 0
    }

    pub fn constraint_code(&self) -> bool {
        self.flags & FLAG_CONSTRAINT_CODE != 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.flags & !(FLAG_FINE_TUNED | FLAG_CONSTRAINT_CODE) != 0 {
            return Err(Error::Protocol(format!("unknown session flags {:#06x}", self.flags)));
        }
        if self.pose_width as usize != POSE_WIDTH {
            return Err(Error::Protocol(format!("pose width {} is not {POSE_WIDTH}", self.pose_width)));
        }
        if !self.fine_tuned() && self.feature_width != self.expr_dim {
            return Err(Error::Protocol(format!(
                "raw sessions send the full expression ({}) but announce width {}",
                self.expr_dim, self.feature_width
            )));
        }
        if self.feature_width == 0 || !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(Error::Protocol("feature width and fps must be positive".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        let mut w = &mut out[..];
        let _ = w.write_all(SESSION_MAGIC);
        let _ = w.write_all(&PROTOCOL_VERSION.to_le_bytes());
        let _ = w.write_all(&self.model);
        let _ = w.write_all(&self.feature_width.to_le_bytes());
        let _ = w.write_all(&self.pose_width.to_le_bytes());
        let _ = w.write_all(&self.expr_dim.to_le_bytes());
        let _ = w.write_all(&self.fps.to_le_bytes());
        let _ = w.write_all(&self.flags.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "session header");
        if r.take(4, "magic")? != SESSION_MAGIC {
            return Err(Error::Protocol("stream does not start with a session header".into()));
        }
        let version = r.u16("version")?;
        if version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!("unsupported protocol version {version}")));
        }
        let header = SessionHeader {
            model: r.take(32, "model digest")?.try_into().expect("32 bytes"),
            feature_width: r.u16("feature width")?,
            pose_width: r.u16("pose width")?,
            expr_dim: r.u16("expression dimension")?,
            fps: r.f32("fps")?,
            flags: r.u16("flags")?,
        };
        header.validate()?;
        Ok(header)
    }

    /// Refuses sessions not produced by exactly this model.
    pub fn check_model(&self, model: &Model<f32>) -> Result<()> {
        let digest = model_digest(model)?;
        if digest != self.model {
            return Err(Error::SessionRefused(format!(
                "stream was produced for model {}, receiver holds {}",
                crate::field::digest_hex(&self.model),
                crate::field::digest_hex(&digest)
            )));
        }
        let expected = SessionHeader::for_model(model, self.fps)?;
        if expected.feature_width != self.feature_width || expected.flags != self.flags || expected.expr_dim != self.expr_dim {
            return Err(Error::SessionRefused("session widths or flags disagree with the model".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePacket {
    pub index: u32,
    pub payload: Vec<u8>,
}

impl FramePacket {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let len = u16::try_from(self.payload.len())
            .map_err(|_| Error::Protocol(format!("payload of {} bytes exceeds the packet limit", self.payload.len())))?;
        let mut out = Vec::with_capacity(PACKET_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.index.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitrateReport {
    pub frames: u64,
    pub payload_bits: u64,
    /// Session header plus per-packet framing.
    pub header_bits: u64,
    pub duration_s: f64,
    pub payload_kbps: f64,
    pub total_kbps: f64,
}

impl BitrateReport {
    pub fn new(frames: u64, payload_bits: u64, header_bits: u64, fps: f64) -> Self {
        let duration_s = frames as f64 / fps;
        let rate = |bits: u64| if frames == 0 { 0.0 } else { bits as f64 / duration_s / 1000.0 };
        BitrateReport {
            frames,
            payload_bits,
            header_bits,
            duration_s,
            payload_kbps: rate(payload_bits),
            total_kbps: rate(payload_bits + header_bits),
        }
    }

    pub fn payload_bits_per_frame(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.payload_bits as f64 / self.frames as f64
        }
    }
}

/// Per-frame input to the sender: the raw expression and the pose.
pub type SourceFrame<'a> = (&'a [f32], &'a HeadPose);

/// Writes a full session for `frames`. In fine-tuned sessions `encoder`
/// embeds each expression before coding.
pub fn sender_run<'a, W: Write>(
    header: &SessionHeader,
    encoder: Option<&EncoderParams<f32>>,
    frames: impl IntoIterator<Item = SourceFrame<'a>>,
    channel: &mut W,
) -> Result<BitrateReport> {
    header.validate()?;
    let mode = if header.fine_tuned() {
        EmbeddingMode::FineTuned
    } else {
        EmbeddingMode::Raw
    };
    if mode == EmbeddingMode::FineTuned && encoder.is_none() {
        return Err(Error::Config("fine-tuned sessions need the encoder".into()));
    }
    let mut last: Option<u32> = None;
    let write_failed = |last, source| Error::ChannelWrite { last_frame: last, source };
    channel.write_all(&header.to_bytes()).map_err(|e| write_failed(last, e))?;
    let mut coder = PayloadEncoder::new(header.feature_width as usize);
    let mut payload_bits = 0u64;
    let mut count = 0u64;
    for (i, (delta, pose)) in frames.into_iter().enumerate() {
        if delta.len() != header.expr_dim as usize {
            return Err(Error::Config(format!(
                "frame {i} has {} expression components, session declares {}",
                delta.len(),
                header.expr_dim
            )));
        }
        let feature = crate::embedding::conditioning_for(mode, delta, encoder)?;
        let payload = coder.encode(&feature, pose)?;
        let index = u32::try_from(i).map_err(|_| Error::Protocol("frame index overflow".into()))?;
        let packet = FramePacket { index, payload };
        channel.write_all(&packet.to_bytes()?).map_err(|e| write_failed(last, e))?;
        payload_bits += 8 * packet.payload.len() as u64;
        count += 1;
        last = Some(index);
    }
    channel.flush().map_err(|e| write_failed(last, e))?;
    let header_bits = 8 * (HEADER_LEN as u64 + PACKET_HEADER_LEN as u64 * count);
    Ok(BitrateReport::new(count, payload_bits, header_bits, header.fps as f64))
}

/// A decoded frame at the receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub index: u32,
    /// Dequantized transmitted feature: the conditioning vector of the field.
    pub feature: Vec<f32>,
    pub pose: HeadPose,
    /// Quantized words as received, for bit-exact comparisons.
    pub feature_words: Vec<u16>,
    pub pose_words: Vec<u16>,
    pub frame: Option<Frame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverReport {
    pub header: SessionHeader,
    pub frames: u64,
    pub bytes_consumed: u64,
    pub bitrate: BitrateReport,
}

/// Fills `buf` completely; `Ok(false)` on a clean end of stream before the
/// first byte.
fn read_full<R: Read>(channel: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match channel.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "stream ended inside a record")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

/// Reads and decodes a session. The model digest is checked before any
/// packet is decoded. When `render` is given every frame is reconstructed
/// at that resolution; `on_frame` sees frames in index order.
pub fn receiver_run<R: Read>(
    channel: &mut R,
    model: &Model<f32>,
    render: Option<&RenderSettings>,
    mut on_frame: impl FnMut(ReceivedFrame) -> Result<()>,
) -> Result<ReceiverReport> {
    let mut head = [0u8; HEADER_LEN];
    match read_full(channel, &mut head) {
        Ok(true) => {}
        Ok(false) => return Err(Error::Protocol("empty stream".into())),
        Err(e) => return Err(Error::Protocol(format!("session header unreadable: {e}"))),
    }
    let header = SessionHeader::from_bytes(&head)?;
    header.check_model(model)?;
    let mut decoder = PayloadDecoder::new(header.feature_width as usize);
    let mut consumed = HEADER_LEN as u64;
    let mut frames = 0u64;
    let mut payload_bits = 0u64;
    let mut previous: Option<u32> = None;
    loop {
        let mut ph = [0u8; PACKET_HEADER_LEN];
        match read_full(channel, &mut ph) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => {
                return Err(Error::Protocol(format!(
                    "truncated packet header after frame {previous:?} at byte {consumed}: {e}"
                )))
            }
        }
        let index = u32::from_le_bytes(ph[..4].try_into().unwrap());
        let len = u16::from_le_bytes(ph[4..].try_into().unwrap()) as usize;
        if previous.is_some_and(|p| index <= p) {
            return Err(Error::Protocol(format!("frame index {index} does not follow {previous:?}")));
        }
        let mut payload = vec![0u8; len];
        if len > 0 {
            match read_full(channel, &mut payload) {
                Ok(true) => {}
                Ok(false) | Err(_) => {
                    return Err(Error::Protocol(format!(
                        "packet for frame {index} truncated at byte {}; resynchronize at the next session",
                        consumed + PACKET_HEADER_LEN as u64
                    )))
                }
            }
        }
        let decoded = decoder.decode(&payload).map_err(|e| match e {
            Error::Decode { offset, message } => Error::Decode {
                offset: consumed as usize + PACKET_HEADER_LEN + offset,
                message: format!("frame {index}: {message}"),
            },
            other => other,
        })?;
        consumed += (PACKET_HEADER_LEN + len) as u64;
        payload_bits += 8 * len as u64;
        let feature = decoded.feature_values();
        let pose = decoded.pose()?;
        let frame = match render {
            Some(settings) => Some(render_frame(model, &feature, &pose, settings)?),
            None => None,
        };
        on_frame(ReceivedFrame {
            index,
            feature,
            pose,
            feature_words: decoded.feature.words().to_vec(),
            pose_words: decoded.pose.words().to_vec(),
            frame,
        })?;
        frames += 1;
        previous = Some(index);
    }
    let header_bits = 8 * consumed - payload_bits;
    Ok(ReceiverReport {
        bitrate: BitrateReport::new(frames, payload_bits, header_bits, header.fps as f64),
        header,
        frames,
        bytes_consumed: consumed,
    })
}

/// Exact bit accounting of a recorded stream without decoding payloads.
pub fn measure_bitrate(stream: &[u8], fps: f64) -> Result<BitrateReport> {
    if !(fps > 0.0) {
        return Err(Error::Input(format!("fps must be positive, got {fps}")));
    }
    if stream.len() < HEADER_LEN {
        return Err(Error::Protocol(format!("stream of {} bytes has no session header", stream.len())));
    }
    SessionHeader::from_bytes(&stream[..HEADER_LEN])?;
    let mut r = ByteReader::new(&stream[HEADER_LEN..], "session stream");
    let mut frames = 0u64;
    let mut payload_bits = 0u64;
    let mut previous: Option<u32> = None;
    while r.remaining() > 0 {
        let index = r.u32("packet index").map_err(|e| Error::Protocol(e.to_string()))?;
        let len = r.u16("payload length").map_err(|e| Error::Protocol(e.to_string()))? as usize;
        r.take(len, "payload").map_err(|e| Error::Protocol(e.to_string()))?;
        if previous.is_some_and(|p| index <= p) {
            return Err(Error::Protocol(format!("frame index {index} does not follow {previous:?}")));
        }
        previous = Some(index);
        frames += 1;
        payload_bits += 8 * len as u64;
    }
    let header_bits = 8 * stream.len() as u64 - payload_bits;
    Ok(BitrateReport::new(frames, payload_bits, header_bits, fps))
}

/// Writing end of an in-memory channel.
#[derive(Debug)]
pub struct PipeWriter {
    tx: mpsc::Sender<Vec<u8>>,
}

/// Reading end of an in-memory channel; reports end of stream once the
/// writer is dropped and all bytes are consumed.
#[derive(Debug)]
pub struct PipeReader {
    rx: mpsc::Receiver<Vec<u8>>,
    pending: Vec<u8>,
    offset: usize,
}

pub fn pipe() -> (PipeWriter, PipeReader) {
    let (tx, rx) = mpsc::channel();
    (
        PipeWriter { tx },
        PipeReader {
            rx,
            pending: Vec::new(),
            offset: 0,
        },
    )
}

impl Write for PipeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "receiver hung up"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for PipeReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        while self.offset == self.pending.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.pending = chunk;
                    self.offset = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len() - self.offset);
        buf[..n].copy_from_slice(&self.pending[self.offset..self.offset + n]);
        self.offset += n;
        Ok(n)
    }
}
