//! End-to-end runs: encode dataset frames into a recorded session, decode
//! and render it at the receiver, and score reconstructions against ground
//! truth.

use std::thread;

use rayon::prelude::*;

use crate::config::{parse_bool, parse_value, unknown_key, Settings};
use crate::error::{Error, Result};
use crate::field::{render_frame, Model, RenderSettings};
use crate::frame::Frame;
use crate::metrics::{psnr, seam_metric, ssim, QualityReport};
use crate::protocol::{pipe, receiver_run, sender_run, BitrateReport, ReceivedFrame, ReceiverReport, SessionHeader};
use crate::scene::{Dataset, DatasetFrame};

pub const FRAME_CSV_HEADER: &str = "frame,payload_bytes,psnr_db,ssim,l1";

/// Receiver-side rendering choices. The checkpoint does not pin them.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            coarse_samples: 32,
            fine_samples: 64,
            jitter: false,
        }
    }
}

impl RenderConfig {
    pub fn settings(&self, model: &Model<f32>, width: usize, height: usize) -> Result<RenderSettings> {
        let mut s = RenderSettings::for_model(&model.spec, self.coarse_samples, self.fine_samples, width, height);
        s.jitter = self.jitter;
        s.validate()?;
        Ok(s)
    }
}

impl Settings for RenderConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "coarse_samples" => self.coarse_samples = parse_value(key, value)?,
            "fine_samples" => self.fine_samples = parse_value(key, value)?,
            "jitter" => self.jitter = parse_bool(key, value)?,
            _ => return Err(unknown_key("render", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("coarse_samples".into(), self.coarse_samples.to_string()),
            ("fine_samples".into(), self.fine_samples.to_string()),
            ("jitter".into(), self.jitter.to_string()),
        ]
    }
}

/// Which dataset frames a run covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameSelection {
    HeldOut,
    All,
}

impl FrameSelection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "held-out" | "held_out" => Ok(FrameSelection::HeldOut),
            "all" => Ok(FrameSelection::All),
            _ => Err(Error::Config(format!("frame selection must be `held-out` or `all`, got `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameSelection::HeldOut => "held-out",
            FrameSelection::All => "all",
        }
    }

    pub fn select(self, dataset: &Dataset) -> Result<&[DatasetFrame]> {
        let frames = match self {
            FrameSelection::HeldOut => dataset.held_out(),
            FrameSelection::All => &dataset.frames[..],
        };
        if frames.is_empty() {
            return Err(Error::Input(format!("dataset has no {} frames", self.name())));
        }
        Ok(frames)
    }
}

/// Writes a recorded session for `frames` into memory.
pub fn encode_frames(model: &Model<f32>, frames: &[DatasetFrame], fps: f32) -> Result<(Vec<u8>, BitrateReport)> {
    let header = SessionHeader::for_model(model, fps)?;
    let mut stream = Vec::new();
    let source = frames.iter().map(|f| (f.feature.as_slice(), &f.pose));
    let report = sender_run(&header, model.encoder.as_ref(), source, &mut stream)?;
    Ok((stream, report))
}

/// Decodes a recorded session, rendering every frame when `render` is set.
pub fn decode_stream(
    stream: &[u8],
    model: &Model<f32>,
    render: Option<&RenderSettings>,
) -> Result<(Vec<ReceivedFrame>, ReceiverReport)> {
    let mut frames = Vec::new();
    let mut reader = stream;
    let report = receiver_run(&mut reader, model, render, |f| {
        frames.push(f);
        Ok(())
    })?;
    Ok((frames, report))
}

/// Brings a render to the reference resolution by box averaging.
pub fn match_resolution(frame: &Frame, reference: &Frame) -> Result<Frame> {
    let (w, h) = (reference.width(), reference.height());
    if frame.width() == w && frame.height() == h {
        return Ok(frame.clone());
    }
    let factor = frame.width() / w;
    if factor == 0 || frame.width() != factor * w || frame.height() != factor * h {
        return Err(Error::Config(format!(
            "cannot compare a {}x{} render with {w}x{h} ground truth",
            frame.width(),
            frame.height()
        )));
    }
    frame.downsample(factor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub index: u32,
    pub payload_bytes: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub stream: Vec<u8>,
    pub sent: BitrateReport,
    pub received: ReceiverReport,
    pub frames: Vec<Frame>,
    pub scores: Vec<FrameScore>,
    pub quality: QualityReport,
}

impl Simulation {
    pub fn frame_csv(&self) -> String {
        let mut out = format!("{FRAME_CSV_HEADER}\n");
        for s in &self.scores {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                s.index, s.payload_bytes, s.psnr, s.ssim, s.l1
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let b = &self.received.bitrate;
        format!(
            "frames,payload_bits,header_bits,duration_s,payload_kbps,total_kbps,bits_per_frame,psnr_db,ssim,l1\n\
             {},{},{},{:.6},{:.6},{:.6},{:.3},{:.6},{:.6},{:.6}\n",
            b.frames,
            b.payload_bits,
            b.header_bits,
            b.duration_s,
            b.payload_kbps,
            b.total_kbps,
            b.payload_bits_per_frame(),
            self.quality.psnr,
            self.quality.ssim,
            self.quality.l1
        )
    }
}

/// Loopback session: the sender streams into an in-memory pipe on its own
/// thread while the receiver decodes and renders.
pub fn simulate(model: &Model<f32>, frames: &[DatasetFrame], fps: f32, render: &RenderSettings) -> Result<Simulation> {
    let header = SessionHeader::for_model(model, fps)?;
    let (tx, mut rx) = pipe();
    let (sent, received, rendered) = thread::scope(|scope| -> Result<_> {
        let header = &header;
        let sender = scope.spawn(move || {
            let mut recorder = Recorder {
                inner: tx,
                copy: Vec::new(),
            };
            let source = frames.iter().map(|f| (f.feature.as_slice(), &f.pose));
            let report = sender_run(header, model.encoder.as_ref(), source, &mut recorder);
            report.map(|r| (r, recorder.copy))
        });
        let mut rendered = Vec::with_capacity(frames.len());
        let received = receiver_run(&mut rx, model, Some(render), |f| {
            rendered.push(f);
            Ok(())
        });
        drop(rx);
        let sent = sender.join().map_err(|_| Error::Protocol("sender thread panicked".into()))?;
        let received = received?;
        Ok((sent?, received, rendered))
    })?;
    let (sent, stream) = sent;
    let payload_sizes = payload_sizes(&stream)?;
    let images: Vec<Frame> = rendered.into_iter().map(|f| f.frame.expect("rendered")).collect();
    let scores = images
        .par_iter()
        .zip(frames.par_iter())
        .enumerate()
        .map(|(i, (img, gt))| {
            let img = match_resolution(img, &gt.image)?;
            Ok(FrameScore {
                index: i as u32,
                payload_bytes: payload_sizes[i],
                psnr: psnr(&img, &gt.image)?,
                ssim: ssim(&img, &gt.image)?,
                l1: crate::metrics::l1(&img, &gt.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let quality = aggregate(&scores)?;
    Ok(Simulation {
        stream,
        sent,
        received,
        frames: images,
        scores,
        quality,
    })
}

struct Recorder<W> {
    inner: W,
    copy: Vec<u8>,
}

impl<W: std::io::Write> std::io::Write for Recorder<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.copy.extend_from_slice(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn payload_sizes(stream: &[u8]) -> Result<Vec<usize>> {
    let mut sizes = Vec::new();
    let mut pos = crate::protocol::HEADER_LEN;
    while pos < stream.len() {
        let len_at = pos + 4;
        let bytes = stream
            .get(len_at..len_at + 2)
            .ok_or_else(|| Error::Protocol("truncated packet header".into()))?;
        let len = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        sizes.push(len);
        pos += crate::protocol::PACKET_HEADER_LEN + len;
    }
    Ok(sizes)
}

fn aggregate(scores: &[FrameScore]) -> Result<QualityReport> {
    if scores.is_empty() {
        return Err(Error::Input("no frames to measure".into()));
    }
    let n = scores.len() as f64;
    Ok(QualityReport {
        l1: scores.iter().map(|s| s.l1).sum::<f64>() / n,
        psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        frames: scores.len(),
    })
}

/// Direct (codec-free) reconstruction quality plus the mean seam metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub quality: QualityReport,
    pub seam: f64,
}

pub fn evaluate(
    model: &Model<f32>,
    frames: &[DatasetFrame],
    settings: &RenderSettings,
    seam_band: std::ops::Range<usize>,
) -> Result<(Evaluation, Vec<Frame>)> {
    let renders = frames
        .iter()
        .map(|f| {
            let cond = model.conditioning(f.feature.as_slice())?;
            render_frame(model, &cond, &f.pose, settings)
        })
        .collect::<Result<Vec<_>>>()?;
    let matched = renders
        .iter()
        .zip(frames)
        .map(|(r, f)| match_resolution(r, &f.image))
        .collect::<Result<Vec<_>>>()?;
    let quality = QualityReport::measure(matched.iter().zip(frames.iter().map(|f| &f.image)))?;
    let seam = matched
        .iter()
        .map(|m| seam_metric(m, seam_band.clone()))
        .sum::<Result<f64>>()?
        / matched.len() as f64;
    Ok((Evaluation { quality, seam }, renders))
}
