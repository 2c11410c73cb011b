//! Image quality metrics, bitrate trade-off ratios and rate-distortion tables.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::frame::Frame;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Frame, b: &Frame) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Input(format!(
            "frames differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

pub fn l1(a: &Frame, b: &Frame) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` on the [0, 1] scale, capped at 99 dB.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - c;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every valid 11x11 Gaussian window of every channel.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Input(format!("SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let plane = |f: &Frame| -> Vec<f64> { f.data().iter().skip(ch).step_by(3).map(|v| *v as f64).collect() };
        let x = plane(a);
        let y = plane(b);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &taps);
        let my = filter_valid(&y, w, h, &taps);
        let sxx = filter_valid(&xx, w, h, &taps);
        let syy = filter_valid(&yy, w, h, &taps);
        let sxy = filter_valid(&xy, w, h, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean `|row_{k+1} - row_k|` over the row pairs inside `band`, across all
/// columns and channels.
pub fn seam_metric(frame: &Frame, band: Range<usize>) -> Result<f64> {
    if band.start + 1 >= band.end || band.end > frame.height() {
        return Err(Error::Input(format!(
            "seam band {band:?} must hold at least two rows of a {}-row frame",
            frame.height()
        )));
    }
    let w = frame.width();
    let mut sum = 0.0;
    for y in band.start..band.end - 1 {
        for x in 0..w {
            let (p, q) = (frame.pixel(x, y), frame.pixel(x, y + 1));
            for k in 0..3 {
                sum += (q[k] as f64 - p[k] as f64).abs();
            }
        }
    }
    Ok(sum / ((band.end - band.start - 1) * w * 3) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityReport {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub frames: usize,
}

impl QualityReport {
    /// Per-frame metrics averaged over `(reconstruction, reference)` pairs.
    pub fn measure<'a>(pairs: impl IntoIterator<Item = (&'a Frame, &'a Frame)>) -> Result<Self> {
        let mut r = QualityReport {
            l1: 0.0,
            psnr: 0.0,
            ssim: 0.0,
            frames: 0,
        };
        for (a, b) in pairs {
            r.l1 += l1(a, b)?;
            r.psnr += psnr(a, b)?;
            r.ssim += ssim(a, b)?;
            r.frames += 1;
        }
        if r.frames == 0 {
            return Err(Error::Input("no frames to measure".into()));
        }
        let n = r.frames as f64;
        r.l1 /= n;
        r.psnr /= n;
        r.ssim /= n;
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffReport {
    pub ssim_per_kbps: f64,
    pub psnr_per_kbps: f64,
    pub kbps: f64,
}

impl TradeoffReport {
    pub fn new(quality: &QualityReport, kbps: f64) -> Result<Self> {
        if !(kbps > 0.0) {
            return Err(Error::Input(format!("trade-off ratios need a positive bitrate, got {kbps}")));
        }
        Ok(TradeoffReport {
            ssim_per_kbps: quality.ssim / kbps,
            psnr_per_kbps: quality.psnr / kbps,
            kbps,
        })
    }
}

/// One rate-distortion operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct RdRow {
    pub variant: String,
    pub setting: String,
    pub quality: QualityReport,
    pub tradeoff: TradeoffReport,
}

pub const RD_HEADER: &str = "variant,setting,bitrate_kbps,psnr_db,ssim,l1,ssim_per_kbps,psnr_per_kbps";

/// CSV ordered by variant (first appearance), then bitrate ascending.
pub fn rd_table(rows: &[RdRow]) -> String {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    let mut sorted: Vec<&RdRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        let va = order.iter().position(|v| *v == a.variant).unwrap_or(0);
        let vb = order.iter().position(|v| *v == b.variant).unwrap_or(0);
        va.cmp(&vb).then(a.tradeoff.kbps.total_cmp(&b.tradeoff.kbps))
    });
    let mut out = String::from(RD_HEADER);
    out.push('\n');
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.8},{:.8}",
            r.variant,
            r.setting,
            r.tradeoff.kbps,
            r.quality.psnr,
            r.quality.ssim,
            r.quality.l1,
            r.tradeoff.ssim_per_kbps,
            r.tradeoff.psnr_per_kbps
        );
    }
    out
}
