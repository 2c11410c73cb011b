use crate::error::{Error, Result};

/// RGB image with interleaved samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input("frame dimensions must be positive".into()));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Ok(Frame {
            width,
            height,
            data,
        })
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input("frame dimensions must be positive".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "frame data has {} samples, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("frame samples must lie in [0, 1]".into()));
        }
        Ok(Frame {
            width,
            height,
            data,
        })
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Input("RGB8 buffer size mismatch".into()));
        }
        Frame::from_data(width, height, bytes.iter().map(|b| *b as f32 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Frame> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Input(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f64; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.pixel(x * factor + dx, y * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c] as f64;
                        }
                    }
                }
                data.extend(acc.iter().map(|v| (v * norm) as f32));
            }
        }
        Frame::from_data(w, h, data)
    }

    pub fn mean_abs_diff(&self, other: &Frame) -> Result<f64> {
        self.check_same(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub(crate) fn check_same(&self, other: &Frame) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Input(format!(
                "frame dimensions differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Binary PPM (P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(Frame::from_data(1, 1, vec![0.0, 1.5, 0.2]).is_err());
        assert!(Frame::filled(0, 3, [0.0; 3]).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let f = Frame::from_data(2, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let d = f.downsample(2).unwrap();
        assert_eq!(d.pixel(0, 0), [0.5; 3]);
    }

    #[test]
    fn rgb8_roundtrip_is_exact_on_byte_grid() {
        let bytes: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let f = Frame::from_rgb8(4, 4, &bytes).unwrap();
        assert_eq!(f.to_rgb8(), bytes);
    }
}
