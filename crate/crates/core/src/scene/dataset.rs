use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::{ExpressionFeature, ExpressionTrajectory, GroundTruthRenderer, SceneConfig};
use crate::camera::{HeadPose, POSE_WIDTH};
use crate::error::{Error, Result};
use crate::frame::Frame;

pub const DATASET_MAGIC: &[u8; 4] = b"NVDS";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 2 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub image: Frame,
    pub feature: ExpressionFeature,
    pub pose: HeadPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub fps: f32,
    pub width: usize,
    pub height: usize,
    pub expr_dim: usize,
    pub frames: Vec<DatasetFrame>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames held out for evaluation: the last tenth, rounded up, once there
    /// are at least two frames.
    pub fn held_out_count(&self) -> usize {
        let n = self.frames.len();
        if n < 2 {
            0
        } else {
            n.div_ceil(10)
        }
    }

    pub fn train_count(&self) -> usize {
        self.frames.len() - self.held_out_count()
    }

    pub fn train(&self) -> &[DatasetFrame] {
        &self.frames[..self.train_count()]
    }

    pub fn held_out(&self) -> &[DatasetFrame] {
        &self.frames[self.train_count()..]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let narrow = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit the dataset header")))
        };
        let frame_count =
            u32::try_from(self.frames.len()).map_err(|_| Error::Format("too many frames".into()))?;
        let per_frame = 4 * (POSE_WIDTH + self.expr_dim) + 3 * self.width * self.height;
        let mut out = Vec::with_capacity(HEADER_LEN + per_frame * self.frames.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&frame_count.to_le_bytes());
        out.extend_from_slice(&narrow(self.width, "width")?.to_le_bytes());
        out.extend_from_slice(&narrow(self.height, "height")?.to_le_bytes());
        out.extend_from_slice(&narrow(self.expr_dim, "expression dimension")?.to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        for f in &self.frames {
            if f.feature.len() != self.expr_dim || f.image.width() != self.width || f.image.height() != self.height {
                return Err(Error::Format("dataset frame does not match header dimensions".into()));
            }
            for v in f.pose.to_array() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in f.feature.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&f.image.to_rgb8());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Decode {
                    offset: bytes.len() - r.len(),
                    message: format!("dataset truncated while reading {what}"),
                });
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4, "magic")? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let frame_count = u32::from_le_bytes(take(4, "frame count")?.try_into().unwrap()) as usize;
        let width = u16::from_le_bytes(take(2, "width")?.try_into().unwrap()) as usize;
        let height = u16::from_le_bytes(take(2, "height")?.try_into().unwrap()) as usize;
        let expr_dim = u16::from_le_bytes(take(2, "expression dimension")?.try_into().unwrap()) as usize;
        let fps = f32::from_le_bytes(take(4, "fps")?.try_into().unwrap());
        if width == 0 || height == 0 {
            return Err(Error::Format("dataset frame dimensions must be positive".into()));
        }
        let mut frames = Vec::with_capacity(frame_count.min(1 << 16));
        for _ in 0..frame_count {
            let floats = |b: &[u8]| -> Vec<f32> {
                b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
            };
            let pose = HeadPose::from_slice(&floats(take(4 * POSE_WIDTH, "pose")?))?;
            let feature = ExpressionFeature(floats(take(4 * expr_dim, "feature")?));
            let image = Frame::from_rgb8(width, height, take(3 * width * height, "image")?)?;
            frames.push(DatasetFrame { image, feature, pose });
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after dataset frames", r.len())));
        }
        Ok(Dataset {
            fps,
            width,
            height,
            expr_dim,
            frames,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Renders every trajectory frame at `width x height`. Frames are stored as
/// 8-bit RGB, so the in-memory images are already quantized exactly as they
/// will be read back.
pub fn generate_dataset(
    config: &SceneConfig,
    trajectory: &ExpressionTrajectory,
    width: usize,
    height: usize,
) -> Result<Dataset> {
    if trajectory.is_empty() {
        return Err(Error::Input("cannot build a dataset from an empty trajectory".into()));
    }
    let renderer = GroundTruthRenderer::new(config)?;
    let frames = trajectory
        .frames
        .par_iter()
        .map(|(feature, pose)| {
            let frame = renderer.render(feature, pose, width, height)?;
            let image = Frame::from_rgb8(width, height, &frame.to_rgb8())?;
            Ok(DatasetFrame {
                image,
                feature: feature.clone(),
                pose: *pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        fps: trajectory.fps as f32,
        width,
        height,
        expr_dim: config.expr_dim,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::sample_trajectory;

    fn tiny(frames: usize, res: usize) -> Dataset {
        let cfg = SceneConfig::default();
        let traj = sample_trajectory(&cfg, frames, 3).unwrap();
        generate_dataset(&cfg, &traj, res, res).unwrap()
    }

    #[test]
    fn split_holds_out_last_tenth() {
        let ds = tiny(10, 8);
        assert_eq!(ds.train_count(), 9);
        assert_eq!(ds.held_out().len(), 1);
        assert_eq!(ds.held_out()[0], ds.frames[9]);
    }

    #[test]
    fn resolutions_share_feature_and_pose_streams() {
        let a = tiny(4, 8);
        let b = tiny(4, 16);
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.feature, y.feature);
            assert_eq!(x.pose, y.pose);
            assert_ne!(x.image.width(), y.image.width());
        }
    }

    #[test]
    fn byte_roundtrip_is_exact() {
        let ds = tiny(5, 12);
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(&bytes[..4], DATASET_MAGIC);
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.frames.iter().zip(&ds.frames) {
            let bits = |f: &[f32]| f.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.feature.as_slice()), bits(b.feature.as_slice()));
            assert_eq!(bits(&a.pose.to_array()), bits(&b.pose.to_array()));
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = tiny(2, 8).to_bytes().unwrap();
        match Dataset::from_bytes(&bytes[..bytes.len() - 5]) {
            Err(Error::Decode { offset, .. }) => assert!(offset > HEADER_LEN),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_errors_carry_path() {
        let err = Dataset::read(Path::new("/nonexistent/dir/data.nvds")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/data.nvds"));
    }
}
