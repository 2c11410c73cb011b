//! Pinhole camera model shared by the ground-truth renderer and the field renderer.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

/// Camera-to-world transform: 3x3 rotation (row-major) and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadPose {
    pub rotation: [f32; 9],
    pub translation: [f32; 3],
}

pub const POSE_WIDTH: usize = 12;

impl HeadPose {
    pub fn identity_at(distance: f64) -> Self {
        HeadPose {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0, 0.0, distance as f32],
        }
    }

    /// Camera orbiting the origin at `distance`, rotated by yaw (about +y) then pitch (about +x).
    pub fn orbit(yaw: f64, pitch: f64, distance: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        // R = Ry(yaw) * Rx(pitch)
        let r = [
            [cy, sy * sp, sy * cp],
            [0.0, cp, -sp],
            [-sy, cy * sp, cy * cp],
        ];
        let t = [r[0][2] * distance, r[1][2] * distance, r[2][2] * distance];
        let mut rotation = [0f32; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[i][j] as f32;
            }
        }
        HeadPose {
            rotation,
            translation: [t[0] as f32, t[1] as f32, t[2] as f32],
        }
    }

    pub fn to_array(&self) -> [f32; POSE_WIDTH] {
        let mut out = [0f32; POSE_WIDTH];
        out[..9].copy_from_slice(&self.rotation);
        out[9..].copy_from_slice(&self.translation);
        out
    }

    pub fn from_slice(values: &[f32]) -> Result<Self> {
        if values.len() != POSE_WIDTH {
            return Err(Error::Config(format!(
                "pose needs {POSE_WIDTH} values, got {}",
                values.len()
            )));
        }
        let mut rotation = [0f32; 9];
        rotation.copy_from_slice(&values[..9]);
        let mut translation = [0f32; 3];
        translation.copy_from_slice(&values[9..]);
        Ok(HeadPose {
            rotation,
            translation,
        })
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        self.rotation[3 * i + j] as f64
    }

    pub fn determinant(&self) -> f64 {
        self.r(0, 0) * (self.r(1, 1) * self.r(2, 2) - self.r(1, 2) * self.r(2, 1))
            - self.r(0, 1) * (self.r(1, 0) * self.r(2, 2) - self.r(1, 2) * self.r(2, 0))
            + self.r(0, 2) * (self.r(1, 0) * self.r(2, 1) - self.r(1, 1) * self.r(2, 0))
    }

    /// Largest deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| self.r(k, i) * self.r(k, j)).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }

    /// Rejects degenerate rotations; quantized poses are accepted as long as
    /// they are invertible because ray directions are renormalized.
    pub fn validate(&self) -> Result<()> {
        if self.rotation.iter().chain(&self.translation).any(|v| !v.is_finite()) {
            return Err(Error::Input("pose contains non-finite values".into()));
        }
        let det = self.determinant();
        if det.abs() < 1e-6 {
            return Err(Error::Input(format!("degenerate pose rotation (det {det:e})")));
        }
        Ok(())
    }

    pub fn origin(&self) -> Vec3 {
        [
            self.translation[0] as f64,
            self.translation[1] as f64,
            self.translation[2] as f64,
        ]
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        [
            self.r(0, 0) * v[0] + self.r(0, 1) * v[1] + self.r(0, 2) * v[2],
            self.r(1, 0) * v[0] + self.r(1, 1) * v[1] + self.r(1, 2) * v[2],
            self.r(2, 0) * v[0] + self.r(2, 1) * v[1] + self.r(2, 2) * v[2],
        ]
    }
}

/// Pinhole intrinsics expressed per unit of image resolution so the field of
/// view does not depend on the pixel count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
}

impl Intrinsics {
    /// World-space ray through image-plane position `(u, v)` in pixels.
    /// Camera looks down its local -z axis with +y up.
    pub fn ray(&self, pose: &HeadPose, width: usize, height: usize, u: f64, v: f64) -> (Vec3, Vec3) {
        let fx = self.focal * width as f64;
        let fy = self.focal * height as f64;
        let cam = [
            (u - width as f64 * 0.5) / fx,
            -(v - height as f64 * 0.5) / fy,
            -1.0,
        ];
        (pose.origin(), normalize(pose.rotate(cam)))
    }

    pub fn pixel_ray(&self, pose: &HeadPose, width: usize, height: usize, px: usize, py: usize) -> (Vec3, Vec3) {
        self.ray(pose, width, height, px as f64 + 0.5, py as f64 + 0.5)
    }
}

/// Entry/exit depths of a ray through a sphere centred at the origin.
pub fn sphere_bounds(origin: Vec3, dir: Vec3, radius: f64) -> Option<(f64, f64)> {
    let b = dot(origin, dir);
    let c = dot(origin, origin) - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let near = (-b - s).max(0.0);
    let far = -b + s;
    (far > near).then_some((near, far))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orbit_poses_are_rotations_looking_at_origin() {
        let p = HeadPose::orbit(0.3, -0.1, 1.4);
        assert!(p.orthonormality_error() < 1e-6);
        assert!((p.determinant() - 1.0).abs() < 1e-6);
        let intr = Intrinsics { focal: 1.25 };
        let (o, d) = intr.ray(&p, 64, 64, 32.0, 32.0);
        let to_center = normalize(scale(o, -1.0));
        assert!(dot(d, to_center) > 1.0 - 1e-6);
    }

    #[test]
    fn degenerate_pose_rejected() {
        let mut p = HeadPose::identity_at(1.0);
        p.rotation = [0.0; 9];
        assert!(matches!(p.validate(), Err(Error::Input(_))));
    }

    #[test]
    fn sphere_miss_and_hit() {
        assert!(sphere_bounds([0.0, 2.0, 2.0], [0.0, 0.0, -1.0], 0.5).is_none());
        let (n, f) = sphere_bounds([0.0, 0.0, 2.0], [0.0, 0.0, -1.0], 0.5).unwrap();
        assert!((n - 1.5).abs() < 1e-12 && (f - 2.5).abs() < 1e-12);
    }
}
