use rayon::prelude::*;

use super::{ExpressionFeature, SceneConfig};
use crate::camera::{add, dot, norm, normalize, scale, sphere_bounds, sub, HeadPose, Vec3};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::numerics::Rng;

pub const BASIS_LEN: usize = 9;

/// Sum over the basis of `max |Y_k|` on the unit sphere.
pub const BASIS_ABS_SUM: f64 = 9.0;

const TRACE_STEPS: usize = 128;
const TRACE_TOLERANCE: f64 = 1e-4;
/// Step damping inside the deformed head, whose implicit function is not a
/// true distance.
const HEAD_STEP: f64 = 0.6;
const NORMAL_EPS: f64 = 1e-4;

/// Real harmonics of orders 0-2 on the unit sphere, each scaled to peak at 1.
pub fn basis(u: Vec3) -> [f64; BASIS_LEN] {
    let [x, y, z] = u;
    [
        1.0,
        x,
        y,
        z,
        2.0 * x * y,
        2.0 * y * z,
        2.0 * z * x,
        x * x - y * y,
        0.5 * (3.0 * z * z - 1.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Surface {
    Head,
    Torso,
}

/// Analytic ray-cast renderer for one scene configuration.
#[derive(Debug, Clone)]
pub struct GroundTruthRenderer {
    config: SceneConfig,
    /// `BASIS_LEN x expr_dim`, row-major.
    deformation: Vec<f64>,
    light: Vec3,
}

impl GroundTruthRenderer {
    pub fn new(config: &SceneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seeded(config.deformation_seed);
        let norm = 1.0 / (config.expr_dim as f64).sqrt();
        let deformation = (0..BASIS_LEN * config.expr_dim)
            .map(|_| rng.normal() * norm)
            .collect();
        Ok(GroundTruthRenderer {
            config: config.clone(),
            deformation,
            light: normalize(config.light_direction),
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    /// Harmonic coefficients `tanh(gain * M δ)` for an expression.
    pub fn coefficients(&self, delta: &ExpressionFeature) -> [f64; BASIS_LEN] {
        let dim = self.config.expr_dim;
        let mut c = [0.0; BASIS_LEN];
        for (k, ck) in c.iter_mut().enumerate() {
            let row = &self.deformation[k * dim..(k + 1) * dim];
            let s: f64 = row.iter().zip(delta.as_slice()).map(|(m, d)| m * *d as f64).sum();
            *ck = (self.config.deformation_gain * s).tanh();
        }
        c
    }

    fn head_radius_at(&self, coeffs: &[f64; BASIS_LEN], u: Vec3) -> f64 {
        let y = basis(u);
        let m: f64 = coeffs.iter().zip(&y).map(|(c, b)| c * b).sum();
        self.config.head_radius * (1.0 + self.config.deformation_amplitude * m)
    }

    /// Signed implicit value of the head (negative inside).
    fn head_value(&self, coeffs: &[f64; BASIS_LEN], p: Vec3) -> f64 {
        let rel = sub(p, self.config.head_center);
        let rho = norm(rel);
        if rho < 1e-12 {
            return -self.config.head_radius;
        }
        rho - self.head_radius_at(coeffs, scale(rel, 1.0 / rho))
    }

    /// Conservative marching distance for the head.
    fn head_step(&self, coeffs: &[f64; BASIS_LEN], p: Vec3) -> f64 {
        let rho = norm(sub(p, self.config.head_center));
        let outer = rho - self.config.head_bound_radius();
        if outer > TRACE_TOLERANCE {
            outer
        } else {
            HEAD_STEP * self.head_value(coeffs, p)
        }
    }

    fn torso_value(&self, p: Vec3) -> f64 {
        let c = &self.config;
        let r = c.torso_rounding;
        let mut outside: f64 = 0.0;
        let mut inner = f64::NEG_INFINITY;
        for i in 0..3 {
            let q = (p[i] - c.torso_center[i]).abs() - (c.torso_half_extent[i] - r);
            outside += q.max(0.0).powi(2);
            inner = inner.max(q);
        }
        outside.sqrt() + inner.min(0.0) - r
    }

    fn trace(&self, coeffs: &[f64; BASIS_LEN], origin: Vec3, dir: Vec3) -> Option<(Vec3, Surface)> {
        let (near, far) = sphere_bounds(origin, dir, self.config.bound_radius)?;
        let mut t = near;
        for _ in 0..TRACE_STEPS {
            let p = add(origin, scale(dir, t));
            let h = self.head_value(coeffs, p);
            let b = self.torso_value(p);
            if h < TRACE_TOLERANCE || b < TRACE_TOLERANCE {
                let surface = if h <= b { Surface::Head } else { Surface::Torso };
                return Some((p, surface));
            }
            t += self.head_step(coeffs, p).min(b);
            if t > far {
                return None;
            }
        }
        None
    }

    fn normal(&self, coeffs: &[f64; BASIS_LEN], p: Vec3, surface: Surface) -> Vec3 {
        let f = |q: Vec3| match surface {
            Surface::Head => self.head_value(coeffs, q),
            Surface::Torso => self.torso_value(q),
        };
        let mut g = [0.0; 3];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut a = p;
            let mut b = p;
            a[i] += NORMAL_EPS;
            b[i] -= NORMAL_EPS;
            *gi = f(a) - f(b);
        }
        normalize(g)
    }

    fn shade_ray(&self, coeffs: &[f64; BASIS_LEN], origin: Vec3, dir: Vec3) -> Vec3 {
        let c = &self.config;
        match self.trace(coeffs, origin, dir) {
            None => c.background,
            Some((p, surface)) => {
                let n = self.normal(coeffs, p, surface);
                let lambert = dot(n, self.light).max(0.0);
                let albedo = match surface {
                    Surface::Head => c.head_albedo,
                    Surface::Torso => c.torso_albedo,
                };
                scale(albedo, c.ambient + (1.0 - c.ambient) * lambert)
            }
        }
    }

    pub fn render(&self, delta: &ExpressionFeature, pose: &HeadPose, width: usize, height: usize) -> Result<Frame> {
        pose.validate()?;
        delta.validate(self.config.expr_dim)?;
        if width == 0 || height == 0 {
            return Err(Error::Input("frame dimensions must be positive".into()));
        }
        let coeffs = self.coefficients(delta);
        Ok(self.render_with(&coeffs, pose, width, height))
    }

    fn render_with(&self, coeffs: &[f64; BASIS_LEN], pose: &HeadPose, width: usize, height: usize) -> Frame {
        let intr = self.config.intrinsics();
        let s = self.config.supersample;
        let inv = 1.0 / (s * s) as f64;
        let rows: Vec<Vec<f32>> = (0..height)
            .into_par_iter()
            .map(|py| {
                let mut row = Vec::with_capacity(width * 3);
                for px in 0..width {
                    let mut acc = [0.0; 3];
                    for sy in 0..s {
                        for sx in 0..s {
                            let u = px as f64 + (sx as f64 + 0.5) / s as f64;
                            let v = py as f64 + (sy as f64 + 0.5) / s as f64;
                            let (o, d) = intr.ray(pose, width, height, u, v);
                            acc = add(acc, self.shade_ray(coeffs, o, d));
                        }
                    }
                    row.extend(acc.iter().map(|a| (a * inv).clamp(0.0, 1.0) as f32));
                }
                row
            })
            .collect();
        Frame::from_data(width, height, rows.concat()).expect("shaded samples lie in [0, 1]")
    }

    /// Render of the undeformed head for a pose.
    pub fn render_canonical(&self, pose: &HeadPose, width: usize, height: usize) -> Result<Frame> {
        pose.validate()?;
        if width == 0 || height == 0 {
            return Err(Error::Input("frame dimensions must be positive".into()));
        }
        Ok(self.render_with(&[0.0; BASIS_LEN], pose, width, height))
    }

    /// Whether the ray through pixel `(px, py)` can touch the head for some expression.
    pub fn pixel_may_see_head(&self, pose: &HeadPose, width: usize, height: usize, px: usize, py: usize) -> bool {
        let intr = self.config.intrinsics();
        let s = self.config.supersample;
        let r = self.config.head_bound_radius();
        (0..s * s).any(|i| {
            let u = px as f64 + ((i % s) as f64 + 0.5) / s as f64;
            let v = py as f64 + ((i / s) as f64 + 0.5) / s as f64;
            let (o, d) = intr.ray(pose, width, height, u, v);
            sphere_bounds(sub(o, self.config.head_center), d, r).is_some()
        })
    }
}

pub fn render_ground_truth(
    config: &SceneConfig,
    delta: &ExpressionFeature,
    pose: &HeadPose,
    width: usize,
    height: usize,
) -> Result<Frame> {
    GroundTruthRenderer::new(config)?.render(delta, pose, width, height)
}

pub fn render_canonical(config: &SceneConfig, pose: &HeadPose, width: usize, height: usize) -> Result<Frame> {
    GroundTruthRenderer::new(config)?.render_canonical(pose, width, height)
}
