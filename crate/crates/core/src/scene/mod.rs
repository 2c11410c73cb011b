//! Synthetic expression-driven head-and-torso scene standing in for a face
//! tracker and real portrait video.

mod dataset;
mod render;
mod trajectory;

pub use dataset::{generate_dataset, Dataset, DatasetFrame, DATASET_MAGIC, DATASET_VERSION};
pub use render::{basis, render_canonical, render_ground_truth, GroundTruthRenderer, BASIS_ABS_SUM, BASIS_LEN};
pub use trajectory::{sample_trajectory, ExpressionTrajectory};

use std::ops::Range;

use crate::camera::Intrinsics;
use crate::config::{fmt_list, parse_array, parse_value, unknown_key, Settings};
use crate::error::{Error, Result};

pub const DEFAULT_EXPR_DIM: usize = 79;

/// Per-frame expression vector with components in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionFeature(pub Vec<f32>);

impl ExpressionFeature {
    pub fn zeros(dim: usize) -> Self {
        ExpressionFeature(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.0.len() != dim {
            return Err(Error::Config(format!(
                "expression feature has {} components, expected {dim}",
                self.0.len()
            )));
        }
        if self.0.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Input("expression components must be finite and within [-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub head_center: [f64; 3],
    pub head_radius: f64,
    pub deformation_seed: u64,
    /// Scale of each harmonic coefficient relative to the base radius.
    pub deformation_amplitude: f64,
    pub deformation_gain: f64,
    pub head_albedo: [f64; 3],
    pub torso_center: [f64; 3],
    pub torso_half_extent: [f64; 3],
    pub torso_rounding: f64,
    pub torso_albedo: [f64; 3],
    pub light_direction: [f64; 3],
    pub ambient: f64,
    pub background: [f64; 3],
    pub expr_dim: usize,
    pub focal: f64,
    pub camera_distance: f64,
    /// Radius of the sphere that bounds the whole scene.
    pub bound_radius: f64,
    /// Sub-samples per pixel side for anti-aliasing.
    pub supersample: usize,
    pub fps: f64,
    pub driver_count: usize,
    pub driver_frequency: [f64; 2],
    pub component_amplitude: f64,
    pub yaw_amplitude: f64,
    pub pitch_amplitude: f64,
    pub pose_frequency: [f64; 2],
    /// Upper bound on `max |δ_t - δ_{t-1}|` between consecutive frames.
    pub smoothness_bound: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            head_center: [0.0, 0.12, 0.0],
            head_radius: 0.2,
            deformation_seed: 1,
            deformation_amplitude: 0.1,
            deformation_gain: 2.0,
            head_albedo: [0.88, 0.68, 0.56],
            torso_center: [0.0, -0.29, 0.0],
            torso_half_extent: [0.28, 0.12, 0.13],
            torso_rounding: 0.05,
            torso_albedo: [0.22, 0.36, 0.62],
            light_direction: [0.4, 0.6, 0.7],
            ambient: 0.35,
            background: [0.55, 0.58, 0.62],
            expr_dim: DEFAULT_EXPR_DIM,
            focal: 1.25,
            camera_distance: 1.4,
            bound_radius: 0.5,
            supersample: 2,
            fps: 25.0,
            driver_count: 4,
            driver_frequency: [0.08, 0.4],
            component_amplitude: 0.6,
            yaw_amplitude: 0.3,
            pitch_amplitude: 0.12,
            pose_frequency: [0.05, 0.15],
            smoothness_bound: 0.25,
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { focal: self.focal }
    }

    /// Radius of the sphere that contains the head for every admissible expression.
    pub fn head_bound_radius(&self) -> f64 {
        self.head_radius * (1.0 + self.deformation_amplitude * BASIS_ABS_SUM)
    }

    /// Worst-case per-frame change of any expression component.
    pub fn max_expression_step(&self) -> f64 {
        3.0 * self.component_amplitude * std::f64::consts::TAU * self.driver_frequency[1] / self.fps
    }

    /// Image rows spanning the head/torso junction seen by the frontal
    /// camera, widened by the trajectory's pitch excursion.
    pub fn seam_band(&self, height: usize) -> Range<usize> {
        let h = height as f64;
        let row = |y: f64| h * (0.5 - self.focal * y / self.camera_distance);
        let head_bottom = self.head_center[1] - self.head_bound_radius();
        let torso_top = self.torso_center[1] + self.torso_half_extent[1];
        let margin = h * self.focal * self.pitch_amplitude.tan();
        let lo = (row(head_bottom) - margin).floor().max(0.0) as usize;
        let hi = ((row(torso_top) + margin).ceil().max(0.0) as usize + 1).min(height);
        lo.min(height.saturating_sub(2))..hi.max(lo + 2).min(height)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("head_radius", self.head_radius),
            ("focal", self.focal),
            ("camera_distance", self.camera_distance),
            ("bound_radius", self.bound_radius),
            ("fps", self.fps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("scene `{name}` must be positive")));
            }
        }
        if self.deformation_amplitude < 0.0 || self.deformation_amplitude * BASIS_ABS_SUM >= 1.0 {
            return Err(Error::Config(format!(
                "deformation amplitude {} could collapse the head radius (limit {:.4})",
                self.deformation_amplitude,
                1.0 / BASIS_ABS_SUM
            )));
        }
        if self.expr_dim == 0 || self.expr_dim > u16::MAX as usize {
            return Err(Error::Config("expression dimension must be in 1..=65535".into()));
        }
        if self.supersample == 0 || self.driver_count == 0 {
            return Err(Error::Config("supersample and driver_count must be at least 1".into()));
        }
        if self.driver_frequency[0] > self.driver_frequency[1] || self.pose_frequency[0] > self.pose_frequency[1] {
            return Err(Error::Config("frequency ranges must be ordered low,high".into()));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::Config("ambient must lie in [0, 1]".into()));
        }
        if self.camera_distance <= self.bound_radius {
            return Err(Error::Config("camera must sit outside the scene bound".into()));
        }
        if self.max_expression_step() > self.smoothness_bound {
            return Err(Error::Config(format!(
                "trajectory parameters allow steps of {:.4}, above the smoothness bound {}",
                self.max_expression_step(),
                self.smoothness_bound
            )));
        }
        Ok(())
    }
}

impl Settings for SceneConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "head_center" => self.head_center = parse_array(key, value)?,
            "head_radius" => self.head_radius = parse_value(key, value)?,
            "deformation_seed" => self.deformation_seed = parse_value(key, value)?,
            "deformation_amplitude" => self.deformation_amplitude = parse_value(key, value)?,
            "deformation_gain" => self.deformation_gain = parse_value(key, value)?,
            "head_albedo" => self.head_albedo = parse_array(key, value)?,
            "torso_center" => self.torso_center = parse_array(key, value)?,
            "torso_half_extent" => self.torso_half_extent = parse_array(key, value)?,
            "torso_rounding" => self.torso_rounding = parse_value(key, value)?,
            "torso_albedo" => self.torso_albedo = parse_array(key, value)?,
            "light_direction" => self.light_direction = parse_array(key, value)?,
            "ambient" => self.ambient = parse_value(key, value)?,
            "background" => self.background = parse_array(key, value)?,
            "expr_dim" => self.expr_dim = parse_value(key, value)?,
            "focal" => self.focal = parse_value(key, value)?,
            "camera_distance" => self.camera_distance = parse_value(key, value)?,
            "bound_radius" => self.bound_radius = parse_value(key, value)?,
            "supersample" => self.supersample = parse_value(key, value)?,
            "fps" => self.fps = parse_value(key, value)?,
            "driver_count" => self.driver_count = parse_value(key, value)?,
            "driver_frequency" => self.driver_frequency = parse_array(key, value)?,
            "component_amplitude" => self.component_amplitude = parse_value(key, value)?,
            "yaw_amplitude" => self.yaw_amplitude = parse_value(key, value)?,
            "pitch_amplitude" => self.pitch_amplitude = parse_value(key, value)?,
            "pose_frequency" => self.pose_frequency = parse_array(key, value)?,
            "smoothness_bound" => self.smoothness_bound = parse_value(key, value)?,
            _ => return Err(unknown_key("scene", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (k.to_string(), v);
        vec![
            e("head_center", fmt_list(&self.head_center)),
            e("head_radius", self.head_radius.to_string()),
            e("deformation_seed", self.deformation_seed.to_string()),
            e("deformation_amplitude", self.deformation_amplitude.to_string()),
            e("deformation_gain", self.deformation_gain.to_string()),
            e("head_albedo", fmt_list(&self.head_albedo)),
            e("torso_center", fmt_list(&self.torso_center)),
            e("torso_half_extent", fmt_list(&self.torso_half_extent)),
            e("torso_rounding", self.torso_rounding.to_string()),
            e("torso_albedo", fmt_list(&self.torso_albedo)),
            e("light_direction", fmt_list(&self.light_direction)),
            e("ambient", self.ambient.to_string()),
            e("background", fmt_list(&self.background)),
            e("expr_dim", self.expr_dim.to_string()),
            e("focal", self.focal.to_string()),
            e("camera_distance", self.camera_distance.to_string()),
            e("bound_radius", self.bound_radius.to_string()),
            e("supersample", self.supersample.to_string()),
            e("fps", self.fps.to_string()),
            e("driver_count", self.driver_count.to_string()),
            e("driver_frequency", fmt_list(&self.driver_frequency)),
            e("component_amplitude", self.component_amplitude.to_string()),
            e("yaw_amplitude", self.yaw_amplitude.to_string()),
            e("pitch_amplitude", self.pitch_amplitude.to_string()),
            e("pose_frequency", fmt_list(&self.pose_frequency)),
            e("smoothness_bound", self.smoothness_bound.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        SceneConfig::default().validate().unwrap();
    }

    #[test]
    fn excessive_amplitude_rejected() {
        let cfg = SceneConfig {
            deformation_amplitude: 0.2,
            ..SceneConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn settings_roundtrip() {
        let cfg = SceneConfig::default();
        let mut other = SceneConfig {
            head_radius: 0.3,
            deformation_seed: 99,
            ..SceneConfig::default()
        };
        for (k, v) in cfg.entries() {
            other.set(&k, &v).unwrap();
        }
        assert_eq!(other, cfg);
    }
}
