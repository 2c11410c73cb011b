use crate::camera::{sphere_bounds, Vec3};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Uniform floor added to every bin weight before inverse-CDF sampling.
pub const WEIGHT_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        let n = crate::camera::norm(direction);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("ray direction has norm {n}")));
        }
        if !(near < far) {
            return Err(Error::Input(format!("ray bounds [{near}, {far}] are empty")));
        }
        Ok(Ray {
            origin,
            direction,
            near,
            far,
        })
    }

    /// Clips a ray to the scene's bounding sphere; `None` when it misses.
    pub fn clipped(origin: Vec3, direction: Vec3, radius: f64) -> Option<Self> {
        sphere_bounds(origin, direction, radius).map(|(near, far)| Ray {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// One depth per equal-width bin of `[near, far]`: a uniform draw when `rng`
/// is given, the bin midpoint otherwise.
pub fn sample_coarse(ray: &Ray, count: usize, rng: Option<&mut Rng>) -> Vec<f64> {
    let width = (ray.far - ray.near) / count as f64;
    match rng {
        Some(rng) => (0..count)
            .map(|i| ray.near + (i as f64 + rng.uniform()) * width)
            .collect(),
        None => (0..count).map(|i| ray.near + (i as f64 + 0.5) * width).collect(),
    }
}

/// Draws `count` depths from the piecewise-constant distribution whose mass
/// on `[t_i, t_{i+1})` (last interval ending at `far`) is proportional to
/// `weights[i] + WEIGHT_FLOOR`, and returns them merged with `depths`, sorted.
///
/// Draws are stratified: the `j`-th uses `u = (j + ξ) / count` with `ξ`
/// uniform when `rng` is given and `0.5` otherwise.
pub fn sample_fine(depths: &[f64], weights: &[f64], far: f64, count: usize, rng: Option<&mut Rng>) -> Vec<f64> {
    let mut merged = depths.to_vec();
    if count == 0 || depths.is_empty() {
        return merged;
    }
    let n = depths.len();
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut total = 0.0;
    for w in weights.iter().take(n) {
        total += w.max(0.0) + WEIGHT_FLOOR;
        cdf.push(total);
    }
    let draw = |j: usize, rng: &mut Option<&mut Rng>| {
        let xi = rng.as_mut().map_or(0.5, |r| r.uniform());
        (j as f64 + xi) / count as f64 * total
    };
    let mut rng = rng;
    let mut bin = 0;
    for j in 0..count {
        let u = draw(j, &mut rng);
        while bin + 1 < n && cdf[bin + 1] <= u {
            bin += 1;
        }
        let lo = depths[bin];
        let hi = if bin + 1 < n { depths[bin + 1] } else { far };
        let mass = cdf[bin + 1] - cdf[bin];
        let frac = ((u - cdf[bin]) / mass).clamp(0.0, 1.0);
        merged.push(lo + frac * (hi - lo));
    }
    merged.sort_by(|a, b| a.total_cmp(b));
    merged
}
