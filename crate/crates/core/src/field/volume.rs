//! Quadrature of the emission-absorption integral along one ray, in f64.

use crate::error::{Error, Result};

/// Samples along one ray after rendering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub sigmas: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance left after the last interval.
    pub t_end: f64,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    /// `Σ w_i + T_end`, which the quadrature keeps at 1.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.t_end
    }

    /// `Σ w_i c_i`, the foreground part of the ray color.
    pub fn foreground(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (w, ci) in self.weights.iter().zip(&self.colors) {
            for k in 0..3 {
                c[k] += w * ci[k];
            }
        }
        c
    }
}

/// Interval lengths `t_{i+1} - t_i`, the last one reaching `far`.
pub fn intervals(depths: &[f64], far: f64) -> Result<Vec<f64>> {
    let n = depths.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { depths[i + 1] } else { far };
        let d = next - depths[i];
        if !(d >= 0.0) {
            return Err(Error::Usage(format!(
                "sample depths must be sorted and end before the far bound (interval {i} has length {d})"
            )));
        }
        out.push(d);
    }
    Ok(out)
}

/// Renders one ray. Weights are formed as `w_i = T_i - T_{i+1}` so that
/// `Σ w_i + T_end = 1` holds up to rounding, and
/// `C = Σ w_i c_i + T_end · background`.
pub fn volume_render(
    depths: &[f64],
    colors: &[[f64; 3]],
    sigmas: &[f64],
    far: f64,
    background: [f64; 3],
) -> Result<([f64; 3], RaySamples)> {
    if colors.len() != depths.len() || sigmas.len() != depths.len() {
        return Err(Error::Usage("depths, colors and densities differ in length".into()));
    }
    let deltas = intervals(depths, far)?;
    let mut weights = Vec::with_capacity(depths.len());
    let mut t = 1.0f64;
    for (sigma, delta) in sigmas.iter().zip(&deltas) {
        let next = t * (-sigma * delta).exp();
        weights.push(t - next);
        t = next;
    }
    let samples = RaySamples {
        depths: depths.to_vec(),
        colors: colors.to_vec(),
        sigmas: sigmas.to_vec(),
        weights,
        t_end: t,
    };
    let mut c = samples.foreground();
    for k in 0..3 {
        c[k] += t * background[k];
    }
    Ok((c, samples))
}

/// Gradients of a rendered ray with respect to its densities and colors.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrad {
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

/// Backward pass of [`volume_render`] given `dL/dC` and an extra `dL/dT_end`
/// (zero unless the caller consumes the transmittance directly).
pub fn volume_backward(
    samples: &RaySamples,
    far: f64,
    background: [f64; 3],
    color_grad: [f64; 3],
    t_end_grad: f64,
) -> Result<VolumeGrad> {
    let n = samples.len();
    let deltas = intervals(&samples.depths, far)?;
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut sigmas = vec![0.0; n];
    let colors = samples
        .weights
        .iter()
        .map(|w| [w * color_grad[0], w * color_grad[1], w * color_grad[2]])
        .collect();
    // suffix = Σ_{i>k} s_i w_i + dT·T_end, with s_i = dC·c_i
    let mut suffix = (t_end_grad + dot(color_grad, background)) * samples.t_end;
    let mut t_next = samples.t_end;
    for k in (0..n).rev() {
        let s = dot(color_grad, samples.colors[k]);
        sigmas[k] = deltas[k] * (t_next * s - suffix);
        suffix += s * samples.weights[k];
        t_next += samples.weights[k];
    }
    Ok(VolumeGrad { sigmas, colors })
}
