//! Batched two-stage rendering of head and torso fields, with the matching
//! backward pass used by training and gradient checks.
//!
//! Rays are processed in chunks. Within a chunk every sample of every ray goes
//! through one GEMM-backed forward call per network; the per-ray columns
//! (direction, conditioning, code) enter as row groups so they are multiplied
//! once per ray.

use rayon::prelude::*;

use crate::camera::{HeadPose, Intrinsics, Vec3};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::numerics::{MlpTape, Real, Rng, RowGroups, Tensor2};

use super::model::{decode_raw, Model, ModelSpec, Part, Stage, RAW_OUTPUTS};
use super::sampling::{sample_coarse, sample_fine, Ray};
use super::volume::{volume_backward, volume_render, RaySamples};

/// Rays rendered together in one forward call.
pub const RENDER_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub jitter: bool,
    pub background: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl RenderSettings {
    /// Deterministic (midpoint) settings for a model at a resolution.
    pub fn for_model(spec: &ModelSpec, coarse: usize, fine: usize, width: usize, height: usize) -> Self {
        RenderSettings {
            coarse_samples: coarse,
            fine_samples: fine,
            jitter: false,
            background: spec.background,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_samples < 2 {
            return Err(Error::Config(format!(
                "at least 2 coarse samples are required, got {}",
                self.coarse_samples
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("render resolution must be positive".into()));
        }
        Ok(())
    }
}

/// One ray to render; `cond` indexes the conditioning table passed alongside,
/// `index` selects the ray's random substream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayQuery {
    pub origin: Vec3,
    pub direction: Vec3,
    pub cond: usize,
    pub index: u64,
}

/// Depths used on one ray: coarse, and the merged fine sets per field.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RayDepths {
    pub coarse: Vec<f64>,
    pub head_fine: Vec<f64>,
    pub torso_fine: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum DepthSource<'a> {
    /// Stratified jitter from `Rng::substream(seed, stream, ray.index)`.
    Random { seed: u64, stream: u64 },
    Midpoint,
    /// Replays recorded depths, one entry per query (empty for missed rays).
    Fixed(&'a [RayDepths]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayOutput {
    pub coarse: [f64; 3],
    pub fine: [f64; 3],
    pub depths: RayDepths,
}

/// Forward record of one network over a chunk.
#[derive(Debug, Clone)]
struct PassTape<R> {
    tape: MlpTape<R>,
    /// One entry per hit ray, rendered against a black background.
    samples: Vec<RaySamples>,
}

#[derive(Debug, Clone)]
pub struct ChunkTape<R> {
    /// Index into the query slice and far bound for every ray that hit the bound.
    hits: Vec<(usize, f64)>,
    passes: [[PassTape<R>; 2]; 2],
    background: [f64; 3],
}

impl<R: Real> ChunkTape<R> {
    /// ReLU sign pattern over every recorded network pass; finite
    /// differences are only meaningful when it does not change.
    pub fn relu_signature(&self, model: &Model<R>) -> Vec<bool> {
        let mut sig = Vec::new();
        for part in [Part::Head, Part::Torso] {
            for stage in [Stage::Coarse, Stage::Fine] {
                let pass = &self.passes[part_index(part)][stage_index(stage)];
                sig.extend(pass.tape.relu_signature(model.field(part).net(stage)));
            }
        }
        sig
    }
}

fn stage_index(stage: Stage) -> usize {
    match stage {
        Stage::Coarse => 0,
        Stage::Fine => 1,
    }
}

fn part_index(part: Part) -> usize {
    match part {
        Part::Head => 0,
        Part::Torso => 1,
    }
}

fn position_tensor<R: Real>(spec: &ModelSpec, rays: &[Ray], depths: &[&[f64]]) -> (Tensor2<R>, Vec<usize>) {
    let total: usize = depths.iter().map(|d| d.len()).sum();
    let pw = spec.position_width();
    let mut local = Tensor2::zeros(total, pw);
    let mut bounds = Vec::with_capacity(rays.len() + 1);
    bounds.push(0);
    let mut row = 0;
    for (ray, ds) in rays.iter().zip(depths) {
        for t in ds.iter() {
            spec.position_columns(ray.at(*t), local.row_mut(row));
            row += 1;
        }
        bounds.push(row);
    }
    (local, bounds)
}

fn run_pass<R: Real>(
    model: &Model<R>,
    part: Part,
    stage: Stage,
    local: Tensor2<R>,
    groups: RowGroups<R>,
    rays: &[Ray],
    depths: &[&[f64]],
) -> Result<PassTape<R>> {
    let spec = &model.spec;
    let (out, tape) = model.field(part).net(stage).forward_grouped(local, groups.clone())?;
    let mut samples = Vec::with_capacity(rays.len());
    for (j, ray) in rays.iter().enumerate() {
        let rows = groups.bounds[j]..groups.bounds[j + 1];
        let mut colors = Vec::with_capacity(rows.len());
        let mut sigmas = Vec::with_capacity(rows.len());
        for r in rows {
            let (c, s) = decode_raw(spec, out.row(r));
            colors.push(c);
            sigmas.push(s);
        }
        let (_, smp) = volume_render(depths[j], &colors, &sigmas, ray.far, [0.0; 3])?;
        samples.push(smp);
    }
    Ok(PassTape { tape, samples })
}

/// `C = C_head + T_head · (C_torso + T_torso · background)`.
pub fn composite(head: &RaySamples, torso: &RaySamples, background: [f64; 3]) -> [f64; 3] {
    let ch = head.foreground();
    let ct = torso.foreground();
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = ch[k] + head.t_end * (ct[k] + torso.t_end * background[k]);
    }
    c
}

/// Renders a chunk of rays. `conditioning[q.cond]` is the conditioning vector
/// of query `q`. The tape is only recorded when `record` is set.
pub fn forward_chunk<R: Real>(
    model: &Model<R>,
    queries: &[RayQuery],
    conditioning: &[Vec<R>],
    settings: &RenderSettings,
    source: DepthSource<'_>,
    record: bool,
) -> Result<(Vec<RayOutput>, Option<ChunkTape<R>>)> {
    let spec = &model.spec;
    let cw = spec.conditioning_width();
    if let Some(c) = conditioning.iter().find(|c| c.len() != cw) {
        return Err(Error::Config(format!(
            "conditioning width {} does not match the model's {cw}",
            c.len()
        )));
    }
    if let DepthSource::Fixed(d) = source {
        if d.len() != queries.len() {
            return Err(Error::Usage("fixed depths must cover every query".into()));
        }
    }
    let bg = settings.background;
    let mut outputs: Vec<RayOutput> = queries
        .iter()
        .map(|_| RayOutput {
            coarse: bg,
            fine: bg,
            depths: RayDepths::default(),
        })
        .collect();
    let mut hits = Vec::new();
    let mut rays = Vec::new();
    let mut rngs = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        if q.cond >= conditioning.len() {
            return Err(Error::Usage(format!("query {qi} refers to missing conditioning {}", q.cond)));
        }
        let Some(ray) = Ray::clipped(q.origin, q.direction, spec.bound_radius) else {
            continue;
        };
        if let DepthSource::Fixed(d) = source {
            if d[qi].coarse.is_empty() {
                continue;
            }
        }
        hits.push((qi, ray.far));
        rays.push(ray);
        rngs.push(match source {
            DepthSource::Random { seed, stream } => Some(Rng::substream(seed, stream, q.index)),
            _ => None,
        });
    }
    if hits.is_empty() {
        return Ok((outputs, None));
    }

    let mut group_inputs = Tensor2::zeros(hits.len(), spec.ray_width());
    for (j, (qi, _)) in hits.iter().enumerate() {
        let q = &queries[*qi];
        spec.ray_columns(q.direction, &conditioning[q.cond], &model.code, group_inputs.row_mut(j));
    }

    let coarse: Vec<Vec<f64>> = match source {
        DepthSource::Fixed(d) => hits.iter().map(|(qi, _)| d[*qi].coarse.clone()).collect(),
        _ => rays
            .iter()
            .zip(rngs.iter_mut())
            .map(|(ray, rng)| sample_coarse(ray, settings.coarse_samples, rng.as_mut()))
            .collect(),
    };
    let coarse_refs: Vec<&[f64]> = coarse.iter().map(|d| d.as_slice()).collect();
    let (local, bounds) = position_tensor(spec, &rays, &coarse_refs);
    let groups = RowGroups::new(group_inputs, bounds)?;
    let head_c = run_pass(model, Part::Head, Stage::Coarse, local.clone(), groups.clone(), &rays, &coarse_refs)?;
    let torso_c = run_pass(model, Part::Torso, Stage::Coarse, local, groups.clone(), &rays, &coarse_refs)?;

    let mut fine_depths = Vec::with_capacity(2);
    for (part, pass) in [(Part::Head, &head_c), (Part::Torso, &torso_c)] {
        let depths: Vec<Vec<f64>> = match source {
            DepthSource::Fixed(d) => hits
                .iter()
                .map(|(qi, _)| match part {
                    Part::Head => d[*qi].head_fine.clone(),
                    Part::Torso => d[*qi].torso_fine.clone(),
                })
                .collect(),
            _ => (0..rays.len())
                .map(|j| {
                    sample_fine(
                        &coarse[j],
                        &pass.samples[j].weights,
                        rays[j].far,
                        settings.fine_samples,
                        rngs[j].as_mut(),
                    )
                })
                .collect(),
        };
        fine_depths.push(depths);
    }
    let mut fine_passes = Vec::with_capacity(2);
    for (pi, part) in [Part::Head, Part::Torso].into_iter().enumerate() {
        let refs: Vec<&[f64]> = fine_depths[pi].iter().map(|d| d.as_slice()).collect();
        let (local, bounds) = position_tensor(spec, &rays, &refs);
        let groups = RowGroups::new(groups.inputs.clone(), bounds)?;
        fine_passes.push(run_pass(model, part, Stage::Fine, local, groups, &rays, &refs)?);
    }
    let torso_f = fine_passes.pop().expect("two fine passes");
    let head_f = fine_passes.pop().expect("two fine passes");

    let [head_fine, torso_fine] = <[Vec<Vec<f64>>; 2]>::try_from(fine_depths).expect("two fields");
    for (j, (((qi, _), c), (hf, tf))) in hits
        .iter()
        .zip(coarse)
        .zip(head_fine.into_iter().zip(torso_fine))
        .enumerate()
    {
        outputs[*qi] = RayOutput {
            coarse: composite(&head_c.samples[j], &torso_c.samples[j], bg),
            fine: composite(&head_f.samples[j], &torso_f.samples[j], bg),
            depths: RayDepths {
                coarse: c,
                head_fine: hf,
                torso_fine: tf,
            },
        };
    }
    let tape = record.then(|| ChunkTape {
        hits,
        passes: [[head_c, head_f], [torso_c, torso_f]],
        background: bg,
    });
    Ok((outputs, tape))
}

/// Backpropagates per-ray color gradients of both stages through a recorded
/// chunk. Parameter gradients accumulate into `grads`; gradients with respect
/// to the conditioning vectors accumulate into `cond_grads`, indexed like the
/// conditioning table given to [`forward_chunk`].
pub fn backward_chunk<R: Real>(
    model: &Model<R>,
    queries: &[RayQuery],
    tape: &ChunkTape<R>,
    color_grads: &[[[f64; 3]; 2]],
    grads: &mut Model<R>,
    cond_grads: &mut [Vec<R>],
) -> Result<()> {
    if color_grads.len() != queries.len() {
        return Err(Error::Usage("one color gradient pair per query is required".into()));
    }
    let spec = &model.spec;
    let bg = tape.background;
    let dw = spec.direction_width();
    let cw = spec.conditioning_width();
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    for stage in [Stage::Coarse, Stage::Fine] {
        let si = stage_index(stage);
        let head = &tape.passes[part_index(Part::Head)][si];
        let torso = &tape.passes[part_index(Part::Torso)][si];
        // per-field (dC, dT_end) from the compositing rule
        let mut field_grads = [Vec::with_capacity(tape.hits.len()), Vec::with_capacity(tape.hits.len())];
        for (j, (qi, _)) in tape.hits.iter().enumerate() {
            let g = color_grads[*qi][si];
            let (h, t) = (&head.samples[j], &torso.samples[j]);
            let ct = t.foreground();
            let behind = [ct[0] + t.t_end * bg[0], ct[1] + t.t_end * bg[1], ct[2] + t.t_end * bg[2]];
            field_grads[0].push((g, dot(g, behind)));
            let th = h.t_end;
            field_grads[1].push(([th * g[0], th * g[1], th * g[2]], th * dot(g, bg)));
        }
        for part in [Part::Head, Part::Torso] {
            let pass = &tape.passes[part_index(part)][si];
            let out = pass.tape.output();
            let mut out_grad = Tensor2::<R>::zeros(out.rows(), RAW_OUTPUTS);
            let mut row = 0;
            for (j, (_, far)) in tape.hits.iter().enumerate() {
                let smp = &pass.samples[j];
                let (dc, dt) = field_grads[part_index(part)][j];
                let vg = volume_backward(smp, *far, [0.0; 3], dc, dt)?;
                for i in 0..smp.len() {
                    let raw = out.row(row);
                    let g = out_grad.row_mut(row);
                    for k in 0..3 {
                        let c = smp.colors[i][k];
                        g[k] = R::of(vg.colors[i][k] * c * (1.0 - c));
                    }
                    g[3] = R::of(vg.sigmas[i] * spec.density_slope(raw[3]));
                    row += 1;
                }
            }
            let net = model.field(part).net(stage);
            let back = net.backward(&pass.tape, &out_grad, grads.field_mut(part).net_mut(stage), false)?;
            let group_grad = back
                .group_grad
                .ok_or_else(|| Error::Usage("field pass was recorded without row groups".into()))?;
            for (j, (qi, _)) in tape.hits.iter().enumerate() {
                let gr = group_grad.row(j);
                let target = &mut cond_grads[queries[*qi].cond];
                for (t, v) in target.iter_mut().zip(&gr[dw..dw + cw]) {
                    *t += *v;
                }
                for (t, v) in grads.code.iter_mut().zip(&gr[dw + cw..]) {
                    *t += *v;
                }
            }
        }
    }
    Ok(())
}

/// Renders a full frame from a conditioning vector and pose. The output
/// resolution comes from `settings` alone.
pub fn render_frame<R: Real>(
    model: &Model<R>,
    conditioning: &[R],
    pose: &HeadPose,
    settings: &RenderSettings,
) -> Result<Frame> {
    settings.validate()?;
    pose.validate()?;
    let (w, h) = (settings.width, settings.height);
    let intr = Intrinsics {
        focal: model.spec.focal,
    };
    let queries: Vec<RayQuery> = (0..w * h)
        .map(|i| {
            let (origin, direction) = intr.pixel_ray(pose, w, h, i % w, i / w);
            RayQuery {
                origin,
                direction,
                cond: 0,
                index: i as u64,
            }
        })
        .collect();
    let table = vec![conditioning.to_vec()];
    let source = if settings.jitter {
        DepthSource::Random { seed: 0, stream: 0 }
    } else {
        DepthSource::Midpoint
    };
    let colors: Vec<Vec<[f64; 3]>> = queries
        .par_chunks(RENDER_CHUNK)
        .map(|chunk| {
            forward_chunk(model, chunk, &table, settings, source, false)
                .map(|(out, _)| out.into_iter().map(|o| o.fine).collect())
        })
        .collect::<Result<_>>()?;
    let data = colors
        .into_iter()
        .flatten()
        .flat_map(|c| c.map(|v| v.clamp(0.0, 1.0) as f32))
        .collect();
    Frame::from_data(w, h, data)
}

/// Σw + T_end of every field and stage on every ray of a frame, for
/// normalization checks.
pub fn frame_weight_mass<R: Real>(
    model: &Model<R>,
    conditioning: &[R],
    pose: &HeadPose,
    settings: &RenderSettings,
) -> Result<Vec<f64>> {
    let (w, h) = (settings.width, settings.height);
    let intr = Intrinsics {
        focal: model.spec.focal,
    };
    let table = vec![conditioning.to_vec()];
    let mut masses = Vec::new();
    let queries: Vec<RayQuery> = (0..w * h)
        .map(|i| {
            let (origin, direction) = intr.pixel_ray(pose, w, h, i % w, i / w);
            RayQuery {
                origin,
                direction,
                cond: 0,
                index: i as u64,
            }
        })
        .collect();
    for chunk in queries.chunks(RENDER_CHUNK) {
        let (_, tape) = forward_chunk(model, chunk, &table, settings, DepthSource::Midpoint, true)?;
        if let Some(tape) = tape {
            for part in &tape.passes {
                for pass in part {
                    masses.extend(pass.samples.iter().map(|s| s.total_mass()));
                }
            }
        }
    }
    Ok(masses)
}
