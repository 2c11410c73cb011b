//! Photometric training of the coarse and fine head/torso fields, the
//! constraint code and the optional fine-tuning encoder.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::camera::Intrinsics;
use crate::config::{parse_value, unknown_key, Settings};
use crate::embedding::EmbedTape;
use crate::error::{Error, Result};
use crate::field::{
    backward_chunk, forward_chunk, render_frame, Checkpoint, DepthSource, Model, ModelSpec, RayQuery, RenderSettings,
    TrainingState,
};
use crate::metrics::psnr;
use crate::numerics::{AdamConfig, AdamState, Parameters, Rng};
use crate::scene::Dataset;

/// Rays per gradient chunk. Fixed so the reduction order, and therefore every
/// bit of the update, does not depend on the worker count.
pub const TRAIN_CHUNK: usize = 64;
const BATCH_STREAM: u64 = 0xba7c;
const DEPTH_STREAM: u64 = 0xde97;

pub const LOSS_HEADER: &str = "iter,loss_total,loss_coarse,loss_fine,psnr_probe";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_rays: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last iteration by exponential decay;
    /// equal to `learning_rate` for a constant schedule.
    pub final_learning_rate: f64,
    pub seed: u64,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub probe_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_rays: 1024,
            learning_rate: 5e-4,
            final_learning_rate: 5e-5,
            seed: 1,
            coarse_samples: 32,
            fine_samples: 64,
            checkpoint_every: 5_000,
            log_every: 100,
            probe_every: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_rays == 0 {
            return Err(Error::Config("iterations and rays per batch must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.final_learning_rate >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.coarse_samples < 2 {
            return Err(Error::Config("at least 2 coarse samples are required".into()));
        }
        Ok(())
    }

    /// Learning rate for the 0-based step `iteration`.
    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        if self.learning_rate == 0.0 || self.final_learning_rate == self.learning_rate {
            return self.learning_rate;
        }
        let progress = iteration as f64 / self.iterations.max(1) as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(progress)
    }

    pub fn render_settings(&self, spec: &ModelSpec, width: usize, height: usize) -> RenderSettings {
        RenderSettings::for_model(spec, self.coarse_samples, self.fine_samples, width, height)
    }
}

impl Settings for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "iterations" => self.iterations = parse_value(key, value)?,
            "batch_rays" => self.batch_rays = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "final_learning_rate" => self.final_learning_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "coarse_samples" => self.coarse_samples = parse_value(key, value)?,
            "fine_samples" => self.fine_samples = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            "probe_every" => self.probe_every = parse_value(key, value)?,
            _ => return Err(unknown_key("train", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (k.to_string(), v);
        vec![
            e("iterations", self.iterations.to_string()),
            e("batch_rays", self.batch_rays.to_string()),
            e("learning_rate", self.learning_rate.to_string()),
            e("final_learning_rate", self.final_learning_rate.to_string()),
            e("seed", self.seed.to_string()),
            e("coarse_samples", self.coarse_samples.to_string()),
            e("fine_samples", self.fine_samples.to_string()),
            e("checkpoint_every", self.checkpoint_every.to_string()),
            e("log_every", self.log_every.to_string()),
            e("probe_every", self.probe_every.to_string()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub total: f64,
    pub coarse: f64,
    pub fine: f64,
    pub rays: usize,
}

/// Mean squared RGB error over a batch of pixels.
pub fn photometric_loss(predicted: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::Input(format!(
            "loss needs equal, non-empty pixel counts (got {} and {})",
            predicted.len(),
            target.len()
        )));
    }
    let sum: f64 = predicted
        .iter()
        .zip(target)
        .flat_map(|(p, t)| (0..3).map(move |k| (p[k] - t[k]).powi(2)))
        .sum();
    Ok(sum / (3 * predicted.len()) as f64)
}

/// One training ray: a pixel of a training frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub frame: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rays: Vec<RaySample>,
    /// Global index of the first ray, selecting the depth-jitter substreams.
    pub first_index: u64,
}

/// Uniform draw of pixels over all training frames for step `iteration`.
pub fn sample_batch(dataset: &Dataset, config: &TrainConfig, iteration: u64) -> Result<Batch> {
    let frames = dataset.train_count();
    if frames == 0 {
        return Err(Error::Input("dataset has no training frames".into()));
    }
    let mut rng = Rng::substream(config.seed, BATCH_STREAM, iteration);
    let pixels = dataset.width * dataset.height;
    let rays = (0..config.batch_rays)
        .map(|_| {
            let frame = rng.below(frames);
            let p = rng.below(pixels);
            RaySample {
                frame,
                x: p % dataset.width,
                y: p / dataset.width,
            }
        })
        .collect();
    Ok(Batch {
        rays,
        first_index: iteration * config.batch_rays as u64,
    })
}

/// Optimizer-side state of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    /// Completed steps.
    pub iteration: u64,
}

struct ChunkResult {
    grads: Model<f32>,
    cond_grads: Vec<Vec<f32>>,
    coarse_sse: f64,
    fine_sse: f64,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let adam = AdamState::new(
            &model,
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        Ok(Trainer {
            model,
            adam,
            config,
            iteration: 0,
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut t = Trainer::new(checkpoint.model, config)?;
        if let Some(state) = checkpoint.training {
            if state.seed != t.config.seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, config asks for {}",
                    state.seed, t.config.seed
                )));
            }
            t.iteration = state.iteration;
            t.adam = state.adam;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            training: Some(TrainingState {
                iteration: self.iteration,
                seed: self.config.seed,
                adam: self.adam.clone(),
            }),
        }
    }

    /// Loss and gradients for a batch without touching the parameters.
    pub fn loss_and_gradients(&self, dataset: &Dataset, batch: &Batch) -> Result<(LossReport, Model<f32>)> {
        let model = &self.model;
        // conditioning table over the distinct frames of the batch
        let mut slots = BTreeMap::new();
        for r in &batch.rays {
            let next = slots.len();
            slots.entry(r.frame).or_insert(next);
        }
        let mut frames = vec![0usize; slots.len()];
        for (f, s) in &slots {
            frames[*s] = *f;
        }
        let mut table = Vec::with_capacity(frames.len());
        let mut tapes: Vec<Option<EmbedTape<f32>>> = Vec::with_capacity(frames.len());
        for f in &frames {
            let delta = dataset.frames[*f].feature.as_slice();
            match &model.encoder {
                Some(enc) => {
                    let (c, tape) = enc.embed(delta)?;
                    table.push(c);
                    tapes.push(Some(tape));
                }
                None => {
                    table.push(model.conditioning(delta)?);
                    tapes.push(None);
                }
            }
        }
        let intr = Intrinsics {
            focal: model.spec.focal,
        };
        let (w, h) = (dataset.width, dataset.height);
        let queries: Vec<RayQuery> = batch
            .rays
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let (origin, direction) = intr.pixel_ray(&dataset.frames[r.frame].pose, w, h, r.x, r.y);
                RayQuery {
                    origin,
                    direction,
                    cond: slots[&r.frame],
                    index: batch.first_index + i as u64,
                }
            })
            .collect();
        let targets: Vec<[f64; 3]> = batch
            .rays
            .iter()
            .map(|r| dataset.frames[r.frame].image.pixel(r.x, r.y).map(|v| v as f64))
            .collect();
        let settings = self.config.render_settings(&model.spec, w, h);
        let source = DepthSource::Random {
            seed: self.config.seed,
            stream: DEPTH_STREAM,
        };
        let scale = 2.0 / (3 * queries.len()) as f64;
        let results: Vec<ChunkResult> = queries
            .par_chunks(TRAIN_CHUNK)
            .zip(targets.par_chunks(TRAIN_CHUNK))
            .map(|(qs, ts)| -> Result<ChunkResult> {
                let (out, tape) = forward_chunk(model, qs, &table, &settings, source, true)?;
                let mut coarse_sse = 0.0;
                let mut fine_sse = 0.0;
                let mut color_grads = Vec::with_capacity(qs.len());
                for (o, t) in out.iter().zip(ts) {
                    let mut g = [[0.0; 3]; 2];
                    for k in 0..3 {
                        let dc = o.coarse[k] - t[k];
                        let df = o.fine[k] - t[k];
                        coarse_sse += dc * dc;
                        fine_sse += df * df;
                        g[0][k] = scale * dc;
                        g[1][k] = scale * df;
                    }
                    color_grads.push(g);
                }
                let mut grads = model.zeros_like();
                let mut cond_grads = vec![vec![0.0f32; model.spec.conditioning_width()]; table.len()];
                if let Some(tape) = tape {
                    backward_chunk(model, qs, &tape, &color_grads, &mut grads, &mut cond_grads)?;
                }
                Ok(ChunkResult {
                    grads,
                    cond_grads,
                    coarse_sse,
                    fine_sse,
                })
            })
            .collect::<Result<_>>()?;

        let mut results = results.into_iter();
        let first = results.next().expect("a batch has at least one chunk");
        let mut grads = first.grads;
        let mut cond_grads = first.cond_grads;
        let (mut coarse_sse, mut fine_sse) = (first.coarse_sse, first.fine_sse);
        for r in results {
            add_assign(&mut grads, &r.grads);
            for (a, b) in cond_grads.iter_mut().zip(&r.cond_grads) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            coarse_sse += r.coarse_sse;
            fine_sse += r.fine_sse;
        }
        if let Some(enc) = &model.encoder {
            let enc_grads = grads.encoder.as_mut().expect("gradient buffer mirrors the model");
            for (tape, g) in tapes.iter().zip(&cond_grads) {
                enc.backward(tape.as_ref().expect("fine-tuned frames carry tapes"), g, enc_grads)?;
            }
        }
        if !model.spec.code_enabled {
            grads.code.fill(0.0);
        }
        let n = (3 * queries.len()) as f64;
        let coarse = coarse_sse / n;
        let fine = fine_sse / n;
        let report = LossReport {
            iteration: self.iteration,
            total: coarse + fine,
            coarse,
            fine,
            rays: queries.len(),
        };
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                frames,
            });
        }
        Ok((report, grads))
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, dataset: &Dataset, batch: &Batch) -> Result<LossReport> {
        let (report, grads) = self.loss_and_gradients(dataset, batch)?;
        let lr = self.config.learning_rate_at(self.iteration);
        let frozen_code = (!self.model.spec.code_enabled).then(|| self.model.code.clone());
        self.adam.step_with_lr(&mut self.model, &grads, lr)?;
        if let Some(code) = frozen_code {
            self.model.code = code;
        }
        self.iteration += 1;
        Ok(report)
    }

    /// Draws the batch for the next iteration and steps on it.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<LossReport> {
        let batch = sample_batch(dataset, &self.config, self.iteration)?;
        self.step(dataset, &batch)
    }
}

fn add_assign(acc: &mut Model<f32>, other: &Model<f32>) {
    let mut values = other.flatten().into_iter();
    acc.visit_mut("", &mut |_, s| {
        for v in s.iter_mut() {
            *v += values.next().expect("matching gradient layouts");
        }
    });
}

/// Frame used for the PSNR probe: the first held-out frame, or the last
/// training frame when nothing is held out.
pub fn probe_frame(dataset: &Dataset) -> Option<usize> {
    if dataset.is_empty() {
        None
    } else if dataset.held_out_count() > 0 {
        Some(dataset.train_count())
    } else {
        Some(dataset.len() - 1)
    }
}

pub fn probe_psnr(model: &Model<f32>, dataset: &Dataset, config: &TrainConfig) -> Result<f64> {
    let idx = probe_frame(dataset).ok_or_else(|| Error::Input("empty dataset".into()))?;
    let f = &dataset.frames[idx];
    let cond = model.conditioning(f.feature.as_slice())?;
    let settings = config.render_settings(&model.spec, dataset.width, dataset.height);
    let frame = render_frame(model, &cond, &f.pose, &settings)?;
    psnr(&frame, &f.image)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub report: LossReport,
    pub psnr_probe: Option<f64>,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let p = self.psnr_probe.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.9},{:.9},{:.9},{}",
            self.report.iteration + 1,
            self.report.total,
            self.report.coarse,
            self.report.fine,
            p
        )
    }
}

/// Where a training loop writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct LoopOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

/// Runs the remaining iterations of `trainer`, logging every `log_every`
/// steps (and the last one) and checkpointing every `checkpoint_every` steps
/// (and at the end).
pub fn train_loop(
    trainer: &mut Trainer,
    dataset: &Dataset,
    outputs: &LoopOutputs,
    mut progress: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    let mut csv = match &outputs.loss_csv {
        Some(path) => {
            let resumed = trainer.iteration > 0 && path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(resumed)
                .write(true)
                .truncate(!resumed)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            if !resumed {
                writeln!(f, "{LOSS_HEADER}").map_err(|e| Error::io(path, e))?;
            }
            Some((f, path.clone()))
        }
        None => None,
    };
    let total = trainer.config.iterations;
    let mut rows = Vec::new();
    while trainer.iteration < total {
        let report = trainer.train_step(dataset)?;
        let done = trainer.iteration;
        let last = done == total;
        let probe = last || (trainer.config.probe_every > 0 && done % trainer.config.probe_every == 0);
        let log = last || probe || (trainer.config.log_every > 0 && done % trainer.config.log_every == 0);
        if log {
            let row = LogRow {
                report,
                psnr_probe: if probe {
                    Some(probe_psnr(&trainer.model, dataset, &trainer.config)?)
                } else {
                    None
                },
            };
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{}", row.csv()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            progress(&row);
            rows.push(row);
        }
        let save = last || (trainer.config.checkpoint_every > 0 && done % trainer.config.checkpoint_every == 0);
        if save {
            if let Some(path) = &outputs.checkpoint {
                trainer.checkpoint().write(path)?;
            }
        }
    }
    Ok(rows)
}
