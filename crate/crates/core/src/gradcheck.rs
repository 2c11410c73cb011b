//! Backprop vs central finite differences for every trainable block, in f64.
//!
//! Components whose ±h perturbation flips a ReLU are skipped and counted:
//! the difference quotient straddles a kink there and is not a derivative.

use std::fmt;

use crate::camera::{HeadPose, Intrinsics};
use crate::embedding::{EmbeddingMode, EncoderParams};
use crate::error::{Error, Result};
use crate::field::{forward_chunk, backward_chunk, DepthSource, Model, ModelSpec, RayDepths, RayQuery, RenderSettings};
use crate::numerics::{Activation, AttentionParams, MlpParams, Parameters, Rng, Tensor2};

pub const FD_STEP: f64 = 1e-4;
pub const BLOCK_TOLERANCE: f64 = 1e-5;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;
/// Denominator floor so vanishing components compare absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const DEFAULT_SEEDS: u64 = 10;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Mlp,
    Attention,
    Embedding,
    Pipeline,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Mlp, Block::Attention, Block::Embedding, Block::Pipeline];

    pub fn name(self) -> &'static str {
        match self {
            Block::Mlp => "mlp",
            Block::Attention => "attention",
            Block::Embedding => "embedding",
            Block::Pipeline => "pipeline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Block::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck block `{s}`")))
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Block::Pipeline => PIPELINE_TOLERANCE,
            _ => BLOCK_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub first_seed: u64,
    pub step: f64,
    pub blocks: Vec<Block>,
    /// Corrupts one analytic component of this block (negative control).
    pub fault: Option<Block>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: DEFAULT_SEEDS,
            first_seed: 0,
            step: FD_STEP,
            blocks: Block::ALL.to_vec(),
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub seed: u64,
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: Block,
    pub tolerance: f64,
    pub seeds: u64,
    pub checked: usize,
    pub kinks: usize,
    /// Largest relative error seen, with its location.
    pub worst: Option<Mismatch>,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst.as_ref().is_none_or(|w| w.relative_error <= self.tolerance)
    }
}

impl fmt::Display for BlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {} checked={} kinks={} seeds={} tol={:.0e}",
            self.block.name(),
            if self.passed() { "PASS" } else { "FAIL" },
            self.checked,
            self.kinks,
            self.seeds,
            self.tolerance
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " max_rel={:.3e} at seed {} {} (analytic {:.9e}, numeric {:.9e})",
                w.relative_error, w.seed, w.location, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// A scalar function of a flat vector together with its claimed gradient.
struct Problem<'a> {
    /// (name, length) segments covering the flat vector in order.
    segments: Vec<(String, usize)>,
    point: Vec<f64>,
    analytic: Vec<f64>,
    /// Value and ReLU signature at a point.
    eval: Box<dyn Fn(&[f64]) -> Result<(f64, Vec<bool>)> + 'a>,
}

impl Problem<'_> {
    fn location(&self, mut index: usize) -> String {
        for (name, len) in &self.segments {
            if index < *len {
                return format!("{name}[{index}]");
            }
            index -= len;
        }
        format!("#{index}")
    }
}

fn segments_of<P: Parameters<f64>>(params: &P, prefix: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    params.visit(prefix, &mut |name, s| out.push((name.to_string(), s.len())));
    out
}

fn inject_fault(analytic: &mut [f64]) {
    let k = analytic.len() / 2;
    analytic[k] = analytic[k] * 1.01 + 1e-3;
}

fn check(problem: &Problem<'_>, seed: u64, step: f64, report: &mut BlockReport) -> Result<()> {
    let n = problem.point.len();
    if problem.analytic.len() != n {
        return Err(Error::Usage("analytic gradient length differs from the point".into()));
    }
    let (_, base_sig) = (problem.eval)(&problem.point)?;
    let mut x = problem.point.clone();
    for i in 0..n {
        let x0 = x[i];
        x[i] = x0 + step;
        let (fp, sp) = (problem.eval)(&x)?;
        x[i] = x0 - step;
        let (fm, sm) = (problem.eval)(&x)?;
        x[i] = x0;
        if sp != base_sig || sm != base_sig {
            report.kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let analytic = problem.analytic[i];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.as_ref().is_none_or(|w| err > w.relative_error) {
            report.worst = Some(Mismatch {
                seed,
                location: problem.location(i),
                analytic,
                numeric,
                relative_error: err,
            });
        }
    }
    Ok(())
}

fn random_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-scale, scale)).collect()
}

fn weighted_sum(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

fn mlp_problem(seed: u64) -> Result<Problem<'static>> {
    let mut rng = Rng::stream(seed, 0x6d6c70);
    let widths = [6, 10, 8, 3];
    let net = MlpParams::<f64>::init(&widths, Activation::Relu, Activation::Sigmoid, &mut rng);
    let rows = 5;
    let input = Tensor2::from_vec(rows, widths[0], random_vec(&mut rng, rows * widths[0], 1.0))?;
    let proj = random_vec(&mut rng, rows * widths[3], 1.0);
    let (_, tape) = net.forward_batch(input.clone())?;
    let mut grads = net.zeros_like();
    let back = net.backward(&tape, &Tensor2::from_vec(rows, widths[3], proj.clone())?, &mut grads, true)?;
    let mut analytic = grads.flatten();
    analytic.extend_from_slice(back.input_grad.expect("requested").data());
    let mut point = net.flatten();
    point.extend_from_slice(input.data());
    let mut segments = segments_of(&net, "mlp");
    segments.push(("input".into(), input.data().len()));
    let split = net.parameter_count();
    Ok(Problem {
        segments,
        point,
        analytic,
        eval: Box::new(move |x: &[f64]| {
            let mut n = net.clone();
            n.load_flat(&x[..split]);
            let (out, tape) = n.forward_batch(Tensor2::from_vec(rows, widths[0], x[split..].to_vec())?)?;
            Ok((weighted_sum(&proj, out.data()), tape.relu_signature(&n)))
        }),
    })
}

fn attention_problem(seed: u64) -> Result<Problem<'static>> {
    let mut rng = Rng::stream(seed, 0x617474);
    let (width, tokens) = (8, 6);
    let att = AttentionParams::<f64>::init(width, &mut rng);
    let input = Tensor2::from_vec(tokens, width, random_vec(&mut rng, tokens * width, 1.0))?;
    let proj = random_vec(&mut rng, tokens * width, 1.0);
    let (_, tape) = att.forward(&input)?;
    let mut grads = att.zeros_like();
    let d_in = att.backward(&tape, &Tensor2::from_vec(tokens, width, proj.clone())?, &mut grads)?;
    let mut analytic = grads.flatten();
    analytic.extend_from_slice(d_in.data());
    let mut point = att.flatten();
    point.extend_from_slice(input.data());
    let mut segments = segments_of(&att, "attention");
    segments.push(("tokens".into(), input.data().len()));
    let split = att.parameter_count();
    Ok(Problem {
        segments,
        point,
        analytic,
        eval: Box::new(move |x: &[f64]| {
            let mut a = att.clone();
            a.load_flat(&x[..split]);
            let (out, _) = a.forward(&Tensor2::from_vec(tokens, width, x[split..].to_vec())?)?;
            Ok((weighted_sum(&proj, out.data()), Vec::new()))
        }),
    })
}

fn embedding_problem(seed: u64) -> Result<Problem<'static>> {
    let mut rng = Rng::stream(seed, 0x656d62);
    let (input_dim, output_dim) = (7, 5);
    let enc = EncoderParams::<f64>::init(input_dim, output_dim, &mut rng);
    let delta = random_vec(&mut rng, input_dim, 1.0);
    let proj = random_vec(&mut rng, output_dim, 1.0);
    let (_, tape) = enc.embed(&delta)?;
    let mut grads = enc.zeros_like();
    let d_delta = enc.backward(&tape, &proj, &mut grads)?;
    let mut analytic = grads.flatten();
    analytic.extend_from_slice(&d_delta);
    let mut point = enc.flatten();
    point.extend_from_slice(&delta);
    let mut segments = segments_of(&enc, "encoder");
    segments.push(("delta".into(), input_dim));
    let split = enc.parameter_count();
    Ok(Problem {
        segments,
        point,
        analytic,
        eval: Box::new(move |x: &[f64]| {
            let mut e = enc.clone();
            e.load_flat(&x[..split]);
            let (out, _) = e.embed(&x[split..])?;
            Ok((weighted_sum(&proj, &out), Vec::new()))
        }),
    })
}

/// Mean squared photometric loss of coarse plus fine colors on a handful of
/// rays, with sample depths frozen after the first forward pass.
struct Microbench {
    model: Model<f64>,
    queries: Vec<RayQuery>,
    targets: Vec<[f64; 3]>,
    settings: RenderSettings,
    expr_dim: usize,
}

impl Microbench {
    fn new(seed: u64) -> Result<Self> {
        let mut rng = Rng::stream(seed, 0x706970);
        let spec = ModelSpec {
            expr_dim: 5,
            mode: EmbeddingMode::FineTuned,
            embed_width: 4,
            head_layers: 2,
            head_width: 12,
            torso_layers: 1,
            torso_width: 8,
            density_shift: 0.0,
            ..ModelSpec::default()
        };
        let mut model = Model::init(spec, seed)?;
        model.code = random_vec(&mut rng, model.code.len(), 0.5);
        let pose = HeadPose::orbit(rng.uniform_range(-0.3, 0.3), rng.uniform_range(-0.1, 0.1), 1.4);
        let intr = Intrinsics {
            focal: model.spec.focal,
        };
        let queries = (0..4)
            .map(|i| {
                let (origin, direction) =
                    intr.ray(&pose, 8, 8, rng.uniform_range(2.5, 5.5), rng.uniform_range(2.5, 5.5));
                RayQuery {
                    origin,
                    direction,
                    cond: i % 2,
                    index: i as u64,
                }
            })
            .collect();
        let targets = (0..4)
            .map(|_| [rng.uniform(), rng.uniform(), rng.uniform()])
            .collect();
        let settings = RenderSettings {
            coarse_samples: 6,
            fine_samples: 5,
            jitter: true,
            background: model.spec.background,
            width: 8,
            height: 8,
        };
        Ok(Microbench {
            expr_dim: model.spec.expr_dim,
            model,
            queries,
            targets,
            settings,
        })
    }

    fn conditioning(model: &Model<f64>, deltas: &[f64], expr_dim: usize) -> Result<Vec<Vec<f64>>> {
        deltas.chunks(expr_dim).map(|d| model.conditioning(d)).collect()
    }

    fn loss(&self, model: &Model<f64>, deltas: &[f64], source: DepthSource<'_>) -> Result<(f64, Vec<RayDepths>, Vec<bool>)> {
        let conds = Self::conditioning(model, deltas, self.expr_dim)?;
        let (out, tape) = forward_chunk(model, &self.queries, &conds, &self.settings, source, true)?;
        let scale = 1.0 / (3 * self.queries.len()) as f64;
        let mut loss = 0.0;
        for (o, t) in out.iter().zip(&self.targets) {
            for k in 0..3 {
                loss += scale * ((o.coarse[k] - t[k]).powi(2) + (o.fine[k] - t[k]).powi(2));
            }
        }
        let sig = tape.map(|t| t.relu_signature(model)).unwrap_or_default();
        Ok((loss, out.into_iter().map(|o| o.depths).collect(), sig))
    }

    fn problem(self, seed: u64) -> Result<Problem<'static>> {
        let mut rng = Rng::stream(seed, 0x64656c);
        let deltas = random_vec(&mut rng, 2 * self.expr_dim, 1.0);
        let model = &self.model;
        let conds = Self::conditioning(model, &deltas, self.expr_dim)?;
        let source = DepthSource::Random { seed, stream: 1 };
        let (out, tape) = forward_chunk(model, &self.queries, &conds, &self.settings, source, true)?;
        let tape = tape.ok_or_else(|| Error::Input("microbench rays all missed the bound".into()))?;
        let scale = 2.0 / (3 * self.queries.len()) as f64;
        let color_grads: Vec<[[f64; 3]; 2]> = out
            .iter()
            .zip(&self.targets)
            .map(|(o, t)| {
                let g = |c: [f64; 3]| [scale * (c[0] - t[0]), scale * (c[1] - t[1]), scale * (c[2] - t[2])];
                [g(o.coarse), g(o.fine)]
            })
            .collect();
        let mut grads = model.zeros_like();
        let mut cond_grads = vec![vec![0.0; model.spec.conditioning_width()]; conds.len()];
        backward_chunk(model, &self.queries, &tape, &color_grads, &mut grads, &mut cond_grads)?;
        let encoder = model.encoder.as_ref().expect("fine-tuned microbench");
        let mut d_deltas = Vec::with_capacity(deltas.len());
        for (d, g) in deltas.chunks(self.expr_dim).zip(&cond_grads) {
            let (_, etape) = encoder.embed(d)?;
            let enc_grads = grads.encoder.as_mut().expect("encoder gradients");
            d_deltas.extend(encoder.backward(&etape, g, enc_grads)?);
        }
        let depths: Vec<RayDepths> = out.into_iter().map(|o| o.depths).collect();

        let mut analytic = grads.flatten();
        analytic.extend_from_slice(&d_deltas);
        let mut point = model.flatten();
        point.extend_from_slice(&deltas);
        let mut segments = segments_of(model, "");
        segments.push(("delta".into(), deltas.len()));
        let split = model.parameter_count();
        Ok(Problem {
            segments,
            point,
            analytic,
            eval: Box::new(move |x: &[f64]| {
                let mut m = self.model.clone();
                m.load_flat(&x[..split]);
                let (loss, _, sig) = self.loss(&m, &x[split..], DepthSource::Fixed(&depths))?;
                Ok((loss, sig))
            }),
        })
    }
}

fn build(block: Block, seed: u64) -> Result<Problem<'static>> {
    match block {
        Block::Mlp => mlp_problem(seed),
        Block::Attention => attention_problem(seed),
        Block::Embedding => embedding_problem(seed),
        Block::Pipeline => Microbench::new(seed)?.problem(seed),
    }
}

pub fn check_block(block: Block, config: &GradcheckConfig) -> Result<BlockReport> {
    if !(config.step > 0.0) || config.seeds == 0 {
        return Err(Error::Config("gradcheck needs a positive step and at least one seed".into()));
    }
    let mut report = BlockReport {
        block,
        tolerance: block.tolerance(),
        seeds: config.seeds,
        checked: 0,
        kinks: 0,
        worst: None,
    };
    for seed in config.first_seed..config.first_seed + config.seeds {
        let mut problem = build(block, seed)?;
        if config.fault == Some(block) {
            inject_fault(&mut problem.analytic);
        }
        check(&problem, seed, config.step, &mut report)?;
    }
    Ok(report)
}

pub fn run(config: &GradcheckConfig) -> Result<Vec<BlockReport>> {
    config.blocks.iter().map(|b| check_block(*b, config)).collect()
}
