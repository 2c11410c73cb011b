mod config;
mod manifest;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nerfcast::field::{digest_hex, Checkpoint, Model};
use nerfcast::gradcheck::{self, Block, GradcheckConfig};
use nerfcast::metrics::{rd_table, RdRow, TradeoffReport};
use nerfcast::protocol::measure_bitrate;
use nerfcast::scene::{generate_dataset, sample_trajectory, Dataset};
use nerfcast::session::{decode_stream, encode_frames, evaluate, simulate, FrameSelection, Simulation};
use nerfcast::trainer::{train_loop, LoopOutputs, Trainer};

use crate::config::Resolved;
use crate::manifest::{file_sha256, Manifest};

#[derive(Parser, Debug)]
#[command(name = "nerfcast", version, about = "Feature-substitution portrait video codec")]
struct Cli {
    /// Worker threads; 0 uses every core. `--threads 1` is bitwise reproducible.
    #[arg(long, global = true, env = "NVC_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key = value configuration file (sections scene., model., train., render.).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Configuration override, e.g. `--set train.batch_rays=256`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct Selection {
    /// Frames to process: `held-out` or `all`.
    #[arg(long, default_value = "held-out")]
    frames: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic expression-driven dataset.
    SceneGen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 500)]
        frames: usize,
        /// Square frame resolution in pixels.
        #[arg(long, default_value_t = 64)]
        res: usize,
        /// Trajectory seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a radiance field on a dataset's training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Conditioning mode: `raw` or `ft`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        embed_width: Option<usize>,
        #[arg(long)]
        no_constraint_code: bool,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode dataset frames into a recorded session stream.
    Encode {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        selection: Selection,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Session frame rate; defaults to the dataset's.
        #[arg(long)]
        fps: Option<f32>,
    },
    /// Decode a recorded session and render it at the chosen resolution.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long, default_value_t = 64)]
        res: usize,
        /// Decode payloads only, without rendering or writing frames.
        #[arg(long)]
        no_render: bool,
    },
    /// Loopback sender and receiver with quality measured against ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        selection: Selection,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Receiver resolution; defaults to the dataset's.
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        fps: Option<f32>,
    },
    /// Rate-distortion sweep over model variants and receiver resolutions.
    RdCurve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        selection: Selection,
        /// `name=checkpoint`; repeatable.
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated receiver resolutions.
        #[arg(long, default_value = "64")]
        res: String,
    },
    /// Codec-free reconstruction quality and seam metric.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        selection: Selection,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        res: Option<usize>,
        /// Exit with status 2 when mean PSNR falls below this.
        #[arg(long)]
        min_psnr: Option<f64>,
        #[arg(long)]
        min_ssim: Option<f64>,
    },
    /// Backprop against central finite differences for every block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = gradcheck::FD_STEP)]
        step: f64,
        /// Restrict to blocks: mlp, attention, embedding, pipeline.
        #[arg(long = "block")]
        blocks: Vec<String>,
        /// Corrupt one analytic gradient of this block (negative control).
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Done,
    VerificationFailed(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let threads = rayon::current_num_threads();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let name = command_name(&cli.command);
    let common = common_of(&cli.command).clone();
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let mut cfg = Resolved::load(common.config.as_deref(), &common.overrides)?;
    let mut manifest = Manifest::new(name, &args, threads);
    let outcome = match cli.command {
        Command::SceneGen { frames, res, seed, .. } => scene_gen(&mut cfg, &mut manifest, &common.out, frames, res, seed)?,
        Command::Train {
            data,
            iters,
            seed,
            mode,
            embed_width,
            no_constraint_code,
            resume,
            ..
        } => {
            if let Some(n) = iters {
                cfg.train.iterations = n;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(m) = mode {
                cfg.set_model("mode", &m)?;
            }
            if let Some(w) = embed_width {
                cfg.set_model("embed_width", &w.to_string())?;
            }
            if no_constraint_code {
                cfg.set_model("constraint_code", "false")?;
            }
            train(&mut cfg, &mut manifest, &common.out, &data, resume.as_deref())?
        }
        Command::Encode {
            selection,
            checkpoint,
            data,
            fps,
            ..
        } => encode(&mut manifest, &common.out, &checkpoint, &data, &selection, fps)?,
        Command::Decode {
            checkpoint,
            stream,
            res,
            no_render,
            ..
        } => decode(&cfg, &mut manifest, &common.out, &checkpoint, &stream, res, no_render)?,
        Command::Simulate {
            selection,
            checkpoint,
            data,
            res,
            fps,
            ..
        } => simulate_cmd(&cfg, &mut manifest, &common.out, &checkpoint, &data, &selection, res, fps)?,
        Command::RdCurve {
            selection,
            variants,
            data,
            res,
            ..
        } => rd_curve(&cfg, &mut manifest, &common.out, &variants, &data, &selection, &res)?,
        Command::Eval {
            selection,
            checkpoint,
            data,
            res,
            min_psnr,
            min_ssim,
            ..
        } => eval(&cfg, &mut manifest, &common.out, &checkpoint, &data, &selection, res, min_psnr, min_ssim)?,
        Command::Gradcheck {
            seeds,
            first_seed,
            step,
            blocks,
            inject_fault,
            ..
        } => gradcheck_cmd(&mut manifest, &common.out, seeds, first_seed, step, &blocks, inject_fault.as_deref())?,
    };
    cfg.write_sections(sections_of(name), manifest.kv_mut());
    let path = manifest.write(&common.out, name)?;
    eprintln!("manifest: {}", path.display());
    Ok(outcome)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::SceneGen { .. } => "scene-gen",
        Command::Train { .. } => "train",
        Command::Encode { .. } => "encode",
        Command::Decode { .. } => "decode",
        Command::Simulate { .. } => "simulate",
        Command::RdCurve { .. } => "rd-curve",
        Command::Eval { .. } => "eval",
        Command::Gradcheck { .. } => "gradcheck",
    }
}

/// Configuration sections that influence each command's outputs.
fn sections_of(command: &str) -> &'static [&'static str] {
    match command {
        "scene-gen" => &["scene"],
        "train" => &["model", "train"],
        "decode" | "simulate" | "rd-curve" => &["render"],
        "eval" => &["scene", "render"],
        _ => &[],
    }
}

fn common_of(c: &Command) -> &Common {
    match c {
        Command::SceneGen { common, .. }
        | Command::Train { common, .. }
        | Command::Encode { common, .. }
        | Command::Decode { common, .. }
        | Command::Simulate { common, .. }
        | Command::RdCurve { common, .. }
        | Command::Eval { common, .. }
        | Command::Gradcheck { common, .. } => common,
    }
}

fn load_dataset(path: &Path, manifest: &mut Manifest) -> Result<Dataset> {
    manifest.input("dataset", path);
    Dataset::read(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path, manifest: &mut Manifest, name: &str) -> Result<Model<f32>> {
    manifest.input(name, path);
    let ck = Checkpoint::read(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    manifest.set(&format!("input.{name}.model_digest"), digest_hex(&ck.digest()?));
    Ok(ck.model)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>, manifest: &mut Manifest, name: &str) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(name, path);
    Ok(())
}

fn write_frames<'a>(dir: &Path, frames: impl IntoIterator<Item = (u32, &'a nerfcast::Frame)>) -> Result<usize> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut n = 0;
    for (index, frame) in frames {
        let path = dir.join(format!("frame_{index:05}.ppm"));
        fs::write(&path, frame.to_ppm()).with_context(|| format!("writing {}", path.display()))?;
        n += 1;
    }
    Ok(n)
}

fn scene_gen(cfg: &mut Resolved, manifest: &mut Manifest, out: &Path, frames: usize, res: usize, seed: u64) -> Result<Outcome> {
    cfg.scene.validate()?;
    let trajectory = sample_trajectory(&cfg.scene, frames, seed)?;
    let ds = generate_dataset(&cfg.scene, &trajectory, res, res)?;
    let path = out.join("dataset.nvds");
    ds.write(&path)?;
    manifest.output("dataset", &path);
    manifest.set("run.seed", seed);
    manifest.set("scene_gen.frames", frames);
    manifest.set("scene_gen.res", res);
    println!(
        "dataset {}: {} frames {}x{} expr_dim {} fps {} held-out {} sha256 {}",
        path.display(),
        ds.len(),
        ds.width,
        ds.height,
        ds.expr_dim,
        ds.fps,
        ds.held_out_count(),
        file_sha256(&path)?
    );
    Ok(Outcome::Done)
}

fn train(cfg: &mut Resolved, manifest: &mut Manifest, out: &Path, data: &Path, resume: Option<&Path>) -> Result<Outcome> {
    let ds = load_dataset(data, manifest)?;
    if !cfg.model_key_given("expr_dim") {
        cfg.model.expr_dim = ds.expr_dim;
    }
    let mut trainer = match resume {
        Some(p) => {
            manifest.input("resume", p);
            let ck = Checkpoint::read(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            cfg.model = ck.model.spec.clone();
            Trainer::from_checkpoint(ck, cfg.train.clone())?
        }
        None => {
            let model = Model::<f32>::init(cfg.model.clone(), cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    if trainer.model.spec.expr_dim != ds.expr_dim {
        bail!(
            "model expects {} expression components, dataset has {}",
            trainer.model.spec.expr_dim,
            ds.expr_dim
        );
    }
    let outputs = LoopOutputs {
        checkpoint: Some(out.join("model.nvck")),
        loss_csv: Some(out.join("loss.csv")),
    };
    manifest.set("run.seed", cfg.train.seed);
    let start = std::time::Instant::now();
    let rows = train_loop(&mut trainer, &ds, &outputs, |row| {
        let probe = row.psnr_probe.map(|p| format!(" probe {p:.2} dB")).unwrap_or_default();
        eprintln!(
            "iter {} loss {:.6} (coarse {:.6} fine {:.6}){probe} [{:.0}s]",
            row.report.iteration + 1,
            row.report.total,
            row.report.coarse,
            row.report.fine,
            start.elapsed().as_secs_f64()
        );
    })?;
    for (name, p) in [("checkpoint", &outputs.checkpoint), ("loss_csv", &outputs.loss_csv)] {
        if let Some(p) = p {
            manifest.output(name, p);
        }
    }
    let digest = nerfcast::field::model_digest(&trainer.model)?;
    println!(
        "trained {} iterations ({} logged) model {} digest {}",
        trainer.iteration,
        rows.len(),
        out.join("model.nvck").display(),
        digest_hex(&digest)
    );
    Ok(Outcome::Done)
}

fn encode(manifest: &mut Manifest, out: &Path, ckpt: &Path, data: &Path, sel: &Selection, fps: Option<f32>) -> Result<Outcome> {
    let model = load_model(ckpt, manifest, "checkpoint")?;
    let ds = load_dataset(data, manifest)?;
    let selection = FrameSelection::parse(&sel.frames)?;
    let frames = selection.select(&ds)?;
    let fps = fps.unwrap_or(ds.fps);
    let (stream, report) = encode_frames(&model, frames, fps)?;
    let path = out.join("stream.nvrt");
    write_file(&path, &stream, manifest, "stream")?;
    manifest.set("encode.frames", selection.name());
    manifest.set("encode.fps", fps);
    println!(
        "stream {}: {} frames {} bytes payload {:.3} kbps total {:.3} kbps ({:.1} bits/frame)",
        path.display(),
        report.frames,
        stream.len(),
        report.payload_kbps,
        report.total_kbps,
        report.payload_bits_per_frame()
    );
    Ok(Outcome::Done)
}

#[allow(clippy::too_many_arguments)]
fn decode(
    cfg: &Resolved,
    manifest: &mut Manifest,
    out: &Path,
    ckpt: &Path,
    stream_path: &Path,
    res: usize,
    no_render: bool,
) -> Result<Outcome> {
    let model = load_model(ckpt, manifest, "checkpoint")?;
    manifest.input("stream", stream_path);
    let stream = fs::read(stream_path).with_context(|| format!("reading {}", stream_path.display()))?;
    let settings = cfg.render.settings(&model, res, res)?;
    let (frames, report) = decode_stream(&stream, &model, (!no_render).then_some(&settings))?;
    let bitrate = measure_bitrate(&stream, report.header.fps as f64)?;
    if !no_render {
        let dir = out.join("frames");
        write_frames(&dir, frames.iter().map(|f| (f.index, f.frame.as_ref().expect("rendered"))))?;
        manifest.output("frames_dir", &dir);
    }
    let csv = format!(
        "frames,bytes_consumed,payload_kbps,total_kbps,width,height\n{},{},{:.6},{:.6},{},{}\n",
        report.frames,
        report.bytes_consumed,
        bitrate.payload_kbps,
        bitrate.total_kbps,
        if no_render { 0 } else { res },
        if no_render { 0 } else { res }
    );
    write_file(&out.join("decode.csv"), &csv, manifest, "decode_csv")?;
    manifest.set("decode.res", res);
    println!(
        "decoded {} frames, {} bytes consumed, payload {:.3} kbps",
        report.frames, report.bytes_consumed, bitrate.payload_kbps
    );
    Ok(Outcome::Done)
}

fn write_simulation(sim: &Simulation, out: &Path, manifest: &mut Manifest) -> Result<()> {
    write_file(&out.join("stream.nvrt"), &sim.stream, manifest, "stream")?;
    let dir = out.join("frames");
    write_frames(&dir, sim.frames.iter().enumerate().map(|(i, f)| (i as u32, f)))?;
    manifest.output("frames_dir", &dir);
    write_file(&out.join("frames.csv"), sim.frame_csv(), manifest, "frames_csv")?;
    write_file(&out.join("summary.csv"), sim.summary_csv(), manifest, "summary_csv")?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate_cmd(
    cfg: &Resolved,
    manifest: &mut Manifest,
    out: &Path,
    ckpt: &Path,
    data: &Path,
    sel: &Selection,
    res: Option<usize>,
    fps: Option<f32>,
) -> Result<Outcome> {
    let model = load_model(ckpt, manifest, "checkpoint")?;
    let ds = load_dataset(data, manifest)?;
    let selection = FrameSelection::parse(&sel.frames)?;
    let frames = selection.select(&ds)?;
    let res = res.unwrap_or(ds.width);
    let settings = cfg.render.settings(&model, res, res)?;
    let fps = fps.unwrap_or(ds.fps);
    let sim = simulate(&model, frames, fps, &settings)?;
    write_simulation(&sim, out, manifest)?;
    manifest.set("simulate.frames", selection.name());
    manifest.set("simulate.res", res);
    manifest.set("simulate.fps", fps);
    let b = &sim.received.bitrate;
    println!(
        "simulated {} frames at {res}x{res}: payload {:.3} kbps total {:.3} kbps, PSNR {:.3} dB SSIM {:.4} L1 {:.5}",
        b.frames, b.payload_kbps, b.total_kbps, sim.quality.psnr, sim.quality.ssim, sim.quality.l1
    );
    Ok(Outcome::Done)
}

fn rd_curve(
    cfg: &Resolved,
    manifest: &mut Manifest,
    out: &Path,
    variants: &[String],
    data: &Path,
    sel: &Selection,
    res: &str,
) -> Result<Outcome> {
    let ds = load_dataset(data, manifest)?;
    let selection = FrameSelection::parse(&sel.frames)?;
    let frames = selection.select(&ds)?;
    let resolutions: Vec<usize> = nerfcast::config::parse_list("res", res)?;
    if resolutions.is_empty() {
        bail!("--res needs at least one resolution");
    }
    let mut rows = Vec::new();
    for v in variants {
        let (name, path) = v
            .split_once('=')
            .ok_or_else(|| anyhow!("variant `{v}` is not name=checkpoint"))?;
        let path = Path::new(path);
        if !path.is_file() {
            bail!("variant `{name}`: checkpoint {} is missing", path.display());
        }
        let model = load_model(path, manifest, &format!("variant.{name}"))?;
        for &r in &resolutions {
            let settings = cfg.render.settings(&model, r, r)?;
            let sim = simulate(&model, frames, ds.fps, &settings)?;
            let kbps = sim.received.bitrate.payload_kbps;
            eprintln!("{name} {r}x{r}: {kbps:.3} kbps PSNR {:.3} SSIM {:.4}", sim.quality.psnr, sim.quality.ssim);
            rows.push(RdRow {
                variant: name.to_string(),
                setting: format!("{r}x{r}"),
                tradeoff: TradeoffReport::new(&sim.quality, kbps)?,
                quality: sim.quality,
            });
        }
    }
    let csv = rd_table(&rows);
    write_file(&out.join("rd.csv"), &csv, manifest, "rd_csv")?;
    write_file(&out.join("rd.svg"), plot::rd_svg(&rows), manifest, "rd_svg")?;
    manifest.set("rd_curve.res", res);
    manifest.set("rd_curve.frames", selection.name());
    print!("{csv}");
    Ok(Outcome::Done)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    cfg: &Resolved,
    manifest: &mut Manifest,
    out: &Path,
    ckpt: &Path,
    data: &Path,
    sel: &Selection,
    res: Option<usize>,
    min_psnr: Option<f64>,
    min_ssim: Option<f64>,
) -> Result<Outcome> {
    let model = load_model(ckpt, manifest, "checkpoint")?;
    let ds = load_dataset(data, manifest)?;
    let selection = FrameSelection::parse(&sel.frames)?;
    let frames = selection.select(&ds)?;
    let res = res.unwrap_or(ds.width);
    let settings = cfg.render.settings(&model, res, res)?;
    let band = cfg.scene.seam_band(ds.height);
    let (e, _) = evaluate(&model, frames, &settings, band.clone())?;
    let csv = format!(
        "frames,psnr_db,ssim,l1,seam,seam_rows\n{},{:.6},{:.6},{:.6},{:.6},{}-{}\n",
        e.quality.frames, e.quality.psnr, e.quality.ssim, e.quality.l1, e.seam, band.start, band.end
    );
    write_file(&out.join("eval.csv"), &csv, manifest, "eval_csv")?;
    manifest.set("eval.frames", selection.name());
    manifest.set("eval.res", res);
    println!(
        "eval {} frames: PSNR {:.3} dB SSIM {:.4} L1 {:.5} seam {:.5}",
        e.quality.frames, e.quality.psnr, e.quality.ssim, e.quality.l1, e.seam
    );
    let mut failures = Vec::new();
    if let Some(t) = min_psnr.filter(|t| e.quality.psnr < *t) {
        failures.push(format!("PSNR {:.3} < {t}", e.quality.psnr));
    }
    if let Some(t) = min_ssim.filter(|t| e.quality.ssim < *t) {
        failures.push(format!("SSIM {:.4} < {t}", e.quality.ssim));
    }
    Ok(if failures.is_empty() {
        Outcome::Done
    } else {
        Outcome::VerificationFailed(failures.join("; "))
    })
}

fn gradcheck_cmd(
    manifest: &mut Manifest,
    out: &Path,
    seeds: u64,
    first_seed: u64,
    step: f64,
    blocks: &[String],
    fault: Option<&str>,
) -> Result<Outcome> {
    let config = GradcheckConfig {
        seeds,
        first_seed,
        step,
        blocks: if blocks.is_empty() {
            Block::ALL.to_vec()
        } else {
            blocks.iter().map(|b| Block::parse(b)).collect::<nerfcast::Result<_>>()?
        },
        fault: fault.map(Block::parse).transpose()?,
    };
    let reports = gradcheck::run(&config)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format!("{r}\n"));
    }
    print!("{text}");
    write_file(&out.join("gradcheck.txt"), &text, manifest, "report")?;
    manifest.set("run.seed", first_seed);
    manifest.set("gradcheck.seeds", seeds);
    manifest.set("gradcheck.step", step);
    if let Some(f) = fault {
        manifest.set("gradcheck.inject_fault", f);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.block.name()).collect();
    Ok(if failed.is_empty() {
        Outcome::Done
    } else {
        Outcome::VerificationFailed(format!("gradient check failed for {}", failed.join(", ")))
    })
}
