//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line on
//! stdout; the test fails if any criterion fails.
//!
//! The three trainings dominate the run time (tens of minutes each on one
//! core). Setting `NVC_ACCEPTANCE_CACHE=<dir>` keeps trained checkpoints
//! there and reuses them on later runs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nerfcast::codec::{decode_bits, decode_bytes, encode_bits, encode_bytes, quantize_f16, PayloadDecoder, PayloadEncoder};
use nerfcast::embedding::EmbeddingMode;
use nerfcast::field::{frame_weight_mass, sample_coarse, volume_render, Checkpoint, Model, ModelSpec, Ray, RenderSettings};
use nerfcast::gradcheck::{self, GradcheckConfig};
use nerfcast::metrics::{psnr, ssim, PSNR_CAP};
use nerfcast::numerics::Rng;
use nerfcast::protocol::measure_bitrate;
use nerfcast::scene::{generate_dataset, sample_trajectory, Dataset, SceneConfig};
use nerfcast::session::{decode_stream, encode_frames, evaluate, match_resolution, simulate};
use nerfcast::trainer::{train_loop, LoopOutputs, TrainConfig, Trainer};
use nerfcast::{Frame, HeadPose};

const FRAMES: usize = 500;
const RES: usize = 64;
const ITERATIONS: u64 = 20_000;
const FT_WIDTH: usize = 30;

// Network and sampling sizes used for every acceptance model.
const COARSE: usize = 16;
const FINE: usize = 32;

fn line(id: u32, pass: bool, detail: impl AsRef<str>) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id:>2} {verdict}: {}", detail.as_ref());
    let _ = out.flush();
    pass
}

fn progress(msg: impl AsRef<str>) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[acceptance] {}", msg.as_ref());
}

fn spec(mode: EmbeddingMode, code: bool, expr_dim: usize) -> ModelSpec {
    ModelSpec {
        expr_dim,
        mode,
        embed_width: FT_WIDTH,
        code_enabled: code,
        head_layers: 4,
        head_width: 64,
        torso_layers: 3,
        torso_width: 64,
        ..ModelSpec::default()
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        iterations: ITERATIONS,
        batch_rays: 256,
        coarse_samples: COARSE,
        fine_samples: FINE,
        log_every: 1000,
        probe_every: 5000,
        ..TrainConfig::default()
    }
}

fn render(model: &Model<f32>, res: usize) -> RenderSettings {
    RenderSettings::for_model(&model.spec, COARSE, FINE, res, res)
}

fn cache_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("NVC_ACCEPTANCE_CACHE")?);
    fs::create_dir_all(&dir).ok()?;
    Some(dir)
}

fn trained(name: &str, spec: ModelSpec, ds: &Dataset) -> Model<f32> {
    let cfg = train_config();
    let cached = cache_dir().map(|d| d.join(format!("{name}-{}.nvck", cfg.iterations)));
    if let Some(p) = cached.as_ref().filter(|p| p.is_file()) {
        let ck = Checkpoint::read(p).expect("cached checkpoint");
        if ck.model.spec == spec && ck.training.as_ref().is_some_and(|t| t.iteration == cfg.iterations) {
            progress(format!("{name}: reusing {}", p.display()));
            return ck.model;
        }
    }
    let start = Instant::now();
    let mut trainer = Trainer::new(Model::init(spec, cfg.seed).unwrap(), cfg).unwrap();
    let outputs = LoopOutputs {
        checkpoint: cached,
        loss_csv: None,
    };
    train_loop(&mut trainer, ds, &outputs, |row| {
        let probe = row.psnr_probe.map(|p| format!(" probe {p:.2} dB")).unwrap_or_default();
        progress(format!(
            "{name}: iter {} loss {:.6}{probe} [{:.0}s]",
            row.report.iteration + 1,
            row.report.total,
            start.elapsed().as_secs_f64()
        ));
    })
    .unwrap();
    trainer.model
}

/// Criterion 1: lossless coding of frame payloads and byte strings.
fn lossless_roundtrip() -> bool {
    let start = Instant::now();
    let mut rng = Rng::seeded(101);
    let mut enc = PayloadEncoder::new(79);
    let mut dec = PayloadDecoder::new(79);
    let mut frames_ok = 0;
    for _ in 0..1000 {
        let feature: Vec<f32> = (0..79).map(|_| (rng.normal() * 2.0) as f32).collect();
        let pose = HeadPose::orbit(rng.uniform_range(-0.6, 0.6), rng.uniform_range(-0.3, 0.3), 1.4);
        let bytes = enc.encode(&feature, &pose).unwrap();
        let out = dec.decode(&bytes).unwrap();
        if out.feature == quantize_f16(&feature).unwrap() && out.pose == quantize_f16(&pose.to_array()).unwrap() {
            frames_ok += 1;
        }
    }
    let mut strings_ok = 0;
    for i in 0..1000 {
        let len = rng.below(2048);
        let skew = i % 3 == 0;
        let data: Vec<u8> = (0..len)
            .map(|_| if skew { (rng.below(4) * 60) as u8 } else { rng.below(256) as u8 })
            .collect();
        if decode_bytes(&encode_bytes(&data), len).ok().as_ref() == Some(&data) {
            strings_ok += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    line(
        1,
        frames_ok == 1000 && strings_ok == 1000 && secs < 10.0,
        format!("{frames_ok}/1000 frames and {strings_ok}/1000 byte strings exact in {secs:.2} s (limit 10 s)"),
    )
}

/// Criterion 2: Bernoulli(0.1) source within 5% of its entropy plus 16 bytes.
fn entropy_efficiency() -> bool {
    let mut rng = Rng::seeded(202);
    let n = 10_000;
    let bits: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.1).collect();
    let p = bits.iter().filter(|b| **b).count() as f64 / n as f64;
    let h = -(p * p.log2() + (1.0 - p) * (1.0 - p).log2());
    let bound = h * n as f64 / 8.0;
    let coded = encode_bits(&bits);
    let exact = decode_bits(&coded, n).ok().as_ref() == Some(&bits);
    let limit = 1.05 * bound + 16.0;
    line(
        2,
        exact && coded.len() as f64 <= limit,
        format!("{} bytes for 10^4 bits at empirical p={p:.4}; Shannon bound {bound:.1} B, limit {limit:.1} B", coded.len()),
    )
}

/// Criterion 3: analytic gradients against central differences.
fn gradients() -> bool {
    let reports = gradcheck::run(&GradcheckConfig::default()).unwrap();
    let detail: Vec<String> = reports
        .iter()
        .map(|r| {
            let worst = r.worst.as_ref().map_or(0.0, |m| m.relative_error);
            format!("{} max_rel={worst:.2e}/tol={:.0e}", r.block.name(), r.tolerance)
        })
        .collect();
    line(
        3,
        reports.iter().all(|r| r.passed()),
        format!("{} seeds, h={:e}: {}", gradcheck::DEFAULT_SEEDS, gradcheck::FD_STEP, detail.join(", ")),
    )
}

fn homogeneous_error(samples: usize, sigma: f64) -> f64 {
    let (near, far) = (0.5, 2.0);
    let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], near, far).unwrap();
    let t = sample_coarse(&ray, samples, None);
    let (_, s) = volume_render(&t, &vec![[1.0; 3]; samples], &vec![sigma; samples], far, [0.0; 3]).unwrap();
    (s.weights.iter().sum::<f64>() - (1.0 - (-sigma * (far - near)).exp())).abs()
}

/// Criterion 4: quadrature accuracy, convergence order and weight normalization.
fn quadrature(model: &Model<f32>, ds: &Dataset) -> bool {
    let sigmas = [0.3, 1.0, 3.0, 10.0];
    let worst256 = sigmas.iter().map(|s| homogeneous_error(256, *s)).fold(0.0, f64::max);
    let ratios: Vec<f64> = sigmas
        .iter()
        .flat_map(|s| [64, 128, 256].map(|n| homogeneous_error(n, *s) / homogeneous_error(2 * n, *s)))
        .collect();
    let (rmin, rmax) = ratios.iter().fold((f64::MAX, f64::MIN), |(a, b), r| (a.min(*r), b.max(*r)));
    let f = &ds.held_out()[0];
    let cond = model.conditioning(f.feature.as_slice()).unwrap();
    let masses = frame_weight_mass(model, &cond, &f.pose, &render(model, RES)).unwrap();
    let mass_err = masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    line(
        4,
        worst256 <= 1e-3 && rmin >= 1.5 && rmax <= 2.5 && mass_err <= 1e-5,
        format!(
            "max error at 256 samples {worst256:.2e} (<=1e-3); doubling ratios in [{rmin:.3}, {rmax:.3}] (within [1.5, 2.5]); \
             max |sum w + T_end - 1| {mass_err:.1e} over {} ray composites (<=1e-5)",
            masses.len()
        ),
    )
}

fn brute_psnr(a: &Frame, b: &Frame) -> f64 {
    let sse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    let mse = sse / a.data().len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

fn brute_ssim(a: &Frame, b: &Frame) -> f64 {
    let win = 11;
    let mut kernel = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            kernel[i * win + j] = (-(dx * dx + dy * dy) / 4.5).exp();
        }
    }
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (c1, c2) = (1e-4, 9e-4);
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    let mut n = 0.0;
    for ch in 0..3 {
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let mut m = [0.0f64; 5];
                for i in 0..win {
                    for j in 0..win {
                        let k = kernel[i * win + j];
                        let p = a.pixel(x0 + j, y0 + i)[ch] as f64;
                        let q = b.pixel(x0 + j, y0 + i)[ch] as f64;
                        m[0] += k * p;
                        m[1] += k * q;
                        m[2] += k * p * p;
                        m[3] += k * q * q;
                        m[4] += k * p * q;
                    }
                }
                let (vx, vy, cov) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
                total += (2.0 * m[0] * m[1] + c1) * (2.0 * cov + c2) / ((m[0] * m[0] + m[1] * m[1] + c1) * (vx + vy + c2));
                n += 1.0;
            }
        }
    }
    total / n
}

/// Criterion 9: metric implementations against direct evaluation.
fn metric_oracles(renders: &[Frame], ds: &Dataset) -> bool {
    let pairs: Vec<(&Frame, &Frame)> = renders.iter().zip(ds.held_out().iter().map(|f| &f.image)).take(50).collect();
    let mut worst_psnr = 0.0f64;
    let mut worst_ssim = 0.0f64;
    for (a, b) in &pairs {
        worst_psnr = worst_psnr.max((psnr(a, b).unwrap() - brute_psnr(a, b)).abs());
        worst_ssim = worst_ssim.max((ssim(a, b).unwrap() - brute_ssim(a, b)).abs());
    }
    let a = &ds.held_out()[0].image;
    let self_ssim = ssim(a, a).unwrap();
    let self_psnr = psnr(a, a).unwrap();
    line(
        9,
        pairs.len() == 50 && worst_psnr <= 1e-5 && worst_ssim <= 1e-5 && (self_ssim - 1.0).abs() <= 1e-12 && self_psnr == PSNR_CAP,
        format!(
            "{} pairs: max |dPSNR| {worst_psnr:.1e}, max |dSSIM| {worst_ssim:.1e} (<=1e-5); SSIM(a,a)={self_ssim}; PSNR(a,a)={self_psnr}",
            pairs.len()
        ),
    )
}

fn files_equal(a: &Path, b: &Path) -> Result<(), String> {
    if a.is_dir() {
        let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        let other = fs::read_dir(b).unwrap().count();
        if names.len() != other {
            return Err(format!("{} has {} entries, {} has {other}", a.display(), names.len(), b.display()));
        }
        return names.iter().try_for_each(|n| files_equal(&a.join(n), &b.join(n)));
    }
    if fs::read(a).ok() == fs::read(b).ok() {
        Ok(())
    } else {
        Err(format!("{} differs", a.file_name().unwrap().to_string_lossy()))
    }
}

/// Criterion 10: two single-threaded simulate runs produce identical artifacts.
fn reproducible_simulation(model: &Model<f32>, ds: &Dataset) -> bool {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.nvck");
    Checkpoint::new(model.clone()).write(&ckpt).unwrap();
    let data = dir.path().join("dataset.nvds");
    ds.write(&data).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_nerfcast"))
            .args(["simulate", "--threads", "1", "--checkpoint"])
            .arg(&ckpt)
            .arg("--data")
            .arg(&data)
            .args(["--set", &format!("render.coarse_samples={COARSE}")])
            .args(["--set", &format!("render.fine_samples={FINE}")])
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let compared = ["stream.nvrt", "frames", "frames.csv", "summary.csv"];
    let result = compared.iter().try_for_each(|f| files_equal(&a.join(f), &b.join(f)));
    let frames = fs::read_dir(a.join("frames")).map(|d| d.count()).unwrap_or(0);
    line(
        10,
        result.is_ok() && frames == ds.held_out().len(),
        match result {
            Ok(()) => format!("stream, {frames} frames, frames.csv and summary.csv byte-identical across runs"),
            Err(e) => format!("runs differ: {e}"),
        },
    )
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    results.push(lossless_roundtrip());
    results.push(entropy_efficiency());
    results.push(gradients());

    let scene = SceneConfig::default();
    let start = Instant::now();
    let ds = generate_dataset(&scene, &sample_trajectory(&scene, FRAMES, 1).unwrap(), RES, RES).unwrap();
    progress(format!(
        "dataset: {} frames at {RES}x{RES}, {} held out [{:.0}s]",
        ds.len(),
        ds.held_out().len(),
        start.elapsed().as_secs_f64()
    ));
    let raw = trained("raw", spec(EmbeddingMode::Raw, true, ds.expr_dim), &ds);
    let ft = trained("ft", spec(EmbeddingMode::FineTuned, true, ds.expr_dim), &ds);
    let no_code = trained("raw-nocode", spec(EmbeddingMode::Raw, false, ds.expr_dim), &ds);

    results.push(quadrature(&raw, &ds));

    // Criterion 5: direct reconstruction quality of held-out frames.
    let band = scene.seam_band(RES);
    let (raw_eval, raw_renders) = evaluate(&raw, ds.held_out(), &render(&raw, RES), band.clone()).unwrap();
    let q = raw_eval.quality;
    results.push(line(
        5,
        q.psnr >= 28.0 && q.ssim >= 0.90,
        format!(
            "raw model, {} held-out frames at {RES}x{RES} after {ITERATIONS} iterations: PSNR {:.2} dB (>=28), SSIM {:.4} (>=0.90)",
            q.frames, q.psnr, q.ssim
        ),
    ));

    // Criterion 6: payload reduction of the narrow embedding at matched quality.
    let raw_sim = simulate(&raw, ds.held_out(), ds.fps, &render(&raw, RES)).unwrap();
    let ft_sim = simulate(&ft, ds.held_out(), ds.fps, &render(&ft, RES)).unwrap();
    let (raw_bits, ft_bits) = (raw_sim.sent.payload_bits_per_frame(), ft_sim.sent.payload_bits_per_frame());
    let reduction = 1.0 - ft_bits / raw_bits;
    let gap = raw_sim.quality.psnr - ft_sim.quality.psnr;
    results.push(line(
        6,
        reduction >= 0.40 && gap <= 1.5,
        format!(
            "payload {raw_bits:.1} -> {ft_bits:.1} bits/frame ({:.1}% smaller, >=40%); PSNR raw {:.2} dB, ft(width {FT_WIDTH}) {:.2} dB (gap {gap:.2} <= 1.5)",
            100.0 * reduction, raw_sim.quality.psnr, ft_sim.quality.psnr
        ),
    ));

    // Criterion 7: receiver resolution does not touch the bitstream.
    let frames = &ds.held_out()[..4];
    let (stream, _) = encode_frames(&ft, frames, ds.fps).unwrap();
    let measured = measure_bitrate(&stream, ds.fps as f64).unwrap();
    let mut consumed = Vec::new();
    let mut rates = Vec::new();
    let mut renders = Vec::new();
    for res in [64, 128, 256] {
        let (decoded, report) = decode_stream(&stream, &ft, Some(&render(&ft, res))).unwrap();
        consumed.push(report.bytes_consumed);
        rates.push(report.bitrate.payload_kbps);
        renders.push(decoded.into_iter().map(|f| f.frame.unwrap()).collect::<Vec<_>>());
    }
    let mad = renders[0]
        .iter()
        .zip(&renders[1])
        .map(|(lo, hi)| match_resolution(hi, lo).unwrap().mean_abs_diff(lo).unwrap())
        .fold(0.0, f64::max);
    let same_bytes = consumed.iter().all(|c| *c == stream.len() as u64);
    let same_rate = rates.iter().all(|r| *r == measured.payload_kbps);
    results.push(line(
        7,
        same_bytes && same_rate && mad < 0.03,
        format!(
            "bytes consumed at 64/128/256: {consumed:?} (stream {}); payload kbps {rates:?}; max MAD(128 downsampled, 64) {mad:.4} (<0.03)",
            stream.len()
        ),
    ));

    // Criterion 8: the shared code helps the head/torso seam without costing quality.
    let (nc_eval, _) = evaluate(&no_code, ds.held_out(), &render(&no_code, RES), band.clone()).unwrap();
    results.push(line(
        8,
        raw_eval.seam <= nc_eval.seam && raw_eval.quality.psnr >= nc_eval.quality.psnr - 0.2,
        format!(
            "seam rows {band:?}: with code {:.5}, without {:.5}; PSNR with {:.2} dB, without {:.2} dB (>= without - 0.2)",
            raw_eval.seam, nc_eval.seam, raw_eval.quality.psnr, nc_eval.quality.psnr
        ),
    ));

    results.push(metric_oracles(&raw_renders, &ds));
    results.push(reproducible_simulation(&ft, &ds));

    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
